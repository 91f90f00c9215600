//! Losses, the Adam optimizer and the epoch loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, ParamStore, TensorError, Var};
use crate::data::Window;
use crate::model::{IstftModel, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction has {pred} values, target has {target}, counts require {expected}")]
    Shape { pred: usize, target: usize, expected: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("quantile must lie in (0, 1), got {0}")]
    Quantile(f64),
    #[error("loss counts must be positive: {0:?}")]
    Counts(LossCounts),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training windows")]
    NoWindows,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged in epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("writing the loss log: {0}")]
    Log(#[from] std::io::Error),
}

/// Sizes entering the loss normalization: `n_windows` is the number of
/// windows in the batch (`n_omega * n_p_train` for the full training set).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossCounts {
    pub n_windows: usize,
    pub n_tau: usize,
    pub n_outputs: usize,
}

impl LossCounts {
    fn check(&self, pred: &[f64], target: &[f64]) -> Result<(), LossError> {
        if self.n_windows == 0 || self.n_tau == 0 || self.n_outputs == 0 {
            return Err(LossError::Counts(*self));
        }
        let expected = self.n_windows * self.n_tau * self.n_outputs;
        if pred.len() != expected || target.len() != expected {
            return Err(LossError::Shape {
                pred: pred.len(),
                target: target.len(),
                expected,
            });
        }
        if let Some(i) = pred.iter().chain(target).position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite(i % expected));
        }
        Ok(())
    }

    fn denominator(&self) -> f64 {
        (self.n_windows * self.n_tau) as f64
    }
}

/// Sum over windows and future steps of `|y - y~|_1`, divided by
/// `n_windows * n_tau`. Values are window-major, then step, then output.
pub fn loss_mae(pred: &[f64], target: &[f64], counts: LossCounts) -> Result<f64, LossError> {
    counts.check(pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (t - p).abs()).sum();
    Ok(s / counts.denominator())
}

/// As [`loss_mae`] with the Euclidean norm of each step's output vector
/// (the norm itself, not its square).
pub fn loss_mse(pred: &[f64], target: &[f64], counts: LossCounts) -> Result<f64, LossError> {
    counts.check(pred, target)?;
    let s: f64 = pred
        .chunks(counts.n_outputs)
        .zip(target.chunks(counts.n_outputs))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt())
        .sum();
    Ok(s / counts.denominator())
}

/// Pinball loss `q (y - y~)+ + (1 - q)(y~ - y)+` summed over every value
/// and divided by `n_windows * n_tau`, so `quantile_loss(q = 0.5)` is half
/// of [`loss_mae`] for any number of outputs.
pub fn quantile_loss(pred: &[f64], target: &[f64], q: f64, counts: LossCounts) -> Result<f64, LossError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(LossError::Quantile(q));
    }
    counts.check(pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| q * (t - p).max(0.0) + (1.0 - q) * (p - t).max(0.0))
        .sum();
    Ok(s / counts.denominator())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

impl LossKind {
    /// Pure-value loss over a batch.
    pub fn eval(self, pred: &[f64], target: &[f64], counts: LossCounts) -> Result<f64, LossError> {
        match self {
            LossKind::Mae => loss_mae(pred, target, counts),
            LossKind::Mse => loss_mse(pred, target, counts),
        }
    }

    /// Un-normalized loss of one window on the tape: the sum over future
    /// steps of the per-step norm. `pred` and `target` are
    /// `n_tau * n_o` columns.
    pub fn graph_sum(self, g: &mut Graph, pred: Var, target: Var, n_outputs: usize) -> Result<Var, TensorError> {
        let r = g.sub(pred, target)?;
        match self {
            LossKind::Mae => {
                let a = g.abs(r);
                Ok(g.sum(a))
            }
            LossKind::Mse => {
                let n_tau = g.shape(r)[0] / n_outputs;
                let mut steps = Vec::with_capacity(n_tau);
                for i in 0..n_tau {
                    let s = g.slice(r, 0, i * n_outputs, (i + 1) * n_outputs)?;
                    steps.push(g.transpose(s)?);
                }
                let m = g.concat(&steps, 0)?;
                let n = g.row_norm(m);
                Ok(g.sum(n))
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mae" => Ok(LossKind::Mae),
            "mse" => Ok(LossKind::Mse),
            other => Err(format!("unknown loss `{other}` (expected mae or mse)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without improvement of the monitored loss.
    pub patience: Option<usize>,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Mae,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            patience: None,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad(format!(
                "batch size and epochs must be positive (got {}, {})",
                self.batch_size, self.max_epochs
            ));
        }
        if let Some(p) = self.patience {
            if p == 0 || p > self.max_epochs {
                return bad(format!("patience must lie in 1..={}, got {p}", self.max_epochs));
            }
        }
        if !(self.max_grad_norm > 0.0) {
            return bad(format!("max gradient norm must be positive, got {}", self.max_grad_norm));
        }
        Ok(())
    }
}

/// Adam with the standard moment decay rates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (j, w) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Mean absolute error of each output over the training windows.
    pub per_output: Vec<f64>,
    pub seconds: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,seconds";

    pub fn csv_line(&self) -> String {
        let val = self.val_loss.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.epoch, self.train_loss, val, self.seconds)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest monitored loss.
    pub model: IstftModel,
    pub reports: Vec<LossReport>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
}

struct WindowResult {
    loss_sum: f64,
    abs_per_output: Vec<f64>,
    grads: Gradients,
}

fn window_step(model: &IstftModel, w: &Window, kind: LossKind, seed: u64) -> Result<WindowResult, ModelError> {
    let n_o = model.config.n_outputs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = Graph::new();
    let v = model.forward(&mut graph, w, true, &mut rng)?;
    let targets = w.targets();
    let mut abs_per_output = vec![0.0; n_o];
    for (j, (p, t)) in graph.value(v.predictions).data().iter().zip(&targets).enumerate() {
        abs_per_output[j % n_o] += (t - p).abs();
    }
    let t = graph.constant(crate::autodiff::Tensor::column(targets));
    let l = kind.graph_sum(&mut graph, v.predictions, t, n_o)?;
    graph.backward(l)?;
    let mut grads = Gradients::zeros_like(&model.store);
    graph.accumulate_param_grads(&mut grads);
    Ok(WindowResult {
        loss_sum: graph.value(l).item(),
        abs_per_output,
        grads,
    })
}

/// Eval-mode loss over `windows`, normalized as in [`loss_mae`].
pub fn evaluate_loss(model: &IstftModel, windows: &[Window], kind: LossKind) -> Result<f64, ModelError> {
    let preds = windows
        .par_iter()
        .map(|w| model.predict(w).map(|p| p.predictions))
        .collect::<Result<Vec<_>, _>>()?;
    let pred: Vec<f64> = preds.into_iter().flatten().collect();
    let target: Vec<f64> = windows.iter().flat_map(Window::targets).collect();
    let counts = LossCounts {
        n_windows: windows.len(),
        n_tau: model.config.n_tau,
        n_outputs: model.config.n_outputs,
    };
    kind.eval(&pred, &target, counts).map_err(|e| ModelError::Window(e.to_string()))
}

/// Minibatch Adam over shuffled windows. After every epoch the validation
/// loss (or the training loss without validation windows) is compared with
/// the best so far; the returned model carries the best weights.
pub fn train(
    mut model: IstftModel,
    train_windows: &[Window],
    val_windows: &[Window],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(TrainError::NoWindows);
    }
    for w in train_windows.iter().chain(val_windows) {
        model.check_window(w)?;
    }
    if let Some(out) = log.as_mut() {
        writeln!(out, "{}", LossReport::CSV_HEADER)?;
    }
    let n_o = model.config.n_outputs;
    let denom = (train_windows.len() * model.config.n_tau) as f64;
    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut reports = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let seeds: Vec<u64> = order.iter().map(|_| rng.gen()).collect();
        let mut total = 0.0;
        let mut per_output = vec![0.0; n_o];
        for (batch, batch_seeds) in order.chunks(cfg.batch_size).zip(seeds.chunks(cfg.batch_size)) {
            let results = batch
                .par_iter()
                .zip(batch_seeds)
                .map(|(&i, &s)| window_step(&model, &train_windows[i], cfg.loss, s))
                .collect::<Result<Vec<_>, _>>()?;
            let mut grads = Gradients::zeros_like(&model.store);
            let mut batch_sum = 0.0;
            for r in &results {
                grads.merge(&r.grads);
                batch_sum += r.loss_sum;
                for (acc, v) in per_output.iter_mut().zip(&r.abs_per_output) {
                    *acc += v;
                }
            }
            if !batch_sum.is_finite() || !grads.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    detail: format!("non-finite loss or gradient (batch loss sum {batch_sum})"),
                });
            }
            total += batch_sum;
            grads.scale(1.0 / (batch.len() * model.config.n_tau) as f64);
            grads.clip_global_norm(cfg.max_grad_norm);
            adam.step(&mut model.store, &grads, cfg.learning_rate);
        }
        let train_loss = total / denom;
        let val_loss = if val_windows.is_empty() {
            None
        } else {
            Some(evaluate_loss(&model, val_windows, cfg.loss)?)
        };
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                detail: format!("monitored loss is {monitored}"),
            });
        }
        let report = LossReport {
            epoch,
            train_loss,
            val_loss,
            per_output: per_output.iter().map(|v| v / denom).collect(),
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(out) = log.as_mut() {
            writeln!(out, "{}", report.csv_line())?;
        }
        reports.push(report);
        if best.as_ref().map_or(true, |(b, _, _)| monitored < *b) {
            best = Some((monitored, epoch, model.store.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (best_loss, best_epoch, store) = best.expect("at least one epoch runs");
    model.store = store;
    Ok(TrainOutcome {
        model,
        reports,
        best_epoch,
        best_loss,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use rand::Rng;

    use super::*;
    use crate::model::ModelConfig;

    fn counts(n_windows: usize, n_tau: usize, n_outputs: usize) -> LossCounts {
        LossCounts { n_windows, n_tau, n_outputs }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(loss_mae(&[1.0, 2.0], &[1.0, 2.0], counts(1, 1, 2)).unwrap(), 0.0);
        assert_eq!(loss_mae(&[1.5, 2.5], &[1.0, 2.0], counts(1, 1, 2)).unwrap(), 1.0);
        // two windows, two steps, one output: (1 + 2 + 3 + 4) / 4
        let l = loss_mae(&[0.0; 4], &[1.0, -2.0, 3.0, -4.0], counts(2, 2, 1)).unwrap();
        assert_eq!(l, 2.5);
    }

    #[test]
    fn mse_is_the_euclidean_norm_per_step() {
        assert_eq!(loss_mse(&[0.0, 0.0], &[3.0, 4.0], counts(1, 1, 2)).unwrap(), 5.0);
        assert_eq!(loss_mse(&[1.0, 1.0], &[1.0, 1.0], counts(1, 1, 2)).unwrap(), 0.0);
        let l = loss_mse(&[0.0; 4], &[3.0, 4.0, 6.0, 8.0], counts(1, 2, 2)).unwrap();
        assert_eq!(l, 7.5);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile_loss(&[1.0], &[2.0], 0.5, counts(1, 1, 1)).unwrap(), 0.5);
        for q in [0.1, 0.5, 0.9] {
            assert_eq!(quantile_loss(&[3.0], &[3.0], q, counts(1, 1, 1)).unwrap(), 0.0);
        }
        let under = quantile_loss(&[0.0], &[1.0], 0.9, counts(1, 1, 1)).unwrap();
        let over = quantile_loss(&[1.0], &[0.0], 0.9, counts(1, 1, 1)).unwrap();
        assert!((under / over - 9.0).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let c = counts(1, 1, 2);
        assert!(matches!(loss_mae(&[1.0], &[1.0, 2.0], c), Err(LossError::Shape { .. })));
        assert_eq!(loss_mse(&[f64::NAN, 0.0], &[0.0, 0.0], c), Err(LossError::NonFinite(0)));
        assert_eq!(loss_mae(&[0.0, 0.0], &[0.0, f64::NAN], c), Err(LossError::NonFinite(1)));
        for q in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(quantile_loss(&[0.0, 0.0], &[0.0, 0.0], q, c), Err(LossError::Quantile(_))));
        }
        assert!(matches!(loss_mae(&[], &[], counts(0, 1, 1)), Err(LossError::Counts(_))));
    }

    fn batch() -> impl Strategy<Value = (LossCounts, Vec<f64>, Vec<f64>)> {
        (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(w, t, o)| {
            let n = w * t * o;
            (
                Just(counts(w, t, o)),
                prop::collection::vec(-100.0f64..100.0, n),
                prop::collection::vec(-100.0f64..100.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn median_quantile_is_half_mae((c, p, t) in batch()) {
            let q = quantile_loss(&p, &t, 0.5, c).unwrap();
            let m = loss_mae(&p, &t, c).unwrap();
            prop_assert!((q - 0.5 * m).abs() <= 1e-12 * m.max(1.0));
        }

        #[test]
        fn mse_is_nonnegative_and_zero_only_at_equality((c, p, t) in batch()) {
            let l = loss_mse(&p, &t, c).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, p == t);
            prop_assert_eq!(loss_mse(&p, &p, c).unwrap(), 0.0);
        }

        #[test]
        fn graph_losses_match_pure_values((c, p, t) in batch()) {
            for kind in [LossKind::Mae, LossKind::Mse] {
                let mut total = 0.0;
                let per = c.n_tau * c.n_outputs;
                for (pw, tw) in p.chunks(per).zip(t.chunks(per)) {
                    let mut g = Graph::new();
                    let pv = g.constant(crate::autodiff::Tensor::column(pw.to_vec()));
                    let tv = g.constant(crate::autodiff::Tensor::column(tw.to_vec()));
                    let l = kind.graph_sum(&mut g, pv, tv, c.n_outputs).unwrap();
                    total += g.value(l).item();
                }
                let want = kind.eval(&p, &t, c).unwrap();
                prop_assert!((total / c.denominator() - want).abs() <= 1e-12 * want.max(1.0));
            }
        }
    }

    #[test]
    fn graph_loss_gradients_match_finite_differences() {
        use crate::autodiff::{check_gradients, Tensor};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for kind in [LossKind::Mae, LossKind::Mse] {
            let tt = t.clone();
            let rep = check_gradients(&[Tensor::column(p.clone())], 1e-6, None, move |g: &mut Graph, x: &[Var]| {
                let tv = g.constant(Tensor::column(tt.clone()));
                kind.graph_sum(g, x[0], tv, 2)
            })
            .unwrap();
            assert!(rep.passes(1e-5), "{kind}: {rep:?}");
        }
    }

    #[test]
    fn loss_kind_parses() {
        assert_eq!("MAE".parse::<LossKind>().unwrap(), LossKind::Mae);
        assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert!("huber".parse::<LossKind>().is_err());
        assert_eq!(LossKind::Mse.to_string(), "mse");
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: -1.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { max_epochs: 0, ..ok.clone() },
            TrainConfig { patience: Some(0), ..ok.clone() },
            TrainConfig { patience: Some(101), ..ok.clone() },
            TrainConfig { max_grad_norm: 0.0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.insert("w", crate::autodiff::Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut g = Gradients::zeros_like(&store);
        g.add(id, &[0.3, -4.0, 0.0]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &g, 0.01);
        let w = store.get(id).data();
        // m^ = g and v^ = g^2 after bias correction, so the step is lr * g / (|g| + eps).
        let want = [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 0.5];
        for j in 0..3 {
            assert!((w[j] - want[j]).abs() < 1e-15, "{j}: {} vs {}", w[j], want[j]);
        }
    }

    pub(crate) fn toy_windows(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_t = cfg.n_t();
        (0..n)
            .map(|g| {
                let phase: f64 = rng.gen_range(0.0..6.0);
                Window {
                    group_id: g as u64 + 1,
                    start: 0,
                    n_k: cfg.n_k,
                    mu: (0..cfg.n_params).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    times: (0..n_t).map(|i| i as f64).collect(),
                    u: (0..n_t).map(|i| (0..cfg.n_inputs).map(|_| (i as f64 * 0.3).cos()).collect()).collect(),
                    y: (0..n_t)
                        .map(|i| (0..cfg.n_outputs).map(|k| (phase + 0.4 * i as f64 + k as f64).sin()).collect())
                        .collect(),
                }
            })
            .collect()
    }

    fn toy_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            dropout: 0.1,
            n_outputs: 2,
            n_inputs: 1,
            n_params: 1,
            n_k: 2,
            n_tau: 2,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let cfg = toy_config();
        let model = IstftModel::new(cfg.clone(), 1).unwrap();
        let windows = toy_windows(&cfg, 4, 2);
        let tc = TrainConfig { learning_rate: 0.0, batch_size: 2, max_epochs: 1, ..Default::default() };
        let out = train(model.clone(), &windows, &[], &tc, None).unwrap();
        for ((_, n, a), (_, _, b)) in model.store.iter().zip(out.model.store.iter()) {
            assert_eq!(a, b, "{n}");
        }
    }

    #[test]
    fn tiny_clip_norm_bounds_the_update() {
        let cfg = toy_config();
        let model = IstftModel::new(cfg.clone(), 3).unwrap();
        let windows = toy_windows(&cfg, 3, 4);
        let lr = 0.1;
        let tc = TrainConfig { learning_rate: lr, batch_size: 8, max_epochs: 1, max_grad_norm: 1e-9, ..Default::default() };
        let out = train(model.clone(), &windows, &[], &tc, None).unwrap();
        // One Adam step of lr * g / (|g| + eps) with |g|_2 <= 1e-9 moves the weights by at most lr * 1e-9 / eps.
        let moved: f64 = model
            .store
            .iter()
            .zip(out.model.store.iter())
            .flat_map(|((_, _, a), (_, _, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt();
        assert!(moved > 0.0 && moved <= lr * 1e-9 / 1e-8 * (1.0 + 1e-9), "{moved}");
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let cfg = toy_config();
        let model = IstftModel::new(cfg.clone(), 5).unwrap();
        let w = &toy_windows(&cfg, 1, 6)[0];
        let mut g = window_step(&model, w, LossKind::Mae, 0).unwrap().grads;
        let before = g.global_norm();
        for max in [1e-9, 1e-3, 0.5] {
            let mut c = g.clone();
            assert_eq!(c.clip_global_norm(max), before);
            assert!(c.global_norm() <= max + 1e-12);
        }
        g.clip_global_norm(before * 10.0);
        assert_eq!(g.global_norm(), before);
    }

    #[test]
    fn training_is_deterministic_and_reduces_the_loss() {
        let cfg = toy_config();
        let model = IstftModel::new(cfg.clone(), 7).unwrap();
        let windows = toy_windows(&cfg, 6, 8);
        let tc = TrainConfig { learning_rate: 5e-3, batch_size: 2, max_epochs: 30, seed: 9, ..Default::default() };
        let a = train(model.clone(), &windows[..4], &windows[4..], &tc, None).unwrap();
        let b = train(model, &windows[..4], &windows[4..], &tc, None).unwrap();
        let losses = |o: &TrainOutcome| o.reports.iter().map(|r| (r.train_loss, r.val_loss, r.per_output.clone())).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        let first = a.reports[0].train_loss;
        let last = a.reports.last().unwrap().train_loss;
        assert!(last < 0.8 * first, "{first} -> {last}");
        let sum: f64 = a.reports[0].per_output.iter().sum();
        assert!((sum - first).abs() < 1e-12);
    }

    #[test]
    fn best_validation_weights_are_retained() {
        let cfg = toy_config();
        let model = IstftModel::new(cfg.clone(), 11).unwrap();
        let windows = toy_windows(&cfg, 6, 12);
        let tc = TrainConfig { learning_rate: 2e-2, batch_size: 1, max_epochs: 12, seed: 1, ..Default::default() };
        let out = train(model, &windows[..4], &windows[4..], &tc, None).unwrap();
        let vals: Vec<f64> = out.reports.iter().map(|r| r.val_loss.unwrap()).collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_loss, min);
        assert_eq!(vals[out.best_epoch - 1], min);
        let again = evaluate_loss(&out.model, &windows[4..], LossKind::Mae).unwrap();
        assert!((again - min).abs() < 1e-12);
    }

    #[test]
    fn patience_stops_early_and_logs_every_epoch() {
        let cfg = toy_config();
        let model = IstftModel::new(cfg.clone(), 13).unwrap();
        let windows = toy_windows(&cfg, 4, 14);
        // With lr = 0 the validation loss never improves after epoch 1.
        let tc = TrainConfig { learning_rate: 0.0, max_epochs: 50, patience: Some(3), ..Default::default() };
        let mut log = Vec::new();
        let out = train(model, &windows[..2], &windows[2..], &tc, Some(&mut log)).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.reports.len(), 4);
        assert_eq!(out.best_epoch, 1);
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LossReport::CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1].split(',').count(), 4);
    }

    #[test]
    fn empty_or_mismatched_windows_are_rejected() {
        let cfg = toy_config();
        let model = IstftModel::new(cfg.clone(), 0).unwrap();
        let tc = TrainConfig::default();
        assert!(matches!(train(model.clone(), &[], &[], &tc, None), Err(TrainError::NoWindows)));
        let mut w = toy_windows(&cfg, 1, 0);
        w[0].mu.clear();
        assert!(matches!(train(model, &w, &[], &tc, None), Err(TrainError::Model(_))));
    }

    #[test]
    fn non_finite_targets_abort_training() {
        let cfg = toy_config();
        let model = IstftModel::new(cfg.clone(), 0).unwrap();
        let mut w = toy_windows(&cfg, 2, 0);
        w[1].y[3][0] = f64::NAN;
        let err = train(model, &w, &[], &TrainConfig::default(), None).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { epoch: 1, .. }), "{err}");
    }
}
