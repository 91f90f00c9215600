//! Forecast error measure, aggregation over test cases, and CSV exports of
//! predictions, attention matrices and variable importance.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::{NormStats, Window};
use crate::model::{IstftModel, ModelError, PredictionBatch};

/// Lower bound on `|y(t_i)|` in the relative branch.
pub const DIV_GUARD: f64 = 1e-12;

/// Cases with an error below this count as accurate.
pub const ACCURATE_BELOW: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{0}")]
    Shape(String),
    #[error("nothing to aggregate")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorMode {
    Absolute,
    Relative,
}

impl fmt::Display for ErrorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorMode::Absolute => "absolute",
            ErrorMode::Relative => "relative",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseError {
    pub epsilon: f64,
    pub mode: ErrorMode,
}

/// Error of a predicted scalar series against the reference. Both series
/// hold the `n_t` window values; terms run over the 1-based steps
/// `n_k..=n_t` and are divided by `n_t`. The absolute branch applies when
/// the same average of `|y|` is at most 1, otherwise each term is divided
/// by `max(|y(t_i)|, DIV_GUARD)`.
pub fn error_measure(pred: &[f64], reference: &[f64], n_k: usize, n_t: usize) -> Result<CaseError, EvalError> {
    if n_k == 0 || n_k > n_t || pred.len() != n_t || reference.len() != n_t {
        return Err(EvalError::Shape(format!(
            "series of length {} and {} do not match n_k={n_k}, n_t={n_t}",
            pred.len(),
            reference.len()
        )));
    }
    if pred.iter().chain(reference).any(|v| !v.is_finite()) {
        return Err(EvalError::Shape("non-finite value in a series".into()));
    }
    let (p, y) = (&pred[n_k - 1..], &reference[n_k - 1..]);
    let n = n_t as f64;
    let scale = y.iter().map(|v| v.abs()).sum::<f64>() / n;
    if scale <= 1.0 {
        let e = p.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        Ok(CaseError { epsilon: e, mode: ErrorMode::Absolute })
    } else {
        let e = p
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b).abs() / b.abs().max(DIV_GUARD))
            .sum::<f64>()
            / n;
        Ok(CaseError { epsilon: e, mode: ErrorMode::Relative })
    }
}

/// One test case (a window) and one output.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRecord {
    pub group_id: u64,
    pub start: usize,
    /// 1-based.
    pub output_id: usize,
    pub mode: ErrorMode,
    pub epsilon: f64,
}

/// Errors of every output for one window. `future` holds the normalized
/// forecasts, future step-major; both series are compared in original units
/// with the last observed value standing in at step `n_k`.
pub fn window_errors(window: &Window, future: &[f64], norm: &NormStats) -> Result<Vec<ErrorRecord>, EvalError> {
    let (n_t, n_k, n_o) = (window.n_t(), window.n_k, window.n_outputs());
    if future.len() != window.n_tau() * n_o {
        return Err(EvalError::Shape(format!(
            "{} forecasts for a window with {} future steps and {n_o} outputs",
            future.len(),
            window.n_tau()
        )));
    }
    (0..n_o)
        .map(|k| {
            let reference: Vec<f64> = window.y.iter().map(|y| norm.denormalize_y(k, y[k])).collect();
            let mut pred = reference.clone();
            for i in n_k..n_t {
                pred[i] = norm.denormalize_y(k, future[(i - n_k) * n_o + k]);
            }
            let e = error_measure(&pred, &reference, n_k, n_t)?;
            Ok(ErrorRecord {
                group_id: window.group_id,
                start: window.start,
                output_id: k + 1,
                mode: e.mode,
                epsilon: e.epsilon,
            })
        })
        .collect()
}

/// Model errors over `windows` (normalized data, `norm` maps back).
pub fn evaluate_model(model: &IstftModel, windows: &[Window], norm: &NormStats) -> Result<Vec<ErrorRecord>, EvalError> {
    let batches = predict_all(model, windows)?;
    let per: Vec<Vec<ErrorRecord>> = windows
        .iter()
        .zip(&batches)
        .map(|(w, b)| window_errors(w, &b.predictions, norm))
        .collect::<Result<_, _>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Forecasts that repeat the last observed value of every output.
pub fn persistence_forecast(window: &Window) -> Vec<f64> {
    let last = &window.y[window.n_k - 1];
    (0..window.n_tau()).flat_map(|_| last.iter().copied()).collect()
}

pub fn evaluate_persistence(windows: &[Window], norm: &NormStats) -> Result<Vec<ErrorRecord>, EvalError> {
    let per: Vec<Vec<ErrorRecord>> = windows
        .iter()
        .map(|w| window_errors(w, &persistence_forecast(w), norm))
        .collect::<Result<_, _>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Eval-mode predictions of every window, in order.
pub fn predict_all(model: &IstftModel, windows: &[Window]) -> Result<Vec<PredictionBatch>, ModelError> {
    windows.par_iter().map(|w| model.predict(w)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSummary {
    /// Cases per output.
    pub n_cases: usize,
    pub mean: Vec<f64>,
    pub below: Vec<usize>,
    pub fraction_below: Vec<f64>,
}

/// Per-output mean error and the share of cases below `threshold`.
pub fn aggregate(records: &[ErrorRecord], threshold: f64) -> Result<ErrorSummary, EvalError> {
    let n_o = records.iter().map(|r| r.output_id).max().ok_or(EvalError::Empty)?;
    let mut sum = vec![0.0; n_o];
    let mut count = vec![0usize; n_o];
    let mut below = vec![0usize; n_o];
    for r in records {
        let k = r.output_id - 1;
        sum[k] += r.epsilon;
        count[k] += 1;
        below[k] += usize::from(r.epsilon < threshold);
    }
    if count.iter().any(|&c| c != count[0]) {
        return Err(EvalError::Shape(format!("outputs have unequal case counts {count:?}")));
    }
    Ok(ErrorSummary {
        n_cases: count[0],
        mean: sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect(),
        fraction_below: below.iter().zip(&count).map(|(&b, &c)| b as f64 / c as f64).collect(),
        below,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, EvalError> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|source| EvalError::Csv {
            path: path.display().to_string(),
            source,
        })
}

fn write_rows<I>(path: &Path, header: &[String], rows: I) -> Result<(), EvalError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let err = |source| EvalError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// `group_id,output_id,mode,epsilon`, one row per record.
pub fn write_error_csv(records: &[ErrorRecord], path: impl AsRef<Path>) -> Result<(), EvalError> {
    write_rows(
        path.as_ref(),
        &strings(&["group_id", "output_id", "mode", "epsilon"]),
        records
            .iter()
            .map(|r| vec![r.group_id.to_string(), r.output_id.to_string(), r.mode.to_string(), r.epsilon.to_string()]),
    )
}

/// One forecast value in original units.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    /// 1-based window index.
    pub window: usize,
    pub group_id: u64,
    pub time: f64,
    pub output_id: usize,
    pub y_pred: f64,
    pub y_true: f64,
}

pub fn prediction_rows(windows: &[Window], batches: &[PredictionBatch], norm: &NormStats) -> Vec<PredictionRow> {
    let mut rows = Vec::new();
    for (w_idx, (w, b)) in windows.iter().zip(batches).enumerate() {
        let n_o = w.n_outputs();
        for i in 0..w.n_tau() {
            for k in 0..n_o {
                rows.push(PredictionRow {
                    window: w_idx + 1,
                    group_id: w.group_id,
                    time: w.times[w.n_k + i],
                    output_id: k + 1,
                    y_pred: norm.denormalize_y(k, b.at(i, k)),
                    y_true: norm.denormalize_y(k, w.y[w.n_k + i][k]),
                });
            }
        }
    }
    rows
}

/// `window,group_id,time,output_id,y_pred,y_true`.
pub fn write_predictions_csv(rows: &[PredictionRow], path: impl AsRef<Path>) -> Result<(), EvalError> {
    write_rows(
        path.as_ref(),
        &strings(&["window", "group_id", "time", "output_id", "y_pred", "y_true"]),
        rows.iter().map(|r| {
            vec![
                r.window.to_string(),
                r.group_id.to_string(),
                r.time.to_string(),
                r.output_id.to_string(),
                r.y_pred.to_string(),
                r.y_true.to_string(),
            ]
        }),
    )
}

/// Head-averaged attention of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub group_id: u64,
    pub n_t: usize,
    pub n_o: usize,
    /// Square, masked entries exactly 0.
    pub matrix: Tensor,
    /// `t<i>_o<k>` with 1-based time index and output id.
    pub labels: Vec<String>,
}

/// Attention of `window`, optionally cropped to the leading `crop` positions.
pub fn attention_record(model: &IstftModel, window: &Window, crop: Option<usize>) -> Result<AttentionRecord, EvalError> {
    let batch = model.predict(window)?;
    let (n_t, n_o) = (model.config.n_t(), model.config.n_outputs);
    let m = n_t * n_o;
    let keep = crop.unwrap_or(m).min(m);
    let full = &batch.attention;
    let data = (0..keep).flat_map(|r| full.row(r)[..keep].to_vec()).collect();
    Ok(AttentionRecord {
        group_id: window.group_id,
        n_t,
        n_o,
        matrix: Tensor::matrix(keep, keep, data),
        labels: (0..keep).map(|p| format!("t{}_o{}", p / n_o + 1, p % n_o + 1)).collect(),
    })
}

/// Header `position,t1_o1,...`; each row starts with its label.
pub fn write_attention_csv(rec: &AttentionRecord, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut header = vec!["position".to_string()];
    header.extend(rec.labels.iter().cloned());
    write_rows(
        path.as_ref(),
        &header,
        rec.labels.iter().enumerate().map(|(r, l)| {
            let mut row = vec![l.clone()];
            row.extend(rec.matrix.row(r).iter().map(f64::to_string));
            row
        }),
    )
}

pub fn export_attention(
    model: &IstftModel,
    window: &Window,
    path: impl AsRef<Path>,
    crop: Option<usize>,
) -> Result<AttentionRecord, EvalError> {
    let rec = attention_record(model, window, crop)?;
    write_attention_csv(&rec, path)?;
    Ok(rec)
}

/// Named weights of one selection group.
pub type WeightGroup = Vec<(String, f64)>;

/// Variable-selection weights averaged over positions and windows.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceRecord {
    /// Over `mu_1..`; empty without parameters.
    pub params: WeightGroup,
    /// One group per output over `u_1.., observed`.
    pub past: Vec<WeightGroup>,
    /// Over `u_1..`, or the single `placeholder` without known inputs.
    pub future: WeightGroup,
}

impl ImportanceRecord {
    /// `(group, weights)` pairs in export order.
    pub fn groups(&self) -> Vec<(String, &WeightGroup)> {
        let mut out = Vec::new();
        if !self.params.is_empty() {
            out.push(("static".to_string(), &self.params));
        }
        for (k, g) in self.past.iter().enumerate() {
            out.push((format!("past_o{}", k + 1), g));
        }
        out.push(("future".to_string(), &self.future));
        out
    }
}

fn column_means(sums: &mut [f64], t: &Tensor, rows: impl Iterator<Item = usize>) -> usize {
    let mut n = 0;
    for r in rows {
        for (s, v) in sums.iter_mut().zip(t.row(r)) {
            *s += v;
        }
        n += 1;
    }
    n
}

pub fn importance(model: &IstftModel, windows: &[Window]) -> Result<ImportanceRecord, EvalError> {
    if windows.is_empty() {
        return Err(EvalError::Empty);
    }
    let c = &model.config;
    let n_o = c.n_outputs;
    let batches = predict_all(model, windows)?;
    let inputs: Vec<String> = (1..=c.n_inputs).map(|i| format!("u_{i}")).collect();
    let mut past_names = inputs.clone();
    past_names.push("observed".into());
    let future_names = if c.n_inputs == 0 { vec!["placeholder".to_string()] } else { inputs };

    let mut params = vec![0.0; c.n_params];
    let mut past = vec![vec![0.0; past_names.len()]; n_o];
    let mut past_n = vec![0usize; n_o];
    let mut future = vec![0.0; future_names.len()];
    let mut future_n = 0;
    for b in &batches {
        if let Some(s) = &b.static_weights {
            for (a, v) in params.iter_mut().zip(s) {
                *a += v;
            }
        }
        let rows = b.past_weights.dims2().0;
        for (k, (acc, n)) in past.iter_mut().zip(&mut past_n).enumerate() {
            *n += column_means(acc, &b.past_weights, (k..rows).step_by(n_o));
        }
        future_n += column_means(&mut future, &b.future_weights, 0..b.future_weights.dims2().0);
    }
    let named = |names: &[String], sums: &[f64], n: usize| -> WeightGroup {
        names.iter().cloned().zip(sums.iter().map(|s| s / n as f64)).collect()
    };
    let param_names: Vec<String> = (1..=c.n_params).map(|j| format!("mu_{j}")).collect();
    Ok(ImportanceRecord {
        params: named(&param_names, &params, windows.len()),
        past: past.iter().zip(&past_n).map(|(s, &n)| named(&past_names, s, n)).collect(),
        future: named(&future_names, &future, future_n),
    })
}

/// `group,variable,weight`.
pub fn write_importance_csv(rec: &ImportanceRecord, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let rows: Vec<Vec<String>> = rec
        .groups()
        .into_iter()
        .flat_map(|(g, ws)| ws.iter().map(move |(v, w)| vec![g.clone(), v.clone(), w.to_string()]))
        .collect();
    write_rows(path.as_ref(), &strings(&["group", "variable", "weight"]), rows)
}

pub fn export_importance(
    model: &IstftModel,
    windows: &[Window],
    path: impl AsRef<Path>,
) -> Result<ImportanceRecord, EvalError> {
    let rec = importance(model, windows)?;
    write_importance_csv(&rec, path)?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::attention::build_block_mask;
    use crate::model::ModelConfig;

    /// Direct transcription with explicit 1-based indices.
    fn oracle(pred: &[f64], y: &[f64], n_k: usize, n_t: usize) -> (f64, bool) {
        let mut mean_abs = 0.0;
        for i in n_k..=n_t {
            mean_abs += y[i - 1].abs();
        }
        mean_abs /= n_t as f64;
        let mut e = 0.0;
        for i in n_k..=n_t {
            let d = (pred[i - 1] - y[i - 1]).abs();
            e += if mean_abs <= 1.0 { d } else { d / f64::max(y[i - 1].abs(), 1e-12) };
        }
        (e / n_t as f64, mean_abs <= 1.0)
    }

    #[test]
    fn constant_series_examples() {
        let e = error_measure(&[0.6; 5], &[0.5; 5], 1, 5).unwrap();
        assert_eq!(e.mode, ErrorMode::Absolute);
        assert!((e.epsilon - 0.1).abs() < 1e-15);
        let e = error_measure(&[2.2; 5], &[2.0; 5], 1, 5).unwrap();
        assert_eq!(e.mode, ErrorMode::Relative);
        assert!((e.epsilon - 0.1).abs() < 1e-15);
        assert_eq!(error_measure(&[3.0; 4], &[3.0; 4], 2, 4).unwrap().epsilon, 0.0);
    }

    #[test]
    fn boundary_goes_to_the_absolute_branch() {
        let e = error_measure(&[1.5, 1.5], &[1.0, -1.0], 1, 2).unwrap();
        assert_eq!(e.mode, ErrorMode::Absolute);
        assert_eq!(e.epsilon, (0.5 + 2.5) / 2.0);
    }

    #[test]
    fn steps_before_n_k_are_ignored() {
        let a = error_measure(&[9.0, 0.1, 0.2], &[0.0, 0.1, 0.3], 2, 3).unwrap();
        assert!((a.epsilon - 0.1 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn relative_branch_guards_zero_reference() {
        let e = error_measure(&[5.0, 1.0], &[5.0, 0.0], 1, 2).unwrap();
        assert_eq!(e.mode, ErrorMode::Relative);
        assert_eq!(e.epsilon, 1.0 / DIV_GUARD / 2.0);
    }

    #[test]
    fn malformed_series_are_rejected() {
        assert!(error_measure(&[1.0], &[1.0, 2.0], 1, 2).is_err());
        assert!(error_measure(&[1.0, 2.0], &[1.0, 2.0], 0, 2).is_err());
        assert!(error_measure(&[1.0, 2.0], &[1.0, 2.0], 3, 2).is_err());
        assert!(error_measure(&[f64::NAN, 2.0], &[1.0, 2.0], 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn matches_direct_transcription(n_t in 1usize..40, k_frac in 0.0f64..1.0, scale in 0.01f64..10.0, seed in any::<u64>()) {
            let n_k = 1 + ((n_t - 1) as f64 * k_frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..n_t).map(|_| scale * rng.gen_range(-2.0..2.0)).collect();
            let p: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
            let got = error_measure(&p, &y, n_k, n_t).unwrap();
            let (want, absolute) = oracle(&p, &y, n_k, n_t);
            prop_assert_eq!(got.mode == ErrorMode::Absolute, absolute);
            prop_assert!((got.epsilon - want).abs() <= 1e-14 * want.max(1.0));
            prop_assert!(got.epsilon >= 0.0);
        }
    }

    #[test]
    fn aggregate_means_and_fractions() {
        let rec = |g, k, e| ErrorRecord { group_id: g, start: 0, output_id: k, mode: ErrorMode::Absolute, epsilon: e };
        let one = aggregate(&[rec(1, 1, 0.3)], ACCURATE_BELOW).unwrap();
        assert_eq!((one.n_cases, one.mean.clone(), one.fraction_below.clone()), (1, vec![0.3], vec![0.0]));
        let all = aggregate(&[rec(1, 1, 0.04), rec(2, 1, 0.04), rec(1, 2, 0.01), rec(2, 2, 0.09)], ACCURATE_BELOW).unwrap();
        assert_eq!(all.fraction_below, vec![1.0, 0.5]);
        assert_eq!(all.below, vec![2, 1]);
        assert!((all.mean[1] - 0.05).abs() < 1e-15);
        assert!(matches!(aggregate(&[], ACCURATE_BELOW), Err(EvalError::Empty)));
        assert!(aggregate(&[rec(1, 1, 0.0), rec(1, 2, 0.0), rec(2, 2, 0.0)], ACCURATE_BELOW).is_err());
    }

    fn config(n_inputs: usize, n_params: usize, n_outputs: usize, n_k: usize, n_tau: usize) -> ModelConfig {
        ModelConfig { d_model: 8, n_heads: 2, dropout: 0.0, n_outputs, n_inputs, n_params, n_k, n_tau }
    }

    fn windows(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_t = cfg.n_t();
        (0..n)
            .map(|g| Window {
                group_id: g as u64 + 1,
                start: 0,
                n_k: cfg.n_k,
                mu: (0..cfg.n_params).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                times: (0..n_t).map(|i| i as f64 * 0.5).collect(),
                u: (0..n_t).map(|_| (0..cfg.n_inputs).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
                y: (0..n_t).map(|_| (0..cfg.n_outputs).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            })
            .collect()
    }

    #[test]
    fn perfect_forecasts_have_zero_error() {
        let cfg = config(0, 0, 2, 2, 3);
        let norm = NormStats {
            y: vec![crate::data::ColumnStats { mean: 3.0, std: 2.0 }, crate::data::ColumnStats::IDENTITY],
            ..NormStats::identity(0, 0, 2)
        };
        for w in windows(&cfg, 3, 1) {
            let recs = window_errors(&w, &w.targets(), &norm).unwrap();
            assert_eq!(recs.len(), 2);
            assert!(recs.iter().all(|r| r.epsilon == 0.0));
            assert_eq!(recs[0].mode, ErrorMode::Relative);
        }
    }

    #[test]
    fn persistence_repeats_the_last_observation() {
        let cfg = config(0, 0, 2, 2, 3);
        let w = &windows(&cfg, 1, 2)[0];
        let f = persistence_forecast(w);
        assert_eq!(f.len(), 6);
        assert_eq!(&f[4..], &w.y[1][..]);
    }

    #[test]
    fn attention_export_follows_the_block_mask() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(1, 1, 3, 1, 2);
        let model = IstftModel::new(cfg.clone(), 3).unwrap();
        let w = &windows(&cfg, 1, 4)[0];
        let path = dir.path().join("a.csv");
        let rec = export_attention(&model, w, &path, None).unwrap();
        let mask = build_block_mask(3, 3).unwrap();
        let mut nonzero = 0;
        for r in 0..9 {
            let row = rec.matrix.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for c in 0..9 {
                assert_eq!(row[c] == 0.0, !mask.is_allowed(r, c), "({r},{c})");
                nonzero += usize::from(row[c] != 0.0);
            }
        }
        assert_eq!(nonzero, 54);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert!(lines[0].starts_with("position,t1_o1,t1_o2,t1_o3,t2_o1"));
        assert!(lines[9].starts_with("t3_o3,"));

        let cropped = attention_record(&model, w, Some(3)).unwrap();
        assert_eq!(cropped.matrix.shape(), &[3, 3]);
        assert_eq!(cropped.matrix.row(2), &rec.matrix.row(2)[..3]);
    }

    #[test]
    fn importance_groups_sum_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(1, 2, 3, 2, 2);
        let model = IstftModel::new(cfg.clone(), 5).unwrap();
        let ws = windows(&cfg, 3, 6);
        let path = dir.path().join("i.csv");
        let rec = export_importance(&model, &ws, &path).unwrap();
        assert_eq!(rec.past.len(), 3);
        for (g, ws) in rec.groups() {
            let s: f64 = ws.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-10, "{g}: {s}");
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("group,variable,weight"));
        assert_eq!(text.lines().count(), 1 + 2 + 3 * 2 + 1);
        assert!(text.contains("static,mu_2,"));
        assert!(text.contains("past_o3,observed,"));
    }

    #[test]
    fn lorenz_shaped_importance_is_degenerate() {
        let cfg = config(0, 0, 3, 1, 2);
        let model = IstftModel::new(cfg.clone(), 7).unwrap();
        let rec = importance(&model, &windows(&cfg, 2, 8)).unwrap();
        assert!(rec.params.is_empty());
        for g in &rec.past {
            assert_eq!(g, &vec![("observed".to_string(), 1.0)]);
        }
        assert_eq!(rec.future, vec![("placeholder".to_string(), 1.0)]);
    }

    #[test]
    fn prediction_rows_are_denormalized() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(0, 0, 2, 1, 2);
        let model = IstftModel::new(cfg.clone(), 9).unwrap();
        let ws = windows(&cfg, 2, 10);
        let norm = NormStats {
            y: vec![crate::data::ColumnStats { mean: 10.0, std: 3.0 }; 2],
            ..NormStats::identity(0, 0, 2)
        };
        let batches = predict_all(&model, &ws).unwrap();
        let rows = prediction_rows(&ws, &batches, &norm);
        assert_eq!(rows.len(), 2 * 2 * 2);
        assert_eq!(rows[0].y_pred, 10.0 + 3.0 * batches[0].at(0, 0));
        assert_eq!(rows[5].y_true, 10.0 + 3.0 * ws[1].y[1][1]);
        assert_eq!((rows[7].window, rows[7].group_id, rows[7].output_id), (2, 2, 2));
        let path = dir.path().join("p.csv");
        write_predictions_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("window,group_id,time,output_id,y_pred,y_true"));
        assert_eq!(text.lines().count(), 9);
    }
}
