//! The assembled network: embeddings, variable selection, LSTM
//! encoder-decoder, static enrichment, block-masked interpretable attention
//! and the dense head, evaluated over one window in a single pass.

mod file;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{BlockMask, InterpretableAttention};
use crate::autodiff::{GradCheckReport, Gradients, Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::data::Window;
use crate::layers::{
    lstm_encode_decode, AtStage, ForwardError, GateAddNorm, Grn, Linear, Lstm, LstmState, Pass,
    StaticEncoders, VariableSelection,
};

pub use file::{load_model, save_model, ModelFile, FORMAT, VERSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error("backward pass: {0}")]
    Backward(#[from] TensorError),
    #[error("window does not match the model: {0}")]
    Window(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("weight manifest mismatch: {0}")]
    Manifest(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub n_outputs: usize,
    pub n_inputs: usize,
    pub n_params: usize,
    pub n_k: usize,
    pub n_tau: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model={} must be positive and divisible by heads={}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.n_outputs == 0 || self.n_k == 0 || self.n_tau == 0 {
            return bad(format!(
                "n_o, n_k and n_tau must be at least 1 (got {}, {}, {})",
                self.n_outputs, self.n_k, self.n_tau
            ));
        }
        Ok(())
    }

    pub fn n_t(&self) -> usize {
        self.n_k + self.n_tau
    }

    /// Sequence length `n_t * n_o`.
    pub fn positions(&self) -> usize {
        self.n_t() * self.n_outputs
    }

    pub fn n_predictions(&self) -> usize {
        self.n_tau * self.n_outputs
    }
}

/// Graph handles produced by one forward evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `n_tau * n_o` predictions as a column, future step-major.
    pub predictions: Var,
    /// Head-averaged attention, `M x M`.
    pub attention: Var,
    /// `n_k * n_o` rows over `[u_1.., observed y]`.
    pub past_weights: Var,
    /// `n_tau * n_o` rows over the known inputs (or the placeholder).
    pub future_weights: Var,
    /// `1 x p`, absent without parameters.
    pub static_weights: Option<Var>,
}

/// Eval-mode outputs for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    pub group_id: u64,
    pub start: usize,
    pub n_outputs: usize,
    /// `n_tau * n_o` values, future step-major then output.
    pub predictions: Vec<f64>,
    pub attention: Tensor,
    pub past_weights: Tensor,
    pub future_weights: Tensor,
    pub static_weights: Option<Vec<f64>>,
}

impl PredictionBatch {
    /// Prediction for future step `i` and output `k`, both 0-based.
    pub fn at(&self, i: usize, k: usize) -> f64 {
        self.predictions[i * self.n_outputs + k]
    }
}

#[derive(Clone, Debug)]
struct Embeddings {
    inputs: Vec<Linear>,
    observed: Linear,
    params: Vec<Linear>,
    placeholder: Option<ParamId>,
    output: ParamId,
}

/// The network and its named weight collection.
#[derive(Clone, Debug)]
pub struct IstftModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    embed: Embeddings,
    static_enc: Option<StaticEncoders>,
    select_past: VariableSelection,
    select_future: VariableSelection,
    encoder: Lstm,
    decoder: Lstm,
    gate_lstm: GateAddNorm,
    enrich: Grn,
    attention: InterpretableAttention,
    gate_attention: GateAddNorm,
    feed_forward: Grn,
    gate_output: GateAddNorm,
    head: Linear,
    mask: BlockMask,
}

impl IstftModel {
    /// Builds the network with weights drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng: &mut dyn RngCore = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = config.d_model;
        let has_static = config.n_params > 0;

        let embed = Embeddings {
            inputs: (1..=config.n_inputs)
                .map(|i| Linear::new(s, &format!("embed.u{i}"), 1, d, true, rng))
                .collect(),
            observed: Linear::new(s, "embed.y", 1, d, true, rng),
            params: (1..=config.n_params)
                .map(|j| Linear::new(s, &format!("embed.mu{j}"), 1, d, true, rng))
                .collect(),
            placeholder: (config.n_inputs == 0).then(|| s.uniform("embed.placeholder", 1, d, rng)),
            output: s.uniform("embed.output", config.n_outputs, d, rng),
        };
        let static_enc = has_static.then(|| StaticEncoders::new(s, "static", config.n_params, d, rng));
        let select_past = VariableSelection::new(s, "select.past", config.n_inputs + 1, d, has_static, rng);
        let select_future =
            VariableSelection::new(s, "select.future", config.n_inputs.max(1), d, has_static, rng);
        let encoder = Lstm::new(s, "lstm.encoder", d, rng);
        let decoder = Lstm::new(s, "lstm.decoder", d, rng);
        let gate_lstm = GateAddNorm::new(s, "gate.lstm", d, d, rng);
        let enrich = Grn::new(s, "enrich", d, d, d, has_static, rng);
        let attention = InterpretableAttention::new(s, "attention", d, config.n_heads, rng)?;
        let gate_attention = GateAddNorm::new(s, "gate.attention", d, d, rng);
        let feed_forward = Grn::new(s, "feed_forward", d, d, d, false, rng);
        let gate_output = GateAddNorm::new(s, "gate.output", d, d, rng);
        let head = Linear::new(s, "head", d, 1, true, rng);
        let mask = BlockMask::new(config.n_t(), config.n_outputs)?;
        Ok(IstftModel {
            config,
            store,
            embed,
            static_enc,
            select_past,
            select_future,
            encoder,
            decoder,
            gate_lstm,
            enrich,
            attention,
            gate_attention,
            feed_forward,
            gate_output,
            head,
            mask,
        })
    }

    pub fn mask(&self) -> &BlockMask {
        &self.mask
    }

    pub fn check_window(&self, w: &Window) -> Result<(), ModelError> {
        let c = &self.config;
        let found = (w.n_k, w.n_tau(), w.n_outputs(), w.u.first().map_or(0, Vec::len), w.mu.len());
        let want = (c.n_k, c.n_tau, c.n_outputs, c.n_inputs, c.n_params);
        if found != want {
            return Err(ModelError::Window(format!(
                "(n_k, n_tau, n_o, n_I, p) = {found:?}, model expects {want:?}"
            )));
        }
        Ok(())
    }

    /// Records the forward pass for `window` with weights taken from `store`.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        graph: &mut Graph,
        window: &Window,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardVars, ModelError> {
        self.check_window(window)?;
        let c = &self.config;
        let (n_o, d) = (c.n_outputs, c.d_model);
        let m = c.positions();
        let past_rows = c.n_k * n_o;
        let future_rows = c.n_tau * n_o;
        let mut pass = Pass::new(graph, store, train, c.dropout, rng);

        // Static branch.
        let (contexts, static_weights) = match &self.static_enc {
            Some(enc) => {
                let mut embs = Vec::with_capacity(c.n_params);
                for (j, lin) in self.embed.params.iter().enumerate() {
                    let v = pass.graph.constant(Tensor::matrix(1, 1, vec![window.mu[j]]));
                    embs.push(lin.forward(&mut pass, v)?);
                }
                let (ctx, w) = enc.forward(&mut pass, &embs)?;
                (Some(ctx), Some(w))
            }
            None => (None, None),
        };
        let selection_ctx = contexts.map(|c| c.selection);

        // Per-position embeddings of the known inputs over the whole window.
        let mut input_embs = Vec::with_capacity(c.n_inputs);
        for (i, lin) in self.embed.inputs.iter().enumerate() {
            let col = (0..m).map(|r| window.u[r / n_o][i]).collect();
            let v = pass.graph.constant(Tensor::column(col));
            input_embs.push(lin.forward(&mut pass, v)?);
        }
        let observed: Vec<f64> = (0..past_rows).map(|r| window.y[r / n_o][r % n_o]).collect();
        let observed = pass.graph.constant(Tensor::column(observed));
        let observed = self.embed.observed.forward(&mut pass, observed)?;

        let mut past_vars = Vec::with_capacity(c.n_inputs + 1);
        let mut future_vars = Vec::with_capacity(c.n_inputs.max(1));
        for &e in &input_embs {
            past_vars.push(pass.graph.slice(e, 0, 0, past_rows).at("embed")?);
            future_vars.push(pass.graph.slice(e, 0, past_rows, m).at("embed")?);
        }
        past_vars.push(observed);
        if let Some(ph) = self.embed.placeholder {
            let ones = pass.graph.constant(Tensor::full(&[future_rows, 1], 1.0));
            let ph = pass.param(ph);
            future_vars.push(pass.graph.matmul(ones, ph).at("embed.placeholder")?);
        }

        let (past_sel, past_weights) = self.select_past.forward(&mut pass, &past_vars, selection_ctx)?;
        let (future_sel, future_weights) =
            self.select_future.forward(&mut pass, &future_vars, selection_ctx)?;

        // Output identity of every position, added after selection.
        let one_hot = {
            let mut t = Tensor::zeros(&[m, n_o]);
            for r in 0..m {
                t.data_mut()[r * n_o + r % n_o] = 1.0;
            }
            pass.graph.constant(t)
        };
        let table = pass.param(self.embed.output);
        let ids = pass.graph.matmul(one_hot, table).at("embed.output")?;
        let selected = pass.graph.concat(&[past_sel, future_sel], 0).at("select")?;
        let selected = pass.graph.add(selected, ids).at("embed.output")?;
        let past_in = pass.graph.slice(selected, 0, 0, past_rows).at("select")?;
        let future_in = pass.graph.slice(selected, 0, past_rows, m).at("select")?;

        let init = match contexts {
            Some(ctx) => LstmState {
                hidden: ctx.hidden,
                cell: ctx.cell,
            },
            None => {
                let z = pass.graph.constant(Tensor::zeros(&[1, d]));
                LstmState { hidden: z, cell: z }
            }
        };
        let temporal = lstm_encode_decode(&mut pass, &self.encoder, &self.decoder, past_in, future_in, init)?;
        let temporal = self.gate_lstm.forward(&mut pass, temporal, selected)?;
        let enriched = self.enrich.forward(&mut pass, temporal, contexts.map(|c| c.enrichment))?;
        let (attended, attention) = self.attention.forward(&mut pass, enriched, &self.mask)?;
        let attended = self.gate_attention.forward(&mut pass, attended, enriched)?;
        let transformed = self.feed_forward.forward(&mut pass, attended, None)?;
        let out = self.gate_output.forward(&mut pass, transformed, temporal)?;
        let future = pass.graph.slice(out, 0, past_rows, m).at("head")?;
        let predictions = self.head.forward(&mut pass, future)?;
        Ok(ForwardVars {
            predictions,
            attention,
            past_weights,
            future_weights,
            static_weights,
        })
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        window: &Window,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardVars, ModelError> {
        self.forward_with(&self.store, graph, window, train, rng)
    }

    /// Eval-mode prediction of one window.
    pub fn predict(&self, window: &Window) -> Result<PredictionBatch, ModelError> {
        let mut graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = self.forward(&mut graph, window, false, &mut rng)?;
        Ok(PredictionBatch {
            group_id: window.group_id,
            start: window.start,
            n_outputs: self.config.n_outputs,
            predictions: graph.value(v.predictions).data().to_vec(),
            attention: graph.value(v.attention).clone(),
            past_weights: graph.value(v.past_weights).clone(),
            future_weights: graph.value(v.future_weights).clone(),
            static_weights: v.static_weights.map(|w| graph.value(w).data().to_vec()),
        })
    }

    /// Gradients of `loss(graph, predictions, targets)` with respect to every
    /// weight, for one window.
    pub fn gradients<L>(
        &self,
        window: &Window,
        train: bool,
        rng: &mut dyn RngCore,
        loss: L,
    ) -> Result<(f64, Gradients), ModelError>
    where
        L: Fn(&mut Graph, Var, Var) -> Result<Var, TensorError>,
    {
        let mut graph = Graph::new();
        let v = self.forward(&mut graph, window, train, rng)?;
        let targets = graph.constant(Tensor::column(window.targets()));
        let l = loss(&mut graph, v.predictions, targets)?;
        graph.backward(l)?;
        let mut grads = Gradients::zeros_like(&self.store);
        graph.accumulate_param_grads(&mut grads);
        Ok((graph.value(l).item(), grads))
    }

    /// Compares weight gradients of `0.5 * sum((pred - target)^2)` in eval
    /// mode with central differences at step `h`, on up to `per_tensor`
    /// randomly chosen entries of every weight tensor.
    ///
    /// Gradients smaller than `1e-6 * max(1, |loss|)` are compared in
    /// absolute terms: below that scale the rounding error of the difference
    /// quotient exceeds the tolerance of a relative comparison.
    pub fn gradcheck(
        &self,
        window: &Window,
        h: f64,
        per_tensor: usize,
        seed: u64,
    ) -> Result<GradCheckReport, ModelError> {
        let half_sse = |g: &mut Graph, p: Var, t: Var| -> Result<Var, TensorError> {
            let r = g.sub(p, t)?;
            let sq = g.mul(r, r)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, grads) = self.gradients(window, false, &mut rng, half_sse)?;
        let floor = 1e-6 * loss.abs().max(1.0);
        let eval = |store: &ParamStore| -> Result<f64, ModelError> {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let v = self.forward_with(store, &mut g, window, false, &mut rng)?;
            let t = g.constant(Tensor::column(window.targets()));
            let l = half_sse(&mut g, v.predictions, t)?;
            Ok(g.value(l).item())
        };
        let mut pick = ChaCha8Rng::seed_from_u64(seed);
        let mut store = self.store.clone();
        let mut report = GradCheckReport::default();
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let len = store.get(id).len();
            let entries = rand::seq::index::sample(&mut pick, len, per_tensor.min(len));
            for j in entries.iter() {
                let orig = store.get(id).data()[j];
                store.get_mut(id).data_mut()[j] = orig + h;
                let up = eval(&store)?;
                store.get_mut(id).data_mut()[j] = orig - h;
                let down = eval(&store)?;
                store.get_mut(id).data_mut()[j] = orig;
                report.record_above(id.index(), j, grads.get(id)[j], (up - down) / (2.0 * h), floor);
            }
        }
        Ok(report)
    }
}
