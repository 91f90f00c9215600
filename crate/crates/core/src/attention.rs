//! Interpretable multi-head attention over the spatial-temporal sequence.
//!
//! The sequence has `n_t` time blocks of `n_o` positions each. A position may
//! attend to every position in its own block and in all earlier blocks.

use rand::RngCore;

use crate::autodiff::ParamStore;
use crate::autodiff::Var;
use crate::layers::{AtStage, ForwardError, Linear, Pass};

/// Block-wise causal mask over `M = n_t * n_o` positions, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask {
    pub n_t: usize,
    pub n_o: usize,
    allowed: Vec<bool>,
}

impl BlockMask {
    pub fn new(n_t: usize, n_o: usize) -> Result<Self, ForwardError> {
        if n_t == 0 || n_o == 0 {
            return Err(ForwardError::Config(format!(
                "block mask needs n_t >= 1 and n_o >= 1, got n_t={n_t}, n_o={n_o}"
            )));
        }
        let m = n_t * n_o;
        let allowed = (0..m * m)
            .map(|i| (i % m) / n_o <= (i / m) / n_o)
            .collect();
        Ok(BlockMask { n_t, n_o, allowed })
    }

    pub fn size(&self) -> usize {
        self.n_t * self.n_o
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.size() + c]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

pub fn build_block_mask(n_t: usize, n_o: usize) -> Result<BlockMask, ForwardError> {
    BlockMask::new(n_t, n_o)
}

/// Multi-head attention whose heads share one value projection, so the mean
/// of the per-head attention matrices is itself an attention matrix over a
/// single set of values.
#[derive(Clone, Debug)]
pub struct InterpretableAttention {
    name: String,
    queries: Vec<Linear>,
    keys: Vec<Linear>,
    value: Linear,
    output: Linear,
    pub d_model: usize,
    pub n_heads: usize,
}

impl InterpretableAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self, ForwardError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(ForwardError::Config(format!(
                "d_model={d_model} is not divisible by n_heads={n_heads}"
            )));
        }
        let d_k = d_model / n_heads;
        let mut queries = Vec::with_capacity(n_heads);
        let mut keys = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            queries.push(Linear::new(store, &format!("{name}.head{h}.query"), d_model, d_k, true, rng));
            keys.push(Linear::new(store, &format!("{name}.head{h}.key"), d_model, d_k, true, rng));
        }
        let value = Linear::new(store, &format!("{name}.value"), d_model, d_k, true, rng);
        let output = Linear::new(store, &format!("{name}.output"), d_k, d_model, true, rng);
        Ok(InterpretableAttention {
            name: name.to_string(),
            queries,
            keys,
            value,
            output,
            d_model,
            n_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Per-head attention matrices `softmax_mask(Q_h K_h^T / sqrt(d_k))`.
    pub fn head_weights(
        &self,
        pass: &mut Pass,
        theta: Var,
        mask: &BlockMask,
    ) -> Result<Vec<Var>, ForwardError> {
        let stage = self.name.as_str();
        let m = pass.graph.shape(theta)[0];
        if m != mask.size() {
            return Err(ForwardError::Config(format!(
                "{stage}: sequence has {m} positions but the mask covers {}",
                mask.size()
            )));
        }
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for (q, k) in self.queries.iter().zip(&self.keys) {
            let qh = q.forward(pass, theta)?;
            let kh = k.forward(pass, theta)?;
            let kt = pass.graph.transpose(kh).at(stage)?;
            let logits = pass.graph.matmul(qh, kt).at(stage)?;
            let logits = pass.graph.scale(logits, scale);
            heads.push(pass.graph.masked_softmax(logits, mask.allowed()).at(stage)?);
        }
        Ok(heads)
    }

    /// Returns the projected attention output (`M x d_model`) and the
    /// head-averaged attention matrix (`M x M`).
    pub fn forward(
        &self,
        pass: &mut Pass,
        theta: Var,
        mask: &BlockMask,
    ) -> Result<(Var, Var), ForwardError> {
        let stage = self.name.as_str();
        let heads = self.head_weights(pass, theta, mask)?;
        let mut total = heads[0];
        for &h in &heads[1..] {
            total = pass.graph.add(total, h).at(stage)?;
        }
        let averaged = pass.graph.scale(total, 1.0 / self.n_heads as f64);
        let v = self.value.forward(pass, theta)?;
        let mixed = pass.graph.matmul(averaged, v).at(stage)?;
        let out = self.output.forward(pass, mixed)?;
        Ok((out, averaged))
    }
}
