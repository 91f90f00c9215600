//! Network building blocks: dense projections, gated linear units, gated
//! residual networks, the LSTM encoder-decoder, variable selection and the
//! static covariate encoders.
//!
//! Every layer owns only [`ParamId`]s; values live in a [`ParamStore`] and are
//! pulled into a [`Graph`] through a [`Pass`] during each forward evaluation.

mod grn;
mod lstm;
mod varsel;

use rand::RngCore;
use thiserror::Error;

use crate::autodiff::{Graph, ParamId, ParamStore, TensorError, Var};

pub use grn::Grn;
pub use lstm::{lstm_encode_decode, Lstm, LstmState};
pub use varsel::{StaticContexts, StaticEncoders, VariableSelection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForwardError {
    #[error("{stage}: {source}")]
    Tensor {
        stage: String,
        #[source]
        source: TensorError,
    },
    #[error("context supplied to `{0}`, which has no context projection")]
    UnexpectedContext(String),
    #[error("`{0}`: variable selection needs at least one variable")]
    NoVariables(String),
    #[error("`{stage}`: expected {expected} variables, got {got}")]
    VariableCount {
        stage: String,
        expected: usize,
        got: usize,
    },
    #[error("{0}")]
    Config(String),
}

pub(crate) trait AtStage<T> {
    fn at(self, stage: &str) -> Result<T, ForwardError>;
}

impl<T> AtStage<T> for Result<T, TensorError> {
    fn at(self, stage: &str) -> Result<T, ForwardError> {
        self.map_err(|source| ForwardError::Tensor {
            stage: stage.to_string(),
            source,
        })
    }
}

/// State threaded through one forward evaluation.
pub struct Pass<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    keep: f64,
    rng: &'a mut dyn RngCore,
}

impl<'a> Pass<'a> {
    /// `dropout` is the drop rate; it only has an effect when `train` is set.
    pub fn new(
        graph: &'a mut Graph,
        store: &'a ParamStore,
        train: bool,
        dropout: f64,
        rng: &'a mut dyn RngCore,
    ) -> Self {
        Pass {
            graph,
            store,
            train,
            keep: 1.0 - dropout,
            rng,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var, TensorError> {
        self.graph.dropout(x, self.keep, self.train, &mut *self.rng)
    }
}

/// Dense projection `x W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), out_dim));
        Linear {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var, ForwardError> {
        let w = pass.param(self.weight);
        let y = pass.graph.matmul(x, w).at(&self.name)?;
        match self.bias {
            Some(b) => {
                let b = pass.param(b);
                pass.graph.add_row(y, b).at(&self.name)
            }
            None => Ok(y),
        }
    }
}

/// Gated linear unit `sigmoid(x W_g + b_g) * (x W_v + b_v)`.
#[derive(Clone, Debug)]
pub struct Glu {
    value: Linear,
    gate: Linear,
}

impl Glu {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        Glu {
            value: Linear::new(store, &format!("{name}.value"), in_dim, out_dim, true, rng),
            gate: Linear::new(store, &format!("{name}.gate"), in_dim, out_dim, true, rng),
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var, ForwardError> {
        let v = self.value.forward(pass, x)?;
        let g = self.gate.forward(pass, x)?;
        let g = pass.graph.sigmoid(g);
        pass.graph.mul(g, v).at(&self.gate.name)
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    name: String,
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            name: name.to_string(),
            gamma: store.ones(format!("{name}.gamma"), dim),
            beta: store.zeros(format!("{name}.beta"), dim),
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var, ForwardError> {
        let g = pass.param(self.gamma);
        let b = pass.param(self.beta);
        pass.graph.layer_norm(x, g, b).at(&self.name)
    }
}

/// `LayerNorm(residual + GLU(dropout(x)))`.
#[derive(Clone, Debug)]
pub struct GateAddNorm {
    name: String,
    glu: Glu,
    norm: LayerNorm,
}

impl GateAddNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        GateAddNorm {
            name: name.to_string(),
            glu: Glu::new(store, &format!("{name}.glu"), in_dim, out_dim, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), out_dim),
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var, residual: Var) -> Result<Var, ForwardError> {
        let x = pass.dropout(x).at(&self.name)?;
        let gated = self.glu.forward(pass, x)?;
        let sum = pass.graph.add(gated, residual).at(&self.name)?;
        self.norm.forward(pass, sum)
    }
}
