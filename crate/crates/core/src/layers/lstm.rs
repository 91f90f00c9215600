use rand::RngCore;

use super::{AtStage, ForwardError, Pass};
use crate::autodiff::{ParamId, ParamStore, Tensor, Var};

/// Single-layer LSTM with hidden size equal to its input size.
///
/// Each gate has a `(2d) x d` matrix acting on `[x_t, h_{t-1}]` and a bias.
/// Gate order: input, forget, cell candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    name: String,
    pub gate_weights: [ParamId; 4],
    pub gate_biases: [ParamId; 4],
    pub dim: usize,
}

/// Hidden and cell state, each `1 x d`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl Lstm {
    pub const GATES: [&'static str; 4] = ["input", "forget", "cell", "output"];

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut dyn RngCore) -> Self {
        let gate_weights =
            Self::GATES.map(|g| store.uniform(format!("{name}.{g}.weight"), 2 * dim, dim, rng));
        let gate_biases = Self::GATES.map(|g| {
            store.insert(format!("{name}.{g}.bias"), Tensor::zeros(&[1, dim]))
        });
        Lstm {
            name: name.to_string(),
            gate_weights,
            gate_biases,
            dim,
        }
    }

    /// Runs the recurrence over the rows of `x` (`T x d`) starting from
    /// `init`. Returns the stacked hidden states (`T x d`) and the final state.
    pub fn run(
        &self,
        pass: &mut Pass,
        x: Var,
        init: LstmState,
    ) -> Result<(Var, LstmState), ForwardError> {
        let d = self.dim;
        let stage = self.name.as_str();
        let steps = pass.graph.shape(x).first().copied().unwrap_or(0);
        if steps == 0 {
            return Err(ForwardError::Config(format!("{stage}: empty input sequence")));
        }
        let ws: Vec<Var> = self.gate_weights.iter().map(|&w| pass.param(w)).collect();
        let bs: Vec<Var> = self.gate_biases.iter().map(|&b| pass.param(b)).collect();
        let g = &mut *pass.graph;
        let w = g.concat(&ws, 1).at(stage)?;
        let b = g.concat(&bs, 1).at(stage)?;
        let w_x = g.slice(w, 0, 0, d).at(stage)?;
        let w_h = g.slice(w, 0, d, 2 * d).at(stage)?;
        // Input contributions for every step in one product.
        let xw = g.matmul(x, w_x).at(stage)?;
        let xw = g.add_row(xw, b).at(stage)?;

        let mut state = init;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let zx = g.slice(xw, 0, t, t + 1).at(stage)?;
            let zh = g.matmul(state.hidden, w_h).at(stage)?;
            let z = g.add(zx, zh).at(stage)?;
            let zi = g.slice(z, 1, 0, d).at(stage)?;
            let zf = g.slice(z, 1, d, 2 * d).at(stage)?;
            let zg = g.slice(z, 1, 2 * d, 3 * d).at(stage)?;
            let zo = g.slice(z, 1, 3 * d, 4 * d).at(stage)?;
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let cand = g.tanh(zg);
            let o = g.sigmoid(zo);
            let keep = g.mul(f, state.cell).at(stage)?;
            let write = g.mul(i, cand).at(stage)?;
            let cell = g.add(keep, write).at(stage)?;
            let tc = g.tanh(cell);
            let hidden = g.mul(o, tc).at(stage)?;
            outputs.push(hidden);
            state = LstmState { hidden, cell };
        }
        let out = g.concat(&outputs, 0).at(stage)?;
        Ok((out, state))
    }
}

/// Encodes the past rows with `encoder`, then continues from its final state
/// over the future rows with `decoder`. The output stacks both sequences
/// (`(past + future) x d`).
pub fn lstm_encode_decode(
    pass: &mut Pass,
    encoder: &Lstm,
    decoder: &Lstm,
    past: Var,
    future: Var,
    init: LstmState,
) -> Result<Var, ForwardError> {
    let d = encoder.dim;
    for (part, v) in [("past", past), ("future", future)] {
        let shape = pass.graph.shape(v);
        if shape.len() != 2 || shape[1] != d {
            return Err(ForwardError::Config(format!(
                "lstm: {part} embeddings have shape {shape:?}, expected [_, {d}]"
            )));
        }
    }
    let (enc, state) = encoder.run(pass, past, init)?;
    let (dec, _) = decoder.run(pass, future, state)?;
    pass.graph.concat(&[enc, dec], 0).at("lstm")
}
