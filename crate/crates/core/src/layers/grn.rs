use rand::RngCore;

use super::{AtStage, ForwardError, GateAddNorm, Linear, Pass};
use crate::autodiff::{ParamStore, Var};

/// Gated residual network.
///
/// ```text
/// h   = ELU(x W1 + b1 + c Wc)
/// out = LayerNorm(skip(x) + GLU(dropout(h W2 + b2)))
/// ```
///
/// `skip` is the identity when `in_dim == out_dim` and a linear adapter
/// otherwise. The context projection exists only when requested at
/// construction.
#[derive(Clone, Debug)]
pub struct Grn {
    name: String,
    fc1: Linear,
    context: Option<Linear>,
    fc2: Linear,
    gate: GateAddNorm,
    skip: Option<Linear>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Grn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        with_context: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng);
        let context = with_context
            .then(|| Linear::new(store, &format!("{name}.context"), hidden, hidden, false, rng));
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, hidden, true, rng);
        let gate = GateAddNorm::new(store, &format!("{name}.gate"), hidden, out_dim, rng);
        let skip = (in_dim != out_dim)
            .then(|| Linear::new(store, &format!("{name}.skip"), in_dim, out_dim, true, rng));
        Grn {
            name: name.to_string(),
            fc1,
            context,
            fc2,
            gate,
            skip,
            in_dim,
            out_dim,
        }
    }

    pub fn has_context(&self) -> bool {
        self.context.is_some()
    }

    pub fn has_skip_adapter(&self) -> bool {
        self.skip.is_some()
    }

    /// `x` is `rows x in_dim`; `context`, when given, is one row of `hidden`
    /// values added to every row.
    pub fn forward(
        &self,
        pass: &mut Pass,
        x: Var,
        context: Option<Var>,
    ) -> Result<Var, ForwardError> {
        let mut h = self.fc1.forward(pass, x)?;
        match (context, &self.context) {
            (Some(c), Some(proj)) => {
                let c = proj.forward(pass, c)?;
                h = pass.graph.add_row(h, c).at(&self.name)?;
            }
            (Some(_), None) => return Err(ForwardError::UnexpectedContext(self.name.clone())),
            (None, _) => {}
        }
        let h = pass.graph.elu(h);
        let h = self.fc2.forward(pass, h)?;
        let residual = match &self.skip {
            Some(skip) => skip.forward(pass, x)?,
            None => x,
        };
        self.gate.forward(pass, h, residual)
    }
}
