use rand::RngCore;

use super::{AtStage, ForwardError, Grn, Pass};
use crate::autodiff::{ParamStore, Tensor, Var};

/// Per-row soft selection over a fixed set of embedded variables.
///
/// Each variable passes through its own GRN; a GRN over the concatenated
/// embeddings yields one logit per variable, and the softmax of those logits
/// weights the per-variable outputs. With a single variable no selector is
/// built and the weight is exactly 1.
#[derive(Clone, Debug)]
pub struct VariableSelection {
    name: String,
    per_variable: Vec<Grn>,
    selector: Option<Grn>,
    pub dim: usize,
}

impl VariableSelection {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_vars: usize,
        dim: usize,
        with_context: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let per_variable = (0..n_vars)
            .map(|i| Grn::new(store, &format!("{name}.var{i}"), dim, dim, dim, false, rng))
            .collect();
        let selector = (n_vars > 1).then(|| {
            Grn::new(
                store,
                &format!("{name}.selector"),
                n_vars * dim,
                dim,
                n_vars,
                with_context,
                rng,
            )
        });
        VariableSelection {
            name: name.to_string(),
            per_variable,
            selector,
            dim,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.per_variable.len()
    }

    /// `embeddings[i]` is `rows x dim` for variable `i`. Returns the weighted
    /// combination (`rows x dim`) and the selection weights (`rows x n_vars`).
    pub fn forward(
        &self,
        pass: &mut Pass,
        embeddings: &[Var],
        context: Option<Var>,
    ) -> Result<(Var, Var), ForwardError> {
        if embeddings.is_empty() {
            return Err(ForwardError::NoVariables(self.name.clone()));
        }
        if embeddings.len() != self.n_vars() {
            return Err(ForwardError::VariableCount {
                stage: self.name.clone(),
                expected: self.n_vars(),
                got: embeddings.len(),
            });
        }
        let stage = self.name.as_str();
        let rows = pass.graph.shape(embeddings[0])[0];
        let processed = self
            .per_variable
            .iter()
            .zip(embeddings)
            .map(|(grn, &e)| grn.forward(pass, e, None))
            .collect::<Result<Vec<_>, _>>()?;

        let Some(selector) = &self.selector else {
            let ones = pass.graph.constant(Tensor::full(&[rows, 1], 1.0));
            return Ok((processed[0], ones));
        };
        let flat = pass.graph.concat(embeddings, 1).at(stage)?;
        let context = if selector.has_context() { context } else { None };
        let logits = selector.forward(pass, flat, context)?;
        let weights = pass.graph.softmax(logits).at(stage)?;

        let mut combined = None;
        for (i, &p) in processed.iter().enumerate() {
            let w = pass.graph.slice(weights, 1, i, i + 1).at(stage)?;
            let term = pass.graph.scale_rows(p, w).at(stage)?;
            combined = Some(match combined {
                None => term,
                Some(acc) => pass.graph.add(acc, term).at(stage)?,
            });
        }
        Ok((combined.expect("at least two variables"), weights))
    }
}

/// Context vectors derived from the static covariates, each `1 x d`.
#[derive(Clone, Copy, Debug)]
pub struct StaticContexts {
    pub selection: Var,
    pub cell: Var,
    pub hidden: Var,
    pub enrichment: Var,
}

/// Selects among the embedded static covariates and encodes the result into
/// the four context vectors used downstream.
#[derive(Clone, Debug)]
pub struct StaticEncoders {
    pub selection: VariableSelection,
    encoders: [Grn; 4],
}

impl StaticEncoders {
    pub fn new(store: &mut ParamStore, name: &str, n_params: usize, dim: usize, rng: &mut dyn RngCore) -> Self {
        let selection =
            VariableSelection::new(store, &format!("{name}.select"), n_params, dim, false, rng);
        let encoders = ["selection", "cell", "hidden", "enrichment"]
            .map(|k| Grn::new(store, &format!("{name}.{k}"), dim, dim, dim, false, rng));
        StaticEncoders { selection, encoders }
    }

    /// `embeddings[i]` is the `1 x d` embedding of parameter `i`. Returns the
    /// contexts and the `1 x p` selection weights.
    pub fn forward(
        &self,
        pass: &mut Pass,
        embeddings: &[Var],
    ) -> Result<(StaticContexts, Var), ForwardError> {
        let (encoded, weights) = self.selection.forward(pass, embeddings, None)?;
        let [s, c, h, e] = &self.encoders;
        let contexts = StaticContexts {
            selection: s.forward(pass, encoded, None)?,
            cell: c.forward(pass, encoded, None)?,
            hidden: h.forward(pass, encoded, None)?,
            enrichment: e.forward(pass, encoded, None)?,
        };
        Ok((contexts, weights))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{check_gradients, Graph};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_variable_weight_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let vs = VariableSelection::new(&mut store, "vs", 1, 4, true, &mut rng);
        assert!(store.id("vs.selector.fc1.weight").is_none());
        let mut g = Graph::new();
        let e = g.constant(random(3, 4, &mut rng));
        let mut pass = Pass::new(&mut g, &store, false, 0.0, &mut rng);
        let (_, w) = vs.forward(&mut pass, &[e], None).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn identical_variables_with_symmetric_weights_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let vs = VariableSelection::new(&mut store, "vs", 2, 4, false, &mut rng);
        // Symmetric selector: every parameter feeding the two logits is identical.
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            if name.starts_with("vs.selector") {
                let t = store.get_mut(id);
                let (rows, cols) = t.dims2();
                for r in 0..rows {
                    for c in 0..cols {
                        t.data_mut()[r * cols + c] = if name.ends_with("gamma") {
                            1.0
                        } else {
                            0.1 * ((r % 4) as f64 - 1.5)
                        };
                    }
                }
            }
        }
        let emb = random(5, 4, &mut rng);
        let mut g = Graph::new();
        let a = g.constant(emb.clone());
        let b = g.constant(emb);
        let mut pass = Pass::new(&mut g, &store, false, 0.0, &mut rng);
        let (_, w) = vs.forward(&mut pass, &[a, b], None).unwrap();
        for v in g.value(w).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_and_wrong_variable_lists_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let vs = VariableSelection::new(&mut store, "vs", 2, 4, false, &mut rng);
        let mut g = Graph::new();
        let e = g.constant(random(1, 4, &mut rng));
        let mut pass = Pass::new(&mut g, &store, false, 0.0, &mut rng);
        assert_eq!(
            vs.forward(&mut pass, &[], None).unwrap_err(),
            ForwardError::NoVariables("vs".into())
        );
        assert!(matches!(
            vs.forward(&mut pass, &[e], None).unwrap_err(),
            ForwardError::VariableCount { expected: 2, got: 1, .. }
        ));
    }

    #[test]
    fn static_encoders_emit_four_d_model_contexts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = StaticEncoders::new(&mut store, "static", 2, 6, &mut rng);
        let mut g = Graph::new();
        let e1 = g.constant(random(1, 6, &mut rng));
        let e2 = g.constant(random(1, 6, &mut rng));
        let mut pass = Pass::new(&mut g, &store, false, 0.0, &mut rng);
        let (ctx, w) = enc.forward(&mut pass, &[e1, e2]).unwrap();
        for v in [ctx.selection, ctx.cell, ctx.hidden, ctx.enrichment] {
            assert_eq!(g.shape(v), &[1, 6]);
        }
        let total: f64 = g.value(w).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let vs = VariableSelection::new(&mut store, "vs", 3, 4, true, &mut rng);
        let inputs = [
            random(2, 4, &mut rng),
            random(2, 4, &mut rng),
            random(2, 4, &mut rng),
            random(1, 4, &mut rng),
        ];
        let rep = check_gradients(&inputs, 1e-5, None, |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut pass = Pass::new(g, &store, false, 0.0, &mut r);
            let (out, w) = vs.forward(&mut pass, &v[..3], Some(v[3])).expect("select");
            let a = g.mul(out, out)?;
            let a = g.sum(a);
            let w2 = g.mul(w, w)?;
            let b = g.sum(w2);
            g.add(a, b)
        })
        .unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn weights_are_a_distribution(n_vars in 1usize..5, rows in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let vs = VariableSelection::new(&mut store, "vs", n_vars, 4, false, &mut rng);
            let mut g = Graph::new();
            let embs: Vec<Var> = (0..n_vars).map(|_| g.constant(random(rows, 4, &mut rng))).collect();
            let mut pass = Pass::new(&mut g, &store, false, 0.0, &mut rng);
            let (_, w) = vs.forward(&mut pass, &embs, None).unwrap();
            for r in 0..rows {
                let row = g.value(w).row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
