//! Central finite-difference gradient checking.

use super::{Graph, Tensor, TensorError, Var};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_above(analytic, numeric, REL_FLOOR)
}

/// `|a - n| / max(|a|, |n|, floor)`: values below `floor` are compared in
/// absolute terms scaled by `floor`.
pub fn relative_error_above(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        self.record_above(input, elem, analytic, numeric, REL_FLOOR);
    }

    pub fn record_above(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error_above(analytic, numeric, floor);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((input, elem, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`.
///
/// `f` receives one gradient-tracking leaf per entry of `inputs`. When
/// `entries` is `None` every element of every input is checked.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    h: f64,
    entries: Option<&[(usize, usize)]>,
    mut f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let all: Vec<(usize, usize)>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for &(i, j) in entries {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let up = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let down = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        report.record(i, j, analytic[i].data()[j], numeric);
    }
    Ok(report)
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;

/// Finite-difference checks of every differentiable graph operation on
/// random inputs drawn from `seed`, each reduced to a scalar through a fixed
/// random weighting so every output element contributes.
pub fn op_suite(seed: u64, h: f64) -> Result<Vec<(&'static str, GradCheckReport)>, TensorError> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let inputs = [
        random(&[3, 5])?,
        random(&[3, 5])?,
        random(&[5])?,
        random(&[3, 1])?,
        random(&[5])?,
        random(&[5])?,
        random(&[5, 4])?,
        random(&[6, 6])?,
    ];
    let weights: Vec<Tensor> = (0..4)
        .map(|_| random(&[36]))
        .collect::<Result<_, _>>()?;

    let cases: Vec<(&'static str, Build)> = vec![
        ("matmul", |g, v| g.matmul(v[0], v[6])),
        ("add", |g, v| g.add(v[0], v[1])),
        ("sub", |g, v| g.sub(v[0], v[1])),
        ("mul", |g, v| g.mul(v[0], v[1])),
        ("add_row", |g, v| g.add_row(v[0], v[2])),
        ("scale_rows", |g, v| g.scale_rows(v[0], v[3])),
        ("scale", |g, v| Ok(g.scale(v[0], -2.5))),
        ("sigmoid", |g, v| Ok(g.sigmoid(v[0]))),
        ("tanh", |g, v| Ok(g.tanh(v[0]))),
        ("elu", |g, v| Ok(g.elu(v[0]))),
        ("abs", |g, v| Ok(g.abs(v[0]))),
        ("layer_norm", |g, v| g.layer_norm(v[0], v[4], v[5])),
        ("concat_rows", |g, v| g.concat(&[v[0], v[1]], 0)),
        ("concat_cols", |g, v| g.concat(&[v[0], v[3], v[1]], 1)),
        ("slice_rows", |g, v| g.slice(v[0], 0, 1, 3)),
        ("slice_cols", |g, v| g.slice(v[1], 1, 2, 5)),
        ("transpose", |g, v| g.transpose(v[0])),
        ("softmax", |g, v| g.softmax(v[1])),
        ("masked_softmax", |g, v| {
            let allowed: Vec<bool> = (0..36).map(|i| i % 6 <= (i / 6) / 2 * 2 + 1).collect();
            g.masked_softmax(v[7], &allowed)
        }),
        ("row_norm", |g, v| Ok(g.row_norm(v[0]))),
        ("dropout", |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            g.dropout(v[0], 0.7, true, &mut r)
        }),
        ("sum", |g, v| Ok(g.sum(v[1]))),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, build) in cases {
        let rep = check_gradients(&inputs, h, None, |g, v| {
            let y = build(g, v)?;
            let n = g.value(y).len();
            let w = Tensor::new(g.shape(y).to_vec(), weights[n % 4].data()[..n].to_vec())?;
            let w = g.constant(w);
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        })?;
        out.push((name, rep));
    }
    Ok(out)
}
