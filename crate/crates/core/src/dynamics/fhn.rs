use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{lhs_sample, DynamicsError};
use crate::data::{RawDataset, RawGroup};

/// Admissible parameter box.
pub const EPS_RANGE: (f64, f64) = (0.01, 0.04);
pub const C_RANGE: (f64, f64) = (0.025, 0.075);

/// Stimulus current applied at the left boundary.
pub fn input_current(t: f64) -> f64 {
    5e4 * t.powi(3) * (-15.0 * t).exp()
}

/// Cubic reaction term `v (v - 0.1) (1 - v)`.
pub fn fhn_reaction(v: f64) -> f64 {
    v * (v - 0.1) * (1.0 - v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FhnConfig {
    pub eps_range: (f64, f64),
    pub c_range: (f64, f64),
    pub b: f64,
    pub gamma: f64,
    pub n_x: usize,
    /// Saved time steps, including t = 0.
    pub n_steps: usize,
    pub dt: f64,
    pub substeps: usize,
    pub n_groups: usize,
    pub seed: u64,
}

impl Default for FhnConfig {
    fn default() -> Self {
        FhnConfig {
            eps_range: EPS_RANGE,
            c_range: C_RANGE,
            b: 0.5,
            gamma: 2.0,
            n_x: 512,
            n_steps: 500,
            dt: 0.01,
            substeps: 10,
            n_groups: 126,
            seed: 0,
        }
    }
}

impl FhnConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let inside = |(lo, hi): (f64, f64), (min, max): (f64, f64)| lo <= hi && lo >= min && hi <= max;
        if !inside(self.eps_range, EPS_RANGE) {
            return Err(DynamicsError::Config(format!(
                "eps range [{}, {}] must lie within [{}, {}]",
                self.eps_range.0, self.eps_range.1, EPS_RANGE.0, EPS_RANGE.1
            )));
        }
        if !inside(self.c_range, C_RANGE) {
            return Err(DynamicsError::Config(format!(
                "c range [{}, {}] must lie within [{}, {}]",
                self.c_range.0, self.c_range.1, C_RANGE.0, C_RANGE.1
            )));
        }
        if self.n_x < 32 {
            return Err(DynamicsError::Config(format!("n_x must be at least 32, got {}", self.n_x)));
        }
        if self.n_steps < 2 || self.substeps == 0 || !(self.dt > 0.0) {
            return Err(DynamicsError::Config(format!(
                "need n_T >= 2, substeps >= 1 and dt > 0 (got {}, {}, {})",
                self.n_steps, self.substeps, self.dt
            )));
        }
        if self.n_groups == 0 {
            return Err(DynamicsError::Config("n_p must be at least 1".into()));
        }
        Ok(())
    }
}

/// Method-of-lines solver on `[0, 1]` with `n_x` nodes. Diffusion of `v` is
/// treated with Crank-Nicolson, the reaction terms explicitly; Neumann
/// conditions enter through ghost nodes.
#[derive(Clone, Debug)]
pub struct FhnSolver {
    pub eps: f64,
    pub c: f64,
    pub b: f64,
    pub gamma: f64,
    pub n_x: usize,
    v: Vec<f64>,
    w: Vec<f64>,
    t: f64,
}

impl FhnSolver {
    pub fn new(eps: f64, c: f64, b: f64, gamma: f64, n_x: usize) -> Self {
        FhnSolver {
            eps,
            c,
            b,
            gamma,
            n_x,
            v: vec![0.0; n_x],
            w: vec![0.0; n_x],
            t: 0.0,
        }
    }

    /// Values at the left boundary.
    pub fn boundary(&self) -> (f64, f64) {
        (self.v[0], self.w[0])
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Advances by `n` steps of size `k`.
    pub fn advance(&mut self, k: f64, n: usize) -> Result<(), DynamicsError> {
        let m = self.n_x;
        let h = 1.0 / (m - 1) as f64;
        let r = k / (2.0 * h * h);
        // Tridiagonal system (I - k/2 L) with the ghost-node rows folded in.
        let diag = vec![1.0 + 2.0 * r; m];
        let mut lower = vec![-r; m];
        let mut upper = vec![-r; m];
        upper[0] = -2.0 * r;
        lower[m - 1] = -2.0 * r;
        let mut rhs = vec![0.0; m];
        let mut scratch = vec![0.0; m];
        for _ in 0..n {
            let (v, w) = (&self.v, &self.w);
            for j in 0..m {
                let left = if j == 0 { v[1] } else { v[j - 1] };
                let right = if j == m - 1 { v[m - 2] } else { v[j + 1] };
                let lap = left - 2.0 * v[j] + right;
                let react = (fhn_reaction(v[j]) - w[j] + self.c) / self.eps;
                rhs[j] = v[j] + r * lap + k * react;
            }
            // Boundary flux -i0 at x = 0, averaged over the step.
            let flux = input_current(self.t) + input_current(self.t + k);
            rhs[0] += r * 2.0 * h * flux;
            for j in 0..m {
                self.w[j] += k * (self.b * self.v[j] - self.gamma * self.w[j] + self.c);
            }
            solve_tridiagonal(&lower, &diag, &upper, &mut rhs, &mut scratch);
            std::mem::swap(&mut self.v, &mut rhs);
            self.t += k;
            if !self.v[0].is_finite() || self.v.iter().any(|x| x.abs() > 1e6) {
                return Err(DynamicsError::Diverged {
                    eps: self.eps,
                    c: self.c,
                    time: self.t,
                });
            }
        }
        Ok(())
    }

    /// Boundary values at `n_steps` instants spaced `dt` apart, starting at
    /// t = 0, each step split into `substeps` internal steps.
    pub fn run(&mut self, n_steps: usize, dt: f64, substeps: usize) -> Result<Vec<(f64, f64)>, DynamicsError> {
        let mut out = Vec::with_capacity(n_steps);
        for i in 0..n_steps {
            if i > 0 {
                self.advance(dt / substeps as f64, substeps)?;
            }
            out.push(self.boundary());
        }
        Ok(out)
    }
}

/// Thomas algorithm; `d` holds the right-hand side on entry and the solution
/// on exit.
fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], d: &mut [f64], cp: &mut [f64]) {
    let n = d.len();
    cp[0] = c[0] / b[0];
    d[0] /= b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = if i + 1 < n { c[i] / m } else { 0.0 };
        d[i] = (d[i] - a[i] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= cp[i] * d[i + 1];
    }
}

/// Boundary outputs `(v(0,t), w(0,t))` with `u = i0(t)` and parameters
/// `(eps, c)` drawn by Latin hypercube sampling; group ids count from 1.
pub fn fhn_generate(cfg: &FhnConfig) -> Result<RawDataset, DynamicsError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = lhs_sample(&[cfg.eps_range, cfg.c_range], cfg.n_groups, &mut rng);
    let times: Vec<f64> = (0..cfg.n_steps).map(|i| i as f64 * cfg.dt).collect();
    let groups = samples
        .par_iter()
        .enumerate()
        .map(|(g, mu)| {
            let mut solver = FhnSolver::new(mu[0], mu[1], cfg.b, cfg.gamma, cfg.n_x);
            let out = solver.run(cfg.n_steps, cfg.dt, cfg.substeps)?;
            Ok(RawGroup {
                group_id: g as u64 + 1,
                mu: mu.clone(),
                times: times.clone(),
                u: times.iter().map(|&t| vec![input_current(t)]).collect(),
                y: out.into_iter().map(|(v, w)| vec![v, w]).collect(),
            })
        })
        .collect::<Result<Vec<_>, DynamicsError>>()?;
    Ok(RawDataset {
        n_inputs: 1,
        n_params: 2,
        n_outputs: 2,
        groups,
    })
}
