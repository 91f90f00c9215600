use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::DynamicsError;
use crate::data::{RawDataset, RawGroup};

#[derive(Clone, Debug, PartialEq)]
pub struct Lorenz63Config {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    /// Saved time steps per trajectory, including the initial state.
    pub n_steps: usize,
    pub n_groups: usize,
    pub seed: u64,
}

impl Default for Lorenz63Config {
    fn default() -> Self {
        Lorenz63Config {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            n_steps: 256,
            n_groups: 64,
            seed: 0,
        }
    }
}

impl Lorenz63Config {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_steps < 2 {
            return Err(DynamicsError::Config(format!("n_T must be at least 2, got {}", self.n_steps)));
        }
        if self.n_groups == 0 {
            return Err(DynamicsError::Config("n_p must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn lorenz_rhs(cfg: &Lorenz63Config, y: [f64; 3]) -> [f64; 3] {
    [
        cfg.sigma * (y[1] - y[0]),
        y[0] * (cfg.rho - y[2]) - y[1],
        y[0] * y[1] - cfg.beta * y[2],
    ]
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step(cfg: &Lorenz63Config, y: [f64; 3], dt: f64) -> [f64; 3] {
    let shift = |y: [f64; 3], k: [f64; 3], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
    let k1 = lorenz_rhs(cfg, y);
    let k2 = lorenz_rhs(cfg, shift(y, k1, dt / 2.0));
    let k3 = lorenz_rhs(cfg, shift(y, k2, dt / 2.0));
    let k4 = lorenz_rhs(cfg, shift(y, k3, dt));
    std::array::from_fn(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// `n_steps` states spaced `cfg.dt` apart, starting with `y0`.
pub fn lorenz_trajectory(cfg: &Lorenz63Config, y0: [f64; 3], n_steps: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n_steps);
    let mut y = y0;
    for _ in 0..n_steps {
        out.push(y);
        y = rk4_step(cfg, y, cfg.dt);
    }
    out
}

/// Trajectories from random initial states; group ids count from 1.
pub fn lorenz_generate(cfg: &Lorenz63Config) -> Result<RawDataset, DynamicsError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial: Vec<[f64; 3]> = (0..cfg.n_groups)
        .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(10.0..40.0)])
        .collect();
    let groups = initial
        .par_iter()
        .enumerate()
        .map(|(g, &y0)| {
            let traj = lorenz_trajectory(cfg, y0, cfg.n_steps);
            if traj.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DynamicsError::Config(format!("trajectory {} is not finite; reduce dt", g + 1)));
            }
            Ok(RawGroup {
                group_id: g as u64 + 1,
                mu: vec![],
                times: (0..cfg.n_steps).map(|i| i as f64 * cfg.dt).collect(),
                u: vec![vec![]; cfg.n_steps],
                y: traj.into_iter().map(|s| s.to_vec()).collect(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RawDataset {
        n_inputs: 0,
        n_params: 0,
        n_outputs: 3,
        groups,
    })
}
