use serde::{Deserialize, Serialize};

use super::{DataError, RawDataset};

/// Affine map `x -> (x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    pub const IDENTITY: ColumnStats = ColumnStats { mean: 0.0, std: 1.0 };

    /// Population statistics; a (numerically) constant column maps to the
    /// identity so it passes through unchanged.
    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> ColumnStats {
        let n = values.clone().count();
        if n == 0 {
            return Self::IDENTITY;
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            Self::IDENTITY
        } else {
            ColumnStats { mean, std }
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Per-column statistics: each known input, each parameter, and each output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub u: Vec<ColumnStats>,
    pub mu: Vec<ColumnStats>,
    pub y: Vec<ColumnStats>,
}

impl NormStats {
    /// Statistics of the given (training) groups.
    pub fn fit(train: &RawDataset) -> Result<NormStats, DataError> {
        if train.groups.is_empty() {
            return Err(DataError::Empty);
        }
        let g = &train.groups;
        Ok(NormStats {
            u: (0..train.n_inputs)
                .map(|i| ColumnStats::fit(g.iter().flat_map(move |g| g.u.iter().map(move |r| r[i]))))
                .collect(),
            mu: (0..train.n_params)
                .map(|j| ColumnStats::fit(g.iter().map(move |g| g.mu[j])))
                .collect(),
            y: (0..train.n_outputs)
                .map(|k| ColumnStats::fit(g.iter().flat_map(move |g| g.y.iter().map(move |r| r[k]))))
                .collect(),
        })
    }

    pub fn identity(n_inputs: usize, n_params: usize, n_outputs: usize) -> NormStats {
        NormStats {
            u: vec![ColumnStats::IDENTITY; n_inputs],
            mu: vec![ColumnStats::IDENTITY; n_params],
            y: vec![ColumnStats::IDENTITY; n_outputs],
        }
    }

    fn check(&self, d: &RawDataset) -> Result<(), DataError> {
        if (self.u.len(), self.mu.len(), self.y.len()) != (d.n_inputs, d.n_params, d.n_outputs) {
            return Err(DataError::BadHeader(format!(
                "normalization covers {} inputs, {} parameters, {} outputs but the data has {}, {}, {}",
                self.u.len(),
                self.mu.len(),
                self.y.len(),
                d.n_inputs,
                d.n_params,
                d.n_outputs
            )));
        }
        Ok(())
    }

    fn map(&self, d: &RawDataset, f: fn(&ColumnStats, f64) -> f64) -> Result<RawDataset, DataError> {
        self.check(d)?;
        let mut out = d.clone();
        for g in &mut out.groups {
            for (v, s) in g.mu.iter_mut().zip(&self.mu) {
                *v = f(s, *v);
            }
            for row in &mut g.u {
                for (v, s) in row.iter_mut().zip(&self.u) {
                    *v = f(s, *v);
                }
            }
            for row in &mut g.y {
                for (v, s) in row.iter_mut().zip(&self.y) {
                    *v = f(s, *v);
                }
            }
        }
        Ok(out)
    }

    pub fn normalize(&self, d: &RawDataset) -> Result<RawDataset, DataError> {
        self.map(d, ColumnStats::apply)
    }

    pub fn denormalize(&self, d: &RawDataset) -> Result<RawDataset, DataError> {
        self.map(d, ColumnStats::invert)
    }

    /// Restores output `k` (0-based) to original units.
    pub fn denormalize_y(&self, k: usize, v: f64) -> f64 {
        self.y[k].invert(v)
    }
}
