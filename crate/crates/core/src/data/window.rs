use super::{DataError, RawDataset, RawGroup, ReshapedRow};

/// Past length `n_k`, horizon `n_tau` and number of windows per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub n_k: usize,
    pub n_tau: usize,
    pub n_omega: usize,
}

impl WindowSpec {
    pub fn n_t(&self) -> usize {
        self.n_k + self.n_tau
    }

    /// `n_omega` evenly spaced windows from every group.
    pub fn windows(&self, d: &RawDataset) -> Result<Vec<Window>, DataError> {
        let starts = window_starts(d.n_steps(), self.n_t(), self.n_omega)?;
        self.windows_at(d, &starts)
    }

    /// Windows beginning at the given 0-based time indices of every group.
    pub fn windows_at(&self, d: &RawDataset, starts: &[usize]) -> Result<Vec<Window>, DataError> {
        if self.n_k == 0 || self.n_tau == 0 {
            return Err(DataError::Window(format!(
                "n_k and n_tau must be at least 1, got n_k={}, n_tau={}",
                self.n_k, self.n_tau
            )));
        }
        let n_t = self.n_t();
        if let Some(&s) = starts.iter().find(|&&s| s + n_t > d.n_steps()) {
            return Err(DataError::Window(format!(
                "a window of {n_t} steps starting at index {s} exceeds the {} available steps",
                d.n_steps()
            )));
        }
        Ok(d.groups
            .iter()
            .flat_map(|g| starts.iter().map(move |&s| Window::from_group(g, s, self.n_k, n_t)))
            .collect())
    }
}

/// 0-based start indices of `n_omega` windows of length `n_t`, evenly spaced
/// so the first starts at 0 and the last at `n_steps - n_t`.
pub fn window_starts(n_steps: usize, n_t: usize, n_omega: usize) -> Result<Vec<usize>, DataError> {
    if n_omega == 0 {
        return Err(DataError::Window("n_omega must be at least 1".into()));
    }
    if n_t == 0 || n_t > n_steps {
        return Err(DataError::Window(format!(
            "window length {n_t} does not fit in {n_steps} time steps"
        )));
    }
    let span = n_steps - n_t;
    if n_omega > span + 1 {
        return Err(DataError::Window(format!(
            "{n_omega} distinct windows of length {n_t} do not fit in {n_steps} time steps (at most {})",
            span + 1
        )));
    }
    if n_omega == 1 {
        return Ok(vec![0]);
    }
    let gaps = n_omega - 1;
    Ok((0..n_omega).map(|k| (2 * k * span + gaps) / (2 * gaps)).collect())
}

/// A contiguous slice of one group: the first `n_k` steps are observed, the
/// remaining `n_tau` steps are forecast targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub group_id: u64,
    /// 0-based index of the first step within the group.
    pub start: usize,
    pub n_k: usize,
    pub mu: Vec<f64>,
    pub times: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl Window {
    fn from_group(g: &RawGroup, start: usize, n_k: usize, n_t: usize) -> Window {
        let end = start + n_t;
        Window {
            group_id: g.group_id,
            start,
            n_k,
            mu: g.mu.clone(),
            times: g.times[start..end].to_vec(),
            u: g.u[start..end].to_vec(),
            y: g.y[start..end].to_vec(),
        }
    }

    pub fn n_t(&self) -> usize {
        self.times.len()
    }

    pub fn n_tau(&self) -> usize {
        self.n_t() - self.n_k
    }

    pub fn n_outputs(&self) -> usize {
        self.y.first().map_or(0, Vec::len)
    }

    /// Targets in reshaped order: future step-major, then output.
    pub fn targets(&self) -> Vec<f64> {
        self.y[self.n_k..].iter().flatten().copied().collect()
    }

    /// The window in the reshaped layout, `n_t * n_o` rows.
    pub fn rows(&self) -> Vec<ReshapedRow> {
        let mut rows = Vec::with_capacity(self.n_t() * self.n_outputs());
        for (i, y) in self.y.iter().enumerate() {
            for (k, &v) in y.iter().enumerate() {
                rows.push(ReshapedRow {
                    row_id: rows.len() as u64 + 1,
                    group_id: self.group_id,
                    time: self.times[i],
                    u: self.u[i].clone(),
                    mu: self.mu.clone(),
                    output_id: k + 1,
                    y: v,
                });
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawGroup;

    fn dataset(n_groups: u64, n_steps: usize, n_o: usize) -> RawDataset {
        RawDataset {
            n_inputs: 1,
            n_params: 1,
            n_outputs: n_o,
            groups: (0..n_groups)
                .map(|g| RawGroup {
                    group_id: g,
                    mu: vec![g as f64],
                    times: (0..n_steps).map(|i| i as f64).collect(),
                    u: (0..n_steps).map(|i| vec![i as f64 * 0.5]).collect(),
                    y: (0..n_steps)
                        .map(|i| (0..n_o).map(|k| (g * 1000) as f64 + (i * 10 + k) as f64).collect())
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn eight_windows_over_256_steps() {
        let s = window_starts(256, 128, 8).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!((s[0], s[7]), (0, 128));
        let gaps: Vec<usize> = s.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().all(|&g| g == 18 || g == 19), "{gaps:?}");
    }

    #[test]
    fn single_window_starts_at_first_step() {
        assert_eq!(window_starts(50, 10, 1).unwrap(), vec![0]);
    }

    #[test]
    fn unrealizable_requests_are_rejected() {
        assert!(window_starts(10, 11, 1).is_err());
        assert!(window_starts(10, 8, 4).is_err());
        assert_eq!(window_starts(10, 8, 3).unwrap(), vec![0, 1, 2]);
        assert!(window_starts(10, 8, 0).is_err());
    }

    #[test]
    fn windows_stay_within_one_group() {
        let d = dataset(3, 20, 2);
        let spec = WindowSpec { n_k: 2, n_tau: 3, n_omega: 4 };
        let ws = spec.windows(&d).unwrap();
        assert_eq!(ws.len(), 12);
        for w in &ws {
            let rows = w.rows();
            assert_eq!(rows.len(), 5 * 2);
            assert!(rows.iter().all(|r| r.group_id == w.group_id));
            assert!(w.y.iter().flatten().all(|&v| (v / 1000.0).floor() as u64 == w.group_id));
            assert_eq!(w.targets().len(), 3 * 2);
            assert_eq!(w.targets()[0], w.y[2][0]);
        }
        assert_eq!(ws[3].start, 15);
    }

    #[test]
    fn explicit_starts_must_fit() {
        let d = dataset(1, 20, 1);
        let spec = WindowSpec { n_k: 2, n_tau: 3, n_omega: 2 };
        assert_eq!(spec.windows_at(&d, &[0, 15]).unwrap().len(), 2);
        assert!(spec.windows_at(&d, &[16]).is_err());
    }
}
