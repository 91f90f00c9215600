//! Datasets in the raw (one row per time step) and reshaped (one row per time
//! step and output) layouts, plus splitting, windowing and normalization.

mod csv_io;
mod normalize;
mod split;
mod window;

use std::collections::HashSet;

use thiserror::Error;

pub use csv_io::{read_csv, read_raw_csv, write_csv, write_raw_csv};
pub use normalize::{ColumnStats, NormStats};
pub use split::{split_groups, Split, SplitSpec};
pub use window::{window_starts, Window, WindowSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected header: {0}")]
    BadHeader(String),
    #[error("line {line}: cannot parse `{value}` in column `{column}`")]
    Parse {
        line: usize,
        column: String,
        value: String,
    },
    #[error("group {group}: time stamps must be strictly increasing ({prev} then {next})")]
    NonMonotoneTime { group: u64, prev: f64, next: f64 },
    #[error("group {group}, time {time}: expected output ids 1..={n_o} in order, {detail}")]
    InconsistentOutputs {
        group: u64,
        time: f64,
        n_o: usize,
        detail: String,
    },
    #[error("group {group}: {detail}")]
    Ragged { group: u64, detail: String },
    #[error("group {0} appears more than once")]
    DuplicateGroup(u64),
    #[error("unknown group {0}")]
    UnknownGroup(u64),
    #[error("non-finite value in group {group}, {field}")]
    NonFinite { group: u64, field: String },
    #[error("dataset is empty")]
    Empty,
    #[error("split: {0}")]
    Split(String),
    #[error("window: {0}")]
    Window(String),
}

/// One trajectory: a fixed parameter vector and its time series.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGroup {
    pub group_id: u64,
    pub mu: Vec<f64>,
    pub times: Vec<f64>,
    /// `n_T` rows of `n_I` known inputs.
    pub u: Vec<Vec<f64>>,
    /// `n_T` rows of `n_o` outputs.
    pub y: Vec<Vec<f64>>,
}

impl RawGroup {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Raw layout: each time step carries all outputs side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub n_inputs: usize,
    pub n_params: usize,
    pub n_outputs: usize,
    pub groups: Vec<RawGroup>,
}

impl RawDataset {
    /// Number of time steps shared by every group.
    pub fn n_steps(&self) -> usize {
        self.groups.first().map_or(0, RawGroup::len)
    }

    pub fn group_ids(&self) -> Vec<u64> {
        self.groups.iter().map(|g| g.group_id).collect()
    }

    pub fn group(&self, id: u64) -> Option<&RawGroup> {
        self.groups.iter().find(|g| g.group_id == id)
    }

    /// Groups in the order of `ids`.
    pub fn select(&self, ids: &[u64]) -> Result<RawDataset, DataError> {
        let groups = ids
            .iter()
            .map(|&id| self.group(id).cloned().ok_or(DataError::UnknownGroup(id)))
            .collect::<Result<_, _>>()?;
        Ok(RawDataset {
            groups,
            ..self.empty_like()
        })
    }

    fn empty_like(&self) -> RawDataset {
        RawDataset {
            n_inputs: self.n_inputs,
            n_params: self.n_params,
            n_outputs: self.n_outputs,
            groups: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.groups.is_empty() {
            return Err(DataError::Empty);
        }
        if self.n_outputs == 0 {
            return Err(DataError::BadHeader("at least one output is required".into()));
        }
        let n_t = self.n_steps();
        let mut seen = HashSet::new();
        for g in &self.groups {
            let ragged = |detail: String| DataError::Ragged {
                group: g.group_id,
                detail,
            };
            if !seen.insert(g.group_id) {
                return Err(DataError::DuplicateGroup(g.group_id));
            }
            if g.len() != n_t || g.u.len() != n_t || g.y.len() != n_t {
                return Err(ragged(format!(
                    "expected {n_t} time steps, got {} times, {} input rows, {} output rows",
                    g.len(),
                    g.u.len(),
                    g.y.len()
                )));
            }
            if n_t == 0 {
                return Err(ragged("no time steps".into()));
            }
            if g.mu.len() != self.n_params {
                return Err(ragged(format!("expected {} parameters, got {}", self.n_params, g.mu.len())));
            }
            if let Some(r) = g.u.iter().find(|r| r.len() != self.n_inputs) {
                return Err(ragged(format!("expected {} inputs, got {}", self.n_inputs, r.len())));
            }
            if let Some(r) = g.y.iter().find(|r| r.len() != self.n_outputs) {
                return Err(ragged(format!("expected {} outputs, got {}", self.n_outputs, r.len())));
            }
            for w in g.times.windows(2) {
                if !(w[1] > w[0]) {
                    return Err(DataError::NonMonotoneTime {
                        group: g.group_id,
                        prev: w[0],
                        next: w[1],
                    });
                }
            }
            let non_finite = |field: &str| DataError::NonFinite {
                group: g.group_id,
                field: field.to_string(),
            };
            if !g.mu.iter().all(|v| v.is_finite()) {
                return Err(non_finite("mu"));
            }
            if !g.times.iter().all(|v| v.is_finite()) {
                return Err(non_finite("time"));
            }
            if !g.u.iter().flatten().all(|v| v.is_finite()) {
                return Err(non_finite("u"));
            }
            if !g.y.iter().flatten().all(|v| v.is_finite()) {
                return Err(non_finite("y"));
            }
        }
        Ok(())
    }
}

/// One row of the reshaped layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ReshapedRow {
    pub row_id: u64,
    pub group_id: u64,
    pub time: f64,
    pub u: Vec<f64>,
    pub mu: Vec<f64>,
    /// 1-based output index.
    pub output_id: usize,
    pub y: f64,
}

/// Reshaped layout: the outputs of each time step are stacked into a single
/// `y` column, with the left-hand columns repeated once per output.
#[derive(Clone, Debug, PartialEq)]
pub struct ReshapedDataset {
    pub n_inputs: usize,
    pub n_params: usize,
    pub n_outputs: usize,
    pub rows: Vec<ReshapedRow>,
}

/// Stacks every output of a time step into consecutive rows, group-major
/// then time then output id. Row ids count from 1.
pub fn reshape(raw: &RawDataset) -> Result<ReshapedDataset, DataError> {
    raw.validate()?;
    let mut rows = Vec::with_capacity(raw.groups.len() * raw.n_steps() * raw.n_outputs);
    for g in &raw.groups {
        for (i, &time) in g.times.iter().enumerate() {
            for (k, &y) in g.y[i].iter().enumerate() {
                rows.push(ReshapedRow {
                    row_id: rows.len() as u64 + 1,
                    group_id: g.group_id,
                    time,
                    u: g.u[i].clone(),
                    mu: g.mu.clone(),
                    output_id: k + 1,
                    y,
                });
            }
        }
    }
    Ok(ReshapedDataset {
        n_inputs: raw.n_inputs,
        n_params: raw.n_params,
        n_outputs: raw.n_outputs,
        rows,
    })
}

/// Inverse of [`reshape`]; checks the row ordering and duplication rules.
pub fn unreshape(d: &ReshapedDataset) -> Result<RawDataset, DataError> {
    let n_o = d.n_outputs;
    if d.rows.is_empty() {
        return Err(DataError::Empty);
    }
    if n_o == 0 {
        return Err(DataError::BadHeader("at least one output is required".into()));
    }
    let mut groups: Vec<RawGroup> = Vec::new();
    let mut i = 0;
    while i < d.rows.len() {
        let head = &d.rows[i];
        let bundle = &d.rows[i..(i + n_o).min(d.rows.len())];
        let inconsistent = |detail: String| DataError::InconsistentOutputs {
            group: head.group_id,
            time: head.time,
            n_o,
            detail,
        };
        for (k, row) in bundle.iter().enumerate() {
            if row.group_id != head.group_id || row.time != head.time {
                return Err(inconsistent(format!("found only {k} rows for this time stamp")));
            }
            if row.output_id != k + 1 {
                return Err(inconsistent(format!("row {} has output id {}", row.row_id, row.output_id)));
            }
            if row.u != head.u || row.mu != head.mu {
                return Err(inconsistent(format!(
                    "row {} does not repeat the inputs and parameters of its time stamp",
                    row.row_id
                )));
            }
        }
        if bundle.len() < n_o {
            return Err(inconsistent(format!("found only {} rows for this time stamp", bundle.len())));
        }
        let y = bundle.iter().map(|r| r.y).collect();
        match groups.last_mut() {
            Some(g) if g.group_id == head.group_id => {
                if g.mu != head.mu {
                    return Err(DataError::Ragged {
                        group: head.group_id,
                        detail: "parameters change within the group".into(),
                    });
                }
                g.times.push(head.time);
                g.u.push(head.u.clone());
                g.y.push(y);
            }
            _ => groups.push(RawGroup {
                group_id: head.group_id,
                mu: head.mu.clone(),
                times: vec![head.time],
                u: vec![head.u.clone()],
                y: vec![y],
            }),
        }
        i += n_o;
    }
    let raw = RawDataset {
        n_inputs: d.n_inputs,
        n_params: d.n_params,
        n_outputs: n_o,
        groups,
    };
    raw.validate()?;
    Ok(raw)
}
