use std::path::Path;
use std::str::FromStr;

use super::{unreshape, DataError, RawDataset, RawGroup, ReshapedDataset, ReshapedRow};

/// Column counts implied by a header of the form
/// `row_id,group_id,time,u_1..,mu_1..,<tail>`.
struct Layout {
    n_inputs: usize,
    n_params: usize,
}

fn parse_header(header: &csv::StringRecord, tail: &[String]) -> Result<Layout, DataError> {
    let cols: Vec<&str> = header.iter().collect();
    for required in ["row_id", "group_id", "time"].iter().map(|s| s.to_string()).chain(tail.iter().cloned()) {
        if !cols.contains(&required.as_str()) {
            return Err(DataError::MissingColumn(required));
        }
    }
    let count = |prefix: &str| {
        cols.iter()
            .filter(|c| c.strip_prefix(prefix).is_some_and(|n| n.parse::<usize>().is_ok()))
            .count()
    };
    let layout = Layout {
        n_inputs: count("u_"),
        n_params: count("mu_"),
    };
    let expected = layout_columns(layout.n_inputs, layout.n_params, tail);
    if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(DataError::BadHeader(format!(
            "expected `{}`, found `{}`",
            expected.join(","),
            cols.join(",")
        )));
    }
    Ok(layout)
}

fn layout_columns(n_inputs: usize, n_params: usize, tail: &[String]) -> Vec<String> {
    let mut cols = vec!["row_id".to_string(), "group_id".into(), "time".into()];
    cols.extend((1..=n_inputs).map(|i| format!("u_{i}")));
    cols.extend((1..=n_params).map(|i| format!("mu_{i}")));
    cols.extend(tail.iter().cloned());
    cols
}

fn field<T: FromStr>(rec: &csv::StringRecord, idx: usize, header: &csv::StringRecord) -> Result<T, DataError> {
    let value = rec.get(idx).unwrap_or("");
    value.trim().parse().map_err(|_| DataError::Parse {
        line: rec.position().map_or(0, |p| p.line() as usize),
        column: header.get(idx).unwrap_or("?").to_string(),
        value: value.to_string(),
    })
}

fn reader(path: &Path) -> Result<(csv::Reader<std::fs::File>, csv::StringRecord), DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    Ok((rdr, header))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, DataError> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|source| DataError::Csv {
            path: path.display().to_string(),
            source,
        })
}

/// Reads the reshaped layout and validates its ordering.
pub fn read_csv(path: impl AsRef<Path>) -> Result<ReshapedDataset, DataError> {
    let path = path.as_ref();
    let (mut rdr, header) = reader(path)?;
    let layout = parse_header(&header, &["output_id".into(), "y".into()])?;
    let (n_i, n_p) = (layout.n_inputs, layout.n_params);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|source| DataError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        rows.push(ReshapedRow {
            row_id: field(&rec, 0, &header)?,
            group_id: field(&rec, 1, &header)?,
            time: field(&rec, 2, &header)?,
            u: (0..n_i).map(|i| field(&rec, 3 + i, &header)).collect::<Result<_, _>>()?,
            mu: (0..n_p).map(|i| field(&rec, 3 + n_i + i, &header)).collect::<Result<_, _>>()?,
            output_id: field(&rec, 3 + n_i + n_p, &header)?,
            y: field(&rec, 4 + n_i + n_p, &header)?,
        });
    }
    let n_outputs = rows.iter().map(|r| r.output_id).max().ok_or(DataError::Empty)?;
    let d = ReshapedDataset {
        n_inputs: n_i,
        n_params: n_p,
        n_outputs,
        rows,
    };
    unreshape(&d)?;
    Ok(d)
}

pub fn write_csv(d: &ReshapedDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let err = |source| DataError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = writer(path)?;
    w.write_record(layout_columns(d.n_inputs, d.n_params, &["output_id".into(), "y".into()]))
        .map_err(err)?;
    for r in &d.rows {
        let mut rec = vec![r.row_id.to_string(), r.group_id.to_string(), r.time.to_string()];
        rec.extend(r.u.iter().map(f64::to_string));
        rec.extend(r.mu.iter().map(f64::to_string));
        rec.push(r.output_id.to_string());
        rec.push(r.y.to_string());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn output_columns(n_o: usize) -> Vec<String> {
    (1..=n_o).map(|k| format!("y_{k}")).collect()
}

/// Reads the raw layout, whose header ends in `y_1..y_{n_o}`.
pub fn read_raw_csv(path: impl AsRef<Path>) -> Result<RawDataset, DataError> {
    let path = path.as_ref();
    let (mut rdr, header) = reader(path)?;
    let n_o = header
        .iter()
        .filter(|c| c.strip_prefix("y_").is_some_and(|n| n.parse::<usize>().is_ok()))
        .count();
    if n_o == 0 {
        return Err(DataError::MissingColumn("y_1".into()));
    }
    let layout = parse_header(&header, &output_columns(n_o))?;
    let (n_i, n_p) = (layout.n_inputs, layout.n_params);
    let mut groups: Vec<RawGroup> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|source| DataError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        let group_id: u64 = field(&rec, 1, &header)?;
        let time: f64 = field(&rec, 2, &header)?;
        let u: Vec<f64> = (0..n_i).map(|i| field(&rec, 3 + i, &header)).collect::<Result<_, _>>()?;
        let mu: Vec<f64> = (0..n_p).map(|i| field(&rec, 3 + n_i + i, &header)).collect::<Result<_, _>>()?;
        let y: Vec<f64> = (0..n_o).map(|k| field(&rec, 3 + n_i + n_p + k, &header)).collect::<Result<_, _>>()?;
        match groups.last_mut() {
            Some(g) if g.group_id == group_id => {
                if g.mu != mu {
                    return Err(DataError::Ragged {
                        group: group_id,
                        detail: "parameters change within the group".into(),
                    });
                }
                g.times.push(time);
                g.u.push(u);
                g.y.push(y);
            }
            _ => groups.push(RawGroup {
                group_id,
                mu,
                times: vec![time],
                u: vec![u],
                y: vec![y],
            }),
        }
    }
    let raw = RawDataset {
        n_inputs: n_i,
        n_params: n_p,
        n_outputs: n_o,
        groups,
    };
    raw.validate()?;
    Ok(raw)
}

pub fn write_raw_csv(d: &RawDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let err = |source| DataError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = writer(path)?;
    w.write_record(layout_columns(d.n_inputs, d.n_params, &output_columns(d.n_outputs)))
        .map_err(err)?;
    let mut row_id = 0u64;
    for g in &d.groups {
        for i in 0..g.len() {
            row_id += 1;
            let mut rec = vec![row_id.to_string(), g.group_id.to_string(), g.times[i].to_string()];
            rec.extend(g.u[i].iter().map(f64::to_string));
            rec.extend(g.mu.iter().map(f64::to_string));
            rec.extend(g.y[i].iter().map(f64::to_string));
            w.write_record(&rec).map_err(err)?;
        }
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
