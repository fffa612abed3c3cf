//! CSV interchange for plant and estimate traces.
//!
//! Every file has a header row. The first column is `t` in seconds with nine
//! decimals, the rest are labelled channels. Values use the shortest
//! representation that parses back to the same `f64`, so a written trace
//! reads back value-identical.
//!
//! Plant traces are split into `truth.csv` (true states and inputs) and
//! `measurements.csv` (noisy states and inputs) sharing the same columns.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimation::{EstimateRecord, EstimateTrace};
use crate::sim::{from_nanos, to_nanos, Trace, TraceRecord};

pub const TRUTH_FILE: &str = "truth.csv";
pub const MEASUREMENTS_FILE: &str = "measurements.csv";
const NIS_COLUMN: &str = "nis";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Parse {
            what: path.display().to_string(),
            message: format!("{other:?}"),
        },
    }
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn write_rows<'a>(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = (f64, Vec<&'a [f64]>)>,
) -> Result<()> {
    let mut w = writer(path)?;
    let mut full_header = vec!["t".to_string()];
    full_header.extend(header.iter().cloned());
    w.write_record(&full_header).map_err(|e| csv_err(path, e))?;
    let mut line = Vec::with_capacity(full_header.len());
    for (t, parts) in rows {
        line.clear();
        line.push(format!("{t:.9}"));
        line.extend(parts.iter().flat_map(|p| p.iter()).map(|v| v.to_string()));
        w.write_record(&line).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `truth.csv` and `measurements.csv` into `dir`.
pub fn write_trace(trace: &Trace, dir: &Path) -> Result<()> {
    let header: Vec<String> = trace.state_labels.iter().chain(&trace.input_labels).cloned().collect();
    write_rows(
        &dir.join(TRUTH_FILE),
        &header,
        trace.records.iter().map(|r| (r.t, vec![r.true_state.as_slice(), r.true_inputs.as_slice()])),
    )?;
    write_rows(
        &dir.join(MEASUREMENTS_FILE),
        &header,
        trace.records.iter().map(|r| (r.t, vec![r.noisy_measurement.as_slice(), r.inputs.as_slice()])),
    )
}

struct Table {
    header: Vec<String>,
    times: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let parse_err = |line: usize, message: String| Error::Parse {
        what: format!("{} line {line}", path.display()),
        message,
    };
    if header.first().map(String::as_str) != Some("t") {
        return Err(parse_err(1, "first column must be `t`".into()));
    }
    let (mut times, mut rows) = (Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let mut values = Vec::with_capacity(header.len());
        for field in record.iter() {
            values.push(field.trim().parse::<f64>().map_err(|e| parse_err(i + 2, format!("`{field}`: {e}")))?);
        }
        times.push(values.remove(0));
        rows.push(values);
    }
    Ok(Table {
        header: header[1..].to_vec(),
        times,
        rows,
    })
}

fn check_grid(what: &str, times: &[f64], sample_period: f64) -> Result<()> {
    let step = to_nanos(sample_period);
    for (k, &t) in times.iter().enumerate() {
        if to_nanos(t) != k as u64 * step {
            return Err(Error::Misaligned(format!(
                "{what}: row {k} has t = {t}, expected {}",
                from_nanos(k as u64 * step)
            )));
        }
    }
    Ok(())
}

/// Reads a plant trace written by [`write_trace`]. `n_states` separates
/// state columns from input columns; rows must sit on the `sample_period`
/// grid starting at 0.
pub fn read_trace(dir: &Path, n_states: usize, sample_period: f64) -> Result<Trace> {
    let truth = read_table(&dir.join(TRUTH_FILE))?;
    let meas = read_table(&dir.join(MEASUREMENTS_FILE))?;
    if truth.header != meas.header {
        return Err(Error::Misaligned("truth and measurement columns differ".into()));
    }
    if truth.times != meas.times {
        return Err(Error::Misaligned("truth and measurement timestamps differ".into()));
    }
    if truth.header.len() < n_states {
        return Err(Error::dims("trace columns", n_states, truth.header.len()));
    }
    check_grid(TRUTH_FILE, &truth.times, sample_period)?;
    let split = |row: &Vec<f64>| (row[..n_states].to_vec(), row[n_states..].to_vec());
    let records = truth
        .times
        .iter()
        .zip(truth.rows.iter().zip(&meas.rows))
        .map(|(&t, (tr, me))| {
            let (true_state, true_inputs) = split(tr);
            let (noisy_measurement, inputs) = split(me);
            TraceRecord {
                t,
                true_state,
                noisy_measurement,
                true_inputs,
                inputs,
            }
        })
        .collect();
    Ok(Trace {
        state_labels: truth.header[..n_states].to_vec(),
        input_labels: truth.header[n_states..].to_vec(),
        sample_period,
        records,
    })
}

/// Writes estimates with a trailing `nis` column.
pub fn write_estimates(trace: &EstimateTrace, path: &Path) -> Result<()> {
    let mut header = trace.labels.clone();
    header.push(NIS_COLUMN.into());
    let nis: Vec<[f64; 1]> = trace.records.iter().map(|r| [r.nis]).collect();
    write_rows(
        path,
        &header,
        trace.records.iter().zip(&nis).map(|(r, n)| (r.t, vec![r.x_hat.as_slice(), n.as_slice()])),
    )
}

pub fn read_estimates(path: &Path, sample_period: f64) -> Result<EstimateTrace> {
    let table = read_table(path)?;
    if table.header.last().map(String::as_str) != Some(NIS_COLUMN) {
        return Err(Error::Parse {
            what: path.display().to_string(),
            message: "last column must be `nis`".into(),
        });
    }
    check_grid(&path.display().to_string(), &table.times, sample_period)?;
    let n = table.header.len() - 1;
    Ok(EstimateTrace {
        labels: table.header[..n].to_vec(),
        sample_period,
        records: table
            .times
            .iter()
            .zip(table.rows)
            .map(|(&t, mut row)| {
                let nis = row.pop().unwrap_or(f64::NAN);
                EstimateRecord { t, x_hat: row, nis }
            })
            .collect(),
    })
}
