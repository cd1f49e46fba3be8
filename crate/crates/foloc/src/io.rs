//! File formats: system matrices as JSON, measurements as CSV, report
//! serialization with a canonical float encoding.
//!
//! Reports are written through [`to_canonical_json`], which emits sorted
//! keys and 17-significant-digit floats so that reruns with identical seeds
//! produce byte-identical files.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::system::{discretize, GroundTruth, LtiSystem, MeasurementBatch};

/// On-disk system description. `A`, `B`, `C` are row-major nested arrays;
/// `Q`/`R` are optional noise covariances. When `dt` is present the `A`/`B`
/// entries are continuous-time matrices and are discretized on load by
/// zero-order hold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<Vec<f64>>>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

fn nested_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Parse(format!("matrix {name} has no rows")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse(format!("matrix {name} has ragged or empty rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn matrix_to_nested(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

impl SystemFile {
    pub fn from_system(sys: &LtiSystem) -> Self {
        Self {
            a: matrix_to_nested(sys.a()),
            b: matrix_to_nested(sys.b()),
            c: matrix_to_nested(sys.c()),
            d: None,
            q: sys.q().map(matrix_to_nested),
            r: sys.r().map(matrix_to_nested),
            dt: None,
        }
    }

    pub fn into_system(&self) -> Result<LtiSystem> {
        let a = nested_to_matrix("A", &self.a)?;
        let b = nested_to_matrix("B", &self.b)?;
        let c = nested_to_matrix("C", &self.c)?;
        if let Some(d) = &self.d {
            let d = nested_to_matrix("D", d)?;
            if d.amax() != 0.0 {
                return Err(Error::InvalidArgument(
                    "direct feedthrough D != 0 is not supported; the model assumes a zero \
                     instantaneous input-output path"
                        .into(),
                ));
            }
        }
        let (a, b) = match self.dt {
            Some(dt) => discretize(&a, &b, dt)?,
            None => (a, b),
        };
        let mut sys = LtiSystem::new(a, b, c)?;
        if let Some(q) = &self.q {
            sys = sys.with_process_noise(nested_to_matrix("Q", q)?)?;
        }
        if let Some(r) = &self.r {
            sys = sys.with_measurement_noise(nested_to_matrix("R", r)?)?;
        }
        Ok(sys)
    }
}

/// Loads a system description from a JSON file. Parse failures name the
/// offending key.
pub fn load_system(path: impl AsRef<Path>) -> Result<LtiSystem> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let file: SystemFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    file.into_system()
}

pub fn save_system(path: impl AsRef<Path>, sys: &LtiSystem) -> Result<()> {
    write_json_file(path, &SystemFile::from_system(sys))
}

/// Writes stacked measurements as CSV with header `k,y1..yp`.
pub fn write_measurements_csv(path: impl AsRef<Path>, y: &DVector<f64>, p: usize) -> Result<()> {
    if p == 0 || y.len() % p != 0 {
        return Err(Error::Dimension(format!(
            "measurement length {} is not a multiple of p = {p}",
            y.len()
        )));
    }
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    let mut header = vec!["k".to_string()];
    header.extend((1..=p).map(|i| format!("y{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..y.len() / p {
        let mut row = vec![k.to_string()];
        row.extend((0..p).map(|i| format_f64(y[k * p + i])));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a measurements CSV, inferring the sensor count from the header.
/// When `expected_p` is given the width must match it.
pub fn read_measurements_csv(
    path: impl AsRef<Path>,
    expected_p: Option<usize>,
) -> Result<MeasurementBatch> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.len() < 2 || header.get(0) != Some("k") {
        return Err(Error::Parse(format!(
            "{}: expected header k,y1..yp, got {:?}",
            path.display(),
            header
        )));
    }
    let p = header.len() - 1;
    if let Some(expected) = expected_p {
        if p != expected {
            return Err(Error::Dimension(format!(
                "{}: measurement width {p} does not match the expected p = {expected}",
                path.display()
            )));
        }
    }
    let mut values = Vec::new();
    for (row_idx, record) in r.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != p + 1 {
            return Err(Error::Parse(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                row_idx + 1,
                record.len(),
                p + 1
            )));
        }
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!(
                    "{}: row {} holds a non-numeric value {field:?}",
                    path.display(),
                    row_idx + 1
                ))
            })?;
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::Parse(format!("{}: no measurement rows", path.display())));
    }
    MeasurementBatch::new(DVector::from_vec(values), p)
}

/// Ground-truth sidecar written next to simulated measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub x0: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub active_set: Vec<usize>,
    pub sigma: f64,
    pub seed: u64,
}

impl TruthFile {
    pub fn new(truth: &GroundTruth, sigma: f64, seed: u64) -> Self {
        Self {
            x0: truth.x0.iter().copied().collect(),
            inputs: truth.inputs.iter().map(|u| u.iter().copied().collect()).collect(),
            active_set: truth.active_set.clone(),
            sigma,
            seed,
        }
    }
}

/// Per-trial records as CSV with the canonical float encoding.
pub fn write_trial_records_csv(
    path: impl AsRef<Path>,
    records: &[crate::experiments::TrialRecord],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    w.write_record([
        "trial",
        "lambda",
        "fpr",
        "fnr",
        "err",
        "rel_err_u",
        "rel_err_x0",
        "iterations",
        "converged",
    ])
    .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.trial.to_string(),
            format_f64(r.lambda),
            format_f64(r.fpr),
            format_f64(r.fnr),
            format_f64(r.err),
            format_f64(r.rel_err_u),
            format_f64(r.rel_err_x0),
            r.iterations.to_string(),
            r.converged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-channel input series as CSV (`k, u1..um`), one row per time step;
/// the waveform export of estimated or true inputs.
pub fn write_input_series_csv(
    path: impl AsRef<Path>,
    series: &[DVector<f64>],
) -> Result<()> {
    let steps = series.first().map(|u| u.len()).unwrap_or(0);
    if steps == 0 || series.iter().any(|u| u.len() != steps) {
        return Err(Error::Dimension("input series must share a positive length".into()));
    }
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    let mut header = vec!["k".to_string()];
    header.extend((1..=series.len()).map(|j| format!("u{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..steps {
        let mut row = vec![k.to_string()];
        row.extend(series.iter().map(|u| format_f64(u[k])));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Frequency-scan trace as CSV (`omega, source, gain`).
pub fn write_freq_trace_csv(
    path: impl AsRef<Path>,
    points: &[crate::incoherence::FreqPoint],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    w.write_record(["omega", "j", "gain"]).map_err(csv_err)?;
    for pt in points {
        w.write_record([format_f64(pt.omega), pt.source.to_string(), format_f64(pt.gain)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Canonical float encoding: 17 significant digits in scientific notation,
/// enough to round-trip any f64 and stable across runs.
pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    format!("{x:.16e}")
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                // Non-finite floats never reach serde_json numbers; they are
                // mapped to strings upstream.
                out.push_str(&format_f64(n.as_f64().expect("numeric value")));
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string serializes"));
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            // serde_json's default map is a BTreeMap, so iteration order is
            // already sorted by key.
            out.push('{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push(':');
                write_canonical(v, out);
            }
            out.push('}');
        }
    }
}

/// Serializes any value to canonical JSON text (sorted keys, fixed-precision
/// floats, trailing newline).
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Parse(e.to_string()))?;
    let mut out = String::new();
    write_canonical(&v, &mut out);
    out.push('\n');
    Ok(out)
}

/// Writes a value as canonical JSON to a file.
pub fn write_json_file<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let text = to_canonical_json(value)?;
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
