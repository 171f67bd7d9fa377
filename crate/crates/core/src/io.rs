//! Plain-text file formats and atomic writes.
//!
//! Latent batches and anchor sets are CSV with a `dim=<m>` first line; anchor
//! rows start with their integer id. Datasets are CSV with a
//! `label,x0,x1,…` header. Floats are written with 17 significant digits so
//! values survive a round trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::batching::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{AnchorSet, LatentBatch};
use crate::linalg::Matrix;

/// 17 significant digits in scientific notation.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp: PathBuf = path.with_file_name(tmp_name);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_dim_header(line: Option<(usize, &str)>, context: &str) -> Result<usize> {
    let (_, line) = line.ok_or_else(|| Error::parse(context, "missing dim header"))?;
    line.strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .ok_or_else(|| Error::parse(context, format!("expected `dim=<m>`, got {line:?}")))
}

fn parse_floats(fields: &[&str], context: &str, line_no: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(context, format!("line {line_no}: {f:?}: {e}")))
        })
        .collect()
}

fn join_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_f64(*v));
    }
}

pub fn latent_to_csv(batch: &LatentBatch) -> String {
    let mut out = format!("dim={}\n", batch.dim());
    for r in 0..batch.len() {
        join_floats(&mut out, batch.row(r));
        out.push('\n');
    }
    out
}

pub fn latent_from_csv(text: &str, context: &str) -> Result<LatentBatch> {
    let mut lines = data_lines(text);
    let dim = parse_dim_header(lines.next(), context)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (no, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim {
            return Err(Error::parse(
                context,
                format!("line {no}: expected {dim} values, got {}", fields.len()),
            ));
        }
        data.extend(parse_floats(&fields, context, no)?);
        rows += 1;
    }
    LatentBatch::new(Matrix::from_vec(rows, dim, data)?)
}

pub fn anchors_to_csv(anchors: &AnchorSet) -> String {
    let mut out = format!("dim={}\n", anchors.dim());
    for i in 0..anchors.len() {
        let _ = write!(out, "{},", anchors.ids()[i]);
        join_floats(&mut out, anchors.anchor(i));
        out.push('\n');
    }
    out
}

pub fn anchors_from_csv(text: &str, context: &str) -> Result<AnchorSet> {
    let mut lines = data_lines(text);
    let dim = parse_dim_header(lines.next(), context)?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (no, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::parse(
                context,
                format!("line {no}: expected id and {dim} values, got {} fields", fields.len()),
            ));
        }
        let id = fields[0]
            .trim()
            .parse::<u64>()
            .map_err(|e| Error::parse(context, format!("line {no}: id: {e}")))?;
        ids.push(id);
        data.extend(parse_floats(&fields[1..], context, no)?);
    }
    AnchorSet::new(Matrix::from_vec(ids.len(), dim, data)?, ids)
}

pub fn dataset_to_csv(dataset: &Dataset) -> String {
    let mut out = String::from("label");
    for c in 0..dataset.dim() {
        let _ = write!(out, ",x{c}");
    }
    out.push('\n');
    for i in 0..dataset.len() {
        let _ = write!(out, "{},", dataset.labels()[i]);
        join_floats(&mut out, dataset.inputs().row(i));
        out.push('\n');
    }
    out
}

pub fn dataset_from_csv(text: &str, context: &str) -> Result<Dataset> {
    let mut lines = data_lines(text);
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(context, "missing header"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"label") || columns.len() < 2 {
        return Err(Error::parse(context, "header must be `label,<features>`"));
    }
    let dim = columns.len() - 1;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (no, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::parse(
                context,
                format!("line {no}: expected {} fields, got {}", dim + 1, fields.len()),
            ));
        }
        let label = fields[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::parse(context, format!("line {no}: label: {e}")))?;
        labels.push(label);
        data.extend(parse_floats(&fields[1..], context, no)?);
    }
    Dataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels)
}

/// One integer label per line after a `label` header.
pub fn labels_from_csv(text: &str, context: &str) -> Result<Vec<usize>> {
    let mut lines = data_lines(text);
    match lines.next() {
        Some((_, "label")) => {}
        _ => return Err(Error::parse(context, "header must be `label`")),
    }
    lines
        .map(|(no, l)| {
            l.parse::<usize>()
                .map_err(|e| Error::parse(context, format!("line {no}: {e}")))
        })
        .collect()
}

pub fn labels_to_csv(labels: &[usize]) -> String {
    let mut out = String::from("label\n");
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    out
}

pub fn read_latent(path: &Path) -> Result<LatentBatch> {
    latent_from_csv(&read_text(path)?, &path.display().to_string())
}

pub fn write_latent(path: &Path, batch: &LatentBatch) -> Result<()> {
    write_atomic(path, latent_to_csv(batch).as_bytes())
}

pub fn read_anchors(path: &Path) -> Result<AnchorSet> {
    anchors_from_csv(&read_text(path)?, &path.display().to_string())
}

pub fn write_anchors(path: &Path, anchors: &AnchorSet) -> Result<()> {
    write_atomic(path, anchors_to_csv(anchors).as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_csv(&read_text(path)?, &path.display().to_string())
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_atomic(path, dataset_to_csv(dataset).as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    labels_from_csv(&read_text(path)?, &path.display().to_string())
}
