//! Plain-text feature files.
//!
//! ```text
//! fdim=<f>,classes=<K>
//! id,label,v1,...,vf
//! ```
//!
//! Ingested instances get ids by data-row order (0-based); the id column is
//! read but not trusted. Export writes instances ordered by id, so a split
//! whose ids are `0..N` survives export → ingest unchanged.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::dataset::{DatasetSplit, Instance};
use crate::error::{Error, Result};

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = |m: &str| Error::Parse { row: 1, message: m.to_string() };
    let mut fdim = None;
    let mut classes = None;
    for part in line.trim().split(',') {
        let (key, value) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        let value: usize =
            value.trim().parse().map_err(|_| bad(&format!("invalid value for `{key}`")))?;
        match key.trim() {
            "fdim" => fdim = Some(value),
            "classes" => classes = Some(value),
            other => return Err(bad(&format!("unknown header key `{other}`"))),
        }
    }
    match (fdim, classes) {
        (Some(f), Some(k)) if f > 0 && k >= 2 => Ok((f, k)),
        _ => Err(bad("header needs fdim ≥ 1 and classes ≥ 2")),
    }
}

pub fn parse_feature_text(text: &str) -> Result<DatasetSplit> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse { row: 1, message: "empty file".into() })?;
    let (fdim, classes) = parse_header(header)?;
    let mut instances = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { row, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != fdim + 2 {
            return Err(err(format!(
                "expected {} features, found {}",
                fdim,
                fields.len().saturating_sub(2)
            )));
        }
        fields[0].parse::<u64>().map_err(|_| err(format!("invalid id `{}`", fields[0])))?;
        let label: usize =
            fields[1].parse().map_err(|_| err(format!("invalid label `{}`", fields[1])))?;
        if label >= classes {
            return Err(err(format!("label {label} not below class count {classes}")));
        }
        let features = fields[2..]
            .iter()
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(err(format!("invalid feature value `{v}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        instances.push(Instance { id: instances.len(), features, label });
    }
    DatasetSplit::stratified(instances, classes)
}

pub fn ingest_feature_file(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_text(&text)
}

pub fn feature_text(split: &DatasetSplit) -> String {
    let mut out = format!("fdim={},classes={}\n", split.dim(), split.classes());
    for inst in split.all() {
        write!(out, "{},{}", inst.id, inst.label).unwrap();
        for v in &inst.features {
            // `{:?}` on f64 prints the shortest string that round-trips.
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn export_feature_file(split: &DatasetSplit, path: &Path) -> Result<()> {
    fs::write(path, feature_text(split)).map_err(|e| Error::io(path, e))
}
