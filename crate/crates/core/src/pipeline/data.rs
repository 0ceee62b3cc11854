use std::path::{Path, PathBuf};

use crate::error::{domain_err, Error, Result};
use crate::fidelity::{manifest_to_string, parse_manifest, FidelityRecord};
use crate::tensor::Tensor;

use super::image_io::{load_image, prepare_input};

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

/// Read a manifest and resolve relative image paths against its directory.
pub fn ingest_manifest(path: impl AsRef<Path>) -> Result<Vec<FidelityRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = parse_manifest(&text)?;
    let base = absolute(path.parent().unwrap_or(Path::new(".")))?;
    for r in &mut records {
        let p = Path::new(&r.image_path);
        if p.is_relative() {
            r.image_path = base.join(p).to_string_lossy().into_owned();
        }
    }
    Ok(records)
}

/// Write a manifest, storing image paths relative to its directory when possible.
pub fn write_manifest_relative(path: impl AsRef<Path>, records: &[FidelityRecord], with_targets: bool) -> Result<()> {
    let path = path.as_ref();
    let base = absolute(path.parent().unwrap_or(Path::new(".")))?;
    let rel: Vec<FidelityRecord> = records
        .iter()
        .map(|r| {
            let p = Path::new(&r.image_path);
            let image_path = p
                .strip_prefix(&base)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|_| r.image_path.clone());
            FidelityRecord { image_path, ..r.clone() }
        })
        .collect();
    std::fs::write(path, manifest_to_string(&rel, with_targets)).map_err(|e| Error::io(path, e))
}

/// Load and normalize every record's image at the model input size.
pub fn load_inputs(records: &[FidelityRecord], size: usize) -> Result<Vec<Tensor<f32>>> {
    records
        .iter()
        .map(|r| prepare_input(&load_image(&r.image_path)?, size))
        .collect()
}

pub fn require_mapped(records: &[FidelityRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(domain_err!("no records"));
    }
    match records.iter().find(|r| !r.is_mapped()) {
        Some(r) => Err(domain_err!(
            "record '{}' has no quality_norm/fidelity_target; map the manifest first",
            r.image_path
        )),
        None => Ok(()),
    }
}

/// Feature file rows: path, regression target and one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub paths: Vec<String>,
    pub targets: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

pub fn features_to_string(set: &FeatureSet) -> String {
    let d = set.features.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["path".to_string(), "target".to_string()];
    header.extend((0..d).map(|k| format!("f{k}")));
    w.write_record(&header).expect("in-memory write");
    for ((p, t), f) in set.paths.iter().zip(&set.targets).zip(&set.features) {
        let mut row = vec![p.clone(), t.to_string()];
        row.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn write_features(path: impl AsRef<Path>, set: &FeatureSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, features_to_string(set)).map_err(|e| Error::io(path, e))
}

pub fn parse_features(text: &str) -> Result<FeatureSet> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    if headers.len() < 3 || &headers[0] != "path" || &headers[1] != "target" {
        return Err(Error::Parse { line: 1, message: "header must be path,target,f0,...".into() });
    }
    let d = headers.len() - 2;
    let mut set = FeatureSet { paths: vec![], targets: vec![], features: vec![] };
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse { line, message: format!("'{s}' is not a number") })
        };
        set.paths.push(row[0].to_string());
        set.targets.push(num(&row[1])?);
        set.features.push((0..d).map(|k| num(&row[k + 2])).collect::<Result<_>>()?);
    }
    Ok(set)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    parse_features(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
