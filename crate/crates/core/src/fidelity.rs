//! Quality-graded regression targets.
//!
//! Each class owns a disjoint slice of the unit interval: fakes live in
//! `[0, 0.4]`, reals in `[0.6, 1.0]`. Within a class the position is set by
//! the min-max normalized image quality, higher quality mapping higher.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{domain_err, Error, Result};
use crate::tensor::Tensor;

/// Upper end of the fake range.
pub const FAKE_UPPER: f64 = 0.4;
/// Lower end of the real range.
pub const REAL_LOWER: f64 = 0.6;
/// Scores strictly above this are classified real.
pub const DECISION_THRESHOLD: f64 = 0.5;
/// Number of quality buckets in the per-quality report.
pub const QUALITY_BUCKETS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Fake,
    Real,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Real, Label::Fake];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(domain_err!("unknown label '{other}' (expected real or fake)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityRecord {
    pub image_path: String,
    pub label: Label,
    pub quality_raw: f64,
    pub quality_norm: f64,
    pub fidelity_target: f64,
}

impl FidelityRecord {
    /// Record with raw quality only; the normalized fields stay NaN until
    /// [`assign_targets`] fills them.
    pub fn new(image_path: impl Into<String>, label: Label, quality_raw: f64) -> Self {
        Self {
            image_path: image_path.into(),
            label,
            quality_raw,
            quality_norm: f64::NAN,
            fidelity_target: f64::NAN,
        }
    }

    pub fn is_mapped(&self) -> bool {
        self.quality_norm.is_finite() && self.fidelity_target.is_finite()
    }
}

/// Min-max range of raw quality scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityRange {
    pub min: f64,
    pub max: f64,
}

impl QualityRange {
    pub fn of(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(domain_err!("cannot compute quality range of an empty sequence"));
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
            return Err(domain_err!("non-finite quality score {bad}"));
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max })
    }

    pub fn apply(&self, q: f64) -> f64 {
        if self.max == self.min {
            0.5
        } else {
            ((q - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        }
    }
}

/// Per-class normalization statistics fitted on a training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityStats {
    pub real: QualityRange,
    pub fake: QualityRange,
}

impl QualityStats {
    pub fn fit(records: &[FidelityRecord]) -> Result<Self> {
        let class = |label| -> Result<QualityRange> {
            let qs: Vec<f64> = records.iter().filter(|r| r.label == label).map(|r| r.quality_raw).collect();
            QualityRange::of(&qs).map_err(|e| domain_err!("{label} class: {e}"))
        };
        Ok(Self { real: class(Label::Real)?, fake: class(Label::Fake)? })
    }

    pub fn range(&self, label: Label) -> QualityRange {
        match label {
            Label::Real => self.real,
            Label::Fake => self.fake,
        }
    }
}

pub fn normalize_quality(raw_scores: &[f64], stats: Option<(f64, f64)>) -> Result<Vec<f64>> {
    if raw_scores.is_empty() {
        return Err(domain_err!("cannot normalize an empty sequence"));
    }
    let range = match stats {
        Some((min, max)) => {
            if !(min <= max) {
                return Err(domain_err!("invalid stats: min {min} > max {max}"));
            }
            QualityRange { min, max }
        }
        None => QualityRange::of(raw_scores)?,
    };
    Ok(raw_scores.iter().map(|&q| range.apply(q)).collect())
}

pub fn map_to_fidelity(quality_norm: f64, label: Label) -> Result<f64> {
    if !(0.0..=1.0).contains(&quality_norm) {
        return Err(domain_err!("normalized quality {quality_norm} outside [0, 1]"));
    }
    Ok(match label {
        Label::Real => REAL_LOWER + (1.0 - REAL_LOWER) * quality_norm,
        Label::Fake => FAKE_UPPER * quality_norm,
    })
}

pub fn threshold_classify(score: f64) -> Result<Label> {
    if score.is_nan() {
        return Err(domain_err!("cannot classify a NaN score"));
    }
    Ok(if score > DECISION_THRESHOLD { Label::Real } else { Label::Fake })
}

/// Fill `quality_norm` and `fidelity_target` using per-class `stats`.
pub fn assign_targets(records: &mut [FidelityRecord], stats: &QualityStats) -> Result<()> {
    for r in records.iter_mut() {
        r.quality_norm = stats.range(r.label).apply(r.quality_raw);
        r.fidelity_target = map_to_fidelity(r.quality_norm, r.label)?;
    }
    Ok(())
}

/// Variance of the 3×3 Laplacian response over the grayscale image.
pub fn proxy_quality(image: &Tensor<f32>) -> Result<f64> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(domain_err!("expected a [3, H, W] image, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    if h < 3 || w < 3 {
        return Err(domain_err!("image {h}x{w} too small for a 3x3 Laplacian"));
    }
    let d = image.data();
    let plane = h * w;
    let gray: Vec<f64> = (0..plane)
        .map(|i| 0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64)
        .collect();
    let mut resp = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = y * w + x;
            resp.push(gray[c - w] + gray[c + w] + gray[c - 1] + gray[c + 1] - 4.0 * gray[c]);
        }
    }
    let n = resp.len() as f64;
    let mean = resp.iter().sum::<f64>() / n;
    Ok(resp.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n)
}

/// Bucket index of a normalized quality: equal-width half-open intervals, last one closed.
pub fn quality_bucket(quality_norm: f64, n_buckets: usize) -> usize {
    let q = quality_norm.clamp(0.0, 1.0);
    (1..n_buckets).rev().find(|&k| q >= k as f64 / n_buckets as f64).unwrap_or(0)
}

pub fn bucket_by_quality(records: &[FidelityRecord], n_buckets: usize) -> Result<Vec<Vec<usize>>> {
    if n_buckets == 0 {
        return Err(domain_err!("need at least one bucket"));
    }
    let mut out = vec![Vec::new(); n_buckets];
    for (i, r) in records.iter().enumerate() {
        out[quality_bucket(r.quality_norm, n_buckets)].push(i);
    }
    Ok(out)
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Read a manifest CSV. `quality_norm` and `fidelity_target` columns are
/// optional; when absent those fields are NaN.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<FidelityRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<FidelityRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(ip), Some(il), Some(iq)) = (col("path"), col("label"), col("quality")) else {
        return Err(parse_err(1, format!("header must contain path,label,quality; got '{}'", headers.iter().collect::<Vec<_>>().join(","))));
    };
    let (inorm, itarget) = (col("quality_norm"), col("fidelity_target"));
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| row.get(i).ok_or_else(|| parse_err(line, format!("missing column '{name}'")));
        let number = |i: usize, name: &str| -> Result<f64> {
            let s = field(i, name)?;
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("{name} '{s}' is not a finite number")))
        };
        let path = field(ip, "path")?;
        if path.is_empty() {
            return Err(parse_err(line, "empty path"));
        }
        let label: Label = field(il, "label")?.parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
        let quality = number(iq, "quality")?;
        if quality < 0.0 {
            return Err(parse_err(line, format!("quality {quality} is negative")));
        }
        let mut rec = FidelityRecord::new(path, label, quality);
        if let Some(i) = inorm {
            rec.quality_norm = number(i, "quality_norm")?;
        }
        if let Some(i) = itarget {
            rec.fidelity_target = number(i, "fidelity_target")?;
        }
        records.push(rec);
    }
    Ok(records)
}

/// Serialize records; the two mapped columns are written when `with_targets` is set.
pub fn manifest_to_string(records: &[FidelityRecord], with_targets: bool) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["path", "label", "quality"];
    if with_targets {
        header.extend(["quality_norm", "fidelity_target"]);
    }
    w.write_record(&header).expect("in-memory write");
    for r in records {
        let mut row = vec![r.image_path.clone(), r.label.to_string(), r.quality_raw.to_string()];
        if with_targets {
            row.push(r.quality_norm.to_string());
            row.push(r.fidelity_target.to_string());
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[FidelityRecord], with_targets: bool) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest_to_string(records, with_targets)).map_err(|e| Error::io(path, e))
}

/// Read and write the per-class normalization stats as a small key:value file.
pub fn stats_to_string(stats: &QualityStats) -> String {
    format!(
        "real_min: {}\nreal_max: {}\nfake_min: {}\nfake_max: {}\n",
        stats.real.min, stats.real.max, stats.fake.min, stats.fake.max
    )
}

pub fn parse_stats(text: &str) -> Result<QualityStats> {
    let mut vals = [None; 4];
    let keys = ["real_min", "real_max", "fake_min", "fake_max"];
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once(':').ok_or_else(|| parse_err(n as u64 + 1, "expected key: value"))?;
        let i = keys.iter().position(|&key| key == k.trim()).ok_or_else(|| parse_err(n as u64 + 1, format!("unknown key '{}'", k.trim())))?;
        vals[i] = Some(v.trim().parse::<f64>().map_err(|e| parse_err(n as u64 + 1, e.to_string()))?);
    }
    let get = |i: usize| vals[i].ok_or_else(|| parse_err(0, format!("missing key '{}'", keys[i])));
    Ok(QualityStats {
        real: QualityRange { min: get(0)?, max: get(1)? },
        fake: QualityRange { min: get(2)?, max: get(3)? },
    })
}
