use std::fmt::Write as _;

use crate::error::{dim_err, domain_err, Result};
use crate::fidelity::{quality_bucket, threshold_classify, FidelityRecord, Label, QUALITY_BUCKETS};
use crate::model::SsaaFormer;
use crate::svr::{svr_predict, SvrModel};

use super::data::{load_inputs, require_mapped};
use super::train::embed_tensors;

/// Probability that a random real sample outscores a random fake one,
/// ties counted as one half. Computed from average ranks.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(dim_err!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(domain_err!("NaN score"));
    }
    let n_real = labels.iter().filter(|&&l| l == Label::Real).count();
    let n_fake = labels.len() - n_real;
    if n_real == 0 || n_fake == 0 {
        return Err(domain_err!("AUC needs both classes ({n_real} real, {n_fake} fake)"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == Label::Real).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_real * (n_real + 1)) as f64 / 2.0;
    Ok(u / (n_real * n_fake) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cell {
    pub count: usize,
    pub correct: usize,
}

impl Cell {
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub auc: f64,
    pub total: usize,
    pub correct: usize,
    /// `per_bucket[bucket][class]`, classes ordered real then fake.
    pub per_bucket: [[Cell; 2]; QUALITY_BUCKETS],
}

fn class_index(label: Label) -> usize {
    match label {
        Label::Real => 0,
        Label::Fake => 1,
    }
}

impl EvalReport {
    /// Report for scores already clamped to `[0, 1]`.
    pub fn from_scores(scores: &[f64], records: &[FidelityRecord]) -> Result<Self> {
        if scores.len() != records.len() {
            return Err(dim_err!("{} scores for {} records", scores.len(), records.len()));
        }
        let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
        let auc = auc(scores, &labels)?;
        let mut per_bucket = [[Cell::default(); 2]; QUALITY_BUCKETS];
        let mut correct = 0;
        for (s, r) in scores.iter().zip(records) {
            if !r.quality_norm.is_finite() {
                return Err(domain_err!("record '{}' has no normalized quality", r.image_path));
            }
            let hit = threshold_classify(*s)? == r.label;
            let cell = &mut per_bucket[quality_bucket(r.quality_norm, QUALITY_BUCKETS)][class_index(r.label)];
            cell.count += 1;
            cell.correct += hit as usize;
            correct += hit as usize;
        }
        Ok(Self {
            accuracy: correct as f64 / records.len() as f64,
            auc,
            total: records.len(),
            correct,
            per_bucket,
        })
    }

    pub fn cell(&self, bucket: usize, label: Label) -> Cell {
        self.per_bucket[bucket][class_index(label)]
    }

    pub fn all_cells_populated(&self) -> bool {
        self.per_bucket.iter().flatten().all(|c| c.count > 0)
    }

    /// Human-readable summary with one row per quality bucket.
    pub fn to_table(&self) -> String {
        let fmt_cell = |c: Cell| match c.accuracy() {
            Some(a) => format!("{:>6.2}% ({:>3})", 100.0 * a, c.count),
            None => format!("{:>7} ({:>3})", "n/a", 0),
        };
        let mut s = String::new();
        let _ = writeln!(s, "Acc {:.2}%  AUC {:.4}  ({}/{} correct)", 100.0 * self.accuracy, self.auc, self.correct, self.total);
        let _ = writeln!(s, "{:<14} {:>14} {:>14}", "quality", "real", "fake");
        for (b, row) in self.per_bucket.iter().enumerate() {
            let lo = b as f64 / QUALITY_BUCKETS as f64;
            let hi = (b + 1) as f64 / QUALITY_BUCKETS as f64;
            let close = if b + 1 == QUALITY_BUCKETS { ']' } else { ')' };
            let range = format!("[{lo:.2}, {hi:.2}{close}");
            let _ = writeln!(s, "{:<14} {:>14} {:>14}", range, fmt_cell(row[0]), fmt_cell(row[1]));
        }
        s
    }

    /// Plain `key: value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy: {}", self.accuracy);
        let _ = writeln!(s, "auc: {}", self.auc);
        let _ = writeln!(s, "total: {}", self.total);
        let _ = writeln!(s, "correct: {}", self.correct);
        for (b, row) in self.per_bucket.iter().enumerate() {
            for (label, cell) in Label::ALL.iter().zip(row) {
                let acc = cell.accuracy().map_or("nan".to_string(), |a| a.to_string());
                let _ = writeln!(s, "bucket{}_{label}_count: {}", b + 1, cell.count);
                let _ = writeln!(s, "bucket{}_{label}_accuracy: {acc}", b + 1);
            }
        }
        s
    }
}

/// SVR scores clamped to `[0, 1]`.
pub fn clamped_scores(svr: &SvrModel, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    features.iter().map(|f| Ok(svr_predict(svr, f)?.clamp(0.0, 1.0))).collect()
}

/// Score and classify records end to end.
pub fn evaluate(model: &SsaaFormer<f32>, svr: &SvrModel, records: &[FidelityRecord]) -> Result<EvalReport> {
    require_mapped(records)?;
    let inputs = load_inputs(records, model.config().input_size)?;
    let (feats, _) = embed_tensors(model, &inputs, 32)?;
    EvalReport::from_scores(&clamped_scores(svr, &feats)?, records)
}
