//! OOD detection metrics over labelled scores.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{calibrate_threshold, ScoreError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("need at least one ID and one OOD sample")]
    MissingClass,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Scores where higher means more in-distribution, with ID flags.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    is_id: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, is_id: Vec<bool>) -> Result<Self> {
        if scores.len() != is_id.len() {
            return Err(MetricError::Length {
                scores: scores.len(),
                labels: is_id.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricError::NonFinite(i));
        }
        Ok(Self { scores, is_id })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_id(&self) -> &[bool] {
        &self.is_id
    }

    pub fn id_scores(&self) -> Vec<f64> {
        self.pick(true)
    }

    pub fn ood_scores(&self) -> Vec<f64> {
        self.pick(false)
    }

    fn pick(&self, id: bool) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.is_id)
            .filter(|(_, &l)| l == id)
            .map(|(s, _)| *s)
            .collect()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let n_id = self.is_id.iter().filter(|&&l| l).count();
        let n_ood = self.is_id.len() - n_id;
        if n_id == 0 || n_ood == 0 {
            return Err(MetricError::MissingClass);
        }
        Ok((n_id, n_ood))
    }
}

/// Fraction of OOD samples accepted at the threshold that keeps `tpr` of
/// the ID samples.
pub fn fpr_at_tpr(ls: &LabeledScores, tpr: f64) -> Result<f64> {
    ls.require_both()?;
    let threshold = calibrate_threshold(&ls.id_scores(), tpr)?;
    let ood = ls.ood_scores();
    Ok(ood.iter().filter(|&&s| s >= threshold).count() as f64 / ood.len() as f64)
}

/// Area under the ROC curve with ID as positive; ties count one half.
pub fn auroc(ls: &LabeledScores) -> Result<f64> {
    let (n_id, n_ood) = ls.require_both()?;
    let mut order: Vec<usize> = (0..ls.scores.len()).collect();
    order.sort_by(|&a, &b| ls.scores[a].total_cmp(&ls.scores[b]));
    // Midranks, 1-based.
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && ls.scores[order[j + 1]] == ls.scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_id += mid * order[i..=j].iter().filter(|&&k| ls.is_id[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_id - (n_id * (n_id + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positive {
    Id,
    Ood,
}

/// Step-wise average precision. With OOD as positive the scores are
/// negated so that low scores rank first. Tied scores form one step.
pub fn aupr(ls: &LabeledScores, positive: Positive) -> Result<f64> {
    let (n_id, n_ood) = ls.require_both()?;
    let (sign, n_pos) = match positive {
        Positive::Id => (1.0, n_id),
        Positive::Ood => (-1.0, n_ood),
    };
    let is_pos = |k: usize| ls.is_id[k] == (positive == Positive::Id);
    let keyed: Vec<f64> = ls.scores.iter().map(|s| sign * s).collect();
    let mut order: Vec<usize> = (0..keyed.len()).collect();
    order.sort_by(|&a, &b| keyed[b].total_cmp(&keyed[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && keyed[order[j + 1]] == keyed[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if is_pos(k) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// All metrics as fractions in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr_s: f64,
    pub aupr_e: f64,
}

pub fn evaluate(ls: &LabeledScores) -> Result<MetricReport> {
    Ok(MetricReport {
        fpr95: fpr_at_tpr(ls, 0.95)?,
        auroc: auroc(ls)?,
        aupr_s: aupr(ls, Positive::Id)?,
        aupr_e: aupr(ls, Positive::Ood)?,
    })
}

/// Aligned text table, one row per labelled report, values in percent.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max("method".len());
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "method", "FPR95", "AUROC", "AUPR-S", "AUPR-E"
    );
    for (name, r) in rows {
        out += &format!(
            "{:<width$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}\n",
            name,
            100.0 * r.fpr95,
            100.0 * r.auroc,
            100.0 * r.aupr_s,
            100.0 * r.aupr_e
        );
    }
    out
}

/// Equal-width histogram over the pooled score range; each class's
/// densities sum to one (or are all zero if the class is empty).
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub id_counts: Vec<usize>,
    pub ood_counts: Vec<usize>,
    pub id_density: Vec<f64>,
    pub ood_density: Vec<f64>,
}

pub fn histogram(ls: &LabeledScores, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(MetricError::NoBins);
    }
    let lo = ls.scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ls.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if ls.scores.is_empty() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut id_counts = vec![0usize; bins];
    let mut ood_counts = vec![0usize; bins];
    for (&s, &l) in ls.scores.iter().zip(&ls.is_id) {
        let b = if width > 0.0 {
            (((s - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        if l {
            id_counts[b] += 1;
        } else {
            ood_counts[b] += 1;
        }
    }
    let density = |c: &[usize]| {
        let total: usize = c.iter().sum();
        c.iter()
            .map(|&x| {
                if total > 0 {
                    x as f64 / total as f64
                } else {
                    0.0
                }
            })
            .collect()
    };
    Ok(Histogram {
        edges,
        id_density: density(&id_counts),
        ood_density: density(&ood_counts),
        id_counts,
        ood_counts,
    })
}

pub fn write_histogram_csv(path: impl AsRef<Path>, h: &Histogram) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "bin_left,bin_right,id_density,ood_density")?;
    for i in 0..h.id_density.len() {
        writeln!(
            out,
            "{},{},{},{}",
            h.edges[i],
            h.edges[i + 1],
            h.id_density[i],
            h.ood_density[i]
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}
