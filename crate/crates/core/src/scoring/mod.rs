//! Cosine logits against the ID bank, OOD scores and the threshold rule.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetHeader, SceneRecord};
use crate::model::{FusionConfig, HeadParams};
use crate::prompts::IdBank;
use crate::tensor::{dot, norm, BatchNormMode, Tape, Tensor};
use crate::training::{scene_embeddings, TrainError};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("zero-norm vector in similarity")]
    ZeroNorm,
    #[error("dimension mismatch: embedding {embedding}, bank {bank}")]
    Dim { embedding: usize, bank: usize },
    #[error("cannot calibrate on an empty score list")]
    Empty,
    #[error("non-finite score")]
    NonFinite,
    #[error("target rate must lie in [0, 1], got {0}")]
    BadTarget(f64),
    #[error("unknown scoring method `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScoreError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    MaxLogit,
    Msp,
    Energy,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 3] =
        [ScoreMethod::MaxLogit, ScoreMethod::Msp, ScoreMethod::Energy];

    pub fn name(self) -> &'static str {
        match self {
            Self::MaxLogit => "maxlogit",
            Self::Msp => "msp",
            Self::Energy => "energy",
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreMethod {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ScoreError::UnknownMethod(s.to_string()))
    }
}

/// A scoring method with or without norm scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreVariant {
    pub method: ScoreMethod,
    pub norm_scaling: bool,
}

impl ScoreVariant {
    /// Every method, each with and without norm scaling.
    pub fn all() -> Vec<ScoreVariant> {
        ScoreMethod::ALL
            .into_iter()
            .flat_map(|method| {
                [true, false].map(|norm_scaling| ScoreVariant {
                    method,
                    norm_scaling,
                })
            })
            .collect()
    }

    /// `maxlogit_norm`, `maxlogit`, ...
    pub fn label(&self) -> String {
        if self.norm_scaling {
            format!("{}_norm", self.method)
        } else {
            self.method.to_string()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub method: ScoreMethod,
    pub threshold: f64,
    pub norm_scaling: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Id => "ID",
            Self::Ood => "OOD",
        })
    }
}

/// Cosine similarity of `v` to every row of `bank`.
pub fn similarity_logits(v: &[f64], bank: &Tensor) -> Result<Vec<f64>> {
    if bank.rank() != 2 || bank.cols() != v.len() {
        return Err(ScoreError::Dim {
            embedding: v.len(),
            bank: bank.cols(),
        });
    }
    let nv = norm(v);
    if !(nv > 0.0) {
        return Err(ScoreError::ZeroNorm);
    }
    (0..bank.rows())
        .map(|i| {
            let row = bank.row(i);
            let nr = norm(row);
            if !(nr > 0.0) {
                return Err(ScoreError::ZeroNorm);
            }
            Ok((dot(v, row) / (nv * nr)).clamp(-1.0, 1.0))
        })
        .collect()
}

fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// OOD score of one object, higher meaning more in-distribution.
///
/// MaxLogit uses the raw cosines; MSP and Energy use cosines multiplied by
/// `exp(log_scale)`, Energy being divided back by it. Panics on empty
/// `logits`.
pub fn score(
    logits: &[f64],
    v_norm: f64,
    method: ScoreMethod,
    norm_scaling: bool,
    log_scale: f64,
) -> f64 {
    assert!(!logits.is_empty(), "score needs at least one logit");
    let a = log_scale.exp();
    let base = match method {
        ScoreMethod::MaxLogit => logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ScoreMethod::Msp => {
            let z: Vec<f64> = logits.iter().map(|s| s * a).collect();
            let lse = logsumexp(&z);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (zmax - lse).exp()
        }
        ScoreMethod::Energy => {
            let z: Vec<f64> = logits.iter().map(|s| s * a).collect();
            logsumexp(&z) / a
        }
    };
    if norm_scaling {
        v_norm * base
    } else {
        base
    }
}

/// In-distribution iff `score >= threshold`.
pub fn decide(score: f64, threshold: f64) -> Decision {
    if score >= threshold {
        Decision::Id
    } else {
        Decision::Ood
    }
}

/// Largest threshold that keeps at least `target` of `id_scores` at or above
/// it. Only observed scores (and `-inf`) are candidates.
pub fn calibrate_threshold(id_scores: &[f64], target: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(ScoreError::Empty);
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(ScoreError::BadTarget(target));
    }
    if id_scores.iter().any(|s| s.is_nan()) {
        return Err(ScoreError::NonFinite);
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        if (j + 1) as f64 / n >= target {
            return Ok(sorted[i]);
        }
        i = j + 1;
    }
    Ok(f64::NEG_INFINITY)
}

/// Head outputs for one object of an evaluation split.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectScores {
    pub object_id: u64,
    pub is_ood: bool,
    pub logits: Vec<f64>,
    pub v_norm: f64,
    pub argmax: usize,
}

impl ObjectScores {
    pub fn score(&self, variant: ScoreVariant, log_scale: f64) -> f64 {
        score(
            &self.logits,
            self.v_norm,
            variant.method,
            variant.norm_scaling,
            log_scale,
        )
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the head in eval mode over every object and compares it to the bank.
pub fn score_scenes(
    head: &HeadParams,
    fusion: &FusionConfig,
    bank: &IdBank,
    header: &DatasetHeader,
    scenes: &[SceneRecord],
) -> Result<Vec<ObjectScores>> {
    let mut out = Vec::new();
    for scene in scenes.iter().filter(|s| !s.objects.is_empty()) {
        let mut tape = Tape::new();
        let res = scene_embeddings(
            &mut tape,
            head,
            fusion,
            scene,
            header.grid.as_ref(),
            BatchNormMode::Eval,
        )?;
        let v = tape.value(res.embeddings);
        for (i, o) in scene.objects.iter().enumerate() {
            let row = v.row(i);
            let logits = similarity_logits(row, &bank.embeddings)?;
            out.push(ObjectScores {
                object_id: o.object_id,
                is_ood: o.label.is_ood(),
                v_norm: norm(row),
                argmax: argmax(&logits),
                logits,
            });
        }
    }
    Ok(out)
}

/// Score dump: one row per object and variant.
pub fn write_score_csv(
    path: impl AsRef<Path>,
    objects: &[ObjectScores],
    variants: &[(ScoreVariant, f64)],
    log_scale: f64,
) -> Result<()> {
    let k = objects.first().map_or(0, |o| o.logits.len());
    let mut out = Vec::new();
    write!(out, "object_id,is_ood_ground_truth,argmax_class,v_norm")?;
    for i in 1..=k {
        write!(out, ",s_{i}")?;
    }
    writeln!(out, ",score_method,score_value,decision")?;
    for o in objects {
        for &(variant, threshold) in variants {
            write!(
                out,
                "{},{},{},{}",
                o.object_id,
                u8::from(o.is_ood),
                o.argmax,
                o.v_norm
            )?;
            for s in &o.logits {
                write!(out, ",{s}")?;
            }
            let value = o.score(variant, log_scale);
            writeln!(
                out,
                ",{},{},{}",
                variant.label(),
                value,
                decide(value, threshold)
            )?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
