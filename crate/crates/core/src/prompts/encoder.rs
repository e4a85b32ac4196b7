//! Deterministic stand-in for a frozen text encoder.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PromptError, Result};
use crate::model::Box7;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEncoderConfig {
    pub seed: u64,
    pub dim: usize,
    #[serde(default = "default_sensitivity")]
    pub box_sensitivity: f64,
}

fn default_sensitivity() -> f64 {
    0.2
}

impl SyntheticEncoderConfig {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            box_sensitivity: default_sensitivity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(PromptError::InvalidConfig(format!(
                "dim must be at least 2, got {}",
                self.dim
            )));
        }
        if !(self.box_sensitivity >= 0.0 && self.box_sensitivity.is_finite()) {
            return Err(PromptError::InvalidConfig(format!(
                "box_sensitivity must be finite and non-negative, got {}",
                self.box_sensitivity
            )));
        }
        Ok(())
    }
}

/// Scales box parameters to roughly unit range.
pub fn normalize_box(b: &Box7) -> [f64; 7] {
    [
        b.x / 50.0,
        b.y / 50.0,
        b.z / 5.0,
        b.l / 5.0,
        b.w / 5.0,
        b.h / 5.0,
        b.theta / PI,
    ]
}

fn stream(seed: u64, tag: &[u8], key: &[u8]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag);
    h.update(key);
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn class_base(class: &str, cfg: &SyntheticEncoderConfig) -> Vec<f64> {
    normalize(gaussian(
        &mut stream(cfg.seed, b"class", class.as_bytes()),
        cfg.dim,
    ))
}

/// Row-major `D x 7`.
fn box_projection(cfg: &SyntheticEncoderConfig) -> Vec<f64> {
    gaussian(&mut stream(cfg.seed, b"box-projection", &[]), cfg.dim * 7)
}

fn combine(base: &[f64], proj: &[f64], b: Option<&Box7>, sensitivity: f64) -> Vec<f64> {
    let Some(b) = b else {
        return base.to_vec();
    };
    let nb = normalize_box(b);
    let v = base
        .iter()
        .enumerate()
        .map(|(d, &e)| {
            e + sensitivity
                * proj[d * 7..d * 7 + 7]
                    .iter()
                    .zip(&nb)
                    .map(|(p, x)| p * x)
                    .sum::<f64>()
        })
        .collect();
    normalize(v)
}

/// Unit embedding of a class, perturbed along a fixed random projection of
/// the box when one is given.
pub fn synth_text_encode(
    class: &str,
    b: Option<&Box7>,
    cfg: &SyntheticEncoderConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let base = class_base(class, cfg);
    let proj = if b.is_some() {
        box_projection(cfg)
    } else {
        Vec::new()
    };
    Ok(Tensor::vector(&combine(
        &base,
        &proj,
        b,
        cfg.box_sensitivity,
    )))
}

/// [`synth_text_encode`] with the per-class vectors and projection cached.
#[derive(Debug)]
pub struct SyntheticEncoder {
    cfg: SyntheticEncoderConfig,
    proj: Vec<f64>,
    bases: Mutex<HashMap<String, Vec<f64>>>,
}

impl SyntheticEncoder {
    pub fn new(cfg: SyntheticEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            proj: box_projection(&cfg),
            cfg,
            bases: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &SyntheticEncoderConfig {
        &self.cfg
    }

    pub fn encode(&self, class: &str, b: Option<&Box7>) -> Vec<f64> {
        let mut bases = self.bases.lock().expect("encoder cache poisoned");
        let base = bases
            .entry(class.to_string())
            .or_insert_with(|| class_base(class, &self.cfg));
        combine(base, &self.proj, b, self.cfg.box_sensitivity)
    }
}
