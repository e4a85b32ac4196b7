//! Prompt rendering, text-embedding sources and the ID text bank.

mod bank;
mod cache;
mod encoder;

pub use bank::{build_id_bank, read_class_list, write_class_list, IdBank, TextSource};
pub use cache::{EmbeddingCache, NORM_TOLERANCE};
pub use encoder::{normalize_box, synth_text_encode, SyntheticEncoder, SyntheticEncoderConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Box7;

/// Identifies the rendering rules below; stored in embedding caches so a
/// cache produced with different strings is rejected.
pub const PROMPT_FORMAT_ID: &str = "object-prompt-v1";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("spatial prompt needs a box")]
    MissingBox,
    #[error("class `{0}` not found in text source")]
    MissingClass(String),
    #[error("duplicate class `{0}`")]
    DuplicateClass(String),
    #[error("class list is empty")]
    EmptyClassList,
    #[error("invalid embedding cache: {0}")]
    InvalidCache(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Simple,
    Spatial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub class_token: String,
    pub bbox: Option<Box7>,
}

impl PromptTemplate {
    pub fn simple(class_token: impl Into<String>) -> Self {
        Self {
            kind: PromptKind::Simple,
            class_token: class_token.into(),
            bbox: None,
        }
    }

    pub fn spatial(class_token: impl Into<String>, bbox: Box7) -> Self {
        Self {
            kind: PromptKind::Spatial,
            class_token: class_token.into(),
            bbox: Some(bbox),
        }
    }
}

/// Renders the prompt text. Numbers use two fixed decimals; dimensions are
/// printed width, length, height.
pub fn render_prompt(t: &PromptTemplate) -> Result<String> {
    let cls = &t.class_token;
    match t.kind {
        PromptKind::Simple => Ok(format!("This object is a {cls}.")),
        PromptKind::Spatial => {
            let b = t.bbox.as_ref().ok_or(PromptError::MissingBox)?;
            Ok(format!(
                "This object is a {cls} located at ({:.2}, {:.2}, {:.2}), with dimensions ({:.2}m, {:.2}m, {:.2}m) and orientation {:.2} rad.",
                b.x, b.y, b.z, b.w, b.l, b.h, b.theta
            ))
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based fair coin keyed by `(seed, epoch, scene, object)`.
pub fn choose_prompt_kind(seed: u64, epoch: u64, scene: u64, object: u64) -> PromptKind {
    let mut h = splitmix64(seed);
    for k in [epoch, scene, object] {
        h = splitmix64(h ^ k);
    }
    if h >> 63 == 0 {
        PromptKind::Simple
    } else {
        PromptKind::Spatial
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_box() -> Box7 {
        Box7::new(0.84, -16.86, -2.20, 0.56, 0.98, 1.62, -1.84).unwrap()
    }

    #[test]
    fn simple_prompt() {
        let t = PromptTemplate::simple("pedestrian");
        assert_eq!(render_prompt(&t).unwrap(), "This object is a pedestrian.");
    }

    #[test]
    fn spatial_prompt_matches_reference_sentence() {
        let t = PromptTemplate::spatial("pedestrian", example_box());
        assert_eq!(
            render_prompt(&t).unwrap(),
            "This object is a pedestrian located at (0.84, -16.86, -2.20), with dimensions (0.98m, 0.56m, 1.62m) and orientation -1.84 rad."
        );
    }

    #[test]
    fn zero_yaw_and_large_values() {
        let b = Box7::new(1234.5, 0.0, 0.0, 1.0, 2.0, 3.0, 0.0).unwrap();
        let s = render_prompt(&PromptTemplate::spatial("car", b)).unwrap();
        assert!(s.ends_with("orientation 0.00 rad."), "{s}");
        assert!(s.contains("(1234.50, 0.00, 0.00)"), "{s}");
        assert!(s.contains("(2.00m, 1.00m, 3.00m)"), "{s}");
    }

    #[test]
    fn spatial_without_box_fails() {
        let t = PromptTemplate {
            kind: PromptKind::Spatial,
            class_token: "car".into(),
            bbox: None,
        };
        assert!(matches!(render_prompt(&t), Err(PromptError::MissingBox)));
    }

    #[test]
    fn prompt_kind_is_deterministic() {
        for i in 0..100 {
            assert_eq!(
                choose_prompt_kind(7, 1, 2, i),
                choose_prompt_kind(7, 1, 2, i)
            );
        }
    }

    #[test]
    fn prompt_kind_is_fair() {
        let n = 10_000u64;
        let simple = (0..n)
            .filter(|&i| choose_prompt_kind(42, i / 100, i % 100, i % 7) == PromptKind::Simple)
            .count();
        let frac = simple as f64 / n as f64;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
    }

    #[test]
    fn neighbouring_objects_are_independent() {
        // 2x2 contingency table over (object i, object i+1); chi-square with
        // one degree of freedom, 99.9% quantile 10.83.
        let mut table = [[0f64; 2]; 2];
        let as_bit = |k| usize::from(k == PromptKind::Spatial);
        for scene in 0..5000u64 {
            let a = as_bit(choose_prompt_kind(3, 0, scene, 0));
            let b = as_bit(choose_prompt_kind(3, 0, scene, 1));
            table[a][b] += 1.0;
        }
        let n: f64 = table.iter().flatten().sum();
        let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
        let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
        let mut chi2 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let e = rows[i] * cols[j] / n;
                chi2 += (table[i][j] - e).powi(2) / e;
            }
        }
        assert!(chi2 < 10.83, "chi2 {chi2}");
    }

    #[test]
    fn epochs_redraw() {
        let differs = (0..200u64)
            .filter(|&i| choose_prompt_kind(1, 0, 0, i) != choose_prompt_kind(1, 1, 0, i))
            .count();
        assert!(differs > 50);
    }
}
