//! Embedding cache JSON:
//!
//! ```json
//! {"model_name": "...", "dim": 512, "normalized": true,
//!  "prompt_format_id": "object-prompt-v1",
//!  "entries": {"car": [...], "This object is a car located at ...": [...]}}
//! ```
//!
//! Keys are class names (Simple prompt) or full rendered prompt strings.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PromptError, Result, PROMPT_FORMAT_ID};

/// Allowed deviation from unit norm for caches flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingCache {
    pub model_name: String,
    pub dim: usize,
    pub normalized: bool,
    pub prompt_format_id: String,
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new(model_name: impl Into<String>, dim: usize, normalized: bool) -> Self {
        Self {
            model_name: model_name.into(),
            dim,
            normalized,
            prompt_format_id: PROMPT_FORMAT_ID.to_string(),
            entries: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PromptError::InvalidCache(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.prompt_format_id != PROMPT_FORMAT_ID {
            return bad(format!(
                "prompt_format_id `{}` does not match `{PROMPT_FORMAT_ID}`",
                self.prompt_format_id
            ));
        }
        if self.entries.is_empty() {
            return bad("no entries".into());
        }
        for (key, v) in &self.entries {
            if v.len() != self.dim {
                return bad(format!(
                    "entry `{key}` has length {}, expected {}",
                    v.len(),
                    self.dim
                ));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return bad(format!("entry `{key}` is not finite"));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return bad(format!("entry `{key}` is the zero vector"));
            }
            if self.normalized && (norm - 1.0).abs() > NORM_TOLERANCE {
                return bad(format!("entry `{key}` has norm {norm}, expected 1"));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cache: Self = serde_json::from_str(text)?;
        cache.validate()?;
        Ok(cache)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let cache: Self = serde_json::from_reader(r)?;
        cache.validate()?;
        Ok(cache)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_cache(normalized: bool) -> EmbeddingCache {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut c = EmbeddingCache::new("synthetic", 5, normalized);
        for name in ["car", "truck", "pedestrian"] {
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v = if normalized {
                v.iter().map(|x| x / n).collect()
            } else {
                v
            };
            c.entries.insert(name.into(), v);
        }
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for normalized in [true, false] {
            let c = random_cache(normalized);
            let text = c.to_json().unwrap();
            let back = EmbeddingCache::from_json(&text).unwrap();
            assert_eq!(back, c);
            for (k, v) in &c.entries {
                let b = back.get(k).unwrap();
                assert!(v.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            assert_eq!(back.to_json().unwrap(), text);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.json");
        let c = random_cache(true);
        c.save(&p).unwrap();
        assert_eq!(EmbeddingCache::load(&p).unwrap(), c);
    }

    #[test]
    fn reads_hand_written_json() {
        let text = r#"{"model_name": "clip", "dim": 2, "normalized": true,
            "prompt_format_id": "object-prompt-v1",
            "entries": {"car": [0.6, 0.8], "bus": [1.0, 0.0]}}"#;
        let c = EmbeddingCache::from_json(text).unwrap();
        assert_eq!(c.get("car").unwrap(), &[0.6, 0.8]);
        assert_eq!(c.entries.len(), 2);
    }

    #[test]
    fn validation_errors() {
        let mut c = random_cache(true);
        c.entries.get_mut("car").unwrap()[0] += 1e-6;
        assert!(c.validate().unwrap_err().to_string().contains("norm"));

        let mut c = random_cache(false);
        c.entries.get_mut("car").unwrap().pop();
        assert!(c.validate().unwrap_err().to_string().contains("length"));

        let mut c = random_cache(false);
        c.prompt_format_id = "other".into();
        assert!(c.validate().is_err());

        let mut c = random_cache(false);
        c.entries.insert("zero".into(), vec![0.0; 5]);
        assert!(c.validate().is_err());

        assert!(EmbeddingCache::new("x", 3, true).validate().is_err());
        assert!(EmbeddingCache::from_json(r#"{"model_name": "x"}"#).is_err());
    }
}
