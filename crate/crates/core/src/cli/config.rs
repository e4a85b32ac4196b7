use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::data::SyntheticSpec;
use crate::scoring::{ScoreMethod, ScoreVariant};
use crate::training::TrainConfig;

/// Benchmark used when no synthetic block is configured.
pub fn benchmark_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec::new(seed, 5, 32, 64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    /// Expected feature channels; checked against the dataset header.
    pub channels: Option<usize>,
    /// Expected embedding width; checked against the dataset header.
    pub embed_dim: Option<usize>,
    pub box_dim: usize,
    pub use_adapter: bool,
    pub use_boxes: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            channels: None,
            embed_dim: None,
            box_dim: 64,
            use_adapter: true,
            use_boxes: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextOptions {
    /// Embedding cache JSON. Without one the seeded synthetic encoder is used.
    pub cache: Option<PathBuf>,
    pub box_sensitivity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub methods: Vec<ScoreMethod>,
    /// `Some(b)` restricts to one norm-scaling setting; `None` runs both.
    pub norm_scaling: Option<bool>,
    pub target_tpr: f64,
    pub histogram_bins: usize,
    /// Fixed threshold for `score`; otherwise read from `report.json`.
    pub threshold: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            methods: ScoreMethod::ALL.to_vec(),
            norm_scaling: None,
            target_tpr: 0.95,
            histogram_bins: 50,
            threshold: None,
        }
    }
}

impl EvalOptions {
    pub fn variants(&self) -> Vec<ScoreVariant> {
        ScoreVariant::all()
            .into_iter()
            .filter(|v| {
                self.methods.contains(&v.method)
                    && self.norm_scaling.is_none_or(|n| n == v.norm_scaling)
            })
            .collect()
    }
}

/// Everything a command needs. The top-level seed replaces the seeds of the
/// nested synthetic and training blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/train.alds`.
    pub train_data: Option<PathBuf>,
    /// Defaults to `<out_dir>/val.alds`.
    pub val_data: Option<PathBuf>,
    /// Defaults to `<out_dir>/checkpoint.alod`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `id_bank.json` next to the checkpoint.
    pub bank: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub text: TextOptions,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            train_data: None,
            val_data: None,
            checkpoint: None,
            bank: None,
            resume: None,
            synthetic: None,
            text: TextOptions::default(),
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = self
            .synthetic
            .clone()
            .unwrap_or_else(|| benchmark_spec(self.seed));
        spec.seed = self.seed;
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn train_path(&self) -> PathBuf {
        self.train_data
            .clone()
            .unwrap_or_else(|| self.out_dir.join("train.alds"))
    }

    pub fn val_path(&self) -> PathBuf {
        self.val_data
            .clone()
            .unwrap_or_else(|| self.out_dir.join("val.alds"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.alod"))
    }

    pub fn bank_path(&self) -> PathBuf {
        self.bank.clone().unwrap_or_else(|| {
            let ckpt = self.checkpoint_path();
            ckpt.parent()
                .unwrap_or(Path::new("."))
                .join(super::BANK_FILE)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.eval.variants().len(), 6);
        assert_eq!(cfg.train_path(), PathBuf::from("out/train.alds"));
        assert_eq!(cfg.bank_path(), PathBuf::from("out/id_bank.json"));
    }

    #[test]
    fn top_level_seed_wins() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 9, "train": {"seed": 1}, "synthetic": {"seed": 2, "num_classes": 3, "n_train": 10, "n_val_id": 5, "n_val_ood": 5, "channels": 4, "embed_dim": 8, "margin_deg": 30, "sigma": 0.1}}"#)
                .unwrap();
        assert_eq!(cfg.train_config().seed, 9);
        assert_eq!(cfg.synthetic_spec().seed, 9);
        assert_eq!(cfg.synthetic_spec().num_classes, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
    }

    #[test]
    fn variant_filter() {
        let e = EvalOptions {
            methods: vec![ScoreMethod::MaxLogit],
            norm_scaling: Some(false),
            ..EvalOptions::default()
        };
        let v = e.variants();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].label(), "maxlogit");
    }
}
