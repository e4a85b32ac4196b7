use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, ModelError, Result};
use crate::tensor::{ParamStore, RunningStats, Tensor};

/// Bounds on the logit multiplier `exp(log_scale)`.
pub const MIN_LOGIT_SCALE: f64 = 1.0;
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Initial temperature of the contrastive softmax.
const INIT_TEMPERATURE: f64 = 0.07;

pub mod names {
    pub const CONV1_W: &str = "adapter.conv1.weight";
    pub const CONV1_B: &str = "adapter.conv1.bias";
    pub const BN1_GAMMA: &str = "adapter.bn1.gamma";
    pub const BN1_BETA: &str = "adapter.bn1.beta";
    pub const CONV2_W: &str = "adapter.conv2.weight";
    pub const CONV2_B: &str = "adapter.conv2.bias";
    pub const BN2_GAMMA: &str = "adapter.bn2.gamma";
    pub const BN2_BETA: &str = "adapter.bn2.beta";
    pub const BOX_W: &str = "box_encoder.weight";
    pub const BOX_B: &str = "box_encoder.bias";
    pub const ALIGN_W: &str = "align.weight";
    pub const ALIGN_B: &str = "align.bias";
    pub const LOG_SCALE: &str = "log_scale";

    pub(crate) const BN_RUNNING: [(&str, &str); 2] = [
        ("adapter.bn1.running_mean", "adapter.bn1.running_var"),
        ("adapter.bn2.running_mean", "adapter.bn2.running_var"),
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Channels `C` of the detector feature map.
    pub channels: usize,
    /// Text-embedding dimension `D`.
    pub embed_dim: usize,
    #[serde(default = "default_box_dim")]
    pub box_dim: usize,
    /// Residual CNN on the feature map before pooling.
    #[serde(default = "yes")]
    pub use_adapter: bool,
    /// Encoded box geometry concatenated to the pooled feature.
    #[serde(default = "yes")]
    pub use_boxes: bool,
}

fn default_box_dim() -> usize {
    64
}

fn yes() -> bool {
    true
}

impl HeadConfig {
    pub fn new(channels: usize, embed_dim: usize) -> Self {
        Self {
            channels,
            embed_dim,
            box_dim: default_box_dim(),
            use_adapter: true,
            use_boxes: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.embed_dim == 0 || self.box_dim == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "zero dimension in {self:?}"
            )));
        }
        Ok(())
    }

    pub fn align_input_dim(&self) -> usize {
        self.channels + if self.use_boxes { self.box_dim } else { 0 }
    }
}

/// All state of the head: trainable tensors plus batch-norm running stats.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub store: ParamStore,
    pub bn_stats: Vec<RunningStats>,
}

impl HeadParams {
    /// Seeded initialization: Kaiming-uniform convolutions, `±1/sqrt(fan_in)`
    /// affine layers, unit batch-norm scale, temperature 0.07.
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let mut bn_stats = Vec::new();
        if config.use_adapter {
            let fan_in = (c * 9) as f64;
            let conv_bound = (6.0 / fan_in).sqrt();
            let bias_bound = 1.0 / fan_in.sqrt();
            for (w, b, g, beta) in [
                (
                    names::CONV1_W,
                    names::CONV1_B,
                    names::BN1_GAMMA,
                    names::BN1_BETA,
                ),
                (
                    names::CONV2_W,
                    names::CONV2_B,
                    names::BN2_GAMMA,
                    names::BN2_BETA,
                ),
            ] {
                store.insert(w, uniform(&mut rng, &[c, c, 3, 3], conv_bound));
                store.insert(b, uniform(&mut rng, &[c], bias_bound));
                store.insert(g, Tensor::full(&[c], 1.0));
                store.insert(beta, Tensor::zeros(&[c]));
                bn_stats.push(RunningStats::new(c));
            }
        }
        if config.use_boxes {
            let bound = 1.0 / 7f64.sqrt();
            store.insert(names::BOX_W, uniform(&mut rng, &[7, config.box_dim], bound));
            store.insert(names::BOX_B, uniform(&mut rng, &[config.box_dim], bound));
        }
        let fan_in = config.align_input_dim();
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.insert(
            names::ALIGN_W,
            uniform(&mut rng, &[fan_in, config.embed_dim], bound),
        );
        store.insert(
            names::ALIGN_B,
            uniform(&mut rng, &[config.embed_dim], bound),
        );
        store.insert(
            names::LOG_SCALE,
            Tensor::scalar((1.0 / INIT_TEMPERATURE).ln()),
        );
        Ok(Self {
            config,
            store,
            bn_stats,
        })
    }

    pub fn log_scale(&self) -> f64 {
        self.store
            .get(names::LOG_SCALE)
            .expect("log_scale present")
            .data()[0]
    }

    /// The logit multiplier `exp(log_scale) = 1 / temperature`.
    pub fn logit_scale(&self) -> f64 {
        self.log_scale().exp()
    }

    /// Clamps `exp(log_scale)` into `[MIN_LOGIT_SCALE, MAX_LOGIT_SCALE]`.
    pub fn clamp_log_scale(&mut self) {
        let v = self.log_scale();
        let clamped = v.clamp(MIN_LOGIT_SCALE.ln(), MAX_LOGIT_SCALE.ln());
        if clamped != v {
            self.store
                .get_mut(names::LOG_SCALE)
                .expect("log_scale present")
                .data_mut()[0] = clamped;
        }
    }

    /// Whether AdamW weight decay applies to a parameter. The temperature and
    /// the batch-norm affine terms are exempt.
    pub fn decays(name: &str) -> bool {
        name != names::LOG_SCALE && !name.contains(".bn")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for (name, value) in self.store.iter() {
            ckpt.insert(name, value.clone());
        }
        for (stats, (mean, var)) in self.bn_stats.iter().zip(names::BN_RUNNING) {
            ckpt.insert(mean, Tensor::vector(&stats.mean));
            ckpt.insert(var, Tensor::vector(&stats.var));
        }
        ckpt
    }

    /// Rebuilds a head from checkpoint tensors; the configuration is inferred
    /// from which tensors are present and their shapes. Loaded running
    /// statistics count as initialized.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let align = ckpt.require(names::ALIGN_W)?;
        if align.rank() != 2 {
            return Err(ModelError::InvalidConfig(format!(
                "align weight shape {:?}",
                align.shape()
            )));
        }
        let use_adapter = ckpt.get(names::CONV1_W).is_some();
        let use_boxes = ckpt.get(names::BOX_W).is_some();
        let box_dim = match ckpt.get(names::BOX_W) {
            Some(w) if w.rank() == 2 => w.shape()[1],
            Some(w) => {
                return Err(ModelError::InvalidConfig(format!(
                    "box weight shape {:?}",
                    w.shape()
                )))
            }
            None => default_box_dim(),
        };
        let in_dim = align.shape()[0];
        let channels = if use_boxes {
            in_dim
                .checked_sub(box_dim)
                .filter(|&c| c > 0)
                .ok_or_else(|| {
                    ModelError::InvalidConfig("align input narrower than box code".into())
                })?
        } else {
            in_dim
        };
        let config = HeadConfig {
            channels,
            embed_dim: align.shape()[1],
            box_dim,
            use_adapter,
            use_boxes,
        };
        let reference = Self::init(config, 0)?;
        let mut store = ParamStore::new();
        for (name, expected) in reference.store.iter() {
            let t = ckpt.require(name)?;
            if t.shape() != expected.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            store.insert(name, t.clone());
        }
        let mut bn_stats = Vec::new();
        if use_adapter {
            for (mean, var) in names::BN_RUNNING {
                let mut stats = RunningStats::new(channels);
                let (m, v) = (ckpt.require(mean)?, ckpt.require(var)?);
                if m.len() != channels || v.len() != channels {
                    return Err(ModelError::InvalidConfig(format!(
                        "running stats `{mean}` width"
                    )));
                }
                stats.mean = m.data().to_vec();
                stats.var = v.data().to_vec();
                stats.initialized = true;
                bn_stats.push(stats);
            }
        }
        Ok(Self {
            config,
            store,
            bn_stats,
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}
