//! The alignment head: CNN feature adapter, center/scene pooling with a
//! convex scene blend, a 64-d box encoder, and the linear projection into the
//! text-embedding space, plus the learnable logit scale.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    adapt_features, center_pool, encode_box, forward_object, forward_scene, fuse, ObjectInput,
    SceneFeatures, SceneOutput,
};
pub use params::{names, HeadConfig, HeadParams, MAX_LOGIT_SCALE, MIN_LOGIT_SCALE};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("fusion lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("invalid head config: {0}")]
    InvalidConfig(String),
    #[error("channel mismatch: head expects {expected}, input has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("{boxes} boxes for {features} object features")]
    CountMismatch { boxes: usize, features: usize },
    #[error("precomputed input is missing the scene feature")]
    MissingSceneFeature,
    #[error("the feature adapter needs a feature-map input")]
    AdapterNeedsMap,
    #[error("checkpoint: bad magic at byte 0")]
    BadMagic,
    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: truncated at byte {offset} while reading {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("checkpoint: corrupt at byte {offset}: {msg}")]
    Corrupt { offset: u64, msg: String },
    #[error("checkpoint: missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        PI
    } else {
        t
    }
}

/// A 7-DoF box: center, size and yaw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box7 {
    /// Validates the size and wraps `theta` into (-pi, pi].
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let b = Self {
            x,
            y,
            z,
            l,
            w,
            h,
            theta: normalize_angle(theta),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(ModelError::InvalidBox("non-finite parameter".into()));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(ModelError::InvalidBox(format!(
                "sizes must be positive, got l={} w={} h={}",
                self.l, self.w, self.h
            )));
        }
        if !(self.theta > -PI && self.theta <= PI) {
            return Err(ModelError::InvalidBox(format!(
                "yaw {} outside (-pi, pi]",
                self.theta
            )));
        }
        Ok(())
    }

    /// `(x, y, z, l, w, h, theta)`
    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.l, self.w, self.h, self.theta]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }
}

/// Placement of the BEV feature map in the ego frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub x_min: f64,
    pub y_min: f64,
    pub cell_size: f64,
    pub height: usize,
    pub width: usize,
}

/// Grid cell holding a point, with a flag set when the point fell outside the
/// map and was clamped to the border.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
    pub clamped: bool,
}

impl GridMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(ModelError::InvalidGrid(format!(
                "cell_size {}",
                self.cell_size
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(ModelError::InvalidGrid("empty grid".into()));
        }
        if !self.x_min.is_finite() || !self.y_min.is_finite() {
            return Err(ModelError::InvalidGrid("non-finite origin".into()));
        }
        Ok(())
    }

    pub fn cell_of(&self, x: f64, y: f64) -> CellIndex {
        let (row, r_clamped) = clamp_index((y - self.y_min) / self.cell_size, self.height);
        let (col, c_clamped) = clamp_index((x - self.x_min) / self.cell_size, self.width);
        CellIndex {
            row,
            col,
            clamped: r_clamped || c_clamped,
        }
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.cell_size * self.width as f64
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.cell_size * self.height as f64
    }
}

fn clamp_index(pos: f64, len: usize) -> (usize, bool) {
    let f = pos.floor();
    if !(f >= 0.0) {
        (0, true)
    } else if f >= len as f64 {
        (len - 1, true)
    } else {
        (f as usize, false)
    }
}

/// Scene-context blend weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

impl FusionConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let cfg = Self { lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.lambda) {
            Ok(())
        } else {
            Err(ModelError::InvalidLambda(self.lambda))
        }
    }
}
