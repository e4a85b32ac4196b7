//! Dataset records, the `ALDS` container and the synthetic benchmark.

mod format;
mod synthetic;

pub use format::{
    read_dataset, sidecar_path, write_dataset, DatasetReader, DATASET_MAGIC, DATASET_VERSION,
};
pub use synthetic::{
    default_class_names, generate_synthetic, write_synthetic, SyntheticDataset, SyntheticFiles,
    SyntheticSpec,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{center_pool, Box7, GridMeta, ModelError};
use crate::tensor::{Tensor, TensorError};

/// Tolerance for the stored-feature vs. map consistency check.
pub const POOL_CONSISTENCY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset: bad magic at byte 0")]
    BadMagic,
    #[error("dataset: unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset: truncated at byte {offset} while reading {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("dataset: corrupt at byte {offset}: {msg}")]
    Corrupt { offset: u64, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("cannot place centers: {0}")]
    CannotPlaceCenters(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetMode {
    /// Objects carry pooled features and scenes carry a scene feature.
    #[serde(rename = "per-object-features")]
    Features,
    /// Scenes carry the full feature map (plus the pooled features).
    #[serde(rename = "feature-maps")]
    Maps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    /// Index into the header's class list.
    Id(usize),
    /// Unknown category; the string is opaque and never enters the bank.
    Ood(String),
}

impl Label {
    pub fn is_ood(&self) -> bool {
        matches!(self, Self::Ood(_))
    }

    pub fn class_index(&self) -> Option<usize> {
        match self {
            Self::Id(i) => Some(*i),
            Self::Ood(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub object_id: u64,
    pub feature: Option<Tensor>,
    pub bbox: Box7,
    pub label: Label,
    pub is_ground_truth: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub map: Option<Tensor>,
    pub scene_feature: Option<Tensor>,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub scenes: u64,
    pub objects: u64,
    pub id_objects: u64,
    pub ood_objects: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub mode: DatasetMode,
    pub split: Split,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub classes: Vec<String>,
    pub grid: Option<GridMeta>,
    pub counts: SplitCounts,
}

impl DatasetHeader {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.version != DATASET_VERSION {
            return Err(DataError::UnsupportedVersion(self.version));
        }
        if self.channels == 0 || self.embed_dim == 0 {
            return bad("channels and embed_dim must be positive".into());
        }
        if self.classes.len() != self.num_classes || self.num_classes == 0 {
            return bad(format!(
                "{} class names for K={}",
                self.classes.len(),
                self.num_classes
            ));
        }
        match (self.mode, &self.grid) {
            (DatasetMode::Maps, None) => return bad("feature-maps mode requires a grid".into()),
            (_, Some(g)) => g.validate()?,
            _ => {}
        }
        Ok(())
    }

    /// Checks one scene against this header.
    pub fn check_scene(&self, scene: &SceneRecord) -> Result<()> {
        let bad = |m: String| Err(DataError::Invalid(format!("scene {}: {m}", scene.scene_id)));
        let c = self.channels;
        match self.mode {
            DatasetMode::Maps => {
                let g = self.grid.as_ref().expect("validated");
                match &scene.map {
                    Some(m) if m.shape() == [c, g.height, g.width] => {}
                    Some(m) => return bad(format!("map shape {:?}", m.shape())),
                    None => return bad("missing feature map".into()),
                }
            }
            DatasetMode::Features => {
                if scene.map.is_some() {
                    return bad("unexpected feature map".into());
                }
                if scene.scene_feature.is_none() {
                    return bad("missing scene feature".into());
                }
            }
        }
        if let Some(f) = &scene.scene_feature {
            if f.shape() != [c] {
                return bad(format!("scene feature shape {:?}", f.shape()));
            }
        }
        for o in &scene.objects {
            let bad = |m: String| {
                Err(DataError::Invalid(format!(
                    "scene {} object {}: {m}",
                    scene.scene_id, o.object_id
                )))
            };
            o.bbox.validate()?;
            if o.split != self.split {
                return bad(format!("split {:?} in a {:?} file", o.split, self.split));
            }
            match &o.label {
                Label::Id(k) if *k >= self.num_classes => {
                    return bad(format!("class index {k} out of range"))
                }
                Label::Ood(_) if o.split == Split::Train => {
                    return bad("OOD object in the train split".into())
                }
                _ => {}
            }
            if o.split == Split::Train && !o.is_ground_truth {
                return bad("train objects must be ground truth".into());
            }
            match &o.feature {
                Some(f) if f.shape() != [c] => {
                    return bad(format!("feature shape {:?}", f.shape()))
                }
                None if self.mode == DatasetMode::Features => {
                    return bad("missing object feature".into())
                }
                _ => {}
            }
            if let (Some(f), Some(m), Some(g)) = (&o.feature, &scene.map, &self.grid) {
                let (pooled, _) = center_pool(m, &o.bbox, g)?;
                let dev = pooled
                    .data()
                    .iter()
                    .zip(f.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if dev > POOL_CONSISTENCY_TOL {
                    return bad(format!("stored feature differs from the map by {dev}"));
                }
            }
        }
        Ok(())
    }
}

/// Counts for a list of scenes.
pub fn count_scenes(scenes: &[SceneRecord]) -> SplitCounts {
    let mut c = SplitCounts {
        scenes: scenes.len() as u64,
        ..SplitCounts::default()
    };
    for o in scenes.iter().flat_map(|s| &s.objects) {
        c.objects += 1;
        if o.label.is_ood() {
            c.ood_objects += 1;
        } else {
            c.id_objects += 1;
        }
    }
    c
}
