//! Seeded Gaussian-cluster benchmark laid out on BEV feature maps.
//!
//! ID class `k` draws features from `N(mu_k, sigma^2 I)` with the centers at
//! least `margin_deg` apart. OOD objects come from clusters at least
//! `ood_margin_deg` away from every ID center, with a smaller mean norm.
//! Objects are written into distinct cells of a low-amplitude background map.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    write_dataset, DataError, DatasetHeader, DatasetMode, Label, ObjectRecord, Result, SceneRecord,
    Split, SplitCounts, DATASET_VERSION,
};
use crate::model::{Box7, GridMeta};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 20_000;

const CLASS_NAMES: [&str; 10] = [
    "car",
    "truck",
    "bus",
    "pedestrian",
    "bicycle",
    "motorcycle",
    "trailer",
    "construction_vehicle",
    "traffic_cone",
    "barrier",
];

/// Mean (l, w, h) per class, matching `CLASS_NAMES`.
const CLASS_SIZES: [[f64; 3]; 10] = [
    [4.63, 1.96, 1.74],
    [6.94, 2.52, 2.84],
    [11.0, 2.95, 3.47],
    [0.73, 0.67, 1.77],
    [1.70, 0.60, 1.28],
    [2.11, 0.77, 1.47],
    [12.3, 2.90, 3.87],
    [6.37, 2.85, 3.19],
    [0.41, 0.41, 1.07],
    [0.50, 2.53, 0.98],
];

/// Mean (l, w, h) of the OOD clusters, cycled.
const OOD_SIZES: [[f64; 3]; 3] = [[1.20, 0.45, 0.85], [0.95, 0.60, 1.05], [3.10, 1.40, 1.90]];

pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| match CLASS_NAMES.get(i) {
            Some(n) => n.to_string(),
            None => format!("class_{i}"),
        })
        .collect()
}

fn default_ood_margin() -> f64 {
    60.0
}
fn default_center_norm() -> f64 {
    3.0
}
fn default_ood_norm_scale() -> f64 {
    0.5
}
fn default_ood_clusters() -> usize {
    3
}
fn default_objects_per_scene() -> usize {
    8
}
fn default_background_sigma() -> f64 {
    0.05
}
fn default_size_rel_std() -> f64 {
    0.1
}
fn default_grid() -> GridMeta {
    GridMeta {
        x_min: -4.0,
        y_min: -4.0,
        cell_size: 0.5,
        height: 16,
        width: 16,
    }
}
fn default_mode() -> DatasetMode {
    DatasetMode::Maps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default)]
    pub seed: u64,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_val_id: usize,
    pub n_val_ood: usize,
    pub channels: usize,
    pub embed_dim: usize,
    /// Minimum angle between ID class centers, degrees.
    pub margin_deg: f64,
    /// Per-coordinate feature noise.
    pub sigma: f64,
    /// Minimum angle between an OOD cluster and every ID center, degrees.
    #[serde(default = "default_ood_margin")]
    pub ood_margin_deg: f64,
    #[serde(default = "default_center_norm")]
    pub center_norm: f64,
    /// OOD center norm relative to `center_norm`.
    #[serde(default = "default_ood_norm_scale")]
    pub ood_norm_scale: f64,
    #[serde(default = "default_ood_clusters")]
    pub n_ood_clusters: usize,
    #[serde(default = "default_objects_per_scene")]
    pub objects_per_scene: usize,
    #[serde(default = "default_background_sigma")]
    pub background_sigma: f64,
    /// Relative standard deviation of box sizes around the class mean.
    #[serde(default = "default_size_rel_std")]
    pub size_rel_std: f64,
    #[serde(default = "default_grid")]
    pub grid: GridMeta,
    #[serde(default = "default_mode")]
    pub mode: DatasetMode,
}

impl SyntheticSpec {
    pub fn new(seed: u64, num_classes: usize, channels: usize, embed_dim: usize) -> Self {
        Self {
            seed,
            num_classes,
            n_train: 2000,
            n_val_id: 500,
            n_val_ood: 500,
            channels,
            embed_dim,
            margin_deg: 60.0,
            sigma: 0.3,
            ood_margin_deg: default_ood_margin(),
            center_norm: default_center_norm(),
            ood_norm_scale: default_ood_norm_scale(),
            n_ood_clusters: default_ood_clusters(),
            objects_per_scene: default_objects_per_scene(),
            background_sigma: default_background_sigma(),
            size_rel_std: default_size_rel_std(),
            grid: default_grid(),
            mode: default_mode(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.num_classes == 0 || self.channels == 0 || self.embed_dim == 0 {
            return bad("num_classes, channels and embed_dim must be at least 1");
        }
        if self.n_train == 0
            || self.n_val_id == 0
            || self.n_val_ood == 0
            || self.n_ood_clusters == 0
        {
            return bad("all counts must be at least 1");
        }
        if !(self.margin_deg > 0.0) || !(self.ood_margin_deg > 0.0) {
            return bad("margins must be positive");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be positive");
        }
        if !(self.center_norm > 0.0) || !(self.ood_norm_scale > 0.0) {
            return bad("center norms must be positive");
        }
        if !(self.background_sigma >= 0.0) || !(self.size_rel_std >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        self.grid.validate()?;
        if self.objects_per_scene == 0
            || self.objects_per_scene > self.grid.height * self.grid.width
        {
            return bad("objects_per_scene must be between 1 and the number of grid cells");
        }
        Ok(())
    }
}

pub struct SyntheticDataset {
    pub classes: Vec<String>,
    pub train_header: DatasetHeader,
    pub train: Vec<SceneRecord>,
    pub val_header: DatasetHeader,
    pub val: Vec<SceneRecord>,
    pub id_centers: Vec<Vec<f64>>,
    pub ood_centers: Vec<Vec<f64>>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rejection-samples `count` unit directions whose cosine with every
/// direction in `avoid` (and, when `mutual`, with each other) is at most
/// `cos_max`.
fn place(
    rng: &mut ChaCha8Rng,
    dim: usize,
    count: usize,
    avoid: &[Vec<f64>],
    cos_max: f64,
    mutual: bool,
    what: &str,
) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let u = unit_gaussian(rng, dim);
            let mut others = avoid.iter().chain(if mutual { &out[..] } else { &[][..] });
            if others.all(|o| dot(&u, o) <= cos_max) {
                found = Some(u);
                break;
            }
        }
        match found {
            Some(u) => out.push(u),
            None => {
                return Err(DataError::CannotPlaceCenters(format!(
                    "{what} {i} of {count} in {dim} dimensions after {MAX_ATTEMPTS} attempts"
                )))
            }
        }
    }
    Ok(out)
}

struct ObjectDraw {
    label: Label,
    center: Vec<f64>,
    size: [f64; 3],
}

fn draw_box(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    row: usize,
    col: usize,
    size: [f64; 3],
) -> Result<Box7> {
    let g = &spec.grid;
    let x = g.x_min + (col as f64 + rng.random_range(0.1..0.9)) * g.cell_size;
    let y = g.y_min + (row as f64 + rng.random_range(0.1..0.9)) * g.cell_size;
    let mut dims = [0.0; 3];
    for (d, mean) in dims.iter_mut().zip(size) {
        let n: f64 = StandardNormal.sample(rng);
        *d = (mean * (1.0 + spec.size_rel_std * n)).max(0.1 * mean);
    }
    let z = -1.8 + dims[2] / 2.0 + 0.1 * Distribution::<f64>::sample(&StandardNormal, rng);
    let theta = rng.random_range(-PI..PI);
    Ok(Box7::new(x, y, z, dims[0], dims[1], dims[2], theta)?)
}

fn build_scenes(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    draws: Vec<ObjectDraw>,
    split: Split,
    next_scene: &mut u64,
    next_object: &mut u64,
) -> Result<Vec<SceneRecord>> {
    let g = spec.grid;
    let (c, plane) = (spec.channels, g.height * g.width);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let mut scenes = Vec::new();
    for chunk in draws.chunks(spec.objects_per_scene) {
        let mut map = vec![0.0; c * plane];
        if spec.background_sigma > 0.0 {
            for v in &mut map {
                *v = spec.background_sigma * Distribution::<f64>::sample(&StandardNormal, rng);
            }
        }
        let cells = rand::seq::index::sample(rng, plane, chunk.len()).into_vec();
        let mut objects = Vec::with_capacity(chunk.len());
        for (draw, cell) in chunk.iter().zip(cells) {
            let (row, col) = (cell / g.width, cell % g.width);
            let f: Vec<f64> = draw.center.iter().map(|m| m + noise.sample(rng)).collect();
            for (ch, v) in f.iter().enumerate() {
                map[ch * plane + cell] = *v;
            }
            let bbox = draw_box(rng, spec, row, col, draw.size)?;
            objects.push(ObjectRecord {
                object_id: *next_object,
                feature: Some(Tensor::vector(&f)),
                bbox,
                label: draw.label.clone(),
                is_ground_truth: true,
                split,
            });
            *next_object += 1;
        }
        let scene_feature: Vec<f64> = (0..c)
            .map(|ch| {
                map[ch * plane..(ch + 1) * plane]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let map = match spec.mode {
            DatasetMode::Maps => Some(Tensor::new(vec![c, g.height, g.width], map)?),
            DatasetMode::Features => None,
        };
        scenes.push(SceneRecord {
            scene_id: *next_scene,
            map,
            scene_feature: Some(Tensor::vector(&scene_feature)),
            objects,
        });
        *next_scene += 1;
    }
    Ok(scenes)
}

/// Generates both splits in memory. Deterministic in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes;
    let id_dirs = place(
        &mut rng,
        spec.channels,
        k,
        &[],
        spec.margin_deg.to_radians().cos(),
        true,
        "class center",
    )?;
    let ood_dirs = place(
        &mut rng,
        spec.channels,
        spec.n_ood_clusters,
        &id_dirs,
        spec.ood_margin_deg.to_radians().cos(),
        false,
        "OOD cluster",
    )?;
    let scale = |dirs: &[Vec<f64>], r: f64| -> Vec<Vec<f64>> {
        dirs.iter()
            .map(|d| d.iter().map(|x| x * r).collect())
            .collect()
    };
    let id_centers = scale(&id_dirs, spec.center_norm);
    let ood_centers = scale(&ood_dirs, spec.center_norm * spec.ood_norm_scale);
    let classes = default_class_names(k);

    let id_draw = |i: usize| ObjectDraw {
        label: Label::Id(i % k),
        center: id_centers[i % k].clone(),
        size: CLASS_SIZES[(i % k) % CLASS_SIZES.len()],
    };
    let mut train: Vec<ObjectDraw> = (0..spec.n_train).map(id_draw).collect();
    train.shuffle(&mut rng);
    let mut val: Vec<ObjectDraw> = (0..spec.n_val_id).map(id_draw).collect();
    val.extend((0..spec.n_val_ood).map(|i| {
        let j = i % spec.n_ood_clusters;
        ObjectDraw {
            label: Label::Ood(format!("ood_{j}")),
            center: ood_centers[j].clone(),
            size: OOD_SIZES[j % OOD_SIZES.len()],
        }
    }));
    val.shuffle(&mut rng);

    let (mut scene_id, mut object_id) = (0, 0);
    let train = build_scenes(
        &mut rng,
        spec,
        train,
        Split::Train,
        &mut scene_id,
        &mut object_id,
    )?;
    let val = build_scenes(
        &mut rng,
        spec,
        val,
        Split::Val,
        &mut scene_id,
        &mut object_id,
    )?;

    let header = |split, scenes: &[SceneRecord]| DatasetHeader {
        version: DATASET_VERSION,
        mode: spec.mode,
        split,
        channels: spec.channels,
        embed_dim: spec.embed_dim,
        num_classes: k,
        classes: classes.clone(),
        grid: Some(spec.grid),
        counts: super::count_scenes(scenes),
    };
    Ok(SyntheticDataset {
        train_header: header(Split::Train, &train),
        val_header: header(Split::Val, &val),
        classes: classes.clone(),
        train,
        val,
        id_centers,
        ood_centers,
    })
}

/// File names written by [`write_synthetic`].
pub struct SyntheticFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub classes: PathBuf,
    pub spec: PathBuf,
    pub counts: [SplitCounts; 2],
}

/// Generates and writes `train.alds`, `val.alds` (each with a JSON sidecar),
/// `classes.txt` and `synth_spec.json` into `dir`, creating it if needed.
pub fn write_synthetic(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<SyntheticFiles> {
    let ds = generate_synthetic(spec)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let files = SyntheticFiles {
        train: dir.join("train.alds"),
        val: dir.join("val.alds"),
        classes: dir.join("classes.txt"),
        spec: dir.join("synth_spec.json"),
        counts: [ds.train_header.counts, ds.val_header.counts],
    };
    write_dataset(&files.train, &ds.train_header, &ds.train)?;
    write_dataset(&files.val, &ds.val_header, &ds.val)?;
    crate::prompts::write_class_list(&files.classes, &ds.classes)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut json = serde_json::to_string_pretty(spec)?;
    json.push('\n');
    fs::write(&files.spec, json)?;
    Ok(files)
}
