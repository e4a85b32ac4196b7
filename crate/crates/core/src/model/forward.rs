use super::params::names;
use super::{Box7, FusionConfig, GridMeta, HeadParams, ModelError, Result};
use crate::tensor::{BatchNormMode, BatchStats, NodeId, Tape, Tensor};

/// Per-scene input to the head.
#[derive(Clone, Copy, Debug)]
pub enum SceneFeatures<'a> {
    /// Full `C×H×W` BEV map; object features are center-pooled from it and
    /// the scene feature is its global max.
    Map { map: &'a Tensor, grid: &'a GridMeta },
    /// Already-pooled `N×C` object features and a `C` scene feature.
    Precomputed {
        objects: &'a Tensor,
        scene: Option<&'a Tensor>,
    },
}

pub struct SceneOutput {
    /// `N×D` aligned object embeddings, unnormalized.
    pub embeddings: NodeId,
    /// Per object, whether its center fell outside the grid.
    pub clamped: Vec<bool>,
    /// Train-mode batch-norm statistics, one entry per adapter layer.
    pub batch_stats: Vec<BatchStats>,
}

/// `relu(BN2(conv2(relu(BN1(conv1(F))))) + F)`
pub fn adapt_features(
    tape: &mut Tape,
    map: NodeId,
    head: &HeadParams,
    mode: BatchNormMode,
) -> Result<(NodeId, Vec<BatchStats>)> {
    let channels = tape.value(map).shape()[0];
    if channels != head.config.channels {
        return Err(ModelError::ChannelMismatch {
            expected: head.config.channels,
            got: channels,
        });
    }
    let store = &head.store;
    let mut stats = Vec::with_capacity(2);
    let mut x = map;
    for (layer, (w, b, g, beta)) in [
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
    ]
    .into_iter()
    .enumerate()
    {
        let (w, b) = (tape.param(store, w)?, tape.param(store, b)?);
        let (g, beta) = (tape.param(store, g)?, tape.param(store, beta)?);
        let conv = tape.conv3x3_same(x, w, b)?;
        let (normed, batch) = tape.batchnorm2d(conv, g, beta, &head.bn_stats[layer], mode)?;
        stats.extend(batch);
        x = if layer == 0 {
            tape.relu(normed)?
        } else {
            normed
        };
    }
    let residual = tape.add(x, map)?;
    Ok((tape.relu(residual)?, stats))
}

/// Feature vector at the grid cell containing the box center, and whether
/// the center had to be clamped onto the map border.
pub fn center_pool(map: &Tensor, b: &Box7, grid: &GridMeta) -> Result<(Tensor, bool)> {
    grid.validate()?;
    if map.rank() != 3 || map.shape()[1] != grid.height || map.shape()[2] != grid.width {
        return Err(ModelError::InvalidGrid(format!(
            "map {:?} does not match {}x{} grid",
            map.shape(),
            grid.height,
            grid.width
        )));
    }
    let cell = grid.cell_of(b.x, b.y);
    let plane = grid.height * grid.width;
    let idx = cell.row * grid.width + cell.col;
    let v: Vec<f64> = (0..map.shape()[0])
        .map(|c| map.data()[c * plane + idx])
        .collect();
    Ok((Tensor::vector(&v), cell.clamped))
}

/// `(1 - lambda) * f_obj + lambda * f_scene`
pub fn fuse(f_obj: &Tensor, f_scene: &Tensor, cfg: &FusionConfig) -> Result<Tensor> {
    cfg.validate()?;
    if f_obj.shape() != f_scene.shape() || f_obj.rank() != 1 {
        return Err(crate::tensor::TensorError::Shape {
            op: "fuse",
            lhs: f_obj.shape().to_vec(),
            rhs: f_scene.shape().to_vec(),
        }
        .into());
    }
    let l = cfg.lambda;
    let data = f_obj
        .data()
        .iter()
        .zip(f_scene.data())
        .map(|(o, s)| (1.0 - l) * o + l * s)
        .collect();
    Ok(Tensor::new(f_obj.shape().to_vec(), data)?)
}

fn box_matrix(boxes: &[Box7]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = boxes.iter().map(|b| b.to_array().to_vec()).collect();
    Ok(Tensor::from_rows(&rows)?)
}

fn encode_boxes(tape: &mut Tape, head: &HeadParams, boxes: &[Box7]) -> Result<NodeId> {
    let x = tape.constant(box_matrix(boxes)?);
    let w = tape.param(&head.store, names::BOX_W)?;
    let b = tape.param(&head.store, names::BOX_B)?;
    Ok(tape.affine(x, w, b)?)
}

/// Projects the raw box parameters into the box-code space.
pub fn encode_box(b: &Box7, head: &HeadParams) -> Result<Tensor> {
    if !head.config.use_boxes {
        return Err(ModelError::InvalidConfig("head has no box encoder".into()));
    }
    let mut tape = Tape::new();
    let out = encode_boxes(&mut tape, head, std::slice::from_ref(b))?;
    let v = tape.value(out).clone();
    Ok(v.reshape(vec![head.config.box_dim])?)
}

/// Runs the head over every object of one scene.
///
/// In train mode the adapter normalizes with this scene's statistics; the
/// returned [`SceneOutput::batch_stats`] should then be folded into the
/// running statistics by the caller.
pub fn forward_scene(
    tape: &mut Tape,
    head: &HeadParams,
    fusion: &FusionConfig,
    input: SceneFeatures<'_>,
    boxes: &[Box7],
    mode: BatchNormMode,
) -> Result<SceneOutput> {
    fusion.validate()?;
    if boxes.is_empty() {
        return Err(ModelError::CountMismatch {
            boxes: 0,
            features: 0,
        });
    }
    let c = head.config.channels;
    let (objects, scene, clamped, batch_stats) = match input {
        SceneFeatures::Map { map, grid } => {
            grid.validate()?;
            if map.rank() != 3 || map.shape()[1] != grid.height || map.shape()[2] != grid.width {
                return Err(ModelError::InvalidGrid(format!(
                    "map {:?} does not match {}x{} grid",
                    map.shape(),
                    grid.height,
                    grid.width
                )));
            }
            if map.shape()[0] != c {
                return Err(ModelError::ChannelMismatch {
                    expected: c,
                    got: map.shape()[0],
                });
            }
            let f = tape.constant(map.clone());
            let (adapted, stats) = if head.config.use_adapter {
                adapt_features(tape, f, head, mode)?
            } else {
                (f, Vec::new())
            };
            let cells: Vec<_> = boxes.iter().map(|b| grid.cell_of(b.x, b.y)).collect();
            let rc: Vec<(usize, usize)> = cells.iter().map(|c| (c.row, c.col)).collect();
            let objects = tape.gather_cells(adapted, &rc)?;
            let scene = tape.adaptive_max_pool_global(adapted)?;
            (
                objects,
                scene,
                cells.iter().map(|c| c.clamped).collect(),
                stats,
            )
        }
        SceneFeatures::Precomputed { objects, scene } => {
            if head.config.use_adapter {
                return Err(ModelError::AdapterNeedsMap);
            }
            let scene = scene.ok_or(ModelError::MissingSceneFeature)?;
            if objects.rank() != 2 || objects.shape()[1] != c {
                return Err(ModelError::ChannelMismatch {
                    expected: c,
                    got: objects.cols(),
                });
            }
            if objects.shape()[0] != boxes.len() {
                return Err(ModelError::CountMismatch {
                    boxes: boxes.len(),
                    features: objects.shape()[0],
                });
            }
            if scene.shape() != [c] {
                return Err(ModelError::ChannelMismatch {
                    expected: c,
                    got: scene.len(),
                });
            }
            let o = tape.constant(objects.clone());
            let s = tape.constant(scene.clone());
            (o, s, vec![false; boxes.len()], Vec::new())
        }
    };
    let fused = tape.blend_rows(objects, scene, fusion.lambda)?;
    let joint = if head.config.use_boxes {
        let codes = encode_boxes(tape, head, boxes)?;
        tape.concat_cols(fused, codes)?
    } else {
        fused
    };
    let w = tape.param(&head.store, names::ALIGN_W)?;
    let b = tape.param(&head.store, names::ALIGN_B)?;
    let embeddings = tape.affine(joint, w, b)?;
    Ok(SceneOutput {
        embeddings,
        clamped,
        batch_stats,
    })
}

/// Input for a single object.
#[derive(Clone, Copy, Debug)]
pub enum ObjectInput<'a> {
    Map {
        map: &'a Tensor,
        grid: &'a GridMeta,
    },
    Precomputed {
        feature: &'a Tensor,
        scene: Option<&'a Tensor>,
    },
}

/// Eval-mode embedding `v` of one object.
pub fn forward_object(
    head: &HeadParams,
    fusion: &FusionConfig,
    input: ObjectInput<'_>,
    b: &Box7,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let row;
    let scene_input = match input {
        ObjectInput::Map { map, grid } => SceneFeatures::Map { map, grid },
        ObjectInput::Precomputed { feature, scene } => {
            row = feature.clone().reshape(vec![1, feature.len()])?;
            SceneFeatures::Precomputed {
                objects: &row,
                scene,
            }
        }
    };
    let out = forward_scene(
        &mut tape,
        head,
        fusion,
        scene_input,
        std::slice::from_ref(b),
        BatchNormMode::Eval,
    )?;
    let v = tape.value(out.embeddings).clone();
    Ok(v.reshape(vec![head.config.embed_dim])?)
}
