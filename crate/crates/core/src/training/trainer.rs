use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lr_at, multi_positive_infonce, OptimState, Result, TrainConfig, TrainError};
use crate::data::{DatasetHeader, SceneRecord};
use crate::model::{
    forward_scene, names, Box7, Checkpoint, FusionConfig, GridMeta, HeadParams, ModelError,
    SceneFeatures, SceneOutput,
};
use crate::prompts::{choose_prompt_kind, PromptKind, PromptTemplate, TextSource};
use crate::tensor::{BatchNormMode, Tape, Tensor};

/// Checkpoint key holding the index of the next epoch to run.
pub const EPOCH_KEY: &str = "train.next_epoch";
/// Checkpoint key holding the scene blend weight used in training.
pub const LAMBDA_KEY: &str = "fusion.lambda";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Records the head over one scene. Precomputed features are used when the
/// head has no adapter and the scene carries them; otherwise the map.
pub fn scene_embeddings(
    tape: &mut Tape,
    head: &HeadParams,
    fusion: &FusionConfig,
    scene: &SceneRecord,
    grid: Option<&GridMeta>,
    mode: BatchNormMode,
) -> Result<SceneOutput> {
    let boxes: Vec<Box7> = scene.objects.iter().map(|o| o.bbox).collect();
    let pooled = scene.scene_feature.is_some() && scene.objects.iter().all(|o| o.feature.is_some());
    if !head.config.use_adapter && pooled {
        let rows: Vec<Vec<f64>> = scene
            .objects
            .iter()
            .map(|o| o.feature.as_ref().expect("checked").data().to_vec())
            .collect();
        let objects = Tensor::from_rows(&rows)?;
        let input = SceneFeatures::Precomputed {
            objects: &objects,
            scene: scene.scene_feature.as_ref(),
        };
        return Ok(forward_scene(tape, head, fusion, input, &boxes, mode)?);
    }
    match (&scene.map, grid) {
        (Some(map), Some(grid)) => Ok(forward_scene(
            tape,
            head,
            fusion,
            SceneFeatures::Map { map, grid },
            &boxes,
            mode,
        )?),
        _ if head.config.use_adapter => Err(ModelError::AdapterNeedsMap.into()),
        _ => Err(ModelError::MissingSceneFeature.into()),
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    fusion: FusionConfig,
    head: HeadParams,
    optim: OptimState,
    text: &'a TextSource,
    next_epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(head: HeadParams, cfg: TrainConfig, text: &'a TextSource) -> Result<Self> {
        cfg.validate()?;
        if text.dim() != head.config.embed_dim {
            return Err(TrainError::Shape(format!(
                "text embeddings have dim {}, head projects to {}",
                text.dim(),
                head.config.embed_dim
            )));
        }
        Ok(Self {
            fusion: cfg.fusion()?,
            optim: OptimState::new(cfg.adamw, &head.store),
            head,
            cfg,
            text,
            next_epoch: 0,
        })
    }

    /// Continues from a checkpoint written by [`Self::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, text: &'a TextSource) -> Result<Self> {
        let head = HeadParams::from_checkpoint(ckpt)?;
        let mut t = Self::new(head, cfg, text)?;
        t.optim = OptimState::from_checkpoint(t.cfg.adamw, &t.head.store, ckpt)?;
        t.next_epoch = ckpt.require(EPOCH_KEY)?.data()[0] as usize;
        Ok(t)
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    pub fn into_head(self) -> HeadParams {
        self.head
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.head.to_checkpoint();
        self.optim.write_checkpoint(&mut ckpt);
        ckpt.insert(EPOCH_KEY, Tensor::scalar(self.next_epoch as f64));
        ckpt.insert(LAMBDA_KEY, Tensor::scalar(self.fusion.lambda));
        ckpt
    }

    fn check_inputs(&self, header: &DatasetHeader, scenes: &[SceneRecord]) -> Result<()> {
        if scenes.iter().all(|s| s.objects.is_empty()) {
            return Err(TrainError::EmptyDataset);
        }
        for s in scenes {
            for o in &s.objects {
                let k = o
                    .label
                    .class_index()
                    .ok_or(TrainError::OodInTrain(o.object_id))?;
                let class = header
                    .classes
                    .get(k)
                    .ok_or_else(|| TrainError::Shape(format!("class index {k} out of range")))?;
                if !self.text.has_class(class) {
                    return Err(TrainError::MissingClass(class.clone()));
                }
            }
        }
        Ok(())
    }

    /// Runs the next epoch over `scenes` and returns its per-batch losses.
    pub fn run_epoch(
        &mut self,
        header: &DatasetHeader,
        scenes: &[SceneRecord],
    ) -> Result<Vec<LossRecord>> {
        self.check_inputs(header, scenes)?;
        let epoch = self.next_epoch;
        let lr = lr_at(epoch, &self.cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..scenes.len())
            .filter(|&i| !scenes[i].objects.is_empty())
            .collect();
        order.shuffle(&mut rng);

        let grid = header.grid.as_ref();
        let mut log = Vec::with_capacity(order.len().div_ceil(self.cfg.batch_size));
        for (batch, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut parts = Vec::with_capacity(chunk.len());
            let mut stats = Vec::with_capacity(chunk.len());
            let mut text_rows = Vec::new();
            let mut labels = Vec::new();
            for &si in chunk {
                let scene = &scenes[si];
                let out = scene_embeddings(
                    &mut tape,
                    &self.head,
                    &self.fusion,
                    scene,
                    grid,
                    BatchNormMode::Train,
                )?;
                parts.push(out.embeddings);
                stats.push(out.batch_stats);
                for (j, o) in scene.objects.iter().enumerate() {
                    let k = o
                        .label
                        .class_index()
                        .ok_or(TrainError::OodInTrain(o.object_id))?;
                    let class = header.classes[k].clone();
                    let t = match choose_prompt_kind(
                        self.cfg.seed,
                        epoch as u64,
                        scene.scene_id,
                        j as u64,
                    ) {
                        PromptKind::Simple => PromptTemplate::simple(class),
                        PromptKind::Spatial => PromptTemplate::spatial(class, o.bbox),
                    };
                    text_rows.push(self.text.embed(&t)?);
                    labels.push(k);
                }
            }
            let v = tape.concat_rows(&parts)?;
            let t = Tensor::from_rows(&text_rows)?;
            let ls = tape.param(&self.head.store, names::LOG_SCALE)?;
            let loss = multi_positive_infonce(&mut tape, v, &t, &labels, ls)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            let grads = tape.backward_params(loss, &self.head.store)?;
            let cfg = &self.cfg;
            self.optim
                .step_head(&mut self.head, &grads, lr, |n| cfg.is_trainable(n))?;
            for scene_stats in stats {
                for (running, s) in self.head.bn_stats.iter_mut().zip(&scene_stats) {
                    running.update(s);
                }
            }
            log.push(LossRecord {
                epoch,
                batch,
                lr,
                loss: value,
            });
        }
        self.next_epoch += 1;
        Ok(log)
    }
}

pub struct TrainOutcome {
    pub head: HeadParams,
    pub log: Vec<LossRecord>,
    /// Per-epoch checkpoints followed by the final one.
    pub checkpoints: Vec<PathBuf>,
}

/// Runs all configured epochs from a fresh optimizer. With `checkpoint_dir`
/// set, writes `checkpoint_epoch{e}.alod` after every epoch and
/// `checkpoint.alod` at the end.
pub fn train(
    header: &DatasetHeader,
    scenes: &[SceneRecord],
    head: HeadParams,
    cfg: &TrainConfig,
    text: &TextSource,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(head, cfg.clone(), text)?;
    continue_training(trainer, header, scenes, checkpoint_dir)
}

/// Runs the remaining epochs of `trainer`.
pub fn continue_training(
    mut trainer: Trainer<'_>,
    header: &DatasetHeader,
    scenes: &[SceneRecord],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.next_epoch() < trainer.cfg.epochs {
        let epoch = trainer.next_epoch();
        log.extend(trainer.run_epoch(header, scenes)?);
        if let Some(dir) = checkpoint_dir {
            let p = dir.join(format!("checkpoint_epoch{epoch}.alod"));
            trainer.checkpoint().save(&p)?;
            checkpoints.push(p);
        }
    }
    if let Some(dir) = checkpoint_dir {
        let p = dir.join("checkpoint.alod");
        trainer.checkpoint().save(&p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome {
        head: trainer.into_head(),
        log,
        checkpoints,
    })
}

pub fn write_loss_csv(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,batch,lr,loss")?;
    for r in log {
        writeln!(out, "{},{},{},{}", r.epoch, r.batch, r.lr, r.loss)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize| TrainError::InvalidConfig(format!("loss log line {line} is malformed"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "epoch,batch,lr,loss")) => {}
        _ => return Err(bad(1)),
    }
    lines
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 1));
            }
            Ok(LossRecord {
                epoch: f[0].parse().map_err(|_| bad(i + 1))?,
                batch: f[1].parse().map_err(|_| bad(i + 1))?,
                lr: f[2].parse().map_err(|_| bad(i + 1))?,
                loss: f[3].parse().map_err(|_| bad(i + 1))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticDataset, SyntheticSpec};
    use crate::model::HeadConfig;
    use crate::prompts::{EmbeddingCache, SyntheticEncoder, SyntheticEncoderConfig};

    fn dataset(seed: u64) -> SyntheticDataset {
        let spec = SyntheticSpec {
            n_train: 160,
            n_val_id: 8,
            n_val_ood: 8,
            ..SyntheticSpec::new(seed, 4, 8, 16)
        };
        generate_synthetic(&spec).unwrap()
    }

    fn text() -> TextSource {
        TextSource::Synthetic(SyntheticEncoder::new(SyntheticEncoderConfig::new(1, 16)).unwrap())
    }

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            base_lr: 3e-3,
            ..TrainConfig::default()
        }
    }

    fn epoch_means(log: &[LossRecord]) -> Vec<f64> {
        let epochs = log.iter().map(|r| r.epoch).max().unwrap() + 1;
        (0..epochs)
            .map(|e| {
                let l: Vec<f64> = log
                    .iter()
                    .filter(|r| r.epoch == e)
                    .map(|r| r.loss)
                    .collect();
                l.iter().sum::<f64>() / l.len() as f64
            })
            .collect()
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let ds = dataset(1);
        let text = text();
        let head = HeadParams::init(HeadConfig::new(8, 16), 0).unwrap();
        let a = train(
            &ds.train_header,
            &ds.train,
            head.clone(),
            &cfg(0),
            &text,
            None,
        )
        .unwrap();
        let means = epoch_means(&a.log);
        assert!(means[4] < means[0], "{means:?}");
        assert_eq!(a.log.len(), 5 * 10);
        let b = train(&ds.train_header, &ds.train, head, &cfg(0), &text, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.head.to_checkpoint(), b.head.to_checkpoint());
        assert!(a.head.bn_stats.iter().all(|s| s.initialized));
    }

    #[test]
    fn seed_is_live() {
        let ds = dataset(1);
        let text = text();
        let head = HeadParams::init(HeadConfig::new(8, 16), 0).unwrap();
        let a = train(
            &ds.train_header,
            &ds.train,
            head.clone(),
            &cfg(0),
            &text,
            None,
        )
        .unwrap();
        let b = train(&ds.train_header, &ds.train, head, &cfg(1), &text, None).unwrap();
        assert_ne!(a.log, b.log);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = dataset(2);
        let text = text();
        let dir = tempfile::tempdir().unwrap();
        let head = HeadParams::init(HeadConfig::new(8, 16), 3).unwrap();
        let full = train(
            &ds.train_header,
            &ds.train,
            head,
            &cfg(3),
            &text,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(full.checkpoints.len(), 6);
        let ckpt = Checkpoint::load(dir.path().join("checkpoint_epoch2.alod")).unwrap();
        let resumed = Trainer::resume(&ckpt, cfg(3), &text).unwrap();
        assert_eq!(resumed.next_epoch(), 3);
        let rest = continue_training(resumed, &ds.train_header, &ds.train, None).unwrap();
        let tail: Vec<LossRecord> = full.log.iter().copied().filter(|r| r.epoch >= 3).collect();
        assert_eq!(rest.log, tail);
        assert_eq!(rest.head.to_checkpoint(), full.head.to_checkpoint());
    }

    #[test]
    fn frozen_head_only_trains_alignment() {
        let ds = dataset(3);
        let text = text();
        let head = HeadParams::init(HeadConfig::new(8, 16), 0).unwrap();
        let frozen_cfg = TrainConfig {
            freeze: vec!["adapter.".into(), "box_encoder.".into(), "log_scale".into()],
            ..cfg(0)
        };
        let out = train(
            &ds.train_header,
            &ds.train,
            head.clone(),
            &frozen_cfg,
            &text,
            None,
        )
        .unwrap();
        for name in [names::CONV1_W, names::BOX_W, names::LOG_SCALE] {
            assert_eq!(
                out.head.store.get(name).unwrap(),
                head.store.get(name).unwrap()
            );
        }
        assert_ne!(
            out.head.store.get(names::ALIGN_W).unwrap(),
            head.store.get(names::ALIGN_W).unwrap()
        );
        let full = train(&ds.train_header, &ds.train, head, &cfg(0), &text, None).unwrap();
        let (f, a) = (epoch_means(&out.log)[4], epoch_means(&full.log)[4]);
        assert!(f <= 2.0 * a, "frozen {f} vs full {a}");
    }

    #[test]
    fn missing_class_in_cache() {
        let ds = dataset(4);
        let mut cache = EmbeddingCache::new("x", 16, false);
        cache.entries.insert("car".into(), vec![1.0; 16]);
        let text = TextSource::Cache(cache);
        let head = HeadParams::init(HeadConfig::new(8, 16), 0).unwrap();
        let err = train(&ds.train_header, &ds.train, head, &cfg(0), &text, None)
            .err()
            .unwrap();
        assert!(
            matches!(err, TrainError::MissingClass(ref c) if c != "car"),
            "{err}"
        );
    }

    #[test]
    fn empty_dataset_and_dim_mismatch() {
        let ds = dataset(5);
        let text = text();
        let head = HeadParams::init(HeadConfig::new(8, 16), 0).unwrap();
        let err = train(&ds.train_header, &[], head, &cfg(0), &text, None)
            .err()
            .unwrap();
        assert!(matches!(err, TrainError::EmptyDataset));
        let head = HeadParams::init(HeadConfig::new(8, 12), 0).unwrap();
        assert!(train(&ds.train_header, &ds.train, head, &cfg(0), &text, None).is_err());
    }

    #[test]
    fn features_only_head_reads_pooled_features() {
        let ds = dataset(6);
        let text = text();
        let head = HeadParams::init(
            HeadConfig {
                use_adapter: false,
                use_boxes: false,
                ..HeadConfig::new(8, 16)
            },
            0,
        )
        .unwrap();
        let c = TrainConfig {
            lambda: 0.0,
            ..cfg(0)
        };
        let out = train(&ds.train_header, &ds.train, head, &c, &text, None).unwrap();
        let means = epoch_means(&out.log);
        assert!(means[4] < means[0]);
    }

    #[test]
    fn loss_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let log = vec![
            LossRecord {
                epoch: 0,
                batch: 0,
                lr: 1.5e-4,
                loss: 2.0794415416798357,
            },
            LossRecord {
                epoch: 0,
                batch: 1,
                lr: 1.5e-4,
                loss: 1e-300,
            },
        ];
        write_loss_csv(&p, &log).unwrap();
        assert!(fs::read_to_string(&p)
            .unwrap()
            .starts_with("epoch,batch,lr,loss\n0,0,0.00015,2.0794415416798357\n"));
        assert_eq!(read_loss_csv(&p).unwrap(), log);
    }
}
