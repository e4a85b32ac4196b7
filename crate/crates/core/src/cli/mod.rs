//! Command-line entry point: `synth`, `train`, `eval` and `score`.

mod config;

pub use config::{benchmark_spec, EvalOptions, ModelOptions, RunConfig, TextOptions};

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    read_dataset, write_synthetic, DataError, DatasetHeader, DatasetMode, SceneRecord,
};
use crate::metrics::{
    evaluate, format_table, histogram, write_histogram_csv, LabeledScores, MetricError,
    MetricReport,
};
use crate::model::{Checkpoint, FusionConfig, HeadConfig, HeadParams, ModelError};
use crate::prompts::{
    build_id_bank, render_prompt, EmbeddingCache, IdBank, PromptError, PromptTemplate,
    SyntheticEncoder, SyntheticEncoderConfig, TextSource,
};
use crate::scoring::{
    calibrate_threshold, decide, score_scenes, write_score_csv, ObjectScores, ScoreError,
    ScoreMethod, ScoreVariant,
};
use crate::tensor::TensorError;
use crate::training::{continue_training, train, write_loss_csv, TrainError, Trainer, LAMBDA_KEY};

// Like print!/println!, but a closed stdout (e.g. piped into `head`) is not an error.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const BANK_FILE: &str = "id_bank.json";

/// Command failure, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::Numeric(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(e) => e.into(),
            ModelError::InvalidLambda(_)
            | ModelError::InvalidConfig(_)
            | ModelError::ChannelMismatch { .. }
            | ModelError::AdapterNeedsMap => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) | DataError::CannotPlaceCenters(_) => {
                Self::Config(e.to_string())
            }
            DataError::Model(e) => e.into(),
            DataError::Tensor(e) => e.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::InvalidConfig(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Degenerate(_)
            | TrainError::NonFiniteGradient(_)
            | TrainError::NonFiniteLoss { .. } => Self::Numeric(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::Shape(_) => Self::Config(e.to_string()),
            TrainError::Tensor(e) => e.into(),
            TrainError::Model(e) => e.into(),
            TrainError::Prompt(e) => e.into(),
            TrainError::Data(e) => e.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::ZeroNorm | ScoreError::NonFinite => Self::Numeric(e.to_string()),
            ScoreError::Dim { .. } | ScoreError::BadTarget(_) | ScoreError::UnknownMethod(_) => {
                Self::Config(e.to_string())
            }
            ScoreError::Train(e) => e.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::NonFinite(_) => Self::Numeric(e.to_string()),
            MetricError::NoBins => Self::Config(e.to_string()),
            MetricError::Score(e) => e.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "oodalign",
    version,
    about = "Post-hoc OOD scoring for 3D detector features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    Synth(SynthArgs),
    /// Train the alignment head.
    Train(TrainArgs),
    /// Score the validation split and report metrics.
    Eval(EvalArgs),
    /// Score one validation object and explain the decision.
    Score(ScoreArgs),
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val_id: Option<usize>,
    #[arg(long)]
    pub n_val_ood: Option<usize>,
    /// Minimum angle between ID class centers, degrees.
    #[arg(long)]
    pub margin_deg: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Store pooled features only, without feature maps.
    #[arg(long)]
    pub features_only: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Embedding cache JSON; defaults to the synthetic encoder.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub no_adapter: bool,
    #[arg(long)]
    pub no_boxes: bool,
    /// Parameter-name prefix to keep frozen (repeatable).
    #[arg(long)]
    pub freeze: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Restrict to these methods (repeatable).
    #[arg(long)]
    pub method: Vec<ScoreMethod>,
    /// Only the plain scores, without norm scaling.
    #[arg(long, conflicts_with = "norm_only")]
    pub no_norm: bool,
    /// Only the norm-scaled scores.
    #[arg(long)]
    pub norm_only: bool,
    #[arg(long)]
    pub target_tpr: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Defaults to the first object of the split.
    #[arg(long)]
    pub object_id: Option<u64>,
    #[arg(long, default_value = "maxlogit")]
    pub method: ScoreMethod,
    #[arg(long)]
    pub no_norm: bool,
    /// Decision threshold; defaults to the calibrated one in report.json.
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn base_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))
}

fn load_split(path: &Path) -> Result<(DatasetHeader, Vec<SceneRecord>), CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "dataset not found: {}",
            path.display()
        )));
    }
    read_dataset(path).map_err(|e| CliError::from(e).context(path))
}

impl CliError {
    fn context(self, path: &Path) -> Self {
        let wrap = |m: String| format!("{}: {m}", path.display());
        match self {
            Self::Config(m) => Self::Config(wrap(m)),
            Self::Data(m) => Self::Data(wrap(m)),
            Self::Numeric(m) => Self::Numeric(wrap(m)),
        }
    }
}

fn text_source(cfg: &RunConfig, dim: usize) -> Result<TextSource, CliError> {
    match &cfg.text.cache {
        Some(p) => {
            let cache = EmbeddingCache::load(p).map_err(|e| CliError::from(e).context(p))?;
            if cache.dim != dim {
                return Err(CliError::Config(format!(
                    "cache has dim {}, dataset expects {dim}",
                    cache.dim
                )));
            }
            Ok(TextSource::Cache(cache))
        }
        None => {
            let mut enc = SyntheticEncoderConfig::new(cfg.seed, dim);
            if let Some(s) = cfg.text.box_sensitivity {
                enc.box_sensitivity = s;
            }
            Ok(TextSource::Synthetic(SyntheticEncoder::new(enc)?))
        }
    }
}

fn check_dims(opts: &ModelOptions, header: &DatasetHeader) -> Result<(), CliError> {
    for (name, want, got) in [
        ("channels", opts.channels, header.channels),
        ("embed_dim", opts.embed_dim, header.embed_dim),
    ] {
        if let Some(w) = want {
            if w != got {
                return Err(CliError::Config(format!(
                    "config {name}={w} but the dataset has {got}"
                )));
            }
        }
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    let mut spec = cfg.synthetic_spec();
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { spec.$f = v; })* };
    }
    set!(
        num_classes,
        channels,
        embed_dim,
        n_train,
        n_val_id,
        n_val_ood,
        margin_deg,
        sigma
    );
    if args.features_only {
        spec.mode = DatasetMode::Features;
    }
    cfg.synthetic = Some(spec.clone());
    create_out_dir(&cfg)?;
    let files = write_synthetic(&spec, &cfg.out_dir)?;
    outln!("train   {}", files.train.display());
    outln!("val     {}", files.val.display());
    outln!("classes {}", files.classes.display());
    outln!("spec    {}", files.spec.display());
    let [train, val] = files.counts;
    outln!("train: {} scenes, {} objects", train.scenes, train.objects);
    outln!(
        "val:   {} scenes, {} ID objects, {} OOD objects",
        val.scenes,
        val.id_objects,
        val.ood_objects
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(p) = &args.train_data {
        cfg.train_data = Some(p.clone());
    }
    if let Some(p) = &args.cache {
        cfg.text.cache = Some(p.clone());
    }
    if let Some(p) = &args.resume {
        cfg.resume = Some(p.clone());
    }
    macro_rules! set {
        ($($a:ident => $f:ident),*) => { $(if let Some(v) = args.$a { cfg.train.$f = v; })* };
    }
    set!(epochs => epochs, lr => base_lr, lambda => lambda, batch_size => batch_size);
    cfg.train.freeze.extend(args.freeze.iter().cloned());
    if args.no_adapter {
        cfg.model.use_adapter = false;
    }
    if args.no_boxes {
        cfg.model.use_boxes = false;
    }
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    create_out_dir(&cfg)?;

    let (header, scenes) = load_split(&cfg.train_path())?;
    check_dims(&cfg.model, &header)?;
    let text = text_source(&cfg, header.embed_dim)?;
    let bank = build_id_bank(&header.classes, &text)?;
    bank.save(cfg.out_dir.join(BANK_FILE))?;

    let outcome = match &cfg.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let trainer = Trainer::resume(&ckpt, tcfg, &text)?;
            continue_training(trainer, &header, &scenes, Some(&cfg.out_dir))?
        }
        None => {
            let head_cfg = HeadConfig {
                box_dim: cfg.model.box_dim,
                use_adapter: cfg.model.use_adapter,
                use_boxes: cfg.model.use_boxes,
                ..HeadConfig::new(header.channels, header.embed_dim)
            };
            let head = HeadParams::init(head_cfg, cfg.seed)?;
            train(&header, &scenes, head, &tcfg, &text, Some(&cfg.out_dir))?
        }
    };
    write_loss_csv(cfg.out_dir.join(LOSS_FILE), &outcome.log)?;
    if let Some(last) = outcome.log.last() {
        outln!("epoch {} final batch loss {:.6}", last.epoch, last.loss);
    }
    for p in &outcome.checkpoints {
        outln!("checkpoint {}", p.display());
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    Checkpoint::load(path).map_err(|e| CliError::from(e).context(path))
}

struct Scored {
    head: HeadParams,
    fusion: FusionConfig,
    bank: IdBank,
    header: DatasetHeader,
    scenes: Vec<SceneRecord>,
    objects: Vec<ObjectScores>,
}

fn score_split(cfg: &RunConfig) -> Result<Scored, CliError> {
    let ckpt = load_checkpoint(&cfg.checkpoint_path())?;
    let head = HeadParams::from_checkpoint(&ckpt)?;
    let lambda = match ckpt.get(LAMBDA_KEY) {
        Some(t) => t.data()[0],
        None => cfg.train.lambda,
    };
    let fusion = FusionConfig::new(lambda)?;
    let bank_path = cfg.bank_path();
    if !bank_path.exists() {
        return Err(CliError::Data(format!(
            "ID bank not found: {}",
            bank_path.display()
        )));
    }
    let bank = IdBank::load(&bank_path).map_err(|e| CliError::from(e).context(&bank_path))?;
    let (header, scenes) = load_split(&cfg.val_path())?;
    check_dims(&cfg.model, &header)?;
    if header.classes != bank.classes {
        return Err(CliError::Data(format!(
            "validation classes {:?} differ from the bank's {:?}",
            header.classes, bank.classes
        )));
    }
    if header.channels != head.config.channels || bank.dim() != head.config.embed_dim {
        return Err(CliError::Config(format!(
            "checkpoint head is {}->{}, data has C={} and the bank D={}",
            head.config.channels,
            head.config.embed_dim,
            header.channels,
            bank.dim()
        )));
    }
    let objects = score_scenes(&head, &fusion, &bank, &header, &scenes)?;
    Ok(Scored {
        head,
        fusion,
        bank,
        header,
        scenes,
        objects,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub method: ScoreMethod,
    pub norm_scaling: bool,
    /// Calibrated on the validation ID scores.
    pub threshold: f64,
    /// Fraction of validation ID objects accepted at `threshold`.
    pub id_accept_rate: f64,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_tpr: f64,
    pub log_scale: f64,
    pub lambda: f64,
    pub id_objects: usize,
    pub ood_objects: usize,
    /// Top-1 accuracy of the zero-shot classifier on ID objects.
    pub id_accuracy: f64,
    pub variants: Vec<VariantReport>,
}

impl EvalReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(p) = &args.val_data {
        cfg.val_data = Some(p.clone());
    }
    if let Some(p) = &args.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if let Some(p) = &args.bank {
        cfg.bank = Some(p.clone());
    }
    if !args.method.is_empty() {
        cfg.eval.methods = args.method.clone();
    }
    if args.no_norm {
        cfg.eval.norm_scaling = Some(false);
    }
    if args.norm_only {
        cfg.eval.norm_scaling = Some(true);
    }
    if let Some(t) = args.target_tpr {
        cfg.eval.target_tpr = t;
    }
    if let Some(b) = args.bins {
        cfg.eval.histogram_bins = b;
    }
    let variants = cfg.eval.variants();
    if variants.is_empty() {
        return Err(CliError::Config("no scoring method selected".into()));
    }
    create_out_dir(&cfg)?;
    let scored = score_split(&cfg)?;
    let log_scale = scored.head.log_scale();
    let objects = &scored.objects;
    let is_id: Vec<bool> = objects.iter().map(|o| !o.is_ood).collect();

    let mut reports = Vec::new();
    let mut thresholds = Vec::new();
    for v in &variants {
        let scores: Vec<f64> = objects.iter().map(|o| o.score(*v, log_scale)).collect();
        let ls = LabeledScores::new(scores, is_id.clone())?;
        let id_scores = ls.id_scores();
        let threshold = calibrate_threshold(&id_scores, cfg.eval.target_tpr)?;
        let accepted = id_scores.iter().filter(|&&s| s >= threshold).count();
        let metrics = evaluate(&ls)?;
        let hist = histogram(&ls, cfg.eval.histogram_bins)?;
        let hist_path = cfg.out_dir.join(format!("hist_{}.csv", v.label()));
        write_histogram_csv(&hist_path, &hist)?;
        thresholds.push((*v, threshold));
        reports.push(VariantReport {
            name: v.label(),
            method: v.method,
            norm_scaling: v.norm_scaling,
            threshold,
            id_accept_rate: accepted as f64 / id_scores.len() as f64,
            metrics,
        });
    }
    write_score_csv(
        cfg.out_dir.join(SCORES_FILE),
        objects,
        &thresholds,
        log_scale,
    )?;

    let classes: Vec<usize> = scored
        .scenes
        .iter()
        .flat_map(|s| &s.objects)
        .filter_map(|o| o.label.class_index())
        .collect();
    let id_hits = objects
        .iter()
        .filter(|o| !o.is_ood)
        .zip(&classes)
        .filter(|(o, &k)| o.argmax == k)
        .count();
    let report = EvalReport {
        target_tpr: cfg.eval.target_tpr,
        log_scale,
        lambda: scored.fusion.lambda,
        id_objects: classes.len(),
        ood_objects: objects.len() - classes.len(),
        id_accuracy: id_hits as f64 / classes.len().max(1) as f64,
        variants: reports,
    };
    let report_path = cfg.out_dir.join(REPORT_FILE);
    let mut json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Numeric(e.to_string()))?;
    json.push('\n');
    fs::write(&report_path, json).map_err(io_err(&report_path))?;

    let rows: Vec<(String, MetricReport)> = report
        .variants
        .iter()
        .map(|v| (v.name.clone(), v.metrics))
        .collect();
    out!("{}", format_table(&rows));
    outln!("ID accuracy {:.2}%", 100.0 * report.id_accuracy);
    outln!("report {}", report_path.display());
    Ok(())
}

pub fn cmd_score(args: &ScoreArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(p) = &args.val_data {
        cfg.val_data = Some(p.clone());
    }
    if let Some(p) = &args.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if let Some(p) = &args.bank {
        cfg.bank = Some(p.clone());
    }
    let variant = ScoreVariant {
        method: args.method,
        norm_scaling: !args.no_norm,
    };
    let threshold = match args.threshold.or(cfg.eval.threshold) {
        Some(t) => t,
        None => {
            let path = cfg.out_dir.join(REPORT_FILE);
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "no --threshold given and no report at {}; run eval first",
                    path.display()
                )));
            }
            EvalReport::load(&path)?
                .variant(&variant.label())
                .map(|v| v.threshold)
                .ok_or_else(|| {
                    CliError::Config(format!(
                        "{} has no `{}` entry",
                        path.display(),
                        variant.label()
                    ))
                })?
        }
    };
    let scored = score_split(&cfg)?;
    let records: Vec<_> = scored.scenes.iter().flat_map(|s| &s.objects).collect();
    let idx = match args.object_id {
        Some(id) => records
            .iter()
            .position(|o| o.object_id == id)
            .ok_or_else(|| CliError::Data(format!("object {id} not in the split")))?,
        None if records.is_empty() => return Err(CliError::Data("split has no objects".into())),
        None => 0,
    };
    let (rec, obj) = (records[idx], &scored.objects[idx]);
    let truth = match rec.label.class_index() {
        Some(k) => scored.header.classes[k].clone(),
        None => "OOD".to_string(),
    };
    let predicted = &scored.bank.classes[obj.argmax];
    outln!("object {} (ground truth: {truth})", rec.object_id);
    outln!(
        "prompt: {}",
        render_prompt(&PromptTemplate::spatial(predicted.as_str(), rec.bbox))?
    );
    outln!("norm: {}", obj.v_norm);
    for (c, s) in scored.bank.classes.iter().zip(&obj.logits) {
        outln!("  {c:<24} {s:+.6}");
    }
    let value = obj.score(variant, scored.head.log_scale());
    outln!("{}: {value}", variant.label());
    outln!("threshold: {threshold}");
    outln!("decision: {}", decide(value, threshold));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Score(a) => cmd_score(a),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(
            CliError::from(DataError::CannotPlaceCenters("x".into())).exit_code(),
            2
        );
        assert_eq!(CliError::from(DataError::BadMagic).exit_code(), 3);
        assert_eq!(
            CliError::from(TrainError::NonFiniteGradient("w".into())).exit_code(),
            4
        );
        assert_eq!(CliError::from(ScoreError::ZeroNorm).exit_code(), 4);
        assert_eq!(
            CliError::from(TrainError::MissingClass("car".into())).exit_code(),
            3
        );
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "oodalign",
            "eval",
            "--method",
            "maxlogit",
            "--no-norm",
            "--out-dir",
            "x",
        ])
        .unwrap();
        match cli.command {
            Command::Eval(a) => {
                assert_eq!(a.method, vec![ScoreMethod::MaxLogit]);
                assert!(a.no_norm);
                assert_eq!(a.common.out_dir, Some(PathBuf::from("x")));
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["oodalign", "eval", "--method", "odin"]).is_err());
    }
}
