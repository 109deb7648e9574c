//! `paca` command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use paca_core::attention::Mechanism;
use paca_core::config::{Flavor, ModelConfig, Preset};
use paca_core::data::{synth_dataset, Dataset, Normalization, Split};
use paca_core::explain::{self, HeatmapSource};
use paca_core::model::PaCaModel;
use paca_core::profiler;
use paca_core::train::{self, CheckpointKind, TrainConfig, TrainHooks};
use paca_core::Error as CoreError;

use crate::cifar::{self, Variant};
use crate::error::{io_err, IoError, Result};
use crate::{checkpoint, netpbm};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "paca",
    version,
    about = "Patch-to-cluster attention vision transformers",
    args_override_self = true,
    after_help = "A file given with --config holds key=value lines named after long flags \
                  (e.g. `steps=200`); flags on the command line take precedence."
)]
pub struct Cli {
    /// key=value defaults for the chosen subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics.csv plus checkpoints to --out.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Cluster heatmaps and masking importance for one image.
    Explain(ExplainArgs),
    /// FLOP counts and log-log scaling fit of one attention mechanism.
    Profile(ProfileArgs),
    /// Number of trainable parameters of a preset.
    ParamCount(ModelArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelName {
    B0,
    B1,
    B2,
    /// Two-stage debugging network; not a published configuration.
    TinyDebug,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Geometry {
    /// 224x224 input.
    In1k,
    /// 32x32 input.
    C100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetName {
    Synth,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MechanismName {
    Vanilla,
    Nested,
    Paca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceName {
    Clusters,
    Attention,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// b0, b1, b2, or tiny-debug (an in-repo debugging network, not a
    /// published configuration).
    #[arg(long, value_enum, default_value = "tiny-debug")]
    pub model: ModelName,
    /// Input geometry of b0/b1/b2; ignored by tiny-debug.
    #[arg(long, value_enum)]
    pub geometry: Option<Geometry>,
    /// Class count; defaults to the dataset's (1000 for param-count).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Square input side of tiny-debug.
    #[arg(long, default_value_t = 16)]
    pub input: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "synth")]
    pub dataset: DatasetName,
    /// Directory with the CIFAR binary batch files.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Use only the first N evaluation images.
    #[arg(long)]
    pub eval_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Overrides --steps with whole passes over the training set.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    /// Defaults to 5% of the steps.
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 5.0)]
    pub grad_clip: f64,
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
    /// Horizontal flip and 4-pixel pad-crop.
    #[arg(long)]
    pub augment: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Without a checkpoint the freshly initialized model is explained.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Image index in the evaluation split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Block index counted over all stages; must be a PaCa block.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, value_enum, default_value = "clusters")]
    pub source: SourceName,
    /// Number of top-ranked clusters exported as overlays.
    #[arg(long, default_value_t = 6)]
    pub top_k: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[arg(long, value_enum)]
    pub mechanism: MechanismName,
    /// Comma-separated sequence lengths, at least three.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
    #[arg(long)]
    pub c: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Cluster count (paca).
    #[arg(long, default_value_t = 49)]
    pub m: usize,
    /// Cluster reduction ratio (paca).
    #[arg(long, default_value_t = 4)]
    pub r: usize,
    /// Patch size (nested).
    #[arg(long, default_value_t = 4)]
    pub p: usize,
    /// Count by running the layer instead of the closed form.
    #[arg(long)]
    pub instrumented: bool,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Reads `key=value` lines into long-flag arguments.
pub fn config_file_args(text: &str) -> std::result::Result<Vec<String>, String> {
    let mut args = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let key = key.trim().replace('_', "-");
        match value.trim() {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            v => {
                args.push(format!("--{key}"));
                args.push(v.to_string());
            }
        }
    }
    Ok(args)
}

/// Splices `--config` file contents in front of the subcommand's own flags.
fn expand_config(argv: &[String]) -> std::result::Result<Vec<String>, String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or("--config needs a value")?.clone());
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a.clone());
        }
    }
    let Some(path) = path else {
        return Ok(argv.to_vec());
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
    let extra = config_file_args(&text).map_err(|e| format!("{path}: {e}"))?;
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map_or(rest.len(), |i| i + 2);
    rest.splice(at..at, extra);
    Ok(rest)
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let argv = match expand_config(&argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(IoError),
}

impl<E: Into<IoError>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage<T>(msg: impl Into<String>) -> std::result::Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Profile(a) => cmd_profile(a),
        Command::ParamCount(a) => {
            let cfg = model_config(&a, a.classes.unwrap_or(1000))?;
            let model = PaCaModel::<f32>::build(&cfg, 0).map_err(IoError::from)?;
            println!("{}", model.param_count());
            Ok(())
        }
    }
}

fn model_config(a: &ModelArgs, classes: usize) -> std::result::Result<ModelConfig, Failure> {
    let preset = match a.model {
        ModelName::B0 => Preset::B0,
        ModelName::B1 => Preset::B1,
        ModelName::B2 => Preset::B2,
        ModelName::TinyDebug => {
            return Ok(ModelConfig::tiny_debug(classes, (a.input, a.input)).map_err(IoError::from)?);
        }
    };
    let flavor = match a.geometry {
        Some(Geometry::In1k) => Flavor::In1k,
        Some(Geometry::C100) | None => Flavor::C100,
    };
    Ok(ModelConfig::preset(preset, flavor, classes).map_err(IoError::from)?)
}

fn variant(d: DatasetName) -> Option<Variant> {
    match d {
        DatasetName::Synth => None,
        DatasetName::Cifar10 => Some(Variant::C10),
        DatasetName::Cifar100 => Some(Variant::C100),
    }
}

fn check_data_args(d: &DataArgs) -> std::result::Result<(), Failure> {
    if variant(d.dataset).is_some() && d.data_dir.is_none() {
        return usage("--data-dir is required for CIFAR datasets");
    }
    if d.dataset == DatasetName::Synth && d.data_dir.is_some() {
        return usage("--data-dir is only used with CIFAR datasets");
    }
    Ok(())
}

fn default_classes(d: &DataArgs, model: &ModelArgs) -> usize {
    match variant(d.dataset) {
        Some(v) => v.classes(),
        None => model.classes.unwrap_or(4),
    }
}

fn classes_for(d: &DataArgs, model: &ModelArgs) -> std::result::Result<usize, Failure> {
    let ds_classes = default_classes(d, model);
    match model.classes {
        Some(k) if variant(d.dataset).is_some() && k != ds_classes => usage(format!(
            "--classes {k} does not match the dataset's {ds_classes}"
        )),
        _ => Ok(ds_classes),
    }
}

const SYNTH_TRAIN: usize = 512;
const SYNTH_EVAL: usize = 128;

/// Training and evaluation sets. Synthetic sets use `seed` and `seed + 1`.
fn datasets(d: &DataArgs, cfg: &ModelConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, eval) = match (variant(d.dataset), &d.data_dir) {
        (Some(v), Some(dir)) => (
            cifar::load(dir, v, Split::Train)?,
            cifar::load(dir, v, Split::Test)?,
        ),
        _ => (
            synth_dataset(
                seed,
                d.train_size.unwrap_or(SYNTH_TRAIN),
                cfg.classes,
                cfg.input,
            )?,
            synth_dataset(
                seed.wrapping_add(1),
                d.eval_size.unwrap_or(SYNTH_EVAL),
                cfg.classes,
                cfg.input,
            )?,
        ),
    };
    if train.hw() != cfg.input {
        return Err(CoreError::InvalidConfig(format!(
            "dataset images are {:?}, model expects {:?}",
            train.hw(),
            cfg.input
        ))
        .into());
    }
    let cap = |ds: Dataset, n: Option<usize>| match n {
        Some(n) if n < ds.len() => ds.take(n),
        _ => ds,
    };
    Ok((cap(train, d.train_size), cap(eval, d.eval_size)))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

struct Writer<'a> {
    out: &'a Path,
}

impl TrainHooks<f32> for Writer<'_> {
    fn on_step(&mut self, row: &train::MetricsRow) {
        if let Some(acc) = row.eval_top1 {
            eprintln!(
                "step {:>6}  loss {:.4}  top1 {:.4}",
                row.step, row.loss, acc
            );
        }
    }

    fn on_checkpoint(
        &mut self,
        kind: CheckpointKind,
        model: &PaCaModel<f32>,
    ) -> paca_core::Result<()> {
        let name = match kind {
            CheckpointKind::Best => "best.paca",
            CheckpointKind::Final => "final.paca",
        };
        checkpoint::save(model, &self.out.join(name)).map_err(|e| CoreError::Hook(e.to_string()))
    }
}

fn cmd_train(a: TrainArgs) -> std::result::Result<(), Failure> {
    check_data_args(&a.data)?;
    let classes = classes_for(&a.data, &a.model)?;
    let cfg = model_config(&a.model, classes)?;
    let (train_ds, eval_ds) = datasets(&a.data, &cfg, a.seed)?;
    let steps = match a.epochs {
        Some(e) => e * train_ds.len().div_ceil(a.batch_size.max(1)),
        None => a.steps,
    };
    let tc = TrainConfig {
        lr: a.lr,
        weight_decay: a.weight_decay,
        betas: (a.beta1, a.beta2),
        steps,
        batch_size: a.batch_size,
        warmup_steps: a.warmup_steps,
        seed: a.seed,
        grad_clip: (a.grad_clip > 0.0).then_some(a.grad_clip),
        eval_every: a.eval_every,
        augment: a.augment,
        ..TrainConfig::default()
    };
    if let Err(e) = tc.validate() {
        return usage(e.to_string());
    }
    create_dir(&a.out)?;
    let mut model = PaCaModel::<f32>::build(&cfg, a.seed).map_err(IoError::from)?;
    let log = train::train_loop(
        &mut model,
        &train_ds,
        Some(&eval_ds),
        &tc,
        &mut Writer { out: &a.out },
    )
    .map_err(IoError::from)?;
    write_file(&a.out.join("metrics.csv"), log.to_csv().as_bytes())?;
    if let Some(best) = log.best_top1 {
        println!("best_top1={best:.6}");
    }
    Ok(())
}

fn load_model(
    a: &ModelArgs,
    classes: usize,
    ckpt: Option<&Path>,
    seed: u64,
) -> std::result::Result<PaCaModel<f32>, Failure> {
    let cfg = model_config(a, classes)?;
    Ok(match ckpt {
        Some(path) => checkpoint::load(path, &cfg)?,
        None => PaCaModel::build(&cfg, seed).map_err(IoError::from)?,
    })
}

fn cmd_eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    check_data_args(&a.data)?;
    if a.batch_size == 0 {
        return usage("--batch-size must be positive");
    }
    let classes = classes_for(&a.data, &a.model)?;
    let model = load_model(&a.model, classes, Some(&a.checkpoint), a.seed)?;
    let (_, eval_ds) = datasets(&a.data, model.config(), a.seed)?;
    let top1 = train::evaluate(&model, &eval_ds, a.batch_size, Normalization::default())
        .map_err(IoError::from)?;
    println!("top1={top1:.6}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(
            &out.join("eval.csv"),
            format!("images,top1\n{},{top1:.6}\n", eval_ds.len()).as_bytes(),
        )?;
    }
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> std::result::Result<(), Failure> {
    check_data_args(&a.data)?;
    let classes = classes_for(&a.data, &a.model)?;
    let model = load_model(&a.model, classes, a.checkpoint.as_deref(), a.seed)?;
    let layers = model.layers();
    match layers.get(a.layer) {
        None => {
            return usage(format!(
                "--layer {} out of range ({} blocks)",
                a.layer,
                layers.len()
            ))
        }
        Some(l) if !l.mixer.is_paca() && a.source == SourceName::Clusters => {
            return usage(format!(
                "block {} has no clusters; pick a PaCa block or --source attention",
                a.layer
            ));
        }
        _ => {}
    }
    let (_, eval_ds) = datasets(&a.data, model.config(), a.seed)?;
    if a.index >= eval_ds.len() {
        return usage(format!(
            "--index {} out of range ({} images)",
            a.index,
            eval_ds.len()
        ));
    }
    let source = match a.source {
        SourceName::Clusters => HeatmapSource::Clusters,
        SourceName::Attention => HeatmapSource::Attention,
    };
    let raw = eval_ds.raw_image::<f32>(a.index);
    let label = eval_ds.label(a.index);
    let report = explain::cluster_importance(
        &model,
        &raw,
        label,
        a.layer,
        source,
        Normalization::default(),
    )
    .map_err(IoError::from)?;
    if report.misclassified {
        eprintln!(
            "warning: image {} is misclassified (label {label}, predicted {})",
            a.index, report.predicted
        );
    }
    create_dir(&a.out)?;
    let (h, w) = eval_ds.hw();
    netpbm::write_ppm(&a.out.join("input.ppm"), w, h, eval_ds.image(a.index))?;
    let mut csv = String::from("cluster,rank,importance,entropy\n");
    for s in &report.scores {
        csv.push_str(&format!(
            "{},{},{:.9e},{:.9e}\n",
            s.cluster, s.rank, s.importance, s.entropy
        ));
        let hm = &report.heatmaps[s.cluster];
        netpbm::write_pgm(
            &a.out.join(format!("heatmap_{:03}.pgm", s.cluster)),
            hm.w,
            hm.h,
            &hm.to_gray(),
        )?;
    }
    for (rank, &m) in report.ranking.iter().take(a.top_k).enumerate() {
        let rgb = explain::overlay(&raw, &report.heatmaps[m]).map_err(IoError::from)?;
        netpbm::write_ppm(
            &a.out.join(format!("overlay_rank{rank}_cluster{m:03}.ppm")),
            w,
            h,
            &rgb,
        )?;
    }
    write_file(&a.out.join("importance.csv"), csv.as_bytes())?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(
        stdout,
        "label={label} predicted={} p={:.6} top={}",
        report.predicted,
        report.p_clean,
        report.ranking.first().copied().unwrap_or(0)
    );
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> std::result::Result<(), Failure> {
    if a.n.len() < 3 {
        return usage("--n needs at least three sequence lengths");
    }
    let mechanism = match a.mechanism {
        MechanismName::Vanilla => Mechanism::Vanilla,
        MechanismName::Nested => Mechanism::Nested { patch: a.p },
        MechanismName::Paca => Mechanism::Paca {
            clusters: a.m,
            reduction: a.r,
        },
    };
    let report = match profiler::scaling_report(mechanism, a.c, a.heads, &a.n, a.instrumented) {
        Ok(r) => r,
        Err(CoreError::InvalidConfig(msg)) => return usage(msg),
        Err(e) => return Err(e.into()),
    };
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join("profile.csv"), csv.as_bytes())?;
    }
    Ok(())
}
