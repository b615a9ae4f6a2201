//! Command-line front end: `synth`, `train`, `classify`, `eval`, `defaults`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use fcspn_core::data::{nearest_centroid_oa, sample_split, synth_scene, LabelMap, SynthSpec};
use fcspn_core::metrics::{confusion, Report};
use fcspn_core::model::Fcspn;
use fcspn_core::train::{predict, train, LossRecord};
use fcspn_core::Error as CoreError;

use crate::config::{parse_strategy, ConfigError, RunConfig};
use crate::error::FormatError;
use crate::formats::{self, Checkpoint};
use crate::report::{self, Palette};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::NonFinite(_) | CoreError::NonFiniteGradient(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Format(FormatError::Core(e)) | CliError::Core(e) => core_exit_code(e),
            CliError::Format(_) => EXIT_DATA,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "fcspn",
    version,
    about = "Hyperspectral pixel classification with a 3D FCN and spatial propagation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cube and label map and report the nearest-centroid OA.
    Synth(SynthArgs),
    /// Train a network and write a checkpoint, loss trace and split.
    Train(TrainArgs),
    /// Classify every pixel of a cube.
    Classify(ClassifyArgs),
    /// Score a prediction against reference labels.
    Eval(EvalArgs),
    /// Print the run configuration defaults in the config file syntax.
    Defaults,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output prefix; writes PREFIX.hsc, PREFIX.hsl and PREFIX.palette.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Image size as N or ROWSxCOLS.
    #[arg(long, default_value = "32", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 20)]
    pub bands: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Run configuration file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override `key=value`, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// per_class:N, fraction:F or indian_pines; overrides data.strategy.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    /// Loss trace CSV [default: CKPT.loss.csv].
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Split file [default: CKPT.split.hss].
    #[arg(long)]
    pub out_split: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub refine: Switch,
    /// Propagation steps [default: from the checkpoint].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Scale each band to [0, 1] first; must match training.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub normalize: Switch,
    /// Predicted label map (HSL1).
    #[arg(long)]
    pub out_map: PathBuf,
    /// Color rendering (binary PPM).
    #[arg(long, alias = "out-png")]
    pub out_ppm: Option<PathBuf>,
    /// Palette CSV `class_id,r,g,b,name` [default: generated].
    #[arg(long)]
    pub palette: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Split file; without it every labeled pixel is scored.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    /// Score training pixels too.
    #[arg(long)]
    pub include_train: bool,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid size {s:?}"));
    match s.split_once(['x', 'X']) {
        Some((r, c)) => Ok((dim(r)?, dim(c)?)),
        None => dim(s).map(|n| (n, n)),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Classify(a) => classify(a),
        Command::Eval(a) => eval(a),
        Command::Defaults => {
            print!("{}", RunConfig::default().to_ini());
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.classes < 2 {
        return Err(CliError::Usage(format!("--classes must be >= 2, got {}", a.classes)));
    }
    if a.bands == 0 || a.size.0 == 0 || a.size.1 == 0 {
        return Err(CliError::Usage("--bands and --size must be >= 1".into()));
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(CliError::Usage("--noise must be finite and >= 0".into()));
    }
    let spec = SynthSpec {
        classes: a.classes,
        rows: a.size.0,
        cols: a.size.1,
        bands: a.bands,
        noise: a.noise,
        seed: a.seed,
    };
    let (cube, labels) = synth_scene(&spec)?;
    formats::save_cube(&cube, &with_suffix(&a.out, ".hsc"))?;
    formats::save_labels(&labels, &with_suffix(&a.out, ".hsl"))?;
    let palette = Palette::generate(labels.class_names());
    report::write_text(&with_suffix(&a.out, ".palette.csv"), &palette.to_csv())?;
    println!("oracle OA: {:.4}", nearest_centroid_oa(&cube, &labels)?);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&a.overrides)?;
    if let Some(s) = &a.strategy {
        cfg.strategy = parse_strategy(s).map_err(|m| CliError::Usage(format!("--strategy: {m}")))?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.train
        .validate()
        .and_then(|()| cfg.model_config(5, 1).validate())
        .map_err(|e| CliError::Usage(format!("config: {e}")))?;

    let mut cube = formats::load_cube(&a.cube)?;
    let labels = formats::load_labels(&a.labels)?;
    if cfg.normalize {
        cube = cube.normalize();
    }
    let split = sample_split(&labels, &cfg.strategy, cfg.split_seed)?;
    print!("{}", report::split_csv(&labels, &split));

    let (net, params) = Fcspn::seeded(cfg.model_config(cube.bands(), labels.num_classes()), cfg.train.seed)?;
    let steps = cfg.train.steps_per_epoch(
        split
            .class_counts(&labels, fcspn_core::data::SplitCell::Train)
            .iter()
            .sum(),
    );
    let mut epoch_sum = 0.0;
    let observer = |r: &LossRecord| {
        epoch_sum += r.total;
        if r.step + 1 == steps {
            info!("epoch {} mean loss {:.6}", r.epoch + 1, epoch_sum / steps as f64);
            epoch_sum = 0.0;
        }
    };
    let outcome = train(&net, params, &cube, &labels, &split, &cfg.train, observer)?;
    for w in &outcome.warnings {
        warn!("{w}");
    }
    if let Some(last) = outcome.trace.last() {
        if !last.total.is_finite() {
            return Err(CoreError::NonFinite("training loss").into());
        }
        println!("final loss: {:.6}", last.total);
    }

    let ckpt = Checkpoint {
        config: *net.config(),
        class_names: labels.class_names().to_vec(),
        params: outcome.params,
    };
    formats::save_checkpoint(&ckpt, &a.out_ckpt)?;
    let loss_path = a.loss_csv.unwrap_or_else(|| with_suffix(&a.out_ckpt, ".loss.csv"));
    report::write_text(&loss_path, &report::loss_csv(&outcome.trace))?;
    let split_path = a.out_split.unwrap_or_else(|| with_suffix(&a.out_ckpt, ".split.hss"));
    formats::save_split(&split, &split_path)?;
    Ok(())
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let ckpt = formats::load_checkpoint(&a.ckpt)?;
    let net = ckpt.network()?;
    let mut cube = formats::load_cube(&a.cube)?;
    if a.normalize == Switch::On {
        cube = cube.normalize();
    }
    let refine = (a.refine == Switch::On).then(|| {
        let mut p = net.config().propagation();
        if let Some(s) = a.steps {
            p.steps = s;
        }
        p
    });
    let pred = predict(&net, &ckpt.params, &cube, refine)?;
    let map = LabelMap::new(cube.rows(), cube.cols(), pred.labels, ckpt.class_names.clone())?;
    formats::save_labels(&map, &a.out_map)?;
    if let Some(path) = &a.out_ppm {
        let palette = match &a.palette {
            Some(p) => Palette::load(p)?,
            None => Palette::generate(&ckpt.class_names),
        };
        formats::write_file(path, &report::render_ppm(&map, &palette))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = formats::load_labels(&a.pred)?;
    let reference = formats::load_labels(&a.reference)?;
    let split = match &a.split {
        Some(p) => formats::load_split(p)?,
        None => fcspn_core::data::SplitMask::uniform(&reference, fcspn_core::data::SplitCell::Test),
    };
    let cm = confusion(&pred, &reference, &split, a.include_train)?;
    let rep = Report::new(&cm, reference.class_names())?;
    let csv = report::metrics_csv(&rep);
    print!("{csv}");
    if let Some(path) = &a.out_csv {
        report::write_text(path, &csv)?;
    }
    Ok(())
}
