//! Command-line entry points.
//!
//! `train` and `augment` resolve a [`RunConfig`] from defaults, then an
//! optional `key=value` config file, then command-line flags. Exit codes:
//! 0 success, 1 runtime error, 2 usage error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, FromArgMatches, Parser, Subcommand};

use crate::dataset::{
    generate_synthetic, load_dataset, EmbeddingDataset, SplitSpec, SyntheticTaskSpec,
};
use crate::error::Error;
use crate::eval::{evaluate, EvalOptions, OverallMode};
use crate::network::{load_checkpoint, save_checkpoint};
use crate::trainer::{self, AblationFlags, Alternation, Hyperparams, Task, TrainMode};

pub const THREADS_ENV: &str = "FKT_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime { stage: &'static str, source: Error },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime { stage, source } => write!(f, "{stage} failed: {source}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime { .. } => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn stage<T>(name: &'static str, r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|source| CliError::Runtime {
        stage: name,
        source,
    })
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Everything `train` and `augment` can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hp: Hyperparams,
    pub flags: AblationFlags,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub minority: Vec<usize>,
    /// `None` keeps every minority row.
    pub shots: Option<usize>,
    pub task: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hp: Hyperparams::default(),
            flags: AblationFlags::full(),
            source: None,
            target: None,
            out_dir: None,
            minority: Vec::new(),
            shots: None,
            task: "fkt".into(),
        }
    }
}

pub struct KeySpec {
    pub name: &'static str,
    pub long: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($(($name:literal, $long:literal, $help:literal)),* $(,)?) => {
        pub const KEYS: &[KeySpec] = &[$(KeySpec { name: $name, long: $long, help: $help }),*];
    };
}

keys![
    ("source", "source", "source embedding file"),
    ("target", "target", "target embedding file"),
    (
        "out_dir",
        "out-dir",
        "directory for report.jsonl, metrics.tsv, model.ckpt"
    ),
    (
        "minority",
        "minority",
        "comma-separated minority class ids, `-` for none"
    ),
    (
        "shots",
        "shots",
        "labeled source rows kept per minority class, or `all`"
    ),
    ("task", "task", "task name written to the metrics table"),
    ("seed", "seed", "random seed"),
    ("alpha", "alpha", "propagation strength, in (0, 1)"),
    (
        "lambda",
        "lambda",
        "weight of the prototype alignment terms"
    ),
    ("lr", "lr", "Adam learning rate after pretraining"),
    (
        "pretrain_lr",
        "pretrain-lr",
        "Adam learning rate during pretraining"
    ),
    (
        "pretrain_epochs",
        "pretrain-epochs",
        "full-batch pretraining epochs"
    ),
    ("epochs", "epochs", "training epochs after pretraining"),
    (
        "iters_per_epoch",
        "iters-per-epoch",
        "A/B iterations per epoch or episode"
    ),
    (
        "mix_count",
        "mix-count",
        "mixup samples per minority seed row (k)"
    ),
    (
        "beta_a",
        "beta-a",
        "first Beta parameter of the mixing weight"
    ),
    (
        "beta_b",
        "beta-b",
        "second Beta parameter of the mixing weight"
    ),
    (
        "tau",
        "tau",
        "cosine temperature of the prototype classifier"
    ),
    ("mode", "mode", "global | episodic"),
    ("p", "p", "episodic: rows per majority class"),
    (
        "q",
        "q",
        "episodic: rows per minority class (with replacement)"
    ),
    ("e_t", "e-t", "episodic: target rows per episode"),
    (
        "episodes_per_epoch",
        "episodes-per-epoch",
        "episodic: episodes per epoch, `auto` = n_t / e_t"
    ),
    ("alternation", "alternation", "iteration | epoch"),
    (
        "row_normalize",
        "row-normalize",
        "row-normalize propagator rows"
    ),
    (
        "sigma",
        "sigma",
        "kernel bandwidth statistic: var-sq | var-dist"
    ),
    (
        "ep_minority_only",
        "ep-minority-only",
        "restrict within-source propagation sums to minority rows"
    ),
    (
        "confidence_threshold",
        "confidence-threshold",
        "minimum pseudo-label confidence, `none` to accept all"
    ),
    ("hidden", "hidden", "generator hidden width"),
    ("feature", "feature", "feature width"),
    ("cls_hidden", "cls-hidden", "classifier hidden width"),
    (
        "overall",
        "overall",
        "overall accuracy: sample | class-mean"
    ),
    (
        "eval_every",
        "eval-every",
        "evaluate every N epochs (always at the last)"
    ),
    (
        "record_timing",
        "record-timing",
        "record wall_ms in the report (breaks byte reproducibility)"
    ),
    ("use_cpa", "use-cpa", "prototype alignment"),
    (
        "use_cpa_intra",
        "use-cpa-intra",
        "class-wise discrepancy term"
    ),
    (
        "use_cpa_inter",
        "use-cpa-inter",
        "inter-class divergence term"
    ),
    ("use_cda", "use-cda", "data augmentation"),
    (
        "use_cda_s",
        "use-cda-s",
        "within-source propagation samples"
    ),
    ("use_cda_t", "use-cda-t", "cross-domain propagation samples"),
    ("use_cda_mix", "use-cda-mix", "mixup samples"),
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| format!("`{v}`: {e}"))
}

pub fn parse_class_list(v: &str) -> Result<Vec<usize>, String> {
    let v = v.trim();
    if v.is_empty() || v == "-" {
        return Ok(Vec::new());
    }
    v.split(',').map(|t| parse_num(t.trim())).collect()
}

fn list_to_string(v: &[usize]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path_string(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let hp = &self.hp;
        let f = &self.flags;
        Some(match key {
            "source" => path_string(&self.source),
            "target" => path_string(&self.target),
            "out_dir" => path_string(&self.out_dir),
            "minority" => list_to_string(&self.minority),
            "shots" => self.shots.map_or("all".into(), |s| s.to_string()),
            "task" => self.task.clone(),
            "seed" => hp.seed.to_string(),
            "alpha" => hp.alpha.to_string(),
            "lambda" => hp.lambda.to_string(),
            "lr" => hp.lr.to_string(),
            "pretrain_lr" => hp.pretrain_lr.to_string(),
            "pretrain_epochs" => hp.pretrain_epochs.to_string(),
            "epochs" => hp.epochs.to_string(),
            "iters_per_epoch" => hp.iters_per_epoch.to_string(),
            "mix_count" => hp.mix_count.to_string(),
            "beta_a" => hp.beta_a.to_string(),
            "beta_b" => hp.beta_b.to_string(),
            "tau" => hp.tau.to_string(),
            "mode" => match hp.mode {
                TrainMode::Global => "global".into(),
                TrainMode::Episodic => "episodic".into(),
            },
            "p" => hp.episode.p.to_string(),
            "q" => hp.episode.q.to_string(),
            "e_t" => hp.episode.e_t.to_string(),
            "episodes_per_epoch" => hp
                .episodes_per_epoch
                .map_or("auto".into(), |e| e.to_string()),
            "alternation" => match hp.alternation {
                Alternation::Iteration => "iteration".into(),
                Alternation::Epoch => "epoch".into(),
            },
            "row_normalize" => hp.row_normalize.to_string(),
            "sigma" => hp.sigma.to_string(),
            "ep_minority_only" => hp.ep_minority_only.to_string(),
            "confidence_threshold" => hp
                .confidence_threshold
                .map_or("none".into(), |t| t.to_string()),
            "hidden" => hp.hidden.to_string(),
            "feature" => hp.feature.to_string(),
            "cls_hidden" => hp.cls_hidden.to_string(),
            "overall" => overall_name(hp.overall).into(),
            "eval_every" => hp.eval_every.to_string(),
            "record_timing" => hp.record_timing.to_string(),
            "use_cpa" => f.use_cpa.to_string(),
            "use_cpa_intra" => f.use_cpa_intra.to_string(),
            "use_cpa_inter" => f.use_cpa_inter.to_string(),
            "use_cda" => f.use_cda.to_string(),
            "use_cda_s" => f.use_cda_s.to_string(),
            "use_cda_t" => f.use_cda_t.to_string(),
            "use_cda_mix" => f.use_cda_mix.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let hp = &mut self.hp;
        let f = &mut self.flags;
        match key {
            "source" => self.source = Some(PathBuf::from(v)),
            "target" => self.target = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "minority" => self.minority = parse_class_list(v)?,
            "shots" => {
                self.shots = if v == "all" {
                    None
                } else {
                    Some(parse_num(v)?)
                }
            }
            "task" => self.task = v.to_string(),
            "seed" => hp.seed = parse_num(v)?,
            "alpha" => hp.alpha = parse_num(v)?,
            "lambda" => hp.lambda = parse_num(v)?,
            "lr" => hp.lr = parse_num(v)?,
            "pretrain_lr" => hp.pretrain_lr = parse_num(v)?,
            "pretrain_epochs" => hp.pretrain_epochs = parse_num(v)?,
            "epochs" => hp.epochs = parse_num(v)?,
            "iters_per_epoch" => hp.iters_per_epoch = parse_num(v)?,
            "mix_count" => hp.mix_count = parse_num(v)?,
            "beta_a" => hp.beta_a = parse_num(v)?,
            "beta_b" => hp.beta_b = parse_num(v)?,
            "tau" => hp.tau = parse_num(v)?,
            "mode" => hp.mode = v.parse()?,
            "p" => hp.episode.p = parse_num(v)?,
            "q" => hp.episode.q = parse_num(v)?,
            "e_t" => hp.episode.e_t = parse_num(v)?,
            "episodes_per_epoch" => {
                hp.episodes_per_epoch = if v == "auto" {
                    None
                } else {
                    Some(parse_num(v)?)
                }
            }
            "alternation" => hp.alternation = v.parse()?,
            "row_normalize" => hp.row_normalize = parse_bool(v)?,
            "sigma" => hp.sigma = v.parse()?,
            "ep_minority_only" => hp.ep_minority_only = parse_bool(v)?,
            "confidence_threshold" => {
                hp.confidence_threshold = if v == "none" {
                    None
                } else {
                    Some(parse_num(v)?)
                }
            }
            "hidden" => hp.hidden = parse_num(v)?,
            "feature" => hp.feature = parse_num(v)?,
            "cls_hidden" => hp.cls_hidden = parse_num(v)?,
            "overall" => hp.overall = parse_overall(v)?,
            "eval_every" => hp.eval_every = parse_num(v)?,
            "record_timing" => hp.record_timing = parse_bool(v)?,
            "use_cpa" => f.use_cpa = parse_bool(v)?,
            "use_cpa_intra" => f.use_cpa_intra = parse_bool(v)?,
            "use_cpa_inter" => f.use_cpa_inter = parse_bool(v)?,
            "use_cda" => f.use_cda = parse_bool(v)?,
            "use_cda_s" => f.use_cda_s = parse_bool(v)?,
            "use_cda_t" => f.use_cda_t = parse_bool(v)?,
            "use_cda_mix" => f.use_cda_mix = parse_bool(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Apply `key=value` lines; `#` starts a comment line.
    pub fn apply_config_text(&mut self, text: &str, path: &Path) -> Result<(), String> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{}: line {}: expected key=value", path.display(), i + 1))?;
            let key = k.trim().replace('-', "_");
            self.set(&key, v)
                .map_err(|e| format!("{}: line {}: {e}", path.display(), i + 1))?;
        }
        Ok(())
    }
}

fn overall_name(m: OverallMode) -> &'static str {
    match m {
        OverallMode::SampleWeighted => "sample",
        OverallMode::ClassMean => "class-mean",
    }
}

fn parse_overall(v: &str) -> Result<OverallMode, String> {
    match v {
        "sample" => Ok(OverallMode::SampleWeighted),
        "class-mean" | "class_mean" => Ok(OverallMode::ClassMean),
        _ => Err(format!("unknown overall mode `{v}` (sample | class-mean)")),
    }
}

/// One optional `--<key> VALUE` flag per config key, with its default in
/// the help text.
#[derive(Debug, Clone, Default)]
pub struct KeyArgs(pub Vec<(&'static str, String)>);

impl FromArgMatches for KeyArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Self(
            KEYS.iter()
                .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name, v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for KeyArgs {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        let defaults = RunConfig::default();
        KEYS.iter().fold(cmd, |cmd, k| {
            let default = defaults.get(k.name).expect("every key has a value");
            cmd.arg(
                Arg::new(k.name)
                    .long(k.long)
                    .value_name("VALUE")
                    .overrides_with(k.name)
                    .help(format!("{} [default: {default}]", k.help)),
            )
        })
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

#[derive(Debug, Clone, Args)]
pub struct AblationArgs {
    /// Disable prototype alignment (both terms)
    #[arg(long)]
    pub no_cpa: bool,
    /// Disable the class-wise discrepancy term
    #[arg(long)]
    pub no_cpa_intra: bool,
    /// Disable the inter-class divergence term
    #[arg(long)]
    pub no_cpa_inter: bool,
    /// Disable all augmentation
    #[arg(long)]
    pub no_cda: bool,
    /// Disable within-source propagation samples
    #[arg(long)]
    pub no_cda_s: bool,
    /// Disable cross-domain propagation samples
    #[arg(long)]
    pub no_cda_t: bool,
    /// Disable mixup samples
    #[arg(long)]
    pub no_cda_mix: bool,
}

impl AblationArgs {
    fn apply(&self, f: &mut AblationFlags) {
        for (set, slot) in [
            (self.no_cpa, &mut f.use_cpa),
            (self.no_cpa_intra, &mut f.use_cpa_intra),
            (self.no_cpa_inter, &mut f.use_cpa_inter),
            (self.no_cda, &mut f.use_cda),
            (self.no_cda_s, &mut f.use_cda_s),
            (self.no_cda_t, &mut f.use_cda_t),
            (self.no_cda_mix, &mut f.use_cda_mix),
        ] {
            if set {
                *slot = false;
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// `key=value` config file; flags override its entries
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: KeyArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
}

impl RunArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_config_text(&text, path).map_err(usage)?;
        }
        for (k, v) in &self.keys.0 {
            cfg.set(k, v)
                .map_err(|e| usage(format!("--{}: {e}", k.replace('_', "-"))))?;
        }
        self.ablation.apply(&mut cfg.flags);
        cfg.hp.threads = threads_from_env()?;
        cfg.hp.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn threads_from_env() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| n.max(1))
            .map_err(|e| usage(format!("{THREADS_ENV}=`{v}`: {e}"))),
        Err(_) => Ok(1),
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 150)]
    pub per_class_source: usize,
    #[arg(long, default_value_t = 150)]
    pub per_class_target: usize,
    /// Comma-separated minority class ids, `-` for none
    #[arg(long, default_value = "0,1,2")]
    pub minority: String,
    /// Source rows kept per minority class, or `all`
    #[arg(long, default_value = "1")]
    pub shots: String,
    /// Rotation angle of the domain shift, radians
    #[arg(long, default_value_t = 0.3)]
    pub angle: f64,
    #[arg(long, default_value_t = 1.0)]
    pub translation: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Norm of the class centers
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "FILE")]
    pub source_out: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub target_out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Labeled target embedding file
    #[arg(long, value_name = "FILE")]
    pub target: PathBuf,
    /// Minority class ids; defaults to the list stored in the checkpoint
    #[arg(long)]
    pub minority: Option<String>,
    #[arg(long, default_value_t = 10.0)]
    pub tau: f64,
    /// sample | class-mean
    #[arg(long, default_value = "sample")]
    pub overall: String,
    /// Score every row with the prototype classifier
    #[arg(long)]
    pub deploy_mode: bool,
    #[arg(long, default_value = "fkt")]
    pub task: String,
    /// Epoch number written to the table
    #[arg(long, default_value_t = 0)]
    pub epoch: usize,
    /// Write the TSV here instead of stdout
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Output pool file (embedding format plus a provenance column)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic source/target task
    Synth(SynthArgs),
    /// Pretrain and train, writing report.jsonl, metrics.tsv and model.ckpt
    Train(RunArgs),
    /// Evaluate a checkpoint on a labeled target file
    Eval(EvalArgs),
    /// Dump the augmented source pool
    Augment(AugmentArgs),
}

#[derive(Debug, Parser)]
#[command(
    name = "fkt",
    version,
    about = "Few-shot knowledge transfer over embedding files"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a.resolve()?),
        Command::Eval(a) => cmd_eval(&a),
        Command::Augment(a) => cmd_augment(&a.run.resolve()?, &a.out),
    }
}

fn write_file(path: &Path, contents: &str) -> crate::Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let spec = SyntheticTaskSpec {
        class_count: a.classes,
        dim: a.dim,
        per_class_source: a.per_class_source,
        per_class_target: a.per_class_target,
        minority: parse_class_list(&a.minority).map_err(|e| usage(format!("--minority: {e}")))?,
        shots: if a.shots == "all" {
            None
        } else {
            Some(parse_num(&a.shots).map_err(|e| usage(format!("--shots: {e}")))?)
        },
        angle: a.angle,
        translation: a.translation,
        noise: a.noise,
        separation: a.separation,
        seed: a.seed,
    };
    let (source, target) = generate_synthetic(&spec).map_err(|e| match e {
        Error::InvalidInput(m) => usage(m),
        other => CliError::Runtime {
            stage: "generating synthetic task",
            source: other,
        },
    })?;
    stage("writing source file", source.save(&a.source_out))?;
    stage("writing target file", target.save(&a.target_out))
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| {
        usage(format!(
            "missing required `{key}` (--{} or `{key}=` in --config)",
            key.replace('_', "-")
        ))
    })
}

fn load_task(cfg: &RunConfig) -> CliResult<Task> {
    let source_path = required(&cfg.source, "source")?;
    let target_path = required(&cfg.target, "target")?;
    let source = stage("loading source dataset", load_dataset(source_path))?;
    let target = stage("loading target dataset", load_dataset(target_path))?;
    let split = stage(
        "preparing split",
        SplitSpec::new(
            cfg.minority.clone(),
            cfg.shots.unwrap_or(usize::MAX),
            source.class_count(),
        ),
    )?;
    stage(
        "preparing task",
        Task::new(&source, &target, &split, cfg.hp.seed),
    )
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    required(&cfg.source, "source")?;
    required(&cfg.target, "target")?;
    let out_dir = required(&cfg.out_dir, "out_dir")?.clone();
    let task = load_task(cfg)?;
    let hp = &cfg.hp;
    let mut model = stage("initializing model", trainer::init_model(&task, hp))?;
    let pretrain_losses = stage(
        "pretraining",
        trainer::pretrain_model(&task, &mut model, hp),
    )?;
    let mut report = stage(
        "training",
        trainer::train_from(&task, &mut model, hp, cfg.flags),
    )?;
    report.pretrain_losses = pretrain_losses;

    stage(
        "writing outputs",
        fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
            path: out_dir.clone(),
            source,
        }),
    )?;
    stage(
        "writing report",
        write_file(&out_dir.join("report.jsonl"), &report.to_jsonl()),
    )?;
    if let Some(m) = &report.final_metrics {
        let tsv = m.to_tsv(&cfg.task, hp.seed, hp.epochs);
        stage(
            "writing metrics",
            write_file(&out_dir.join("metrics.tsv"), &tsv),
        )?;
        print!("{tsv}");
    }
    stage(
        "writing checkpoint",
        save_checkpoint(&model, out_dir.join("model.ckpt")),
    )
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let overall = parse_overall(&a.overall).map_err(|e| usage(format!("--overall: {e}")))?;
    if !(a.tau > 0.0) {
        return Err(usage("--tau must be positive"));
    }
    let model = stage("loading checkpoint", load_checkpoint(&a.checkpoint))?;
    let target: EmbeddingDataset = stage("loading target dataset", load_dataset(&a.target))?;
    let minority = match &a.minority {
        Some(s) => parse_class_list(s).map_err(|e| usage(format!("--minority: {e}")))?,
        None => model.minority.clone(),
    };
    let classes = target.class_count();
    if let Some(&c) = minority.iter().find(|&&c| c >= classes) {
        return Err(usage(format!("--minority: class {c} >= c={classes}")));
    }
    let mut mask = vec![false; classes];
    for c in minority {
        mask[c] = true;
    }
    let opts = EvalOptions {
        tau: a.tau,
        deploy_mode: a.deploy_mode,
        overall,
    };
    let metrics = stage("evaluating", evaluate(&model, &target, &mask, &opts))?;
    let tsv = metrics.to_tsv(&a.task, model.seed, a.epoch);
    match &a.out {
        Some(p) => stage("writing metrics", write_file(p, &tsv)),
        None => {
            print!("{tsv}");
            Ok(())
        }
    }
}

pub fn cmd_augment(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let task = load_task(cfg)?;
    let pool = stage(
        "augmenting",
        trainer::augment_task(&task, &cfg.hp, cfg.flags),
    )?;
    stage(
        "writing pool",
        write_file(out, &pool.to_text(task.classes())),
    )
}
