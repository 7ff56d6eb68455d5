//! Command-line front end: `train`, `eval`, `cam`, `gradcheck`, `synth`.

use crate::checkpoint;
use crate::checks;
use crate::config::{Ablation, RunConfig};
use crate::dataset::{load_directory_dataset, write_dataset};
use crate::gradcheck::GradcheckReport;
use crate::model::ReapsModel;
use crate::ran::{attend, export_attention, ClassChoice};
use crate::synth::{generate_dataset, Dataset};
use crate::train::{evaluate, EpochLog, Metrics, Trainer, LOG_HEADER};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "reaps", version, about = "Region attention and part sequence recognizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, log and metrics to `--out`.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Export attention maps, masks and boxes for test images.
    Cam(CamArgs),
    /// Finite-difference check of every primitive and a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic dataset as class directories of PPM files.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_parser = ["full", "wo-part", "wo-attend"])]
    pub ablation: Option<String>,
    /// Number of attend-and-classify stages.
    #[arg(long)]
    pub stages: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Resume from this checkpoint; its embedded config is the base.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Overrides applied to the checkpoint's config (data keys only matter).
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "cam")]
    pub out: PathBuf,
    /// Number of test images to export.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Use the ground-truth class instead of the prediction.
    #[arg(long)]
    pub use_label: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Skip the end-to-end model checks.
    #[arg(long)]
    pub primitives_only: bool,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
}

impl ConfigArgs {
    /// Applies file, `--set`, `--ablation` and `--stages` on top of `base`.
    pub fn resolve(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        for kv in &self.set {
            cfg.apply_override(kv).with_context(|| format!("--set {kv}"))?;
        }
        if let Some(a) = &self.ablation {
            cfg.model.ablation = a.parse::<Ablation>().map_err(anyhow::Error::msg)?;
        }
        if let Some(s) = self.stages {
            cfg.apply_override(&format!("stages={s}"))?;
        }
        Ok(cfg)
    }
}

/// `(train, test)` from the configured directory or the generator.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        Some(root) => {
            let size = cfg.model.image_size;
            let train = load_directory_dataset(&root.join("train"), size)?;
            let test = load_directory_dataset(&root.join("test"), size)?;
            if train.num_classes != cfg.model.num_classes {
                bail!(
                    "{} has {} classes but num_classes = {}",
                    root.display(),
                    train.num_classes,
                    cfg.model.num_classes
                );
            }
            Ok((train, test))
        }
        None => Ok(generate_dataset(&cfg.synth)?),
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub logs: Vec<EpochLog>,
    pub metrics: Metrics,
    pub config: RunConfig,
}

/// Trains and writes `config.txt`, `train.log`, `checkpoint.bin` (after
/// every epoch) and `metrics.txt` under `out`.
pub fn cmd_train(args: &TrainArgs, echo: &mut dyn Write) -> Result<TrainOutcome> {
    let (base, resumed) = match &args.checkpoint {
        Some(p) => {
            let (run, trainer) = checkpoint::load(p)?;
            (run, Some(trainer))
        }
        None => (RunConfig::default(), None),
    };
    let cfg = args.config.resolve(base)?;
    writeln!(echo, "# effective config")?;
    write!(echo, "{}", cfg.to_text())?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("config.txt"), cfg.to_text())?;
    let (train, test) = load_data(&cfg)?;
    let mut trainer = match resumed {
        Some(mut t) if t.model.config == cfg.model => {
            t.config = cfg.train.clone();
            t
        }
        Some(_) => bail!("model settings differ from the checkpoint being resumed"),
        None => Trainer::new(ReapsModel::new(&cfg.model, cfg.train.seed)?, cfg.train.clone())?,
    };
    let log_path = args.out.join("train.log");
    let ckpt_path = args.out.join("checkpoint.bin");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "{LOG_HEADER}")?;
    let mut io_result: Result<()> = Ok(());
    let logs = trainer.fit(&train, |t, line| {
        let r = writeln!(log, "{line}")
            .map_err(anyhow::Error::from)
            .and_then(|_| Ok(checkpoint::save(&ckpt_path, &cfg, t)?));
        if io_result.is_ok() {
            io_result = r;
        }
        let _ = writeln!(echo, "{line}");
    })?;
    io_result?;
    checkpoint::save(&ckpt_path, &cfg, &trainer)?;
    let metrics = evaluate(&trainer.model, &test, cfg.train.tau, cfg.train.batch_size)?;
    fs::write(args.out.join("metrics.txt"), format!("{metrics}\n"))?;
    writeln!(echo, "{metrics}")?;
    Ok(TrainOutcome {
        trainer,
        logs,
        metrics,
        config: cfg,
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Metrics> {
    let (run, trainer) = checkpoint::load(&args.checkpoint)?;
    let cfg = args.config.resolve(run)?;
    if cfg.model != trainer.model.config {
        bail!("model settings cannot be overridden at evaluation");
    }
    let (_, test) = load_data(&cfg)?;
    Ok(evaluate(&trainer.model, &test, cfg.train.tau, cfg.train.batch_size)?)
}

/// Writes `<i>_cam.pgm`, `<i>_mask.pgm` and `<i>.bbox` for the first
/// `count` test images; returns the written stems.
pub fn cmd_cam(args: &CamArgs) -> Result<Vec<String>> {
    let (run, trainer) = checkpoint::load(&args.checkpoint)?;
    let cfg = args.config.resolve(run)?;
    let (_, test) = load_data(&cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let model = &trainer.model;
    let crop = (model.config.crop_size, model.config.crop_size);
    let mut stems = Vec::new();
    for (i, s) in test.samples.iter().take(args.count).enumerate() {
        let choice = if args.use_label {
            ClassChoice::Label(s.label)
        } else {
            ClassChoice::Predicted
        };
        let (att, _) = attend(&s.image, &model.params, &model.ran, choice, cfg.train.tau, crop)?;
        let stem = format!("{i:04}");
        export_attention(&args.out, &stem, &att.cam, &att.mask, &att.bbox)
            .with_context(|| format!("writing attention files to {}", args.out.display()))?;
        stems.push(stem);
    }
    Ok(stems)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Vec<GradcheckReport>> {
    let mut reports = checks::primitive_suite(args.inject_fault)?;
    if !args.primitives_only {
        reports.extend(checks::model_suite()?);
    }
    Ok(reports)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.config.resolve(RunConfig::default())?;
    let (train, test) = generate_dataset(&cfg.synth)?;
    write_dataset(&args.out.join("train"), &train)?;
    write_dataset(&args.out.join("test"), &test)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    match cli.command {
        Command::Train(a) => {
            cmd_train(&a, &mut stdout.lock())?;
        }
        Command::Eval(a) => println!("{}", cmd_eval(&a)?),
        Command::Cam(a) => {
            let stems = cmd_cam(&a)?;
            println!("wrote {} attention exports to {}", stems.len(), a.out.display());
        }
        Command::Gradcheck(a) => {
            let reports = cmd_gradcheck(&a)?;
            for r in &reports {
                println!("{r}");
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                bail!("gradient check failed for: {}", failed.join(", "));
            }
        }
        Command::Synth(a) => {
            cmd_synth(&a)?;
            println!("wrote {}", a.out.display());
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Errors go to
/// stderr with a nonzero exit code.
pub fn run<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Path of the checkpoint `cmd_train` writes under `out`.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.bin")
}
