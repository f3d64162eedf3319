//! Workflows behind the `di3cl` binary.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use di3cl::datapipe::{load_labeled_dir, scan_dataset, synth_patches, synth_scene, write_labeled_dir, LabeledSet};
use di3cl::downstream::{evaluate, finetune, Init, SegModel};
use di3cl::pretrain::{export_backbone, run_pretraining, TrainState};
use di3cl::scene_inference::infer_scene_file;

pub use config::RunConfig;

pub const RUN_DIR_ENV: &str = "DI3CL_RUN_DIR";
pub const DEFAULT_RUN_ROOT: &str = "runs";
pub const CONFIG_ECHO: &str = "config.txt";
pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.tsv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] di3cl::Error),
}

impl CliError {
    pub fn message(&self) -> String {
        self.to_string()
    }

    pub fn exit_code(&self) -> u8 {
        use di3cl::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Structure(_) => 2,
                E::Data(_)
                | E::Codec { .. }
                | E::Checkpoint(_)
                | E::Geometry(_)
                | E::NoOverlap
                | E::DegenerateRegion { .. }
                | E::UndefinedMetrics => 3,
                E::Divergence { .. } => 4,
                E::Io { .. } => 5,
                _ => 1,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Finetune,
    Evaluate,
    InferScene,
    Synth,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
            Mode::Evaluate => "evaluate",
            Mode::InferScene => "infer-scene",
            Mode::Synth => "synth",
        }
    }
}

/// `$DI3CL_RUN_DIR`, or `runs/` under the working directory.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT), PathBuf::from)
}

/// Creates a fresh `<mode>-<timestamp>[-n]` directory under `root`. An
/// existing directory is never reused.
pub fn create_run_dir(root: &Path, mode: Mode) -> Result<PathBuf, CliError> {
    let io = |p: &Path, e| CliError::Core(di3cl::Error::Io { path: p.to_path_buf(), source: e });
    fs::create_dir_all(root).map_err(|e| io(root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{}-{stamp}", mode.name());
    for n in 0u32.. {
        let dir = root.join(if n == 0 { base.clone() } else { format!("{base}-{n}") });
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io(&dir, e)),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| CliError::Config(format!("{key} must be set for this command")))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| di3cl::Error::Io { path: path.to_path_buf(), source: e }.into())
}

/// A fine-tune run directory stands for the model inside it.
fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() { p.join(MODEL_FILE) } else { p.to_path_buf() }
}

/// A pre-training run directory stands for its exported backbone.
fn init_path(init: &Init) -> Init {
    match init {
        Init::Pretrained(p) if p.is_dir() => Init::Pretrained(p.join(BACKBONE_FILE)),
        other => other.clone(),
    }
}

/// Runs one workflow in a new run directory and returns that directory.
/// Human-readable results go to stdout.
pub fn dispatch(mode: Mode, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = create_run_dir(&run_root(), mode)?;
    write_file(&dir.join(CONFIG_ECHO), &cfg.echo())?;
    log::info!("{} run in {}", mode.name(), dir.display());
    match mode {
        Mode::Synth => synth(cfg, &dir)?,
        Mode::Pretrain => pretrain(cfg, &dir)?,
        Mode::Finetune => finetune_run(cfg, &dir)?,
        Mode::Evaluate => evaluate_run(cfg, &dir)?,
        Mode::InferScene => infer(cfg, &dir)?,
    }
    Ok(dir)
}

fn synth(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let job = &cfg.synth;
    let set = if job.patch == 0 {
        let mut set = LabeledSet::default();
        for i in 0..job.scenes as u64 {
            let (img, mask) = synth_scene(&di3cl::datapipe::SynthConfig { seed: cfg.seed + i, ..job.scene.clone() })?;
            set.push(img, mask);
        }
        set
    } else {
        let per_side = job.scene.scene_size / job.patch;
        synth_patches(&job.scene, job.patch, job.scenes * per_side * per_side)?
    };
    let data = dir.join("data");
    write_labeled_dir(&data, &set)?;
    println!("wrote {} image/mask pairs to {}", set.len(), data.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let root = required(&cfg.data.pretrain_dir, "datapipe.pretrain_dir")?;
    let manifest = scan_dataset(root)?;
    for (path, why) in &manifest.skipped {
        log::warn!("skipped {}: {why}", path.display());
    }
    write_file(&dir.join("manifest.tsv"), &manifest.to_tsv())?;
    log::info!("{} patches from {}", manifest.len(), root.display());
    let out = run_pretraining(&cfg.pretrain, &manifest, dir)?;
    let best = di3cl::checkpoint::Archive::read(&out.best_checkpoint)?;
    let state = TrainState::from_archive(&best, &cfg.pretrain)?;
    let backbone = dir.join(BACKBONE_FILE);
    export_backbone(&state, &backbone)?;
    println!("best epoch {} (mean loss {:.5})", out.best_epoch, out.epoch_losses[out.best_epoch - 1]);
    println!("backbone written to {}", backbone.display());
    Ok(())
}

fn finetune_run(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let train = load_labeled_dir(required(&cfg.data.train_dir, "datapipe.train_dir")?)?;
    let val = load_labeled_dir(required(&cfg.data.val_dir, "datapipe.val_dir")?)?;
    let ft = di3cl::downstream::FinetuneConfig { init: init_path(&cfg.finetune.init), ..cfg.finetune.clone() };
    let out = finetune(&ft, &train, &val)?;
    let mut log = String::from("epoch\ttrain_loss\tval_miou\n");
    for r in &out.history {
        let _ = writeln!(log, "{}\t{}\t{}", r.epoch, r.train_loss, r.val_miou);
    }
    write_file(&dir.join(di3cl::pretrain::METRICS_FILE), &log)?;
    out.model.save(&out.params, &dir.join(MODEL_FILE))?;
    write_file(&dir.join(REPORT_FILE), &out.report.to_record())?;
    println!("best epoch {} on validation", out.best_epoch);
    print!("{}", out.report.to_table());
    Ok(())
}

fn evaluate_run(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let path = model_path(required(&cfg.data.model, "datapipe.model")?);
    let set = load_labeled_dir(required(&cfg.data.eval_dir, "datapipe.eval_dir")?)?;
    let (model, mut ps) = SegModel::load(&path)?;
    let report = evaluate(&model, &mut ps, &set, cfg.finetune.batch_size)?;
    write_file(&dir.join(REPORT_FILE), &report.to_record())?;
    print!("{}", report.to_table());
    Ok(())
}

fn infer(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let path = model_path(required(&cfg.data.model, "datapipe.model")?);
    let scene = required(&cfg.data.scene, "datapipe.scene")?;
    let (model, mut ps) = SegModel::load(&path)?;
    let out = infer_scene_file(&mut (&model, &mut ps), scene, dir, &cfg.inference)?;
    println!("labels: {}", out.labels.display());
    println!("rendering: {}", out.rendering.display());
    Ok(())
}
