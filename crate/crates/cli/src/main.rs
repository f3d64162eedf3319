use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use di3cl_cli::{dispatch, Mode, RunConfig};

/// Contrastive pre-training, fine-tuning and scene inference for SAR patches.
#[derive(Parser)]
#[command(name = "di3cl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pre-training on unlabeled patches.
    Pretrain(RunArgs),
    /// Train a segmentation model on labeled patches.
    Finetune(RunArgs),
    /// Score a segmentation model on a labeled set.
    Evaluate(RunArgs),
    /// Predict a label map for a whole scene.
    InferScene(RunArgs),
    /// Write synthetic scenes with ground-truth masks.
    Synth(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// File of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
    /// Per-key overrides, e.g. `--loss.tau 0.07`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--SECTION.KEY VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    /// Once overrides start, clap hands everything after them to the
    /// trailing list; pick our own flags back out of it.
    fn reclaim_own_flags(&mut self) {
        let mut rest = Vec::new();
        let mut it = std::mem::take(&mut self.overrides).into_iter();
        while let Some(arg) = it.next() {
            match arg.as_str() {
                "--print-config" => self.print_config = true,
                "--config" if self.config.is_none() => self.config = it.next().map(PathBuf::from),
                _ => match arg.strip_prefix("--config=") {
                    Some(path) if self.config.is_none() => self.config = Some(PathBuf::from(path)),
                    _ => rest.push(arg),
                },
            }
        }
        self.overrides = rest;
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (mode, mut args) = match cli.command {
        Command::Pretrain(a) => (Mode::Pretrain, a),
        Command::Finetune(a) => (Mode::Finetune, a),
        Command::Evaluate(a) => (Mode::Evaluate, a),
        Command::InferScene(a) => (Mode::InferScene, a),
        Command::Synth(a) => (Mode::Synth, a),
    };
    args.reclaim_own_flags();
    let result = RunConfig::load(args.config.as_deref(), &args.overrides).and_then(|cfg| {
        if args.print_config {
            print!("{}", cfg.echo());
            return Ok(());
        }
        let dir = dispatch(mode, &cfg)?;
        println!("run directory: {}", dir.display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
