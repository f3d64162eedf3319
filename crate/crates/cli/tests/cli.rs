use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use di3cl_cli::{RunConfig, CONFIG_ECHO};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_di3cl"))
            .args(args)
            .env("DI3CL_RUN_DIR", self.path("runs"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    /// Runs and expects success; returns the run directory.
    fn run_ok(&self, args: &[&str]) -> (PathBuf, String) {
        let out = self.run(args);
        let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
        assert!(out.status.success(), "{args:?} failed: {}\n{stdout}", String::from_utf8_lossy(&out.stderr));
        let dir = stdout
            .lines()
            .find_map(|l| l.strip_prefix("run directory: "))
            .map(PathBuf::from)
            .expect("run directory reported");
        (dir, stdout)
    }
}

fn count_files(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().count()
}

const SMALL: &str = "\
seed = 5
synth.scene_size = 64
synth.scenes = 2
synth.patch = 32
encoder.preset = micro
augment.output_size = 32
pretrain.epochs = 1
pretrain.batch_size = 4
pretrain.bank_capacity = 16
pretrain.boxes = 2
pretrain.min_side = 8
finetune.max_epochs = 2
finetune.batch_size = 4
finetune.decoder_width = 4
inference.window = 32
inference.stride = 16
";

#[test]
fn empty_file_gives_valid_defaults() {
    let ws = Workspace::new();
    let empty = ws.write("empty.cfg", "");
    let cfg = RunConfig::load(Some(&empty), &[]).unwrap();
    assert_eq!(cfg, RunConfig::default().resolved());
    let out = ws.run(&["pretrain", "--config", empty.to_str().unwrap(), "--print-config"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), cfg.echo());
}

#[test]
fn negative_temperature_is_rejected_by_name() {
    let ws = Workspace::new();
    let bad = ws.write("bad.cfg", "loss.tau = -1\n");
    let err = RunConfig::load(Some(&bad), &[]).unwrap_err();
    assert!(err.message().contains("loss.tau") && err.message().contains("must be > 0"), "{err}");
    let out = ws.run(&["pretrain", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("loss.tau") && stderr.contains("must be > 0"), "{stderr}");
    assert!(!ws.path("runs").exists(), "no run directory before validation passes");
}

#[test]
fn flags_override_the_file() {
    let ws = Workspace::new();
    let cfg_file = ws.write("run.cfg", "loss.tau = 0.2\n");
    let cfg = RunConfig::load(Some(&cfg_file), &["--loss.tau".into(), "0.07".into()]).unwrap();
    assert_eq!(cfg.pretrain.loss.tau, 0.07);
    let out = ws.run(&["pretrain", "--config", cfg_file.to_str().unwrap(), "--loss.tau", "0.07", "--print-config"]);
    assert!(String::from_utf8_lossy(&out.stdout).lines().any(|l| l == "loss.tau = 0.07"));
}

#[test]
fn unknown_keys_and_bad_types_exit_with_config_code() {
    let ws = Workspace::new();
    for args in [&["synth", "--loss.temperature", "0.1"][..], &["synth", "--pretrain.epochs", "many"]] {
        let out = ws.run(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(args[1].trim_start_matches('-')));
    }
}

#[test]
fn synth_writes_one_pair_per_scene() {
    let ws = Workspace::new();
    let (dir, _) = ws.run_ok(&["synth", "--synth.scenes", "4", "--synth.scene_size", "64"]);
    assert_eq!(count_files(&dir.join("data/images")), 4);
    assert_eq!(count_files(&dir.join("data/masks")), 4);
    let echo = fs::read_to_string(dir.join(CONFIG_ECHO)).unwrap();
    assert!(echo.lines().any(|l| l == "synth.scenes = 4"));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let ws = Workspace::new();
    let missing = ws.path("nowhere");
    let out = ws.run(&["pretrain", "--datapipe.pretrain_dir", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_directories_are_never_reused() {
    let ws = Workspace::new();
    let args = ["synth", "--synth.scenes", "1", "--synth.scene_size", "16", "--synth.region_count", "4"];
    let (a, _) = ws.run_ok(&args);
    let (b, _) = ws.run_ok(&args);
    assert_ne!(a, b);
    assert!(a.join(CONFIG_ECHO).exists() && b.join(CONFIG_ECHO).exists());
}

#[test]
fn full_pipeline_from_synthetic_data() {
    let ws = Workspace::new();
    let cfg = ws.write("small.cfg", SMALL);
    let cfg = cfg.to_str().unwrap();
    let (synth, _) = ws.run_ok(&["synth", "--config", cfg]);
    let data = synth.join("data");
    assert_eq!(count_files(&data.join("images")), 8);

    let (pre, stdout) = ws.run_ok(&["pretrain", "--config", cfg, "--datapipe.pretrain_dir", data.join("images").to_str().unwrap()]);
    assert!(stdout.contains("best epoch 1"));
    for f in ["metrics.tsv", "backbone.ckpt", "epoch_001.ckpt", CONFIG_ECHO] {
        assert!(pre.join(f).exists(), "{f} missing");
    }

    let data_s = data.to_str().unwrap();
    let (ft, stdout) = ws.run_ok(&[
        "finetune",
        "--config",
        cfg,
        "--datapipe.train_dir",
        data_s,
        "--datapipe.val_dir",
        data_s,
        "--finetune.init",
        pre.to_str().unwrap(),
    ]);
    assert!(stdout.contains("mIoU"), "{stdout}");
    assert!(ft.join("model.ckpt").exists() && ft.join("metrics.tsv").exists());

    let (ev, stdout) = ws.run_ok(&["evaluate", "--config", cfg, "--datapipe.model", ft.to_str().unwrap(), "--datapipe.eval_dir", data_s]);
    assert!(stdout.contains("OA") && stdout.contains("Kappa") && stdout.contains("mIoU"), "{stdout}");
    assert!(ev.join("report.tsv").exists());

    let scene = ws.run_ok(&["synth", "--config", cfg, "--synth.patch", "0", "--synth.scenes", "1"]).0;
    let scene = scene.join("data/images/000000.png");
    let (inf, _) = ws.run_ok(&[
        "infer-scene",
        "--config",
        cfg,
        "--datapipe.model",
        ft.join("model.ckpt").to_str().unwrap(),
        "--datapipe.scene",
        scene.to_str().unwrap(),
    ]);
    assert!(inf.join("000000_labels.png").exists() && inf.join("000000_rgb.png").exists());
}
