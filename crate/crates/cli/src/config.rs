//! Line-oriented run configuration: `section.key = value`, `#` comments.
//!
//! Every key is listed once in [`RunConfig::fields`], which drives parsing,
//! command-line overrides and the echoed effective config alike.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use di3cl::datapipe::SynthConfig;
use di3cl::downstream::{FinetuneConfig, Init};
use di3cl::encoder::Preset;
use di3cl::pretrain::PretrainConfig;
use di3cl::scene_inference::{Blend, InferenceConfig};

use crate::CliError;

/// A config value that can be read from and written back to text.
trait Field {
    fn assign(&mut self, raw: &str) -> Result<(), String>;
    fn show(&self) -> String;
}

macro_rules! parsed_field {
    ($($t:ty => $what:literal),* $(,)?) => {$(
        impl Field for $t {
            fn assign(&mut self, raw: &str) -> Result<(), String> {
                *self = raw.parse().map_err(|_| format!("expected {}, got {raw:?}", $what))?;
                Ok(())
            }

            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

parsed_field! {
    usize => "a non-negative integer",
    u64 => "a non-negative integer",
    f64 => "a number",
    bool => "true or false",
    Preset => "one of micro, tiny, resnet50, resnet101",
    Blend => "uniform or cosine",
}

/// Value that falls back to a preset-dependent default when `auto`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Auto<T>(pub Option<T>);

impl<T: Field + Default> Field for Auto<T> {
    fn assign(&mut self, raw: &str) -> Result<(), String> {
        if raw == "auto" {
            self.0 = None;
            return Ok(());
        }
        let mut v = T::default();
        v.assign(raw).map_err(|e| format!("{e} (or auto)"))?;
        self.0 = Some(v);
        Ok(())
    }

    fn show(&self) -> String {
        self.0.as_ref().map_or_else(|| "auto".into(), Field::show)
    }
}

impl Field for Option<PathBuf> {
    fn assign(&mut self, raw: &str) -> Result<(), String> {
        *self = (!raw.is_empty()).then(|| PathBuf::from(raw));
        Ok(())
    }

    fn show(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl Field for Init {
    fn assign(&mut self, raw: &str) -> Result<(), String> {
        *self = match raw {
            "" => return Err("expected random or a checkpoint path".into()),
            "random" => Init::Random,
            path => Init::Pretrained(PathBuf::from(path)),
        };
        Ok(())
    }

    fn show(&self) -> String {
        match self {
            Init::Random => "random".into(),
            Init::Pretrained(p) => p.display().to_string(),
        }
    }
}

/// Input and model locations; unset paths are empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataPaths {
    /// Flat directory of unlabeled patches.
    pub pretrain_dir: Option<PathBuf>,
    /// Directories holding `images/` and `masks/`.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    /// Raster for `infer-scene`.
    pub scene: Option<PathBuf>,
    /// Segmentation checkpoint, or a fine-tune run directory.
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthJob {
    pub scene: SynthConfig,
    pub scenes: usize,
    /// Tile side; 0 writes whole scenes.
    pub patch: usize,
}

impl Default for SynthJob {
    fn default() -> Self {
        Self { scene: SynthConfig::default(), scenes: 4, patch: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct PresetDefaults {
    head_hidden: Auto<usize>,
    head_out: Auto<usize>,
    bank_capacity: Auto<usize>,
    ema_m: Auto<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataPaths,
    pub synth: SynthJob,
    /// Also carries the encoder, augmentation and loss sections.
    pub pretrain: PretrainConfig,
    /// Its preset always follows `encoder.preset`.
    pub finetune: FinetuneConfig,
    pub inference: InferenceConfig,
    auto: PresetDefaults,
}

impl RunConfig {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn Field)> {
        let p = &mut self.pretrain;
        let (enc, aug, loss) = (&mut p.encoder, &mut p.augment, &mut p.loss);
        let (ft, inf, syn, d, auto) = (&mut self.finetune, &mut self.inference, &mut self.synth, &mut self.data, &mut self.auto);
        vec![
            ("seed", &mut self.seed),
            ("datapipe.pretrain_dir", &mut d.pretrain_dir),
            ("datapipe.train_dir", &mut d.train_dir),
            ("datapipe.val_dir", &mut d.val_dir),
            ("datapipe.eval_dir", &mut d.eval_dir),
            ("datapipe.scene", &mut d.scene),
            ("datapipe.model", &mut d.model),
            ("synth.scenes", &mut syn.scenes),
            ("synth.patch", &mut syn.patch),
            ("synth.scene_size", &mut syn.scene.scene_size),
            ("synth.n_classes", &mut syn.scene.n_classes),
            ("synth.region_count", &mut syn.scene.region_count),
            ("synth.speckle_looks", &mut syn.scene.speckle_looks),
            ("encoder.preset", &mut enc.preset),
            ("encoder.cc_tap", &mut enc.cc_tap),
            ("encoder.head_hidden", &mut auto.head_hidden),
            ("encoder.head_out", &mut auto.head_out),
            ("augment.output_size", &mut aug.output_size),
            ("augment.scale_min", &mut aug.scale.0),
            ("augment.scale_max", &mut aug.scale.1),
            ("augment.ratio_min", &mut aug.ratio.0),
            ("augment.ratio_max", &mut aug.ratio.1),
            ("augment.hflip_prob", &mut aug.hflip_prob),
            ("augment.blur_prob", &mut aug.blur_prob),
            ("augment.blur_sigma_min", &mut aug.blur_sigma.0),
            ("augment.blur_sigma_max", &mut aug.blur_sigma.1),
            ("augment.brightness", &mut aug.brightness),
            ("augment.contrast", &mut aug.contrast),
            ("loss.tau", &mut loss.tau),
            ("loss.alpha", &mut loss.alpha),
            ("loss.beta", &mut loss.beta),
            ("loss.enable_di", &mut loss.enable_di),
            ("loss.enable_cc", &mut loss.enable_cc),
            ("loss.symmetric", &mut loss.symmetric),
            ("pretrain.epochs", &mut p.epochs),
            ("pretrain.batch_size", &mut p.batch_size),
            ("pretrain.base_lr", &mut p.base_lr),
            ("pretrain.min_lr", &mut p.min_lr),
            ("pretrain.weight_decay", &mut p.weight_decay),
            ("pretrain.momentum", &mut p.momentum),
            ("pretrain.boxes", &mut p.boxes),
            ("pretrain.min_side", &mut p.min_side),
            ("pretrain.bank_capacity", &mut auto.bank_capacity),
            ("pretrain.ema_m", &mut auto.ema_m),
            ("finetune.num_classes", &mut ft.num_classes),
            ("finetune.decoder_width", &mut ft.decoder_width),
            ("finetune.base_lr", &mut ft.base_lr),
            ("finetune.poly_power", &mut ft.poly_power),
            ("finetune.weight_decay", &mut ft.weight_decay),
            ("finetune.momentum", &mut ft.momentum),
            ("finetune.batch_size", &mut ft.batch_size),
            ("finetune.max_epochs", &mut ft.max_epochs),
            ("finetune.patience", &mut ft.patience),
            ("finetune.use_dice", &mut ft.use_dice),
            ("finetune.init", &mut ft.init),
            ("inference.window", &mut inf.window),
            ("inference.stride", &mut inf.stride),
            ("inference.blend", &mut inf.blend),
            ("inference.batch_size", &mut inf.batch_size),
        ]
    }

    /// Every accepted key, in echo order.
    pub fn keys() -> Vec<&'static str> {
        Self::default().fields().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        let mut fields = self.fields();
        let (_, field) = fields
            .iter_mut()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| CliError::Config(format!("unknown key {key}")))?;
        field.assign(raw).map_err(|e| CliError::Config(format!("{key}: {e}")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.clone().fields().into_iter().find(|(k, _)| *k == key).map(|(_, f)| f.show())
    }

    /// Applies `key = value` lines; a key may appear at most once.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split_once('#').map_or(line, |(body, _)| body).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{origin}:{}: expected `section.key = value`, got {line:?}", n + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("{origin}:{}: {key} is set twice", n + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| CliError::Config(format!("{origin}:{}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    /// Applies `--key value` or `--key=value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), CliError> {
        let mut rest = args.iter();
        while let Some(arg) = rest.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Config(format!("expected --section.key, got {arg:?}")))?;
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => {
                    let v = rest.next().ok_or_else(|| CliError::Config(format!("--{flag} needs a value")))?;
                    (flag, v.clone())
                }
            };
            self.set(key, &value)?;
        }
        Ok(())
    }

    /// Reads `path` (if any), layers the overrides on top, fills preset
    /// defaults and validates everything.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        cfg.apply_overrides(overrides)?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills `auto` values from the encoder preset and propagates the seed
    /// and preset into the module configs.
    pub fn resolved(mut self) -> Self {
        let preset = self.pretrain.encoder.preset;
        let (hidden, out) = preset.head_dims();
        let a = &mut self.auto;
        let head_hidden = *a.head_hidden.0.get_or_insert(hidden);
        let head_out = *a.head_out.0.get_or_insert(out);
        let bank = *a.bank_capacity.0.get_or_insert(preset.bank_capacity());
        let ema = *a.ema_m.0.get_or_insert(preset.ema_momentum());
        let p = &mut self.pretrain;
        p.encoder.head_hidden = head_hidden;
        p.encoder.head_out = head_out;
        p.bank_capacity = bank;
        p.ema_m = ema;
        p.seed = self.seed;
        self.finetune.preset = preset;
        self.finetune.seed = self.seed;
        self.synth.scene.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.scene.validate()?;
        if self.synth.scenes == 0 {
            return Err(CliError::Config("synth.scenes must be >= 1".into()));
        }
        if self.synth.patch > self.synth.scene.scene_size {
            return Err(CliError::Config("synth.patch must be 0 or at most synth.scene_size".into()));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.inference.validate()?;
        Ok(())
    }

    /// The config as a file that reproduces it when read back.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, field) in self.clone().fields() {
            let sec = key.split_once('.').map_or("", |(s, _)| s);
            if sec != section && !out.is_empty() {
                out.push('\n');
            }
            section = sec;
            let _ = writeln!(out, "{key} = {}", field.show());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips_through_echo() {
        let cfg = RunConfig::default().resolved();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.echo(), "echo").unwrap();
        assert_eq!(back.resolved(), cfg);
    }

    #[test]
    fn keys_are_unique() {
        let keys = RunConfig::keys();
        assert_eq!(keys.iter().collect::<BTreeSet<_>>().len(), keys.len());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# header\n\nloss.tau = 0.1  # colder\n", "t").unwrap();
        assert_eq!(cfg.pretrain.loss.tau, 0.1);
    }

    #[test]
    fn auto_follows_preset_unless_set() {
        let mut cfg = RunConfig::default();
        cfg.set("encoder.preset", "resnet50").unwrap();
        let r = cfg.clone().resolved();
        assert_eq!((r.pretrain.bank_capacity, r.pretrain.ema_m, r.pretrain.encoder.head_out), (65536, 0.999, 128));
        assert_eq!(r.finetune.preset, Preset::ResNet50);
        cfg.set("pretrain.bank_capacity", "4096").unwrap();
        assert_eq!(cfg.resolved().pretrain.bank_capacity, 4096);
    }

    #[test]
    fn malformed_input_names_the_key() {
        let mut cfg = RunConfig::default();
        let msg = |e: CliError| e.message();
        assert!(msg(cfg.set("loss.tua", "1").unwrap_err()).contains("unknown key loss.tua"));
        assert!(msg(cfg.set("pretrain.epochs", "ten").unwrap_err()).contains("pretrain.epochs"));
        assert!(msg(cfg.set("loss.enable_di", "yes").unwrap_err()).contains("true or false"));
        assert!(msg(cfg.apply_text("loss.tau 0.1", "f").unwrap_err()).contains("f:1"));
        assert!(msg(cfg.apply_text("seed = 1\nseed = 2", "f").unwrap_err()).contains("set twice"));
        assert!(msg(cfg.apply_overrides(&["--seed".into()]).unwrap_err()).contains("needs a value"));
    }

    #[test]
    fn overrides_accept_both_spellings() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["--seed=7".into(), "--inference.blend".into(), "cosine".into()]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.inference.blend, Blend::Cosine);
        assert_eq!(cfg.get("inference.blend").as_deref(), Some("cosine"));
    }

    #[test]
    fn init_accepts_random_or_path() {
        let mut cfg = RunConfig::default();
        cfg.set("finetune.init", "runs/pre/backbone.ckpt").unwrap();
        assert_eq!(cfg.finetune.init, Init::Pretrained("runs/pre/backbone.ckpt".into()));
        cfg.set("finetune.init", "random").unwrap();
        assert_eq!(cfg.finetune.init, Init::Random);
    }
}
