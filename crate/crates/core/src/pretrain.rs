//! Pre-training: paired views through the online and momentum networks,
//! the combined objective, SGD on the online side, momentum updates and
//! the negative queues.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use di3cl_tensor::nn::{Ctx, Sgd};
use di3cl_tensor::{Float, Graph, Tensor, Var};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Archive;
use crate::datapipe::{load_patch, make_batches, shuffled, PatchManifest};
use crate::encoder::{EncoderConfig, NetworkPair};
use crate::error::{Error, Result};
use crate::geometry::{
    apply_view, box_to_feature_coords, map_box_to_view, roi_align_batch, sample_boxes, sample_view_pair,
    AugmentConfig, BBox,
};
use crate::losses::{combine, info_nce_batch, sq_dist_mean, LossConfig, LossReport};
use crate::memorybank::{Banks, MemoryBank};
use crate::raster::Image;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// SGD heavy-ball coefficient.
    pub momentum: f64,
    /// Boxes sampled per image for the local term.
    pub boxes: usize,
    /// Minimum box side in source pixels.
    pub min_side: f64,
    pub bank_capacity: usize,
    pub ema_m: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            bank_capacity: encoder.preset.bank_capacity(),
            ema_m: encoder.preset.ema_momentum(),
            encoder,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            epochs: 300,
            batch_size: 256,
            base_lr: 0.09,
            min_lr: 0.0,
            weight_decay: 1e-4,
            momentum: 0.9,
            boxes: 8,
            min_side: 32.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        let bad = |key: &str, rule: &str, v: &dyn std::fmt::Display| {
            Err(Error::Config(format!("pretrain.{key} must be {rule}, got {v}")))
        };
        if self.epochs == 0 {
            return bad("epochs", ">= 1", &self.epochs);
        }
        if self.batch_size == 0 {
            return bad("batch_size", ">= 1", &self.batch_size);
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "> 0", &self.base_lr);
        }
        if !(0.0..=self.base_lr).contains(&self.min_lr) {
            return bad("min_lr", "in [0, base_lr]", &self.min_lr);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", ">= 0", &self.weight_decay);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "in [0, 1)", &self.momentum);
        }
        if self.boxes == 0 {
            return bad("boxes", ">= 1", &self.boxes);
        }
        if !(self.min_side > 0.0 && self.min_side.is_finite()) {
            return bad("min_side", "> 0", &self.min_side);
        }
        if self.bank_capacity < self.batch_size {
            return bad("bank_capacity", "at least pretrain.batch_size", &self.bank_capacity);
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return bad("ema_m", "in [0, 1]", &self.ema_m);
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * t).cos())
}

// Independent random streams derived from the seed, so that a resumed run
// draws exactly what the uninterrupted one would have.
const STREAM_INIT: u64 = 0;
const STREAM_STEP: u64 = 1 << 40;
const STREAM_EPOCH: u64 = 2 << 40;
const STREAM_WARMUP: u64 = 3 << 40;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Both augmented views of a batch and the matching RoIs in deep-map cells.
#[derive(Clone, Debug)]
pub struct ViewBatch<T> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
    pub rois_first: Vec<(usize, BBox)>,
    pub rois_second: Vec<(usize, BBox)>,
    /// Images whose views had to fall back to a shared center crop.
    pub fallbacks: usize,
}

fn to_batch<T: Float>(views: &[Image]) -> Result<Tensor<T>> {
    let (h, w) = (views[0].height, views[0].width);
    let data = views.iter().flat_map(|v| v.data.iter().map(|&p| T::from_f64_lossy(p as f64))).collect();
    Ok(Tensor::new(&[views.len(), 1, h, w], data)?)
}

/// Samples a view pair and `boxes` shared boxes per image.
pub fn sample_views<T: Float>(
    images: &[Image],
    cfg: &PretrainConfig,
    deep_stride: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ViewBatch<T>> {
    if images.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let (mut v1, mut v2) = (Vec::new(), Vec::new());
    let (mut r1, mut r2) = (Vec::new(), Vec::new());
    let mut fallbacks = 0;
    for (i, img) in images.iter().enumerate() {
        let pair = sample_view_pair(rng, &cfg.augment, (img.height, img.width), cfg.min_side)?;
        fallbacks += pair.fell_back as usize;
        for b in sample_boxes(&pair.overlap, cfg.boxes, cfg.min_side, rng)?.boxes {
            r1.push((i, box_to_feature_coords(&map_box_to_view(&b, &pair.first), deep_stride)));
            r2.push((i, box_to_feature_coords(&map_box_to_view(&b, &pair.second), deep_stride)));
        }
        v1.push(apply_view(img, &pair.first)?);
        v2.push(apply_view(img, &pair.second)?);
    }
    Ok(ViewBatch { first: to_batch(&v1)?, second: to_batch(&v2)?, rois_first: r1, rois_second: r2, fallbacks })
}

/// Momentum-network projections of one view: `[n, d]` deep and shallow,
/// `[n*K, d]` local.
#[derive(Clone, Debug)]
pub struct TargetEmbeddings<T> {
    pub deep: Tensor<T>,
    pub shallow: Tensor<T>,
    pub local: Tensor<T>,
}

/// Forward pass of the momentum network; updates its own norm statistics.
pub fn embed_target<T: Float>(
    pair: &mut NetworkPair<T>,
    x: &Tensor<T>,
    rois: &[(usize, BBox)],
) -> Result<TargetEmbeddings<T>> {
    let enc = &pair.encoder;
    let mut g = Graph::no_grad();
    let vars = pair.target.bind(&mut g);
    let xv = g.constant(x.clone());
    let mut ctx = Ctx::new(&mut g, &vars, pair.target.buffers_mut(), true);
    let taps = enc.forward_taps(&mut ctx, xv)?;
    let pooled = ctx.g.global_avg_pool(taps.deep())?;
    let deep = enc.proj_deep.project(&mut ctx, pooled)?;
    let pooled = ctx.g.global_avg_pool(taps.shallow())?;
    let shallow = enc.proj_shallow.project(&mut ctx, pooled)?;
    let regions = roi_align_batch(ctx.g, taps.deep(), rois)?;
    let local = enc.proj_local.project(&mut ctx, regions)?;
    Ok(TargetEmbeddings { deep: g.value(deep).clone(), shallow: g.value(shallow).clone(), local: g.value(local).clone() })
}

/// The differentiable objective of one step, built on a caller-owned graph.
pub struct Objective {
    pub total: Var,
    pub l_d: f64,
    pub l_s: f64,
    pub l_l: f64,
    pub online_vars: Vec<Var>,
    pub pred_vars: Vec<Var>,
}

struct Terms {
    deep: Var,
    shallow: Option<Var>,
    local: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn online_terms<T: Float>(
    g: &mut Graph<T>,
    pair: &mut NetworkPair<T>,
    online_vars: &[Var],
    pred_vars: &[Var],
    x: &Tensor<T>,
    rois: &[(usize, BBox)],
    target: &TargetEmbeddings<T>,
    banks: &Banks<T>,
    cfg: &LossConfig,
) -> Result<Terms> {
    let enc = &pair.encoder;
    let xv = g.constant(x.clone());
    let mut ctx = Ctx::new(g, online_vars, pair.online.buffers_mut(), true);
    let taps = enc.forward_taps(&mut ctx, xv)?;
    let pooled = ctx.g.global_avg_pool(taps.deep())?;
    let p_deep = enc.proj_deep.project(&mut ctx, pooled)?;
    let deep = info_nce_batch(ctx.g, p_deep, &target.deep, &banks.deep.negatives()?, cfg.tau)?;
    let shallow = if cfg.enable_cc {
        let pooled = ctx.g.global_avg_pool(taps.shallow())?;
        let p_shallow = enc.proj_shallow.project(&mut ctx, pooled)?;
        Some(info_nce_batch(ctx.g, p_shallow, &target.shallow, &banks.shallow.negatives()?, cfg.tau)?)
    } else {
        None
    };
    let local_z = if cfg.enable_di {
        let regions = roi_align_batch(ctx.g, taps.deep(), rois)?;
        Some(enc.proj_local.project(&mut ctx, regions)?)
    } else {
        None
    };
    let local = match local_z {
        Some(z) => {
            let mut pctx = Ctx::new(g, pred_vars, pair.pred.buffers_mut(), true);
            let f = pair.predictor.project(&mut pctx, z)?;
            let tz = g.constant(target.local.clone());
            Some(sq_dist_mean(g, f, tz)?)
        }
        None => None,
    };
    Ok(Terms { deep, shallow, local })
}

/// Builds the combined loss for the given views and momentum embeddings.
/// `targets[0]` embeds the second view; with the symmetric objective
/// `targets[1]` embeds the first.
pub fn objective<T: Float>(
    g: &mut Graph<T>,
    pair: &mut NetworkPair<T>,
    views: &ViewBatch<T>,
    targets: &[TargetEmbeddings<T>],
    banks: &Banks<T>,
    cfg: &LossConfig,
) -> Result<Objective> {
    let directions = if cfg.symmetric { 2 } else { 1 };
    if targets.len() != directions {
        return Err(Error::Structure(format!("{} target embeddings for {directions} view orderings", targets.len())));
    }
    let online_vars = pair.online.bind(g);
    let pred_vars = pair.pred.bind(g);
    let mut terms = Vec::new();
    terms.push(online_terms(g, pair, &online_vars, &pred_vars, &views.first, &views.rois_first, &targets[0], banks, cfg)?);
    if cfg.symmetric {
        terms.push(online_terms(
            g,
            pair,
            &online_vars,
            &pred_vars,
            &views.second,
            &views.rois_second,
            &targets[1],
            banks,
            cfg,
        )?);
    }
    let (wd, ws, wl) = cfg.weights();
    let share = 1.0 / directions as f64;
    let mut weighted = Vec::new();
    let (mut l_d, mut l_s, mut l_l) = (0.0, 0.0, 0.0);
    for t in &terms {
        l_d += share * g.value(t.deep).item().as_f64();
        weighted.push((t.deep, T::from_f64_lossy(wd * share)));
        if let Some(v) = t.shallow {
            l_s += share * g.value(v).item().as_f64();
            weighted.push((v, T::from_f64_lossy(ws * share)));
        }
        if let Some(v) = t.local {
            l_l += share * g.value(v).item().as_f64();
            weighted.push((v, T::from_f64_lossy(wl * share)));
        }
    }
    let total = g.weighted_sum(&weighted)?;
    Ok(Objective { total, l_d, l_s, l_l, online_vars, pred_vars })
}

/// Everything that evolves during pre-training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub pair: NetworkPair<f32>,
    pub banks: Banks<f32>,
    pub online_opt: Sgd<f32>,
    pub pred_opt: Sgd<f32>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean total loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainState {
    pub fn new(cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, STREAM_INIT);
        let pair = NetworkPair::new(&cfg.encoder, cfg.ema_m, &mut rng)?;
        let banks = Banks::new(cfg.bank_capacity, cfg.encoder.head_out)?;
        let online_opt = Sgd::new(&pair.online, cfg.momentum, cfg.weight_decay);
        let pred_opt = Sgd::new(&pair.pred, cfg.momentum, cfg.weight_decay);
        Ok(Self { pair, banks, online_opt, pred_opt, step: 0, epoch: 0, epoch_losses: Vec::new() })
    }

    pub fn deep_stride(&self) -> usize {
        self.pair.encoder.backbone.tap_strides[3]
    }

    pub fn is_warm(&self) -> bool {
        self.banks.deep.filled() > 0 && self.banks.shallow.filled() > 0
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("pretrain");
        a.set_encoder(&self.pair.encoder.config);
        a.set("step", self.step);
        a.set("epoch", self.epoch);
        a.set("ema_m", self.pair.momentum);
        a.set("epoch_losses", self.epoch_losses.iter().map(|l| format!("{l:e}")).collect::<Vec<_>>().join(","));
        let all = |_: &str| true;
        a.put_params("online", &self.pair.online, all);
        a.put_params("target", &self.pair.target, all);
        a.put_params("pred", &self.pair.pred, all);
        for (prefix, opt) in [("opt.online", &self.online_opt), ("opt.pred", &self.pred_opt)] {
            for (i, v) in opt.velocity().iter().enumerate() {
                a.put(format!("{prefix}/{i}"), v.clone());
            }
        }
        for (name, bank) in [("bank.deep", &self.banks.deep), ("bank.shallow", &self.banks.shallow)] {
            let (head, filled, entries) = bank.raw_parts();
            a.set(&format!("{name}.head"), head);
            a.set(&format!("{name}.filled"), filled);
            a.put(name, Tensor::new(&[bank.capacity(), bank.dim()], entries.to_vec()).expect("bank layout"));
        }
        a
    }

    /// Restores a state saved by [`TrainState::to_archive`]; the
    /// architecture must match `cfg`.
    pub fn from_archive(a: &Archive, cfg: &PretrainConfig) -> Result<Self> {
        if a.kind() != "pretrain" {
            return Err(Error::Checkpoint(format!("expected a pre-training checkpoint, found kind {:?}", a.kind())));
        }
        if a.encoder()? != cfg.encoder {
            return Err(Error::Checkpoint("checkpoint encoder differs from the configured one".into()));
        }
        let mut s = Self::new(cfg)?;
        let all = |_: &str| true;
        a.load_params("online", &mut s.pair.online, all)?;
        a.load_params("target", &mut s.pair.target, all)?;
        a.load_params("pred", &mut s.pair.pred, all)?;
        for (prefix, opt) in [("opt.online", &mut s.online_opt), ("opt.pred", &mut s.pred_opt)] {
            let vel = (0..opt.velocity().len())
                .map(|i| a.tensor(&format!("{prefix}/{i}")).cloned())
                .collect::<Result<Vec<_>>>()?;
            opt.set_velocity(vel).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        for (name, bank) in [("bank.deep", &mut s.banks.deep), ("bank.shallow", &mut s.banks.shallow)] {
            let t = a.tensor(name)?;
            let (cap, dim) = t.dims2()?;
            if cap != cfg.bank_capacity {
                return Err(Error::Checkpoint(format!("{name} holds {cap} rows, configured capacity is {}", cfg.bank_capacity)));
            }
            let head = a.parse(&format!("{name}.head"))?;
            let filled = a.parse(&format!("{name}.filled"))?;
            *bank = MemoryBank::from_raw_parts(cap, dim, head, filled, t.data().to_vec())?;
        }
        s.step = a.parse("step")?;
        s.epoch = a.parse("epoch")?;
        let losses = a.get("epoch_losses")?;
        s.epoch_losses = losses
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| p.parse().map_err(|_| Error::Checkpoint(format!("bad epoch loss {p:?}"))))
            .collect::<Result<_>>()?;
        Ok(s)
    }
}

/// Writes only the online backbone, for fine-tuning.
pub fn export_backbone(state: &TrainState, path: &Path) -> Result<()> {
    let mut a = Archive::new("backbone");
    a.set_encoder(&state.pair.encoder.config);
    a.put_params("encoder", &state.pair.online, |n| n.starts_with("backbone."));
    a.write(path)
}

/// Fills both queues from momentum-network embeddings without touching
/// the online side. Draws `ceil(M / N)` random batches.
pub fn warm_up(state: &mut TrainState, data: &dyn PatchSource, cfg: &PretrainConfig) -> Result<()> {
    let n = cfg.batch_size.min(data.len());
    if n == 0 {
        return Err(Error::Data("cannot warm up the memory banks on an empty dataset".into()));
    }
    let stride = state.deep_stride();
    for b in 0..cfg.bank_capacity.div_ceil(n) {
        let mut rng = stream(cfg.seed, STREAM_WARMUP + b as u64);
        let idx = index::sample(&mut rng, data.len(), n).into_vec();
        let images = idx.iter().map(|&i| data.load(i)).collect::<Result<Vec<_>>>()?;
        let views = sample_views::<f32>(&images, cfg, stride, &mut rng)?;
        let t = embed_target(&mut state.pair, &views.second, &views.rois_second)?;
        state.banks.deep.enqueue(&t.deep)?;
        state.banks.shallow.enqueue(&t.shallow)?;
    }
    Ok(())
}

/// One optimisation step on a batch of source patches at learning rate `lr`.
pub fn train_step(state: &mut TrainState, images: &[Image], cfg: &PretrainConfig, lr: f64) -> Result<LossReport> {
    if !state.is_warm() {
        return Err(Error::NotReady("memory bank"));
    }
    let step = state.step;
    let mut rng = stream(cfg.seed, STREAM_STEP + step);
    let views = sample_views::<f32>(images, cfg, state.deep_stride(), &mut rng)?;
    if views.fallbacks > 0 {
        log::debug!("step {step}: {} of {} view pairs fell back to a center crop", views.fallbacks, images.len());
    }
    let mut targets = vec![embed_target(&mut state.pair, &views.second, &views.rois_second)?];
    if cfg.loss.symmetric {
        targets.push(embed_target(&mut state.pair, &views.first, &views.rois_first)?);
    }
    let mut g = Graph::new();
    let obj = objective(&mut g, &mut state.pair, &views, &targets, &state.banks, &cfg.loss)?;
    let report = combine(obj.l_d, obj.l_s, obj.l_l, &cfg.loss, step + 1)?;
    let mut grads = g.backward(obj.total)?;
    let online_grads = state.pair.online.collect_grads(&obj.online_vars, &mut grads);
    let pred_grads = state.pair.pred.collect_grads(&obj.pred_vars, &mut grads);
    drop(grads);
    drop(g);
    state.online_opt.step(&mut state.pair.online, &online_grads, lr)?;
    state.pred_opt.step(&mut state.pair.pred, &pred_grads, lr)?;
    state.pair.ema_update()?;
    state.banks.deep.enqueue(&targets[0].deep)?;
    state.banks.shallow.enqueue(&targets[0].shallow)?;
    state.step += 1;
    Ok(report)
}

/// Random-access patch storage.
pub trait PatchSource {
    fn len(&self) -> usize;
    fn load(&self, i: usize) -> Result<Image>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PatchSource for [Image] {
    fn len(&self) -> usize {
        <[Image]>::len(self)
    }

    fn load(&self, i: usize) -> Result<Image> {
        Ok(self[i].clone())
    }
}

impl PatchSource for Vec<Image> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, i: usize) -> Result<Image> {
        Ok(self[i].clone())
    }
}

impl PatchSource for PatchManifest {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn load(&self, i: usize) -> Result<Image> {
        load_patch(&self.entries[i].path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    /// Checkpoint of the epoch with the lowest mean loss.
    pub best_checkpoint: PathBuf,
    /// 1-based.
    pub best_epoch: usize,
    pub epoch_losses: Vec<f64>,
}

pub fn epoch_checkpoint(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

fn metrics_line(r: &LossReport, lr: f64) -> String {
    format!("{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8e}\n", r.step, r.l_d, r.l_s, r.l_l, r.total, lr)
}

/// Drops log lines past `step`, left behind by an interrupted epoch.
fn trim_metrics(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| l.split('\t').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains for `cfg.epochs` epochs, checkpointing each one into `out_dir`.
/// Continues from `out_dir/last.ckpt` when present.
pub fn run_pretraining(cfg: &PretrainConfig, data: &dyn PatchSource, out_dir: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("pre-training dataset is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let last = out_dir.join(LAST_CHECKPOINT);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut state = if last.exists() {
        let s = TrainState::from_archive(&Archive::read(&last)?, cfg)?;
        log::info!("resuming after epoch {} (step {})", s.epoch, s.step);
        trim_metrics(&metrics_path, s.step)?;
        s
    } else {
        let mut s = TrainState::new(cfg)?;
        warm_up(&mut s, data, cfg)?;
        let _ = fs::remove_file(&metrics_path);
        s
    };
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let drop_last = data.len() >= cfg.batch_size;
    let per_epoch = make_batches(&(0..data.len()).collect::<Vec<_>>(), cfg.batch_size, drop_last)?.len() as u64;
    let total_steps = per_epoch * cfg.epochs as u64;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = stream(cfg.seed, STREAM_EPOCH + epoch as u64);
        let batches = make_batches(&shuffled(data.len(), &mut rng), cfg.batch_size, drop_last)?;
        let mut sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let images = idx.iter().map(|&i| data.load(i)).collect::<Result<Vec<_>>>()?;
            let lr = cosine_lr(state.step, total_steps, cfg.base_lr, cfg.min_lr);
            let report = train_step(&mut state, &images, cfg, lr).map_err(|e| match e {
                Error::Divergence { step, detail } => {
                    let detail = format!("{detail} (epoch {}, batch {b}, patches {idx:?})", epoch + 1);
                    log::error!("divergence at step {step}: {detail}");
                    Error::Divergence { step, detail }
                }
                other => other,
            })?;
            metrics.write_all(metrics_line(&report, lr).as_bytes()).map_err(|e| Error::io(&metrics_path, e))?;
            sum += report.total;
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let mean = sum / batches.len() as f64;
        state.epoch += 1;
        state.epoch_losses.push(mean);
        log::info!("epoch {}/{}: mean loss {mean:.5}", state.epoch, cfg.epochs);
        let archive = state.to_archive();
        let save = |p: &Path| {
            archive.write(p).map_err(|e| match e {
                Error::Io { path, source } => {
                    Error::Io { path, source: std::io::Error::new(source.kind(), format!("epoch {}: {source}", state.epoch)) }
                }
                other => other,
            })
        };
        save(&epoch_checkpoint(out_dir, state.epoch))?;
        save(&last)?;
    }

    let (best, _) = state
        .epoch_losses
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc });
    Ok(PretrainOutcome {
        best_checkpoint: epoch_checkpoint(out_dir, best + 1),
        best_epoch: best + 1,
        epoch_losses: state.epoch_losses,
    })
}
