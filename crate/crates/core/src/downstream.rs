//! Segmentation fine-tuning on top of a pre-trained backbone, and the
//! pixel-classification metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use di3cl_tensor::nn::{BatchNorm, Conv2d, Ctx, ParamSet, Sgd};
use di3cl_tensor::ops::softmax_channels;
use di3cl_tensor::{BackwardCtx, BackwardOp, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Archive;
use crate::datapipe::{make_batches, shuffled, LabeledSet};
use crate::encoder::{Backbone, EncoderConfig, Preset};
use crate::error::{Error, Result};
use crate::raster::{Image, IGNORE_LABEL};

/// Smoothing constant of the Dice loss.
pub const DICE_EPS: f64 = 1.0;

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: u64, max_iter: u64, base_lr: f64, power: f64) -> f64 {
    if max_iter == 0 {
        return base_lr;
    }
    let t = iter.min(max_iter) as f64 / max_iter as f64;
    base_lr * (1.0 - t).powf(power)
}

/// Backbone plus a feature-pyramid decoder producing logits at input size.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub preset: Preset,
    pub num_classes: usize,
    pub width: usize,
    pub backbone: Backbone,
    lateral: Vec<Conv2d>,
    fuse: Conv2d,
    fuse_bn: BatchNorm,
    classifier: Conv2d,
}

impl SegModel {
    /// Fresh backbone and decoder; `width` is the pyramid channel count.
    pub fn new(
        preset: Preset,
        num_classes: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<(Self, ParamSet<f32>)> {
        if num_classes < 2 {
            return Err(Error::Config(format!("finetune.num_classes must be >= 2, got {num_classes}")));
        }
        if width == 0 {
            return Err(Error::Config("finetune.decoder_width must be >= 1".into()));
        }
        let mut ps = ParamSet::new();
        let backbone = Backbone::new(preset, &mut ps, rng);
        Ok((Self::decoder(preset, backbone, num_classes, width, &mut ps, rng), ps))
    }

    fn decoder(
        preset: Preset,
        backbone: Backbone,
        num_classes: usize,
        width: usize,
        ps: &mut ParamSet<f32>,
        rng: &mut impl Rng,
    ) -> Self {
        let lateral = backbone
            .tap_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(ps, rng, &format!("decoder.lateral{i}"), c, width, 1, 1, 0, true))
            .collect();
        let fuse = Conv2d::new(ps, rng, "decoder.fuse", width, width, 3, 1, 1, false);
        let fuse_bn = BatchNorm::new(ps, "decoder.fuse_bn", width);
        let classifier = Conv2d::new(ps, rng, "decoder.classifier", width, num_classes, 1, 1, 0, true);
        Self { preset, num_classes, width, backbone, lateral, fuse, fuse_bn, classifier }
    }

    /// `[n, 1, h, w]` images to `[n, classes, h, w]` logits.
    pub fn forward(&self, ctx: &mut Ctx<'_, f32>, x: Var) -> Result<Var> {
        let (_, _, h, w) = ctx.g.value(x).dims4()?;
        let taps = self.backbone.forward(ctx, x)?;
        let mut pyramid: Vec<Var> = Vec::with_capacity(4);
        for (i, lat) in self.lateral.iter().enumerate().rev() {
            let l = lat.forward(ctx, taps[i])?;
            let p = match pyramid.last() {
                Some(&above) => {
                    let (_, _, lh, lw) = ctx.g.value(l).dims4()?;
                    let up = ctx.g.upsample_bilinear(above, lh, lw)?;
                    ctx.g.add(l, up)?
                }
                None => l,
            };
            pyramid.push(p);
        }
        let finest = *pyramid.last().expect("four levels");
        let (_, _, fh, fw) = ctx.g.value(finest).dims4()?;
        let mut merged = finest;
        for &p in &pyramid[..3] {
            let up = ctx.g.upsample_bilinear(p, fh, fw)?;
            merged = ctx.g.add(merged, up)?;
        }
        let y = self.fuse.forward(ctx, merged)?;
        let y = self.fuse_bn.forward(ctx, y)?;
        let y = ctx.g.relu(y);
        let logits = self.classifier.forward(ctx, y)?;
        Ok(ctx.g.upsample_bilinear(logits, h, w)?)
    }

    /// Class probabilities in inference mode, `[n, classes, h, w]`.
    pub fn predict(&self, ps: &mut ParamSet<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::no_grad();
        let vars = ps.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &vars, ps.buffers_mut(), false);
        let logits = self.forward(&mut ctx, xv)?;
        Ok(softmax_channels(g.value(logits))?)
    }

    /// Copies backbone weights and statistics from a pre-training or
    /// backbone-export checkpoint. Returns the number of tensors loaded.
    pub fn load_backbone(&self, ps: &mut ParamSet<f32>, path: &Path) -> Result<usize> {
        let a = Archive::read(path)?;
        let prefix = match a.kind() {
            "pretrain" => "online",
            "backbone" => "encoder",
            k => return Err(Error::Checkpoint(format!("{}: no backbone in a {k:?} checkpoint", path.display()))),
        };
        let enc = a.encoder()?;
        if enc.preset != self.preset {
            return Err(Error::Structure(format!(
                "checkpoint backbone is {}, segmentation model expects {}",
                enc.preset, self.preset
            )));
        }
        a.load_params(prefix, ps, |n| n.starts_with("backbone."))
    }

    pub fn save(&self, ps: &ParamSet<f32>, path: &Path) -> Result<()> {
        let mut a = Archive::new("segmentation");
        a.set_encoder(&EncoderConfig::new(self.preset));
        a.set("num_classes", self.num_classes);
        a.set("decoder_width", self.width);
        a.put_params("model", ps, |_| true);
        a.write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, ParamSet<f32>)> {
        let a = Archive::read(path)?;
        if a.kind() != "segmentation" {
            return Err(Error::Checkpoint(format!("{}: not a segmentation checkpoint", path.display())));
        }
        let preset = a.encoder()?.preset;
        let (model, mut ps) =
            Self::new(preset, a.parse("num_classes")?, a.parse("decoder_width")?, &mut ChaCha8Rng::seed_from_u64(0))?;
        a.load_params("model", &mut ps, |_| true)?;
        Ok((model, ps))
    }
}

fn dice_terms(probs: &[f32], labels: &[u8], n: usize, k: usize, p: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mut inter, mut psum, mut gsum) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for b in 0..n {
        for i in 0..p {
            let label = labels[b * p + i];
            if label == IGNORE_LABEL {
                continue;
            }
            for c in 0..k {
                let pv = probs[(b * k + c) * p + i] as f64;
                psum[c] += pv;
                if label as usize == c {
                    inter[c] += pv;
                    gsum[c] += 1.0;
                }
            }
        }
    }
    (inter, psum, gsum)
}

/// `1 - mean_c (2 sum p g + eps) / (sum p + sum g + eps)` over
/// `[n, classes, h, w]` probabilities; ignored pixels are skipped.
pub fn dice_loss(probs: &Tensor<f32>, labels: &[u8]) -> Result<f64> {
    let (n, k, h, w) = probs.dims4()?;
    if labels.len() != n * h * w {
        return Err(Error::Geometry(format!("{} labels for {n}x{h}x{w} probabilities", labels.len())));
    }
    let (inter, psum, gsum) = dice_terms(probs.data(), labels, n, k, h * w);
    let score: f64 = (0..k).map(|c| (2.0 * inter[c] + DICE_EPS) / (psum[c] + gsum[c] + DICE_EPS)).sum();
    Ok(1.0 - score / k as f64)
}

struct DiceOp {
    probs: Tensor<f32>,
    labels: Vec<u8>,
    inter: Vec<f64>,
    denom: Vec<f64>,
}

impl BackwardOp<f32> for DiceOp {
    fn backward(&self, ctx: BackwardCtx<'_, f32>) -> Vec<Option<Tensor<f32>>> {
        let (n, k, h, w) = self.probs.dims4().expect("rank 4");
        let p = h * w;
        let scale = ctx.grad.item() as f64 / k as f64;
        let probs = self.probs.data();
        let mut dx = Tensor::zeros(self.probs.shape());
        let d = dx.data_mut();
        let mut dp = vec![0.0f64; k];
        for b in 0..n {
            for i in 0..p {
                let label = self.labels[b * p + i];
                if label == IGNORE_LABEL {
                    continue;
                }
                // dL/dp_c, then back through the pixel's softmax.
                for (c, g) in dp.iter_mut().enumerate() {
                    let gt = if label as usize == c { 1.0 } else { 0.0 };
                    let num = 2.0 * self.inter[c] + DICE_EPS;
                    *g = -scale * (2.0 * gt * self.denom[c] - num) / (self.denom[c] * self.denom[c]);
                }
                let dot: f64 = (0..k).map(|c| probs[(b * k + c) * p + i] as f64 * dp[c]).sum();
                for c in 0..k {
                    let idx = (b * k + c) * p + i;
                    d[idx] = (probs[idx] as f64 * (dp[c] - dot)) as f32;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Differentiable Dice loss on logits.
pub fn dice_loss_on_logits(g: &mut Graph<f32>, logits: Var, labels: &[u8]) -> Result<Var> {
    let probs = softmax_channels(g.value(logits))?;
    let (n, k, h, w) = probs.dims4()?;
    if labels.len() != n * h * w {
        return Err(Error::Geometry(format!("{} labels for {n}x{h}x{w} logits", labels.len())));
    }
    let (inter, psum, gsum) = dice_terms(probs.data(), labels, n, k, h * w);
    let denom: Vec<f64> = (0..k).map(|c| psum[c] + gsum[c] + DICE_EPS).collect();
    let score: f64 = (0..k).map(|c| (2.0 * inter[c] + DICE_EPS) / denom[c]).sum();
    let value = Tensor::scalar((1.0 - score / k as f64) as f32);
    Ok(g.record(value, &[logits], DiceOp { probs, labels: labels.to_vec(), inter, denom }))
}

/// Original, three clockwise rotations, horizontal and vertical flips.
pub fn sixfold_augment(set: &LabeledSet) -> Result<LabeledSet> {
    let mut out = LabeledSet::default();
    for (img, mask) in set.images.iter().zip(&set.masks) {
        if img.height != img.width {
            return Err(Error::Geometry(format!("six-fold augmentation needs square patches, got {}x{}", img.height, img.width)));
        }
        let (r1, m1) = (img.rot90(), mask.rot90());
        let (r2, m2) = (r1.rot90(), m1.rot90());
        let (r3, m3) = (r2.rot90(), m2.rot90());
        out.push(img.clone(), mask.clone());
        out.push(r1, m1);
        out.push(r2, m2);
        out.push(r3, m3);
        out.push(img.hflip(), mask.hflip());
        out.push(img.vflip(), mask.vflip());
    }
    Ok(out)
}

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Geometry("confusion matrix must be square".into()));
        }
        Ok(Self { classes: k, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one label map; ignored truth pixels are skipped.
    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Geometry(format!("{} truth vs {} predicted pixels", truth.len(), pred.len())));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::Data(format!("label {} outside {} classes", t.max(p), self.classes)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }
}

/// Scores of the positive class (index 1) of a two-class task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub oa: f64,
    pub kappa: f64,
    /// Mean over classes whose IoU is defined.
    pub miou: f64,
    /// NaN for a class absent from both truth and prediction.
    pub iou: Vec<f64>,
    pub f1: Vec<f64>,
    pub binary: Option<BinaryScores>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 { num / den } else { f64::NAN }
}

pub fn compute_metrics(confusion: &Confusion) -> Result<MetricsReport> {
    let k = confusion.classes();
    let total = confusion.total() as f64;
    if total == 0.0 {
        return Err(Error::UndefinedMetrics);
    }
    let row = |c: usize| (0..k).map(|j| confusion.get(c, j)).sum::<u64>() as f64;
    let col = |c: usize| (0..k).map(|i| confusion.get(i, c)).sum::<u64>() as f64;
    let tp: Vec<f64> = (0..k).map(|c| confusion.get(c, c) as f64).collect();
    let oa = tp.iter().sum::<f64>() / total;
    let pe = (0..k).map(|c| row(c) * col(c)).sum::<f64>() / (total * total);
    // pe == 1 only when all mass sits in one diagonal cell.
    let kappa = if pe < 1.0 { (oa - pe) / (1.0 - pe) } else { 1.0 };
    let iou: Vec<f64> = (0..k).map(|c| ratio(tp[c], row(c) + col(c) - tp[c])).collect();
    let f1: Vec<f64> = (0..k).map(|c| ratio(2.0 * tp[c], row(c) + col(c))).collect();
    let defined: Vec<f64> = iou.iter().copied().filter(|v| !v.is_nan()).collect();
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    let binary = (k == 2).then(|| BinaryScores {
        precision: ratio(tp[1], col(1)),
        recall: ratio(tp[1], row(1)),
        f1: f1[1],
        iou: iou[1],
    });
    Ok(MetricsReport { confusion: confusion.clone(), oa, kappa, miou, iou, f1, binary })
}

impl MetricsReport {
    /// `name<TAB>value` lines.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "oa\t{}", self.oa);
        let _ = writeln!(s, "kappa\t{}", self.kappa);
        let _ = writeln!(s, "miou\t{}", self.miou);
        for (c, v) in self.iou.iter().enumerate() {
            let _ = writeln!(s, "iou.{c}\t{v}");
        }
        for (c, v) in self.f1.iter().enumerate() {
            let _ = writeln!(s, "f1.{c}\t{v}");
        }
        if let Some(b) = self.binary {
            let _ = writeln!(s, "precision\t{}", b.precision);
            let _ = writeln!(s, "recall\t{}", b.recall);
        }
        s
    }

    /// Human-readable summary in percent.
    pub fn to_table(&self) -> String {
        let pct = |v: f64| if v.is_nan() { "   n/a".to_string() } else { format!("{:6.2}", 100.0 * v) };
        let mut s = String::new();
        let _ = writeln!(s, "OA     {}%", pct(self.oa));
        let _ = writeln!(s, "Kappa  {}%", pct(self.kappa));
        let _ = writeln!(s, "mIoU   {}%", pct(self.miou));
        let _ = writeln!(s, "class     IoU      F1");
        for c in 0..self.iou.len() {
            let _ = writeln!(s, "{c:>5}  {}  {}", pct(self.iou[c]), pct(self.f1[c]));
        }
        if let Some(b) = self.binary {
            let _ = writeln!(s, "Precision {}%  Recall {}%", pct(b.precision), pct(b.recall));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Random,
    Pretrained(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub preset: Preset,
    pub num_classes: usize,
    pub decoder_width: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Upper bound; early stopping usually ends training sooner.
    pub max_epochs: usize,
    pub patience: usize,
    pub use_dice: bool,
    pub init: Init,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            num_classes: 4,
            decoder_width: 32,
            base_lr: 0.03,
            poly_power: 0.9,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            use_dice: false,
            init: Init::Random,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, rule: &str| Err(Error::Config(format!("finetune.{key} must be {rule}")));
        if self.num_classes < 2 || self.num_classes > IGNORE_LABEL as usize {
            return bad("num_classes", "between 2 and 255");
        }
        if self.decoder_width == 0 {
            return bad("decoder_width", ">= 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "> 0");
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return bad("poly_power", "> 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", ">= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", ">= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", ">= 1");
        }
        if self.patience == 0 {
            return bad("patience", ">= 1");
        }
        Ok(())
    }
}

/// Stops after `patience` consecutive epochs without a strictly better score.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    /// Records the score of `epoch`; true if it is the new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score <= b || score.is_nan() => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Stacks images into `[n, 1, h, w]`.
pub fn image_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|i| (i.height, i.width) != (h, w)) {
        return Err(Error::Data("patches in a batch differ in size".into()));
    }
    let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    Ok(Tensor::new(&[images.len(), 1, h, w], data)?)
}

/// Per-pixel argmax over `[n, classes, h, w]`, lowest index on ties.
pub fn argmax_labels(probs: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, k, h, w) = probs.dims4()?;
    let p = h * w;
    let d = probs.data();
    let mut out = Vec::with_capacity(n * p);
    for b in 0..n {
        for i in 0..p {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * p + i] > d[(b * k + best) * p + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Confusion-based metrics of `model` on a labeled set.
pub fn evaluate(model: &SegModel, ps: &mut ParamSet<f32>, set: &LabeledSet, batch_size: usize) -> Result<MetricsReport> {
    let mut confusion = Confusion::new(model.num_classes);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|&i| &set.images[i]).collect();
        let pred = argmax_labels(&model.predict(ps, &image_batch(&images)?)?)?;
        let truth: Vec<u8> = chunk.iter().flat_map(|&i| set.masks[i].data.iter().copied()).collect();
        confusion.add(&truth, &pred)?;
    }
    compute_metrics(&confusion)
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: SegModel,
    /// Parameters of the best validation epoch.
    pub params: ParamSet<f32>,
    pub best_epoch: usize,
    pub report: MetricsReport,
    pub history: Vec<EpochRecord>,
}

/// Builds the model for `cfg`, loading the backbone when asked to.
pub fn build_model(cfg: &FinetuneConfig) -> Result<(SegModel, ParamSet<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, mut ps) = SegModel::new(cfg.preset, cfg.num_classes, cfg.decoder_width, &mut rng)?;
    if let Init::Pretrained(path) = &cfg.init {
        let n = model.load_backbone(&mut ps, path)?;
        log::info!("loaded {n} backbone tensors from {}", path.display());
    }
    Ok((model, ps))
}

/// Trains with cross-entropy (plus Dice when enabled), SGD and poly decay,
/// keeping the weights of the best validation mIoU.
pub fn finetune(cfg: &FinetuneConfig, train: &LabeledSet, val: &LabeledSet) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("fine-tuning needs non-empty training and validation sets".into()));
    }
    let (model, mut ps) = build_model(cfg)?;
    let mut opt = Sgd::new(&ps, cfg.momentum, cfg.weight_decay);
    let drop_last = train.len() > cfg.batch_size;
    let per_epoch = make_batches(&(0..train.len()).collect::<Vec<_>>(), cfg.batch_size, drop_last)?.len() as u64;
    let max_iter = per_epoch * cfg.max_epochs as u64;
    let mut iter = 0u64;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<(ParamSet<f32>, MetricsReport)> = None;
    let mut history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e7_0001);

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(&shuffled(train.len(), &mut rng), cfg.batch_size, drop_last)?;
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let images: Vec<&Image> = idx.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<u8> = idx.iter().flat_map(|&i| train.masks[i].data.iter().copied()).collect();
            let x = image_batch(&images)?;
            let mut g = Graph::new();
            let vars = ps.bind(&mut g);
            let xv = g.constant(x);
            let mut ctx = Ctx::new(&mut g, &vars, ps.buffers_mut(), true);
            let logits = model.forward(&mut ctx, xv)?;
            let mut loss = g.softmax_cross_entropy(logits, &labels, IGNORE_LABEL)?;
            if cfg.use_dice {
                let dice = dice_loss_on_logits(&mut g, logits, &labels)?;
                loss = g.add(loss, dice)?;
            }
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: iter + 1,
                    detail: format!("fine-tuning loss {value} (epoch {epoch}, batch {b}, patches {idx:?})"),
                });
            }
            let mut grads = g.backward(loss)?;
            let grads = ps.collect_grads(&vars, &mut grads);
            opt.step(&mut ps, &grads, poly_lr(iter, max_iter, cfg.base_lr, cfg.poly_power))?;
            iter += 1;
            loss_sum += value;
        }
        let report = evaluate(&model, &mut ps, val, cfg.batch_size)?;
        let train_loss = loss_sum / batches.len() as f64;
        log::info!("finetune epoch {epoch}: loss {train_loss:.4}, val mIoU {:.4}", report.miou);
        history.push(EpochRecord { epoch, train_loss, val_miou: report.miou });
        if stopper.observe(epoch, report.miou) {
            best = Some((ps.clone(), report));
        }
        if stopper.should_stop() {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (params, report) = best.expect("at least one epoch ran");
    let best_epoch = stopper.best().map_or(1, |b| b.0);
    Ok(FinetuneOutcome { model, params, best_epoch, report, history })
}
