//! Residual backbones with four feature taps, projection/prediction heads,
//! and the online/target network pair.
//!
//! Architectures are plain descriptors holding parameter ids; the weights
//! live in a [`ParamSet`]. Online and target networks share one descriptor
//! and differ only in their parameter sets.

use std::fmt;
use std::str::FromStr;

use di3cl_tensor::nn::{BatchNorm, Conv2d, Ctx, Linear, ParamSet};
use di3cl_tensor::{Float, Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Normalization guard added to every vector norm.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Under a thousand parameters; for finite-difference checks.
    Micro,
    /// About 300k parameters; desk-scale experiments.
    Tiny,
    ResNet50,
    ResNet101,
}

impl Preset {
    /// `(hidden, output)` widths of the heads.
    pub fn head_dims(self) -> (usize, usize) {
        match self {
            Preset::Micro => (4, 4),
            Preset::Tiny => (64, 32),
            Preset::ResNet50 | Preset::ResNet101 => (2048, 128),
        }
    }

    pub fn ema_momentum(self) -> f64 {
        match self {
            Preset::Micro | Preset::Tiny => 0.99,
            Preset::ResNet50 | Preset::ResNet101 => 0.999,
        }
    }

    pub fn bank_capacity(self) -> usize {
        match self {
            Preset::Micro | Preset::Tiny => 1024,
            Preset::ResNet50 | Preset::ResNet101 => 65536,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Preset::Micro),
            "tiny" => Ok(Preset::Tiny),
            "resnet50" => Ok(Preset::ResNet50),
            "resnet101" => Ok(Preset::ResNet101),
            _ => Err(Error::Config(format!(
                "encoder.preset: unknown preset {s:?} (expected micro, tiny, resnet50 or resnet101)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Micro => "micro",
            Preset::Tiny => "tiny",
            Preset::ResNet50 => "resnet50",
            Preset::ResNet101 => "resnet101",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub preset: Preset,
    /// Stage feeding the shallow head, 1 to 3.
    pub cc_tap: usize,
    pub head_hidden: usize,
    pub head_out: usize,
}

impl EncoderConfig {
    pub fn new(preset: Preset) -> Self {
        let (head_hidden, head_out) = preset.head_dims();
        Self { preset, cc_tap: 3, head_hidden, head_out }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.cc_tap) {
            return Err(Error::Config(format!("encoder.cc_tap must be 1, 2 or 3, got {}", self.cc_tap)));
        }
        if self.head_hidden == 0 || self.head_out == 0 {
            return Err(Error::Config("encoder.head_hidden and encoder.head_out must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::new(Preset::Tiny)
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Float>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv2d::new(ps, rng, &format!("{name}.conv"), cin, cout, kernel, stride, kernel / 2, false);
        let bn = BatchNorm::new(ps, &format!("{name}.bn"), cout);
        Self { conv, bn }
    }

    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if relu { ctx.g.relu(y) } else { y })
    }
}

#[derive(Clone, Debug)]
enum Block {
    Basic { a: ConvBn, b: ConvBn, down: Option<ConvBn> },
    Bottleneck { a: ConvBn, b: ConvBn, c: ConvBn, down: Option<ConvBn> },
}

impl Block {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (y, down) = match self {
            Block::Basic { a, b, down } => {
                let y = a.forward(ctx, x, true)?;
                (b.forward(ctx, y, false)?, down)
            }
            Block::Bottleneck { a, b, c, down } => {
                let y = a.forward(ctx, x, true)?;
                let y = b.forward(ctx, y, true)?;
                (c.forward(ctx, y, false)?, down)
            }
        };
        let shortcut = match down {
            Some(d) => d.forward(ctx, x, false)?,
            None => x,
        };
        let sum = ctx.g.add(y, shortcut)?;
        Ok(ctx.g.relu(sum))
    }
}

/// Residual backbone with four stages at strides 4/8/16/32.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBn,
    stem_pool: bool,
    stages: Vec<Vec<Block>>,
    pub tap_strides: [usize; 4],
    pub tap_channels: [usize; 4],
}

impl Backbone {
    pub fn new<T: Float>(preset: Preset, ps: &mut ParamSet<T>, rng: &mut impl Rng) -> Self {
        match preset {
            Preset::Micro => Self::basic(ps, rng, 2, [2, 3, 3, 4]),
            Preset::Tiny => Self::basic(ps, rng, 8, [16, 32, 64, 128]),
            Preset::ResNet50 => Self::bottleneck(ps, rng, [3, 4, 6, 3]),
            Preset::ResNet101 => Self::bottleneck(ps, rng, [3, 4, 23, 3]),
        }
    }

    /// 3x3 stride-2 stem, then one downsampling basic block per stage.
    fn basic<T: Float>(ps: &mut ParamSet<T>, rng: &mut impl Rng, stem: usize, widths: [usize; 4]) -> Self {
        let stem_layer = ConvBn::new(ps, rng, "backbone.stem", 1, stem, 3, 2);
        let mut cin = stem;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let name = format!("backbone.layer{}.0", i + 1);
                let block = Block::Basic {
                    a: ConvBn::new(ps, rng, &format!("{name}.a"), cin, w, 3, 2),
                    b: ConvBn::new(ps, rng, &format!("{name}.b"), w, w, 3, 1),
                    down: Some(ConvBn::new(ps, rng, &format!("{name}.down"), cin, w, 1, 2)),
                };
                cin = w;
                vec![block]
            })
            .collect();
        Self { stem: stem_layer, stem_pool: false, stages, tap_strides: [4, 8, 16, 32], tap_channels: widths }
    }

    /// 7x7 stem with max-pool and bottleneck stages (expansion 4).
    fn bottleneck<T: Float>(ps: &mut ParamSet<T>, rng: &mut impl Rng, depths: [usize; 4]) -> Self {
        let stem = ConvBn::new(ps, rng, "backbone.stem", 1, 64, 7, 2);
        let mut cin = 64;
        let mut tap_channels = [0; 4];
        let stages = depths
            .iter()
            .enumerate()
            .map(|(i, &depth)| {
                let width = 64 << i;
                let cout = width * 4;
                tap_channels[i] = cout;
                (0..depth)
                    .map(|j| {
                        let name = format!("backbone.layer{}.{j}", i + 1);
                        let stride = if j == 0 && i > 0 { 2 } else { 1 };
                        let block = Block::Bottleneck {
                            a: ConvBn::new(ps, rng, &format!("{name}.a"), cin, width, 1, 1),
                            b: ConvBn::new(ps, rng, &format!("{name}.b"), width, width, 3, stride),
                            c: ConvBn::new(ps, rng, &format!("{name}.c"), width, cout, 1, 1),
                            down: (j == 0).then(|| ConvBn::new(ps, rng, &format!("{name}.down"), cin, cout, 1, stride)),
                        };
                        cin = cout;
                        block
                    })
                    .collect()
            })
            .collect();
        Self { stem, stem_pool: true, stages, tap_strides: [4, 8, 16, 32], tap_channels }
    }

    /// Outputs of all four stages from one pass.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<[Var; 4]> {
        let c = ctx.g.value(x).dims4()?.1;
        if c != 1 {
            return Err(Error::Geometry(format!("backbone expects 1 input channel, got {c}")));
        }
        let mut y = self.stem.forward(ctx, x, true)?;
        if self.stem_pool {
            y = ctx.g.max_pool2d(y, 3, 2, 1)?;
        }
        let mut taps = [y; 4];
        for (tap, stage) in taps.iter_mut().zip(&self.stages) {
            for block in stage {
                y = block.forward(ctx, y)?;
            }
            *tap = y;
        }
        Ok(taps)
    }
}

/// Two-layer perceptron `in -> hidden -> out` with a ReLU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        Self {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), input, hidden, bias),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, output, bias),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.in_features
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.relu(h);
        Ok(self.fc2.forward(ctx, h)?)
    }

    /// Head output normalized to unit length per row.
    pub fn project<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let d = ctx.g.value(x).dims2()?.1;
        if d != self.input_dim() {
            return Err(Error::Geometry(format!("head expects {} features, got {d}", self.input_dim())));
        }
        let y = self.forward(ctx, x)?;
        Ok(ctx.g.l2_normalize_rows(y, NORM_EPS)?)
    }
}

/// Backbone plus the deep, shallow and local projection heads.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    pub proj_deep: Mlp,
    pub proj_shallow: Mlp,
    pub proj_local: Mlp,
}

/// Stage outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTaps {
    pub stages: [Var; 4],
    cc_tap: usize,
}

impl FeatureTaps {
    pub fn deep(&self) -> Var {
        self.stages[3]
    }

    pub fn shallow(&self) -> Var {
        self.stages[self.cc_tap - 1]
    }
}

impl Encoder {
    /// Registers the backbone and heads into a fresh parameter set.
    pub fn build<T: Float>(config: &EncoderConfig, rng: &mut impl Rng) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let backbone = Backbone::new(config.preset, &mut ps, rng);
        let (hid, out) = (config.head_hidden, config.head_out);
        let deep = backbone.tap_channels[3];
        let shallow = backbone.tap_channels[config.cc_tap - 1];
        let proj_deep = Mlp::new(&mut ps, rng, "head.deep", deep, hid, out, true);
        let proj_shallow = Mlp::new(&mut ps, rng, "head.shallow", shallow, hid, out, true);
        let proj_local = Mlp::new(&mut ps, rng, "head.local", deep, hid, out, true);
        Ok((Self { config: config.clone(), backbone, proj_deep, proj_shallow, proj_local }, ps))
    }

    /// The online-only prediction head, in its own parameter set.
    pub fn build_predictor<T: Float>(config: &EncoderConfig, rng: &mut impl Rng) -> (Mlp, ParamSet<T>) {
        let mut ps = ParamSet::new();
        let mlp = Mlp::new(&mut ps, rng, "pred.local", config.head_out, config.head_hidden, config.head_out, true);
        (mlp, ps)
    }

    pub fn forward_taps<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<FeatureTaps> {
        Ok(FeatureTaps { stages: self.backbone.forward(ctx, x)?, cc_tap: self.config.cc_tap })
    }

    /// Stage output sizes for a `size x size` input.
    pub fn tap_sizes(&self, size: usize) -> [usize; 4] {
        self.backbone.tap_strides.map(|s| size.div_ceil(s))
    }

    /// Stage outputs as plain tensors, without gradient tracking.
    pub fn eval_taps<T: Float>(&self, ps: &mut ParamSet<T>, x: &Tensor<T>, train: bool) -> Result<[Tensor<T>; 4]> {
        let mut g = Graph::no_grad();
        let vars = ps.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &vars, ps.buffers_mut(), train);
        let taps = self.forward_taps(&mut ctx, xv)?;
        Ok(taps.stages.map(|v| g.value(v).clone()))
    }
}

/// Per-channel spatial mean of a `c x h x w` map.
pub fn global_pool<T: Float>(fmap: &Tensor<T>) -> Result<Vec<T>> {
    let (c, h, w) = match fmap.shape() {
        &[c, h, w] if h > 0 && w > 0 => (c, h, w),
        s => return Err(Error::Geometry(format!("expected a non-empty c x h x w map, got {s:?}"))),
    };
    let n = T::from_f64_lossy((h * w) as f64);
    Ok(fmap.data().chunks(h * w).take(c).map(|p| p.iter().copied().sum::<T>() / n).collect())
}

/// `target <- m * target + (1 - m) * online` over trainable parameters.
pub fn ema_update<T: Float>(online: &ParamSet<T>, target: &mut ParamSet<T>, momentum: f64) -> Result<()> {
    if !online.same_layout(target) {
        return Err(Error::Structure("online and target networks differ in layout".into()));
    }
    let m = T::from_f64_lossy(momentum);
    let keep = T::from_f64_lossy(1.0 - momentum);
    for (t, o) in target.params_mut().iter_mut().zip(online.params()) {
        for (tv, &ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *tv = m * *tv + keep * ov;
        }
    }
    Ok(())
}

/// Online and target encoders with the online-only predictor.
#[derive(Clone, Debug)]
pub struct NetworkPair<T> {
    pub encoder: Encoder,
    pub predictor: Mlp,
    pub online: ParamSet<T>,
    pub target: ParamSet<T>,
    pub pred: ParamSet<T>,
    pub momentum: f64,
}

impl<T: Float> NetworkPair<T> {
    /// Target starts as an exact copy of the online network.
    pub fn new(config: &EncoderConfig, momentum: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("encoder.ema_momentum must lie in [0, 1], got {momentum}")));
        }
        let (encoder, online) = Encoder::build(config, rng)?;
        let (predictor, pred) = Encoder::build_predictor(config, rng);
        let target = online.clone();
        Ok(Self { encoder, predictor, online, target, pred, momentum })
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&self.online, &mut self.target, self.momentum)
    }

    /// Trainable scalars on the online side, predictor included.
    pub fn num_online_scalars(&self) -> usize {
        self.online.num_scalars() + self.pred.num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn tap_sizes_follow_strides() {
        let (enc, mut ps) = Encoder::build::<f32>(&EncoderConfig::new(Preset::Tiny), &mut rng(0)).unwrap();
        assert_eq!(enc.tap_sizes(224)[3], 7);
        assert_eq!(enc.tap_sizes(64)[2], 4);
        for size in [64, 128, 224] {
            let x = Tensor::zeros(&[2, 1, size, size]);
            let taps = enc.eval_taps(&mut ps, &x, true).unwrap();
            for (i, t) in taps.iter().enumerate() {
                let s = size.div_ceil(enc.backbone.tap_strides[i]);
                assert_eq!(t.shape(), &[2, enc.backbone.tap_channels[i], s, s]);
            }
        }
    }

    #[test]
    fn odd_sizes_round_up() {
        let (enc, mut ps) = Encoder::build::<f32>(&EncoderConfig::new(Preset::Tiny), &mut rng(0)).unwrap();
        let taps = enc.eval_taps(&mut ps, &Tensor::zeros(&[1, 1, 50, 50]), false).unwrap();
        assert_eq!(taps.map(|t| t.shape()[2]), [13, 7, 4, 2]);
    }

    #[test]
    fn zero_input_gives_finite_taps() {
        for preset in [Preset::Micro, Preset::Tiny] {
            let (enc, mut ps) = Encoder::build::<f32>(&EncoderConfig::new(preset), &mut rng(1)).unwrap();
            for train in [true, false] {
                let taps = enc.eval_taps(&mut ps, &Tensor::zeros(&[2, 1, 64, 64]), train).unwrap();
                assert!(taps.iter().all(Tensor::is_finite));
            }
        }
    }

    #[test]
    fn multichannel_input_is_rejected() {
        let (enc, mut ps) = Encoder::build::<f32>(&EncoderConfig::new(Preset::Micro), &mut rng(1)).unwrap();
        assert!(enc.eval_taps(&mut ps, &Tensor::zeros(&[1, 3, 32, 32]), false).is_err());
    }

    #[test]
    fn preset_sizes() {
        let count = |p| Encoder::build::<f32>(&EncoderConfig::new(p), &mut rng(0)).unwrap().1.num_scalars();
        let tiny = count(Preset::Tiny);
        assert!(tiny <= 1_000_000, "{tiny}");
        let pair = NetworkPair::<f64>::new(&EncoderConfig::new(Preset::Micro), 0.99, &mut rng(0)).unwrap();
        assert!(pair.num_online_scalars() <= 1000, "{}", pair.num_online_scalars());
    }

    #[test]
    fn resnet50_layout() {
        let (enc, ps) = Encoder::build::<f32>(&EncoderConfig::new(Preset::ResNet50), &mut rng(0)).unwrap();
        assert_eq!(enc.backbone.tap_channels, [256, 512, 1024, 2048]);
        // single-channel stem, torchvision resnet50 trunk is ~23.5M
        let trunk: usize =
            ps.params().iter().filter(|p| p.name.starts_with("backbone.")).map(|p| p.value.numel()).sum();
        assert!((23_400_000..23_600_000).contains(&trunk), "{trunk}");
    }

    #[test]
    fn global_pool_examples() {
        let c = Tensor::full(&[3, 2, 5], 1.5f64);
        assert_eq!(global_pool(&c).unwrap(), vec![1.5; 3]);
        let m = Tensor::new(&[1, 2, 2], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_pool(&m).unwrap(), vec![4.0]);
        let mut r = rng(4);
        let t = Tensor::<f32>::from_fn(&[4, 3, 7], |_| r.random_range(-1.0..1.0f32));
        let pooled = global_pool(&t).unwrap();
        for ch in 0..4 {
            let mut s = 0.0f64;
            for i in 0..21 {
                s += t.data()[ch * 21 + i] as f64;
            }
            assert!((pooled[ch] as f64 - s / 21.0).abs() < 1e-6);
        }
        assert!(global_pool(&Tensor::<f32>::zeros(&[2, 0, 3])).is_err());
    }

    fn project_rows(head: &Mlp, ps: &mut ParamSet<f64>, x: Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::no_grad();
        let vars = ps.bind(&mut g);
        let xv = g.constant(x);
        let mut ctx = Ctx::new(&mut g, &vars, ps.buffers_mut(), false);
        let y = head.project(&mut ctx, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn projections_are_unit_norm_and_reproducible() {
        let mut ps = ParamSet::new();
        let head = Mlp::new(&mut ps, &mut rng(5), "h", 6, 8, 4, true);
        let mut r = rng(6);
        let x = Tensor::from_fn(&[5, 6], |_| r.random_range(-3.0..3.0));
        let y = project_rows(&head, &mut ps, x.clone());
        for i in 0..5 {
            let n: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(y, project_rows(&head, &mut ps, x));
        // zero head output stays finite
        let mut zps = ParamSet::new();
        let zhead = Mlp::new(&mut zps, &mut rng(5), "z", 2, 2, 2, false);
        let z = project_rows(&zhead, &mut zps, Tensor::zeros(&[1, 2]));
        assert!(z.is_finite());
    }

    #[test]
    fn bias_free_head_is_scale_invariant() {
        let mut ps = ParamSet::new();
        let head = Mlp::new(&mut ps, &mut rng(7), "h", 5, 7, 3, false);
        let mut r = rng(8);
        let v: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = project_rows(&head, &mut ps, Tensor::new(&[1, 5], v.clone()).unwrap());
        let b = project_rows(&head, &mut ps, Tensor::new(&[1, 5], v.iter().map(|x| 2.0 * x).collect()).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn constant_set(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add_param("w", Tensor::full(&[3, 2], value));
        ps.add_buffer("rm", Tensor::full(&[2], value));
        ps
    }

    #[test]
    fn ema_examples() {
        let online = constant_set(1.0);
        let mut target = constant_set(0.0);
        ema_update(&online, &mut target, 0.9).unwrap();
        assert!(target.params()[0].value.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
        // buffers are not averaged
        assert_eq!(target.buffers()[0].value.data(), &[0.0, 0.0]);
        let before = target.clone();
        ema_update(&online, &mut target, 1.0).unwrap();
        assert_eq!(target, before);
        ema_update(&online, &mut target, 0.0).unwrap();
        assert_eq!(target.params()[0].value, online.params()[0].value);
        assert_eq!(online, constant_set(1.0));
    }

    #[test]
    fn ema_rejects_mismatched_layout() {
        let mut other = ParamSet::new();
        other.add_param("w", Tensor::<f64>::zeros(&[2, 3]));
        other.add_buffer("rm", Tensor::zeros(&[2]));
        assert!(ema_update(&constant_set(1.0), &mut other, 0.5).is_err());
    }

    #[test]
    fn target_starts_as_copy() {
        let pair = NetworkPair::<f32>::new(&EncoderConfig::new(Preset::Tiny), 0.99, &mut rng(2)).unwrap();
        assert_eq!(pair.online, pair.target);
        assert!(pair.online.same_layout(&pair.target));
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = EncoderConfig { cc_tap: 4, ..EncoderConfig::default() };
        assert!(matches!(Encoder::build::<f32>(&cfg, &mut rng(0)), Err(Error::Config(_))));
        assert!("vgg".parse::<Preset>().is_err());
        assert_eq!("resnet101".parse::<Preset>().unwrap().to_string(), "resnet101");
    }
}
