use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::{BufferId, Ctx, ParamId, ParamSet};
use crate::error::Result;
use crate::float::Float;
use crate::graph::Var;
use crate::tensor::Tensor;

fn normal_tensor<T: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

fn uniform_tensor<T: Float>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square kernel, He-normal (fan-out) initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_out = (out_channels * kernel * kernel) as f64;
        let w = normal_tensor(
            &[out_channels, in_channels, kernel, kernel],
            (2.0 / fan_out).sqrt(),
            rng,
        );
        let weight = ps.add_param(format!("{name}.weight"), w);
        let bias = bias.then(|| ps.add_param(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self { weight, bias, in_channels, out_channels, kernel, stride, pad }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let y = ctx.g.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = ctx.var(b);
                ctx.g.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Float>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add_param(format!("{name}.weight"), Tensor::ones(&[channels])),
            beta: ps.add_param(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: ps.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Batch statistics (and running-stat update) in train mode, running
    /// statistics otherwise.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        if ctx.train {
            let (y, stats) = ctx.g.batch_norm_train(x, gamma, beta, self.eps)?;
            let mom = T::from_f64_lossy(self.momentum);
            let keep = T::one() - mom;
            let unbias = if stats.count > 1 {
                T::from_f64_lossy(stats.count as f64 / (stats.count - 1) as f64)
            } else {
                T::one()
            };
            for (r, &m) in ctx.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + mom * m;
            }
            for (r, &v) in ctx.buffer_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + mom * v * unbias;
            }
            Ok(y)
        } else {
            let mean = ctx.buffer(self.running_mean).data().to_vec();
            let var = ctx.buffer(self.running_var).data().to_vec();
            ctx.g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialization for weight and bias.
    pub fn new<T: Float>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight =
            ps.add_param(format!("{name}.weight"), uniform_tensor(&[out_features, in_features], bound, rng));
        let bias = bias
            .then(|| ps.add_param(format!("{name}.bias"), uniform_tensor(&[out_features], bound, rng)));
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        ctx.g.linear(x, w, b)
    }
}
