use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::graph::{BackwardCtx, BackwardOp, Graph, Var};
use crate::tensor::Tensor;

/// Treats rank-2 `[n, c]` as `[n, c, 1, 1]`.
fn nchw<T: Float>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[n, c] => Ok((n, c, 1)),
        &[n, c, h, w] => Ok((n, c, h * w)),
        s => shape_err("batch_norm", format!("expected rank 2 or 4, got {s:?}")),
    }
}

/// Per-channel statistics of a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

struct BatchNormTrainOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Float> BackwardOp<T> for BatchNormTrainOp<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (n, c, p) = nchw(ctx.grad).expect("checked in forward");
        let gamma = ctx.inputs[1].data();
        let dy = ctx.grad.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                for i in off..off + p {
                    dgamma[ch] += dy[i] * self.xhat[i];
                    dbeta[ch] += dy[i];
                }
            }
        }
        let dx = if ctx.needs_grad[0] {
            let m = T::from_f64_lossy((n * p) as f64);
            let mut dx = vec![T::zero(); dy.len()];
            for b in 0..n {
                for ch in 0..c {
                    let k = gamma[ch] * self.inv_std[ch] / m;
                    let off = (b * c + ch) * p;
                    for i in off..off + p {
                        dx[i] = k * (m * dy[i] - dbeta[ch] - self.xhat[i] * dgamma[ch]);
                    }
                }
            }
            Some(Tensor::new(ctx.grad.shape(), dx).expect("shape"))
        } else {
            None
        };
        vec![
            dx,
            Some(Tensor::new(&[c], dgamma).expect("shape")),
            Some(Tensor::new(&[c], dbeta).expect("shape")),
        ]
    }
}

struct BatchNormEvalOp<T> {
    scale: Vec<T>,
    xhat: Vec<T>,
}

impl<T: Float> BackwardOp<T> for BatchNormEvalOp<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (n, c, p) = nchw(ctx.grad).expect("checked in forward");
        let dy = ctx.grad.data();
        let gamma = ctx.inputs[1].data();
        let mut dx = vec![T::zero(); dy.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                for i in off..off + p {
                    dx[i] = dy[i] * self.scale[ch] * gamma[ch];
                    dgamma[ch] += dy[i] * self.xhat[i];
                    dbeta[ch] += dy[i];
                }
            }
        }
        vec![
            Some(Tensor::new(ctx.grad.shape(), dx).expect("shape")),
            Some(Tensor::new(&[c], dgamma).expect("shape")),
            Some(Tensor::new(&[c], dbeta).expect("shape")),
        ]
    }
}

impl<T: Float> Graph<T> {
    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let (n, c, p) = nchw(xv)?;
        check_affine(self.value(gamma), self.value(beta), c)?;
        let count = n * p;
        let inv_count = T::from_f64_lossy(1.0 / count as f64);
        let data = xv.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                mean[ch] += data[off..off + p].iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m *= inv_count;
        }
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                let mu = mean[ch];
                var[ch] += data[off..off + p].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
        }
        for v in &mut var {
            *v *= inv_count;
        }
        let eps_t = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                for i in off..off + p {
                    xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let stats = BatchStats { mean, var, count };
        let y = self.record(out, &[x, gamma, beta], BatchNormTrainOp { xhat, inv_std });
        Ok((y, stats))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, p) = nchw(xv)?;
        check_affine(self.value(gamma), self.value(beta), c)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm", "running statistics length");
        }
        let eps_t = T::from_f64_lossy(eps);
        let scale: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let data = xv.data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                for i in off..off + p {
                    xhat[i] = (data[i] - running_mean[ch]) * scale[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.record(out, &[x, gamma, beta], BatchNormEvalOp { scale, xhat }))
    }
}

fn check_affine<T: Float>(gamma: &Tensor<T>, beta: &Tensor<T>, c: usize) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(
            "batch_norm",
            format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        );
    }
    Ok(())
}
