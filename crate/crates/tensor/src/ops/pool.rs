use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::graph::{BackwardCtx, BackwardOp, Graph, Var};
use crate::tensor::Tensor;

struct GlobalAvgPoolOp {
    shape: Vec<usize>,
}

impl<T: Float> BackwardOp<T> for GlobalAvgPoolOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let p = self.shape[2] * self.shape[3];
        let inv = T::from_f64_lossy(1.0 / p as f64);
        let mut dx = Tensor::zeros(&self.shape);
        for (i, &g) in ctx.grad.data().iter().enumerate() {
            for v in &mut dx.data_mut()[i * p..(i + 1) * p] {
                *v = g * inv;
            }
        }
        vec![Some(dx)]
    }
}

struct MaxPoolOp {
    shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl<T: Float> BackwardOp<T> for MaxPoolOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(&self.shape);
        for (&src, &g) in self.argmax.iter().zip(ctx.grad.data()) {
            dx.data_mut()[src] += g;
        }
        vec![Some(dx)]
    }
}

/// Per-axis interpolation taps: `(lo, hi, frac)` for each output index.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

struct UpsampleOp {
    in_shape: Vec<usize>,
    ty: Vec<(usize, usize, f64)>,
    tx: Vec<(usize, usize, f64)>,
}

impl<T: Float> BackwardOp<T> for UpsampleOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (h, w) = (self.in_shape[2], self.in_shape[3]);
        let (oh, ow) = (self.ty.len(), self.tx.len());
        let planes = self.in_shape[0] * self.in_shape[1];
        let mut dx = Tensor::zeros(&self.in_shape);
        let g = ctx.grad.data();
        let d = dx.data_mut();
        for pl in 0..planes {
            let src = &g[pl * oh * ow..(pl + 1) * oh * ow];
            let dst = &mut d[pl * h * w..(pl + 1) * h * w];
            for (oy, &(y0, y1, fy)) in self.ty.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (ox, &(x0, x1, fx)) in self.tx.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let v = src[oy * ow + ox];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    dst[y0 * w + x0] += top * (T::one() - fx);
                    dst[y0 * w + x1] += top * fx;
                    dst[y1 * w + x0] += bot * (T::one() - fx);
                    dst[y1 * w + x1] += bot * fx;
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Float> Graph<T> {
    /// Spatial mean: `n x c x h x w` -> `n x c`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if h == 0 || w == 0 {
            return shape_err("global_avg_pool", "empty spatial extent");
        }
        let p = h * w;
        let inv = T::from_f64_lossy(1.0 / p as f64);
        let out: Vec<T> = xv
            .data()
            .chunks_exact(p)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        let shape = xv.shape().to_vec();
        Ok(self.record(out, &[x], GlobalAvgPoolOp { shape }))
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return shape_err("max_pool2d", format!("kernel {kernel} on {h}x{w}"));
        }
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        let data = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for pl in 0..n * c {
            let base = pl * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = base;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        let shape = xv.shape().to_vec();
        Ok(self.record(out, &[x], MaxPoolOp { shape, argmax }))
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return shape_err("upsample_bilinear", "empty extent");
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let out = resample_planes(xv.data(), n * c, (h, w), &ty, &tx);
        let out = Tensor::new(&[n, c, out_h, out_w], out)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.record(out, &[x], UpsampleOp { in_shape, ty, tx }))
    }
}

fn resample_planes<T: Float>(
    data: &[T],
    planes: usize,
    (h, w): (usize, usize),
    ty: &[(usize, usize, f64)],
    tx: &[(usize, usize, f64)],
) -> Vec<T> {
    let (oh, ow) = (ty.len(), tx.len());
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &data[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_identity_when_same_size() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_fn(&[1, 2, 3, 4], |i| i as f64);
        let x = g.constant(t.clone());
        let y = g.upsample_bilinear(x, 3, 4).unwrap();
        assert_eq!(g.value(y), &t);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 3], 2.5));
        let y = g.upsample_bilinear(x, 8, 12).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let y = g.max_pool2d(x, 2, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
    }
}
