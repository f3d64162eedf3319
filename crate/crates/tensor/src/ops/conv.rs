//! 2-D convolution through im2col and a single GEMM over the whole batch.

use crate::error::{shape_err, Result};
use crate::float::{gemm, Float, Mat};
use crate::graph::{BackwardCtx, BackwardOp, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: (usize, usize, usize, usize),
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = input;
        let (kh, kw) = kernel;
        if stride == 0 {
            return shape_err("conv2d", "stride must be >= 1");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            );
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, c, h, w, kh, kw, stride, pad, oh, ow })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds `x` (`n x c x h x w`) into `(c*kh*kw) x (n*oh*ow)`.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.rows() * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            // contiguous span of valid ox
                            let lo = g.pad.saturating_sub(kj);
                            let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow);
                            if lo < hi {
                                let s0 = lo + kj - g.pad;
                                dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates columns back into an input-shaped buffer.
pub fn col2im<T: Float>(cols_buf: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols_buf[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst =
                        &mut out[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[o, n*p]` -> `[n, o, p]`
fn channel_major_to_batch_major<T: Float>(src: &[T], o: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for oc in 0..o {
        for b in 0..n {
            out[(b * o + oc) * p..(b * o + oc + 1) * p]
                .copy_from_slice(&src[oc * n * p + b * p..oc * n * p + (b + 1) * p]);
        }
    }
    out
}

/// `[n, o, p]` -> `[o, n*p]`
fn batch_major_to_channel_major<T: Float>(src: &[T], o: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for oc in 0..o {
            out[oc * n * p + b * p..oc * n * p + (b + 1) * p]
                .copy_from_slice(&src[(b * o + oc) * p..(b * o + oc + 1) * p]);
        }
    }
    out
}

struct Conv2dOp<T> {
    geom: ConvGeom,
    out_channels: usize,
    cols: Vec<T>,
}

impl<T: Float> BackwardOp<T> for Conv2dOp<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        let o = self.out_channels;
        let p = g.oh * g.ow;
        let dy = batch_major_to_channel_major(ctx.grad.data(), o, g.n, p);
        let weight = ctx.inputs[1];
        let dw = if ctx.needs_grad[1] {
            let mut dw = vec![T::zero(); o * g.rows()];
            gemm(
                T::one(),
                Mat::new(&dy, o, g.cols()),
                Mat::t(&self.cols, g.rows(), g.cols()),
                T::zero(),
                &mut dw,
            );
            Some(Tensor::new(weight.shape(), dw).expect("weight grad shape"))
        } else {
            None
        };
        let dx = if ctx.needs_grad[0] {
            let mut dcols = vec![T::zero(); g.rows() * g.cols()];
            gemm(
                T::one(),
                Mat::t(weight.data(), o, g.rows()),
                Mat::new(&dy, o, g.cols()),
                T::zero(),
                &mut dcols,
            );
            Some(Tensor::new(ctx.inputs[0].shape(), col2im(&dcols, g)).expect("input grad shape"))
        } else {
            None
        };
        vec![dx, dw]
    }
}

struct ChannelBiasOp;

impl<T: Float> BackwardOp<T> for ChannelBiasOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = ctx.grad.dims4().expect("rank 4");
        let mut db = vec![T::zero(); c];
        for b in 0..n {
            for (ch, acc) in db.iter_mut().enumerate() {
                let off = (b * c + ch) * h * w;
                *acc += ctx.grad.data()[off..off + h * w].iter().copied().sum::<T>();
            }
        }
        vec![Some(ctx.grad.clone()), Some(Tensor::new(&[c], db).expect("bias shape"))]
    }
}

impl<T: Float> Graph<T> {
    /// Cross-correlation of `x` (`n x c x h x w`) with `weight`
    /// (`o x c x kh x kw`), symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(weight);
        let input = xv.dims4()?;
        let (o, wc, kh, kw) = wv.dims4()?;
        if wc != input.1 {
            return shape_err(
                "conv2d",
                format!("weight expects {wc} input channels, input has {}", input.1),
            );
        }
        let geom = ConvGeom::new(input, (kh, kw), stride, pad)?;
        let cols = im2col(xv.data(), &geom);
        let mut y = vec![T::zero(); o * geom.cols()];
        gemm(
            T::one(),
            Mat::new(wv.data(), o, geom.rows()),
            Mat::new(&cols, geom.rows(), geom.cols()),
            T::zero(),
            &mut y,
        );
        let out = channel_major_to_batch_major(&y, o, geom.n, geom.oh * geom.ow);
        let out = Tensor::new(&[geom.n, o, geom.oh, geom.ow], out)?;
        // cols are only needed for the weight gradient
        let keep = if self.requires_grad(weight) { cols } else { Vec::new() };
        Ok(self.record(out, &[x, weight], Conv2dOp { geom, out_channels: o, cols: keep }))
    }

    /// Adds a per-channel bias to an `n x c x h x w` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return shape_err("add_channel_bias", format!("bias {:?} for {c} channels", b.shape()));
        }
        let mut out = self.value(x).clone();
        let bias_vals = b.data().to_vec();
        for bi in 0..n {
            for (ch, &bv) in bias_vals.iter().enumerate() {
                let off = (bi * c + ch) * h * w;
                for v in &mut out.data_mut()[off..off + h * w] {
                    *v += bv;
                }
            }
        }
        Ok(self.record(out, &[x, bias], ChannelBiasOp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        w: &[f64],
        (n, c, h, wd): (usize, usize, usize, usize),
        (o, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut y = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * c + ic) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        y[((b * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (y, oh, ow)
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (2, 3, 7)] {
            let dims = (2, 3, 9, 8);
            let x: Vec<f64> = (0..2 * 3 * 9 * 8).map(|v| ((v * 7) % 13) as f64 - 6.0).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|v| ((v * 5) % 11) as f64 * 0.1).collect();
            let (expect, oh, ow) = naive_conv(&x, &w, dims, (4, k, k), stride, pad);
            let mut g = Graph::<f64>::new();
            let xv = g.constant(Tensor::new(&[2, 3, 9, 8], x).unwrap());
            let wv = g.param(Tensor::new(&[4, 3, k, k], w).unwrap());
            let y = g.conv2d(xv, wv, stride, pad).unwrap();
            assert_eq!(g.value(y).shape(), &[2, 4, oh, ow]);
            for (a, b) in g.value(y).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-9, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let geom = ConvGeom::new((2, 2, 5, 6), (3, 3), 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 5 * 6).map(|v| (v as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &geom);
        let c: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, &geom);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
