//! Row-wise operations on `[n, d]` embeddings and weighted spatial gathers.

use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::graph::{BackwardCtx, BackwardOp, Graph, Var};
use crate::tensor::Tensor;

struct L2NormalizeOp<T> {
    norms: Vec<T>,
    eps: T,
}

impl<T: Float> BackwardOp<T> for L2NormalizeOp<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let (_, d) = x.dims2().expect("rank 2");
        let mut dx = ctx.grad.clone();
        for ((drow, xrow), &norm) in
            dx.data_mut().chunks_exact_mut(d).zip(x.data().chunks_exact(d)).zip(&self.norms)
        {
            let denom = norm + self.eps;
            let dot: T = drow.iter().zip(xrow).map(|(&g, &v)| g * v).sum();
            let k = if norm > T::zero() { dot / (norm * denom * denom) } else { T::zero() };
            for (g, &v) in drow.iter_mut().zip(xrow) {
                *g = *g / denom - v * k;
            }
        }
        vec![Some(dx)]
    }
}

/// Sampling taps of one gathered row: a batch image and
/// `(flat spatial index, weight)` pairs into its `h x w` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GatherTaps {
    pub batch: usize,
    pub taps: Vec<(usize, f64)>,
}

struct WeightedGatherOp {
    shape: Vec<usize>,
    rows: Vec<GatherTaps>,
}

impl<T: Float> BackwardOp<T> for WeightedGatherOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (c, p) = (self.shape[1], self.shape[2] * self.shape[3]);
        let mut dx = Tensor::zeros(&self.shape);
        let d = dx.data_mut();
        for (r, row) in self.rows.iter().enumerate() {
            let g = ctx.grad.row(r);
            for ch in 0..c {
                let base = (row.batch * c + ch) * p;
                for &(idx, wgt) in &row.taps {
                    d[base + idx] += g[ch] * T::from_f64_lossy(wgt);
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Float> Graph<T> {
    /// `x / (||x||_2 + eps)` per row.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (_, d) = xv.dims2()?;
        let eps_t = T::from_f64_lossy(eps);
        let mut out = xv.clone();
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_exact_mut(d.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            for v in row.iter_mut() {
                *v /= norm + eps_t;
            }
            norms.push(norm);
        }
        Ok(self.record(out, &[x], L2NormalizeOp { norms, eps: eps_t }))
    }

    /// For each row spec, the weighted sum of the `n x c x h x w` map at the
    /// given taps, per channel. Output `[rows, c]`.
    pub fn weighted_gather(&mut self, fmap: Var, rows: Vec<GatherTaps>) -> Result<Var> {
        let fv = self.value(fmap);
        let (n, c, h, w) = fv.dims4()?;
        let p = h * w;
        let mut out = vec![T::zero(); rows.len() * c];
        for (r, row) in rows.iter().enumerate() {
            if row.batch >= n {
                return shape_err("weighted_gather", format!("batch {} of {n}", row.batch));
            }
            if let Some(&(idx, _)) = row.taps.iter().find(|t| t.0 >= p) {
                return shape_err("weighted_gather", format!("tap {idx} outside {h}x{w}"));
            }
            for ch in 0..c {
                let plane = &fv.data()[(row.batch * c + ch) * p..(row.batch * c + ch + 1) * p];
                out[r * c + ch] =
                    row.taps.iter().map(|&(i, wgt)| plane[i] * T::from_f64_lossy(wgt)).sum();
            }
        }
        let out = Tensor::new(&[rows.len(), c], out)?;
        let shape = fv.shape().to_vec();
        Ok(self.record(out, &[fmap], WeightedGatherOp { shape, rows }))
    }
}
