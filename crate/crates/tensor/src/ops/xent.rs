use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::graph::{BackwardCtx, BackwardOp, Graph, Var};
use crate::tensor::Tensor;

/// Channel softmax of `n x c x h x w` logits.
pub fn softmax_channels<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4()?;
    let p = h * w;
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        let base = b * c * p;
        for i in 0..p {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(src[base + ch * p + i]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (src[base + ch * p + i] - mx).exp();
                out[base + ch * p + i] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * p + i] /= z;
            }
        }
    }
    Tensor::new(logits.shape(), out)
}

struct CrossEntropyOp<T> {
    probs: Tensor<T>,
    labels: Vec<u8>,
    ignore: u8,
    count: usize,
}

impl<T: Float> BackwardOp<T> for CrossEntropyOp<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = self.probs.dims4().expect("rank 4");
        let p = h * w;
        let mut dx = Tensor::zeros(self.probs.shape());
        if self.count == 0 {
            return vec![Some(dx)];
        }
        let k = ctx.grad.item() / T::from_f64_lossy(self.count as f64);
        let probs = self.probs.data();
        let d = dx.data_mut();
        for b in 0..n {
            for i in 0..p {
                let label = self.labels[b * p + i];
                if label == self.ignore {
                    continue;
                }
                for ch in 0..c {
                    let idx = (b * c + ch) * p + i;
                    let target = if ch == label as usize { T::one() } else { T::zero() };
                    d[idx] = (probs[idx] - target) * k;
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Float> Graph<T> {
    /// Mean pixel-wise softmax cross-entropy. Pixels labelled `ignore` are
    /// excluded; with no valid pixel the loss is zero.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c, h, w) = lv.dims4()?;
        let p = h * w;
        if labels.len() != n * p {
            return shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {n}x{h}x{w} logits", labels.len()),
            );
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= c) {
            return shape_err("softmax_cross_entropy", format!("label {bad} with {c} classes"));
        }
        let probs = softmax_channels(lv)?;
        let mut total = T::zero();
        let mut count = 0usize;
        for b in 0..n {
            for i in 0..p {
                let label = labels[b * p + i];
                if label == ignore {
                    continue;
                }
                let pr = probs.data()[(b * c + label as usize) * p + i];
                total -= pr.max(T::min_positive_value()).ln();
                count += 1;
            }
        }
        let loss = if count > 0 { total / T::from_f64_lossy(count as f64) } else { T::zero() };
        let op = CrossEntropyOp { probs, labels: labels.to_vec(), ignore, count };
        Ok(self.record(Tensor::scalar(loss), &[logits], op))
    }
}
