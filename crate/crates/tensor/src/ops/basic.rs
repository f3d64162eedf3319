use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::graph::{BackwardCtx, BackwardOp, Graph, Var};
use crate::tensor::Tensor;

struct AddOp;

impl<T: Float> BackwardOp<T> for AddOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    }
}

struct ReluOp;

impl<T: Float> BackwardOp<T> for ReluOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let mut g = ctx.grad.clone();
        for (gv, &y) in g.data_mut().iter_mut().zip(ctx.output.data()) {
            if y <= T::zero() {
                *gv = T::zero();
            }
        }
        vec![Some(g)]
    }
}

struct WeightedSumOp<T> {
    weights: Vec<T>,
}

impl<T: Float> BackwardOp<T> for WeightedSumOp<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        self.weights
            .iter()
            .map(|&w| {
                let mut g = ctx.grad.clone();
                g.scale(w);
                Some(g)
            })
            .collect()
    }
}

struct ReshapeOp {
    shape: Vec<usize>,
}

impl<T: Float> BackwardOp<T> for ReshapeOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.clone().reshape(&self.shape).expect("same numel"))]
    }
}

struct MeanOp {
    shape: Vec<usize>,
}

impl<T: Float> BackwardOp<T> for MeanOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let n: usize = self.shape.iter().product();
        let v = ctx.grad.item() / T::from_f64_lossy(n as f64);
        vec![Some(Tensor::full(&self.shape, v))]
    }
}

impl<T: Float> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.record(out, &[a, b], AddOp))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(out, &[x], ReluOp)
    }

    /// `sum_i w_i * x_i` over equally shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return shape_err("weighted_sum", "no terms");
        };
        let shape = self.value(first).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return shape_err("weighted_sum", format!("{:?} vs {shape:?}", t.shape()));
            }
            for (o, &x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights = terms.iter().map(|t| t.1).collect();
        Ok(self.record(out, &vars, WeightedSumOp { weights }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let in_shape = v.shape().to_vec();
        let out = v.clone().reshape(shape)?;
        Ok(self.record(out, &[x], ReshapeOp { shape: in_shape }))
    }

    /// Mean over all elements, as a single-element tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_f64_lossy(t.numel() as f64);
        let shape = t.shape().to_vec();
        let out = Tensor::scalar(t.sum() / n);
        self.record(out, &[x], MeanOp { shape })
    }
}
