use crate::error::{shape_err, Result};
use crate::float::{gemm, Float, Mat};
use crate::graph::{BackwardCtx, BackwardOp, Graph, Var};
use crate::tensor::Tensor;

struct LinearOp {
    has_bias: bool,
}

impl<T: Float> BackwardOp<T> for LinearOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let w = ctx.inputs[1];
        let (n, i) = x.dims2().expect("rank 2");
        let o = w.shape()[0];
        let dy = ctx.grad.data();
        let dx = ctx.needs_grad[0].then(|| {
            let mut dx = vec![T::zero(); n * i];
            gemm(T::one(), Mat::new(dy, n, o), Mat::new(w.data(), o, i), T::zero(), &mut dx);
            Tensor::new(&[n, i], dx).expect("shape")
        });
        let dw = ctx.needs_grad[1].then(|| {
            let mut dw = vec![T::zero(); o * i];
            gemm(T::one(), Mat::t(dy, n, o), Mat::new(x.data(), n, i), T::zero(), &mut dw);
            Tensor::new(&[o, i], dw).expect("shape")
        });
        let mut grads = vec![dx, dw];
        if self.has_bias {
            let mut db = vec![T::zero(); o];
            for row in dy.chunks_exact(o) {
                for (acc, &g) in db.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            grads.push(Some(Tensor::new(&[o], db).expect("shape")));
        }
        grads
    }
}

impl<T: Float> Graph<T> {
    /// `x @ weight^T + bias` for `x: [n, in]`, `weight: [out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, i) = self.value(x).dims2()?;
        let (o, wi) = self.value(weight).dims2()?;
        if wi != i {
            return shape_err("linear", format!("weight [{o}, {wi}] for input width {i}"));
        }
        let mut out = vec![T::zero(); n * o];
        gemm(
            T::one(),
            Mat::new(self.value(x).data(), n, i),
            Mat::t(self.value(weight).data(), o, i),
            T::zero(),
            &mut out,
        );
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return shape_err("linear", format!("bias {:?} for width {o}", bv.shape()));
            }
            for row in out.chunks_exact_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
            inputs.push(b);
        }
        let out = Tensor::new(&[n, o], out)?;
        Ok(self.record(out, &inputs, LinearOp { has_bias: bias.is_some() }))
    }
}
