use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// g' = g + wd * p
/// v  = mu * v + g'
/// p  = p - lr * v
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(params: &ParamSet<T>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Invalid("optimizer state layout mismatch".into()));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() || params.params().len() != grads.len() {
            return Err(Error::Invalid(format!(
                "{} grads for {} params",
                grads.len(),
                params.params().len()
            )));
        }
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(lr);
        for ((p, g), v) in params.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            if g.shape() != p.value.shape() {
                return Err(Error::Invalid(format!("gradient shape for {}", p.name)));
            }
            for ((pv, &gv), vv) in
                p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut())
            {
                let d = gv + wd * *pv;
                *vv = mu * *vv + d;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut ps = ParamSet::<f64>::new();
        ps.add_param("w", Tensor::full(&[2], 1.0));
        let mut opt = Sgd::new(&ps, 0.0, 0.0);
        opt.step(&mut ps, &[Tensor::full(&[2], 0.5)], 0.1).unwrap();
        assert_eq!(ps.params()[0].value.data(), &[0.95, 0.95]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut ps = ParamSet::<f64>::new();
        ps.add_param("w", Tensor::full(&[1], 0.0));
        let mut opt = Sgd::new(&ps, 0.9, 0.0);
        let g = [Tensor::full(&[1], 1.0)];
        opt.step(&mut ps, &g, 1.0).unwrap();
        opt.step(&mut ps, &g, 1.0).unwrap();
        // v1 = 1, v2 = 1.9 -> p = -2.9
        assert!((ps.params()[0].value.item() + 2.9).abs() < 1e-12);
    }
}
