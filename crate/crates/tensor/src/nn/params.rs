use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Grads, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics) of one network, in registration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(NamedTensor { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(NamedTensor { name: name.into(), value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same names and shapes, in the same order, for params and buffers.
    pub fn same_layout(&self, other: &Self) -> bool {
        fn eq<T: Float>(a: &[NamedTensor<T>], b: &[NamedTensor<T>]) -> bool {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| x.name == y.name && x.value.shape() == y.value.shape())
        }
        eq(&self.params, &other.params) && eq(&self.buffers, &other.buffers)
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &Self) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Invalid("parameter layouts differ".into()));
        }
        self.clone_from(other);
        Ok(())
    }

    /// Copies every param and buffer whose name starts with `prefix` from
    /// `other` (matched by name, shapes must agree). Returns the number of
    /// tensors copied.
    pub fn load_prefixed(&mut self, other: &Self, prefix: &str) -> Result<usize> {
        fn copy<T: Float>(
            dst: &mut [NamedTensor<T>],
            src: &[NamedTensor<T>],
            prefix: &str,
        ) -> Result<usize> {
            let mut n = 0;
            for d in dst.iter_mut().filter(|d| d.name.starts_with(prefix)) {
                let s = src.iter().find(|s| s.name == d.name).ok_or_else(|| {
                    Error::Invalid(format!("missing tensor {} in source", d.name))
                })?;
                if s.value.shape() != d.value.shape() {
                    return Err(Error::Invalid(format!(
                        "tensor {}: shape {:?} vs {:?}",
                        d.name,
                        s.value.shape(),
                        d.value.shape()
                    )));
                }
                d.value = s.value.clone();
                n += 1;
            }
            Ok(n)
        }
        Ok(copy(&mut self.params, &other.params, prefix)?
            + copy(&mut self.buffers, &other.buffers, prefix)?)
    }

    /// Registers every param as a graph leaf. On a `no_grad` graph the
    /// leaves are constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Registers every param as a constant leaf.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    /// Gradients for the vars returned by [`ParamSet::bind`]; params that
    /// did not take part in the loss get zeros.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Grads<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        let conv = |v: &[NamedTensor<T>]| {
            v.iter().map(|n| NamedTensor { name: n.name.clone(), value: n.value.cast() }).collect()
        };
        ParamSet { params: conv(&self.params), buffers: conv(&self.buffers) }
    }
}

/// Forward-pass context: the graph, bound parameter leaves of one
/// [`ParamSet`], its buffers, and the train/eval switch.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    pub vars: &'a [Var],
    pub buffers: &'a mut [NamedTensor<T>],
    pub train: bool,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(
        g: &'a mut Graph<T>,
        vars: &'a [Var],
        buffers: &'a mut [NamedTensor<T>],
        train: bool,
    ) -> Self {
        Self { g, vars, buffers, train }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }
}
