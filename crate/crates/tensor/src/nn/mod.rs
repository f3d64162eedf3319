//! Parameter storage, standard layers and the optimizer.

mod layers;
mod optim;
mod params;

pub use layers::{BatchNorm, Conv2d, Linear};
pub use optim::Sgd;
pub use params::{BufferId, Ctx, NamedTensor, ParamId, ParamSet};
