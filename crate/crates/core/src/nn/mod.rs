//! Layers and the optimizer that host DBT blocks inside a residual network.

mod layers;
mod optim;
pub mod record;

pub use layers::{
    batch_norm, blend, conv2d, global_avg_pool, kaiming_normal, softmax_cross_entropy, BatchNormParams, ConvParams,
    NormMode, BN_EPS, BN_MOMENTUM, KERNEL_SIZES,
};
pub use optim::{sgd_cosine_step, SgdCosine, SgdCosineConfig};
