//! Deep bilinear transformation: semantic grouping, group index encoding,
//! group bilinear aggregation, channel interpolation and the residual block.

mod bilinear;
mod block;
mod config;
mod correlation;
mod encoding;

pub use bilinear::{channel_interpolate, group_bilinear};
pub use block::{
    bilinear_bn_name, dbt_block_forward, record_dbt_block, record_dbt_branch, sg_bn_name, sg_conv_name, DbtBlockParams,
    DbtNodes, DbtOutput,
};
pub use config::{DbtConfig, DEFAULT_ENCODING_FREQUENCY};
pub use correlation::{grouping_loss, grouping_loss_with, pairwise_correlation, GroupingLossReport};
pub use encoding::{group_index_encoding, GroupIndexEncoding};
