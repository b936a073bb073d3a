//! Declarative network descriptors, analytic cost counters and the network
//! builder.

mod cost;
mod descriptor;
mod network;

pub use cost::{
    conv_params, count_flops, count_params, dbt_overhead, needs_projection, shape_trace, BlockOverhead, CostReport,
    ShapeStep, StageCost,
};
pub use descriptor::{preset, ArchDescriptor, BlockKind, DbtPlacement, HeadSpec, StageSpec, StemSpec, PRESET_NAMES};
pub use network::{
    build_network, is_learnable, DbtBlockHandle, ForwardNodes, ForwardOutput, Network, FC_BIAS, FC_WEIGHT,
};
