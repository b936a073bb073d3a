//! Analytic parameter and FLOP accounting.
//!
//! One multiply-add counts as one FLOP. Convolutions cost
//! `out_elems · in_channels · k²`, the classifier `in · out`, and a DBT block
//! adds its group bilinear term `G · (N/G)² · HW`, plus `N · HW` additions
//! for the index encoding and `2 · N · HW` for channel interpolation when
//! `(N/G)² ≠ N`. Batch norm, activations and pooling are not counted.

use serde::Serialize;

use super::{ArchDescriptor, StageSpec};
use crate::dbt::DbtConfig;
use crate::error::{Error, Result};

/// `[C, H, W]` after a named point of the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeStep {
    pub name: String,
    pub shape: [usize; 3],
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (size + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Weight count of a bias-free `k×k` convolution.
pub fn conv_params(in_channels: usize, out_channels: usize, kernel: usize) -> u64 {
    (in_channels * out_channels * kernel * kernel) as u64
}

/// Whether block `index` of `stage` needs a projection shortcut.
pub fn needs_projection(stage: &StageSpec, index: usize, in_channels: usize) -> bool {
    index == 0 && (stage.stride != 1 || in_channels != stage.channels[2])
}

/// Feature shapes after the stem and after every stage, for a square
/// `input × input` image.
pub fn shape_trace(d: &ArchDescriptor, input: usize) -> Result<Vec<ShapeStep>> {
    d.validate()?;
    let too_small = || Error::InvalidShape(format!("input {input} is too small for {}", d.name));
    let s = &d.stem;
    let mut hw = conv_out(input, s.kernel, s.stride, s.kernel / 2).ok_or_else(too_small)?;
    let mut steps = vec![ShapeStep {
        name: "stem.conv".into(),
        shape: [s.out_channels, hw, hw],
    }];
    if s.max_pool {
        hw = conv_out(hw, 3, 2, 1).ok_or_else(too_small)?;
        steps.push(ShapeStep {
            name: "stem.pool".into(),
            shape: [s.out_channels, hw, hw],
        });
    }
    for st in &d.stages {
        hw = conv_out(hw, 1, st.stride, 0).ok_or_else(too_small)?;
        steps.push(ShapeStep {
            name: st.name.clone(),
            shape: [st.channels[2], hw, hw],
        });
    }
    Ok(steps)
}

/// Extra FLOPs of one DBT block at `positions = H·W`.
pub fn dbt_overhead(cfg: &DbtConfig, positions: usize) -> u64 {
    let n = cfg.channels as u64;
    let size = cfg.group_size() as u64;
    let hw = positions as u64;
    let mut flops = cfg.groups as u64 * size * size * hw;
    if cfg.use_encoding {
        flops += n * hw;
    }
    if cfg.needs_interpolation() {
        flops += 2 * n * hw;
    }
    flops
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockOverhead {
    pub block: String,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageCost {
    pub name: String,
    pub output: [usize; 3],
    pub params: u64,
    pub flops: u64,
    pub dbt_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub descriptor: String,
    pub input: usize,
    pub params: u64,
    pub flops: u64,
    pub stem_params: u64,
    pub stem_flops: u64,
    pub head_params: u64,
    pub head_flops: u64,
    pub stages: Vec<StageCost>,
    pub per_block_dbt_overhead: Vec<BlockOverhead>,
}

impl CostReport {
    pub fn max_block_overhead(&self) -> u64 {
        self.per_block_dbt_overhead.iter().map(|b| b.flops).max().unwrap_or(0)
    }

    /// Structured text dump.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!("{} @ {}x{}\n", self.descriptor, self.input, self.input);
        out += &format!("{:<8} {:>16} {:>14} {:>16} {:>14}\n", "part", "output", "params", "flops", "dbt flops");
        out += &format!("{:<8} {:>16} {:>14} {:>16} {:>14}\n", "stem", "", self.stem_params, self.stem_flops, 0);
        for s in &self.stages {
            let shape = format!("{}x{}x{}", s.output[0], s.output[1], s.output[2]);
            out += &format!("{:<8} {:>16} {:>14} {:>16} {:>14}\n", s.name, shape, s.params, s.flops, s.dbt_flops);
        }
        out += &format!("{:<8} {:>16} {:>14} {:>16} {:>14}\n", "head", "", self.head_params, self.head_flops, 0);
        out += &format!(
            "total: {} params ({:.2} M), {} flops ({:.3} G), max per-block DBT overhead {} flops\n",
            self.params,
            self.params as f64 / 1e6,
            self.flops,
            self.flops as f64 / 1e9,
            self.max_block_overhead()
        );
        out
    }
}

/// Exact learnable scalar count: convolution weights, batch norm `γ, β`, and
/// the classifier weight and bias.
pub fn count_params(d: &ArchDescriptor) -> Result<u64> {
    Ok(count_flops(d, minimal_input(d))?.params)
}

/// Smallest square input that survives every downsampling step; parameter
/// counts do not depend on it.
fn minimal_input(d: &ArchDescriptor) -> usize {
    let mut size = 1usize;
    let mut factor = d.stem.stride * if d.stem.max_pool { 2 } else { 1 };
    for st in &d.stages {
        factor *= st.stride;
    }
    size *= factor.max(1);
    size.max(d.stem.kernel)
}

pub fn count_flops(d: &ArchDescriptor, input: usize) -> Result<CostReport> {
    let trace = shape_trace(d, input)?;
    let s = &d.stem;
    let stem_hw = trace[0].shape[1] as u64;
    let k2 = (s.kernel * s.kernel) as u64;
    let stem_params = conv_params(s.in_channels, s.out_channels, s.kernel) + 2 * s.out_channels as u64;
    let stem_flops = stem_hw * stem_hw * (s.out_channels * s.in_channels) as u64 * k2;

    let mut in_ch = s.out_channels;
    let mut stages = Vec::new();
    let mut overhead = Vec::new();
    let offset = trace.len() - d.stages.len();
    for (si, st) in d.stages.iter().enumerate() {
        let [c0, c1, c2] = st.channels.map(|c| c as u64);
        let hw = trace[offset + si].shape[1];
        let pos = (hw * hw) as u64;
        let mut cost = StageCost {
            name: st.name.clone(),
            output: trace[offset + si].shape,
            params: 0,
            flops: 0,
            dbt_flops: 0,
        };
        for b in 0..st.repeats {
            let cin = in_ch as u64;
            let mut p = cin * c0 + c0 * c1 * 9 + c1 * c2 + 2 * (c0 + c1 + c2);
            let mut f = pos * (cin * c0 + c0 * c1 * 9 + c1 * c2);
            if needs_projection(st, b, in_ch) {
                p += cin * c2 + 2 * c2;
                f += pos * cin * c2;
            }
            if let Some(cfg) = st.dbt_for_block(b) {
                p += 2 * cfg.channels as u64;
                let extra = dbt_overhead(cfg, hw * hw);
                cost.dbt_flops += extra;
                f += extra;
                overhead.push(BlockOverhead {
                    block: format!("{}.{b}", st.name),
                    flops: extra,
                });
            }
            cost.params += p;
            cost.flops += f;
            in_ch = st.channels[2];
        }
        stages.push(cost);
    }
    let classes = d.head.classes as u64;
    let head_params = in_ch as u64 * classes + classes;
    let head_flops = in_ch as u64 * classes;
    Ok(CostReport {
        descriptor: d.name.clone(),
        input,
        params: stem_params + head_params + stages.iter().map(|s| s.params).sum::<u64>(),
        flops: stem_flops + head_flops + stages.iter().map(|s| s.flops).sum::<u64>(),
        stem_params,
        stem_flops,
        head_params,
        head_flops,
        stages,
        per_block_dbt_overhead: overhead,
    })
}
