use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::DbtConfig;

/// Sinusoidal group index table `P: [G, N/G]`, one row per group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupIndexEncoding {
    table: Tensor<f64>,
}

impl GroupIndexEncoding {
    pub fn table(&self) -> &Tensor<f64> {
        &self.table
    }

    pub fn groups(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn group_size(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, group: usize) -> &[f64] {
        let s = self.group_size();
        &self.table.data()[group * s..(group + 1) * s]
    }

    pub fn as_tensor<T: Element>(&self) -> Tensor<T> {
        self.table.cast()
    }
}

/// Builds the encoding for `cfg`:
/// `P[j, 2i] = sin(j / t^(2i / size))`, `P[j, 2i+1] = cos(j / t^(2i / size))`.
/// With an odd group size the trailing unpaired slot takes the sine.
pub fn group_index_encoding(cfg: &DbtConfig) -> Result<GroupIndexEncoding> {
    let t = cfg.encoding_frequency;
    if !(t > 0.0) {
        return Err(Error::Config(format!("encoding frequency must be positive, got {t}")));
    }
    if cfg.groups == 0 || !cfg.channels.is_multiple_of(cfg.groups) {
        return Err(Error::Config(format!(
            "{} channels are not divisible into {} groups",
            cfg.channels, cfg.groups
        )));
    }
    let size = cfg.group_size();
    if size < 2 {
        return Err(Error::Config(format!("group size must be at least 2, got {size}")));
    }
    let mut data = Vec::with_capacity(cfg.groups * size);
    for j in 0..cfg.groups {
        for slot in 0..size {
            let pair = slot / 2;
            let arg = j as f64 / t.powf((2 * pair) as f64 / size as f64);
            data.push(if slot % 2 == 0 { arg.sin() } else { arg.cos() });
        }
    }
    Ok(GroupIndexEncoding {
        table: Tensor::from_vec([cfg.groups, size], data)?,
    })
}
