use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default encoding frequency `t`.
pub const DEFAULT_ENCODING_FREQUENCY: f64 = 1.5;

/// Hyperparameters of one DBT block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbtConfig {
    /// Channel count `N` of the semantically grouped feature.
    pub channels: usize,
    /// Number of semantic groups `G`; groups are contiguous blocks of `N / G` channels.
    pub groups: usize,
    #[serde(default = "default_frequency")]
    pub encoding_frequency: f64,
    #[serde(default = "yes")]
    pub use_encoding: bool,
    #[serde(default = "yes")]
    pub use_shortcut: bool,
    /// Weight `λ` of this block's grouping loss in the total objective.
    #[serde(default)]
    pub grouping_loss_weight: f64,
    /// Divide the intra and inter sums by their ordered pair counts.
    #[serde(default)]
    pub normalize_grouping_loss: bool,
}

fn default_frequency() -> f64 {
    DEFAULT_ENCODING_FREQUENCY
}

fn yes() -> bool {
    true
}

impl DbtConfig {
    pub fn new(channels: usize, groups: usize) -> Self {
        DbtConfig {
            channels,
            groups,
            encoding_frequency: DEFAULT_ENCODING_FREQUENCY,
            use_encoding: true,
            use_shortcut: true,
            grouping_loss_weight: 0.0,
            normalize_grouping_loss: false,
        }
    }

    /// `G = √N` when `N` is a perfect square; the group bilinear output then
    /// keeps `N` channels without interpolation.
    pub fn square_root_groups(channels: usize) -> Option<usize> {
        let g = (channels as f64).sqrt().round() as usize;
        (g * g == channels).then_some(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.groups == 0 {
            return Err(Error::Config("channels and groups must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "{} channels are not divisible into {} groups",
                self.channels, self.groups
            )));
        }
        if self.use_encoding && !(self.encoding_frequency > 0.0) {
            return Err(Error::Config(format!(
                "encoding frequency must be positive, got {}",
                self.encoding_frequency
            )));
        }
        if !(self.grouping_loss_weight >= 0.0) {
            return Err(Error::Config(format!(
                "grouping loss weight must be non-negative, got {}",
                self.grouping_loss_weight
            )));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.channels / self.groups
    }

    /// Channel count produced by the group bilinear layer, `(N / G)²`.
    pub fn bilinear_channels(&self) -> usize {
        self.group_size() * self.group_size()
    }

    pub fn needs_interpolation(&self) -> bool {
        self.bilinear_channels() != self.channels
    }
}
