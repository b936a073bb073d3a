use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dbt::DbtConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    PlainBottleneck,
    DbtBottleneck,
}

/// Which blocks of a DBT stage carry the bilinear branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DbtPlacement {
    #[default]
    All,
    /// Only the final block of the stage.
    Last,
}

/// Stem: `kernel×kernel` convolution with padding `kernel/2`, batch norm,
/// ReLU, then an optional 3×3 stride-2 max pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    #[serde(default = "rgb")]
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub max_pool: bool,
}

fn rgb() -> usize {
    3
}

/// A stage of bottleneck blocks. `channels` is the width triple
/// `[conv1, conv2, conv3]`; the first block applies `stride` on its first
/// 1×1 convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub block: BlockKind,
    pub repeats: usize,
    pub channels: [usize; 3],
    pub stride: usize,
    #[serde(default, skip_serializing_if = "is_all")]
    pub placement: DbtPlacement,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dbt: Option<DbtConfig>,
}

fn is_all(p: &DbtPlacement) -> bool {
    *p == DbtPlacement::All
}

/// Global average pool followed by a fully connected classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub name: String,
    pub stem: StemSpec,
    pub head: HeadSpec,
    pub stages: Vec<StageSpec>,
}

impl StageSpec {
    /// DBT settings of block `index`, or `None` for a plain block.
    pub fn dbt_for_block(&self, index: usize) -> Option<&DbtConfig> {
        if self.block != BlockKind::DbtBottleneck {
            return None;
        }
        match self.placement {
            DbtPlacement::All => self.dbt.as_ref(),
            DbtPlacement::Last => (index + 1 == self.repeats).then_some(self.dbt.as_ref()).flatten(),
        }
    }

    pub fn dbt_block_count(&self) -> usize {
        (0..self.repeats).filter(|&i| self.dbt_for_block(i).is_some()).count()
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("descriptor {}: {msg}", self.name)));
        let s = &self.stem;
        if s.in_channels == 0 || s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
            return bad("stem sizes must be positive".into());
        }
        if self.head.classes < 2 {
            return bad(format!("head needs at least 2 classes, got {}", self.head.classes));
        }
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.name.is_empty() || st.name.contains(['.', ',']) {
                return bad(format!("stage name {:?} must be non-empty without '.' or ','", st.name));
            }
            if self.stages[..i].iter().any(|o| o.name == st.name) {
                return bad(format!("duplicate stage {}", st.name));
            }
            if st.repeats == 0 || st.stride == 0 || st.channels.contains(&0) {
                return bad(format!("stage {} sizes must be positive", st.name));
            }
            if st.block == BlockKind::DbtBottleneck {
                let Some(cfg) = &st.dbt else {
                    return bad(format!("stage {} is dbt-bottleneck without a dbt table", st.name));
                };
                if cfg.channels != st.channels[0] {
                    return bad(format!(
                        "stage {}: dbt channels {} differ from conv1 width {}",
                        st.name, cfg.channels, st.channels[0]
                    ));
                }
                cfg.validate().map_err(|e| Error::Config(format!("descriptor {}: stage {}: {e}", self.name, st.name)))?;
                if cfg.group_size() < 2 {
                    return bad(format!("stage {}: groups of one channel cannot be encoded", st.name));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let d: ArchDescriptor = toml::from_str(text).map_err(|e| Error::Parse(format!("descriptor: {}", e.message())))?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("descriptor serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// A preset name, or else a path to a descriptor file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match preset(name_or_path) {
            Some(d) => Ok(d),
            None => Self::load(Path::new(name_or_path)),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn has_dbt(&self) -> bool {
        self.stages.iter().any(|s| s.dbt_block_count() > 0)
    }

    /// Applies `f` to the DBT settings of every stage.
    pub fn map_dbt(&mut self, mut f: impl FnMut(&mut DbtConfig)) {
        for st in &mut self.stages {
            if let Some(cfg) = &mut st.dbt {
                f(cfg);
            }
        }
    }

    /// Keeps DBT only on the selected stages; the rest become plain.
    /// Tokens are stage names, or `last` for a single DBT block at the end of
    /// the final stage.
    pub fn select_dbt_stages(&mut self, tokens: &[String]) -> Result<()> {
        let last = tokens.iter().any(|t| t == "last");
        for t in tokens {
            if t != "last" && self.stage(t).is_none() {
                return Err(Error::Config(format!("descriptor {} has no stage {t}", self.name)));
            }
        }
        let final_index = self.stages.len() - 1;
        for (i, st) in self.stages.iter_mut().enumerate() {
            let named = tokens.contains(&st.name);
            let keep_last = last && i == final_index;
            if (named || keep_last) && st.dbt.is_none() {
                return Err(Error::Config(format!("stage {} has no dbt table", st.name)));
            }
            st.block = if named || keep_last {
                BlockKind::DbtBottleneck
            } else {
                BlockKind::PlainBottleneck
            };
            st.placement = if keep_last && !named {
                DbtPlacement::Last
            } else {
                DbtPlacement::All
            };
        }
        Ok(())
    }

    /// The same layout with every stage plain.
    pub fn plain_counterpart(&self) -> Self {
        let mut d = self.clone();
        if d.has_dbt() {
            d.name = format!("{}-plain", d.name);
        }
        for st in &mut d.stages {
            st.block = BlockKind::PlainBottleneck;
            st.dbt = None;
            st.placement = DbtPlacement::All;
        }
        d
    }
}

pub const PRESET_NAMES: [&str; 5] = ["resnet-50", "dbtnet-50", "dbtnet-101", "dbtnet-tiny", "plain-tiny"];

fn stage(name: &str, repeats: usize, channels: [usize; 3], stride: usize, groups: Option<usize>) -> StageSpec {
    StageSpec {
        name: name.into(),
        block: if groups.is_some() {
            BlockKind::DbtBottleneck
        } else {
            BlockKind::PlainBottleneck
        },
        repeats,
        channels,
        stride,
        placement: DbtPlacement::All,
        dbt: groups.map(|g| DbtConfig::new(channels[0], g)),
    }
}

fn residual(name: &str, repeats: [usize; 4], groups: Option<[usize; 4]>) -> ArchDescriptor {
    let g = |i: usize| groups.map(|g| g[i]);
    ArchDescriptor {
        name: name.into(),
        stem: StemSpec {
            in_channels: 3,
            out_channels: 64,
            kernel: 7,
            stride: 2,
            max_pool: true,
        },
        head: HeadSpec { classes: 1000 },
        stages: vec![
            stage("II", repeats[0], [64, 64, 256], 1, g(0)),
            stage("III", repeats[1], [128, 128, 512], 2, g(1)),
            stage("IV", repeats[2], [256, 256, 1024], 2, g(2)),
            stage("V", repeats[3], [512, 512, 2048], 2, g(3)),
        ],
    }
}

fn tiny(name: &str, dbt: bool) -> ArchDescriptor {
    ArchDescriptor {
        name: name.into(),
        stem: StemSpec {
            in_channels: 3,
            out_channels: 16,
            kernel: 3,
            stride: 2,
            max_pool: true,
        },
        head: HeadSpec { classes: 8 },
        stages: vec![
            stage("IV", 2, [16, 16, 64], 1, dbt.then_some(4)),
            stage("V", 2, [64, 64, 256], 2, dbt.then_some(8)),
        ],
    }
}

/// Built-in descriptors by name.
pub fn preset(name: &str) -> Option<ArchDescriptor> {
    const TABLE_GROUPS: [usize; 4] = [8, 8, 16, 16];
    Some(match name {
        "resnet-50" => residual(name, [3, 4, 6, 3], None),
        "dbtnet-50" => residual(name, [3, 4, 6, 3], Some(TABLE_GROUPS)),
        "dbtnet-101" => residual(name, [3, 4, 23, 3], Some(TABLE_GROUPS)),
        "dbtnet-tiny" => tiny(name, true),
        "plain-tiny" => tiny(name, false),
        _ => return None,
    })
}
