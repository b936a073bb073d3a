use std::fmt::Write as _;
use std::path::Path;

use crate::arch::Network;
use crate::data::{batch, Sample};
use crate::error::{Error, Result};
use crate::tensor::{channel_layout, Element, Tensor};

/// Average pairwise channel interaction of a grouped feature.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    /// `[N, N]`.
    pub matrix: Tensor<f64>,
    pub stage: String,
    /// Prefix of the analysed block, e.g. `V.1`.
    pub block: String,
    pub groups: usize,
    pub samples: usize,
}

/// Accumulates `(1/HW) X̂ X̂ᵀ` per sample, where `X̂` is the `[N, HW]`
/// feature with every channel scaled to unit norm (all-zero channels stay
/// zero), and averages over samples.
#[derive(Clone, Debug)]
pub struct InteractionAccumulator {
    channels: usize,
    sum: Vec<f64>,
    samples: usize,
}

impl InteractionAccumulator {
    pub fn new(channels: usize) -> Self {
        InteractionAccumulator {
            channels,
            sum: vec![0.0; channels * channels],
            samples: 0,
        }
    }

    /// Adds every sample of a `[B, N, H, W]` batch.
    pub fn add<T: Element>(&mut self, features: &Tensor<T>) -> Result<()> {
        let (b, n, hw) = channel_layout(features.shape())
            .filter(|&(_, n, _)| n == self.channels)
            .ok_or_else(|| Error::InvalidShape(format!("expected [B, {}, ...], got {:?}", self.channels, features.shape())))?;
        let data = features.to_f64_vec();
        for s in 0..b {
            let mut x = data[s * n * hw..(s + 1) * n * hw].to_vec();
            for row in x.chunks_mut(hw) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
            for i in 0..n {
                for j in i..n {
                    let dot: f64 = x[i * hw..(i + 1) * hw].iter().zip(&x[j * hw..(j + 1) * hw]).map(|(a, b)| a * b).sum();
                    let v = dot / hw as f64;
                    self.sum[i * n + j] += v;
                    if i != j {
                        self.sum[j * n + i] += v;
                    }
                }
            }
            self.samples += 1;
        }
        Ok(())
    }

    pub fn finish(self, stage: &str, block: &str, groups: usize) -> Result<InteractionMatrix> {
        if self.samples == 0 {
            return Err(Error::Dataset("no samples for the interaction matrix".into()));
        }
        let inv = 1.0 / self.samples as f64;
        let data = self.sum.iter().map(|v| v * inv).collect();
        Ok(InteractionMatrix {
            matrix: Tensor::from_vec([self.channels, self.channels], data)?,
            stage: stage.into(),
            block: block.into(),
            groups,
            samples: self.samples,
        })
    }
}

impl InteractionMatrix {
    pub fn channels(&self) -> usize {
        self.matrix.shape()[0]
    }

    fn mean_where(&self, pick: impl Fn(usize, usize) -> bool) -> f64 {
        let n = self.channels();
        let size = n / self.groups;
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..n {
            for j in 0..n {
                if i != j && pick(i / size, j / size) {
                    sum += self.matrix.data()[i * n + j];
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Mean off-diagonal entry inside the `G` diagonal blocks.
    pub fn mean_intra(&self) -> f64 {
        self.mean_where(|a, b| a == b)
    }

    /// Mean entry outside the diagonal blocks.
    pub fn mean_inter(&self) -> f64 {
        self.mean_where(|a, b| a != b)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.channels();
        let m = self.matrix.data();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((m[i * n + j] - m[j * n + i]).abs());
            }
        }
        worst
    }
}

/// Interaction matrix of the last DBT block of `stage`, in eval mode, over
/// every sample.
pub fn interaction_matrix(net: &Network<f32>, samples: &[Sample], stage: &str) -> Result<InteractionMatrix> {
    let st = net
        .descriptor()
        .stage(stage)
        .ok_or_else(|| Error::Config(format!("no stage {stage}")))?;
    let index = (0..st.repeats)
        .rev()
        .find(|&i| st.dbt_for_block(i).is_some())
        .ok_or_else(|| Error::Config(format!("stage {stage} has no DBT block")))?;
    let cfg = st.dbt_for_block(index).expect("found above").clone();
    let prefix = format!("{stage}.{index}");
    let mut acc = InteractionAccumulator::new(cfg.channels);
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(64) {
        let (x, _) = batch(samples, chunk)?;
        let out = net.forward(&x, false)?;
        let (_, feat) = out
            .sg_outputs
            .iter()
            .find(|(p, _)| *p == prefix)
            .expect("every DBT block reports its grouped feature");
        acc.add(feat)?;
    }
    acc.finish(stage, &prefix, cfg.groups)
}

/// `N` lines of `N` comma-separated values, no trailing newline.
pub fn matrix_to_csv(m: &Tensor<f64>) -> String {
    let n = m.shape()[1];
    let mut out = String::new();
    for (r, row) in m.data().chunks(n).enumerate() {
        if r > 0 {
            out.push('\n');
        }
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("string write");
        }
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Tensor<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse(format!("csv value {v:?}: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::Parse("csv rows must be non-empty and equally long".into()));
    }
    let cols = rows[0].len();
    Tensor::from_vec([n, cols], rows.concat())
}

/// Binary 8-bit PGM, min-max normalised; a constant matrix maps to all 0.
pub fn matrix_to_pgm(m: &Tensor<f64>) -> Vec<u8> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let range = hi - lo;
    out.extend(m.data().iter().map(|&v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Pgm,
}

impl MatrixFormat {
    /// From a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(MatrixFormat::Csv),
            Some("pgm") => Ok(MatrixFormat::Pgm),
            _ => Err(Error::Config(format!("{}: expected a .csv or .pgm path", path.display()))),
        }
    }
}

pub fn export_matrix(m: &InteractionMatrix, path: &Path, format: MatrixFormat) -> Result<()> {
    let bytes = match format {
        MatrixFormat::Csv => matrix_to_csv(&m.matrix).into_bytes(),
        MatrixFormat::Pgm => matrix_to_pgm(&m.matrix),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
