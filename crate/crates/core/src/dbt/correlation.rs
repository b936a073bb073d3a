use crate::error::{Error, Result};
use crate::tensor::kernels::{self, CORRELATION_EPS};
use crate::tensor::{Element, Tensor};

/// Cosine similarity of two channel maps, `mi·mj / (‖mi‖‖mj‖ + ε)`.
pub fn pairwise_correlation<T: Element>(mi: &[T], mj: &[T]) -> Result<f64> {
    if mi.len() != mj.len() || mi.is_empty() {
        return Err(Error::InvalidShape(format!(
            "channel maps must have equal positive length, got {} and {}",
            mi.len(),
            mj.len()
        )));
    }
    let dot = kernels::dot(mi, mj).as_f64();
    let ni = kernels::dot(mi, mi).as_f64().sqrt();
    let nj = kernels::dot(mj, mj).as_f64().sqrt();
    Ok(dot / (ni * nj + CORRELATION_EPS))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupingLossReport {
    /// `-Σ d_ij²` over ordered same-group pairs `i ≠ j`.
    pub intra: f64,
    /// `+Σ d_ij²` over ordered cross-group pairs.
    pub inter: f64,
    pub total: f64,
}

/// Semantic grouping loss of `features: [B, N, H, W]`, averaged over the batch.
pub fn grouping_loss<T: Element>(features: &Tensor<T>, groups: usize) -> Result<GroupingLossReport> {
    grouping_loss_with(features, groups, false)
}

pub fn grouping_loss_with<T: Element>(
    features: &Tensor<T>,
    groups: usize,
    normalize: bool,
) -> Result<GroupingLossReport> {
    let s = features.shape();
    if s.len() < 2 {
        return Err(Error::InvalidShape(format!("grouping loss expects [B, N, ...], got {s:?}")));
    }
    if groups == 0 || !s[1].is_multiple_of(groups) {
        return Err(Error::Config(format!("{} channels are not divisible into {groups} groups", s[1])));
    }
    let spatial = s[2..].iter().product();
    let (intra, inter) = kernels::grouping_loss_forward(s[0], s[1], spatial, groups, normalize, features.data());
    let (intra, inter) = (intra.as_f64(), inter.as_f64());
    Ok(GroupingLossReport {
        intra,
        inter,
        total: intra + inter,
    })
}
