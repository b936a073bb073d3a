use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{channel_layout, Element, Tensor};

use super::{DbtConfig, GroupIndexEncoding};

/// Group bilinear transform of `x: [B, N, H, W]`.
///
/// At every position the `N`-vector is split into `G` contiguous groups
/// `g_j`; the output is `vec(Σ_j (g_j + P_j)(g_j + P_j)ᵀ)` with shape
/// `[B, (N/G)², H, W]`. `encoding` must be given exactly when
/// `cfg.use_encoding` is set.
pub fn group_bilinear<T: Element>(
    x: &Tensor<T>,
    cfg: &DbtConfig,
    encoding: Option<&GroupIndexEncoding>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (batch, channels, spatial) = channel_layout(x.shape())
        .ok_or_else(|| Error::InvalidShape(format!("group bilinear expects [B, N, ...], got {:?}", x.shape())))?;
    if channels != cfg.channels {
        return Err(Error::InvalidShape(format!(
            "config has {} channels, input {:?}",
            cfg.channels,
            x.shape()
        )));
    }
    let size = cfg.group_size();
    let table = match (cfg.use_encoding, encoding) {
        (true, Some(enc)) => {
            if enc.groups() != cfg.groups || enc.group_size() != size {
                return Err(Error::InvalidShape(format!(
                    "encoding is [{}, {}], config needs [{}, {size}]",
                    enc.groups(),
                    enc.group_size(),
                    cfg.groups
                )));
            }
            Some(enc.as_tensor::<T>())
        }
        (false, None) => None,
        (true, None) => return Err(Error::Config("use_encoding is set but no encoding was given".into())),
        (false, Some(_)) => return Err(Error::Config("encoding given while use_encoding is off".into())),
    };
    let out = kernels::group_bilinear_forward(
        batch,
        cfg.groups,
        size,
        spatial,
        x.data(),
        table.as_ref().map(|t| t.data()),
    );
    let mut shape = x.shape().to_vec();
    shape[1] = size * size;
    Tensor::from_vec(shape, out)
}

/// Endpoints-aligned linear resampling along the channel axis.
pub fn channel_interpolate<T: Element>(y: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let (batch, channels, spatial) = channel_layout(y.shape())
        .ok_or_else(|| Error::InvalidShape(format!("channel interpolation expects [B, M, ...], got {:?}", y.shape())))?;
    if channels < 2 || target < 2 {
        return Err(Error::InvalidShape(format!(
            "channel interpolation needs at least 2 channels on both sides, got {channels} -> {target}"
        )));
    }
    if channels == target {
        return Ok(y.clone());
    }
    let out = kernels::channel_interpolate_forward(batch, channels, target, spatial, y.data());
    let mut shape = y.shape().to_vec();
    shape[1] = target;
    Tensor::from_vec(shape, out)
}
