use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::record::{record_batch_norm, record_conv};
use crate::nn::{BatchNormParams, ConvParams, NormMode, BN_EPS};
use crate::tensor::{Bindings, Element, Graph, NodeId, Tensor};

use super::{group_index_encoding, grouping_loss_with, DbtConfig, GroupingLossReport};

/// Parameters of a DBT block: the semantic-grouping 1×1 convolution with its
/// batch norm, and the batch norm closing the bilinear branch.
#[derive(Clone, Debug)]
pub struct DbtBlockParams<T: Element = f32> {
    pub sg: ConvParams<T>,
    pub sg_bn: BatchNormParams<T>,
    pub bilinear_bn: BatchNormParams<T>,
}

/// Layer names inside a block with the given prefix.
pub fn sg_conv_name(prefix: &str) -> String {
    format!("{prefix}.conv1")
}

pub fn sg_bn_name(prefix: &str) -> String {
    format!("{prefix}.bn1")
}

pub fn bilinear_bn_name(prefix: &str) -> String {
    format!("{prefix}.dbt_bn")
}

impl<T: Element> DbtBlockParams<T> {
    /// Kaiming SG weights, unit-scale SG batch norm, and a zero-scale
    /// bilinear batch norm so a fresh block passes its SG feature through.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, cfg: &DbtConfig, stride: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(DbtBlockParams {
            sg: ConvParams::kaiming(cfg.channels, in_channels, 1, stride, 0, rng)?,
            sg_bn: BatchNormParams::new(cfg.channels, 1.0),
            bilinear_bn: BatchNormParams::new(cfg.channels, 0.0),
        })
    }

    pub fn bind(&self, prefix: &str, bindings: &mut Bindings<T>, requires_grad: bool) {
        self.sg.bind(&sg_conv_name(prefix), bindings, requires_grad);
        self.sg_bn.bind(&sg_bn_name(prefix), bindings, requires_grad);
        self.bilinear_bn.bind(&bilinear_bn_name(prefix), bindings, requires_grad);
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        self.sg_bn.mode = mode;
        self.bilinear_bn.mode = mode;
    }
}

/// Graph handles of a recorded DBT block.
#[derive(Clone, Copy, Debug)]
pub struct DbtNodes {
    /// Semantically grouped feature (after the SG batch norm and ReLU).
    pub sg_output: NodeId,
    pub output: NodeId,
    /// `[1]` grouping loss of `sg_output`.
    pub grouping_loss: NodeId,
    pub sg_bn: NodeId,
    pub bilinear_bn: NodeId,
}

/// Records the bilinear branch on top of an already grouped feature:
/// group bilinear (+ index encoding) → channel interpolation back to `N` when
/// `(N/G)² ≠ N` → tanh → batch norm → optional shortcut from `grouped`.
/// Returns `(output, grouping_loss, bilinear_bn)`.
pub fn record_dbt_branch<T: Element>(
    g: &mut Graph<T>,
    grouped: NodeId,
    prefix: &str,
    cfg: &DbtConfig,
    training: bool,
) -> Result<(NodeId, NodeId, NodeId)> {
    cfg.validate()?;
    let encoding = if cfg.use_encoding {
        Some(group_index_encoding(cfg)?.as_tensor::<T>())
    } else {
        None
    };
    let gl = g.grouping_loss(grouped, cfg.groups, cfg.normalize_grouping_loss);
    let mut y = g.group_bilinear(grouped, cfg.groups, encoding);
    if cfg.needs_interpolation() {
        y = g.channel_interpolate(y, cfg.channels);
    }
    let y = g.tanh(y);
    let bn = record_batch_norm(g, y, &bilinear_bn_name(prefix), BN_EPS, training);
    let out = if cfg.use_shortcut { g.add(bn, grouped) } else { bn };
    Ok((out, gl, bn))
}

/// Records a full DBT block on `x`: SG 1×1 convolution, batch norm, ReLU and
/// the bilinear branch.
pub fn record_dbt_block<T: Element>(
    g: &mut Graph<T>,
    x: NodeId,
    prefix: &str,
    cfg: &DbtConfig,
    stride: usize,
    training: bool,
) -> Result<DbtNodes> {
    let sg = record_conv(g, x, &sg_conv_name(prefix), stride, 0);
    let sg_bn = record_batch_norm(g, sg, &sg_bn_name(prefix), BN_EPS, training);
    let sg_output = g.relu(sg_bn);
    let (output, grouping_loss, bilinear_bn) = record_dbt_branch(g, sg_output, prefix, cfg, training)?;
    Ok(DbtNodes {
        sg_output,
        output,
        grouping_loss,
        sg_bn,
        bilinear_bn,
    })
}

#[derive(Clone, Debug)]
pub struct DbtOutput<T: Element = f32> {
    pub output: Tensor<T>,
    pub sg_output: Tensor<T>,
    pub grouping_loss: GroupingLossReport,
}

/// Eager forward pass of one DBT block on `x: [B, C_in, H, W]`, returning a
/// `[B, N, H', W']` feature. Uses the batch-norm mode stored in `params`;
/// in train mode the running statistics are updated.
pub fn dbt_block_forward<T: Element>(
    x: &Tensor<T>,
    params: &mut DbtBlockParams<T>,
    cfg: &DbtConfig,
) -> Result<DbtOutput<T>> {
    if params.sg.out_channels() != cfg.channels {
        return Err(Error::InvalidShape(format!(
            "SG convolution produces {} channels, config expects {}",
            params.sg.out_channels(),
            cfg.channels
        )));
    }
    let training = params.sg_bn.mode == NormMode::Train;
    let mut g = Graph::new();
    let input = g.input("x");
    let nodes = record_dbt_block(&mut g, input, "block", cfg, params.sg.stride, training)?;
    let mut bindings = Bindings::new();
    bindings.insert("x".into(), x.clone());
    params.bind("block", &mut bindings, false);
    g.evaluate(&bindings)?;
    if training {
        for (node, bn) in [(nodes.sg_bn, &mut params.sg_bn), (nodes.bilinear_bn, &mut params.bilinear_bn)] {
            let stats = g.batch_stats(node).expect("train-mode batch norm records statistics");
            bn.update_running(&stats.mean, &stats.var);
        }
    }
    let sg_output = g.value(nodes.sg_output)?.clone();
    Ok(DbtOutput {
        output: g.value(nodes.output)?.clone(),
        grouping_loss: grouping_loss_with(&sg_output, cfg.groups, cfg.normalize_grouping_loss)?,
        sg_output,
    })
}
