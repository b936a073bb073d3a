use std::collections::HashMap;

use super::kernels::{self, BatchStats, ConvGeometry};
use super::{channel_layout, Element, Tensor};
use crate::error::{Error, Result};

pub type Bindings<T> = HashMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op<T> {
    Input(String),
    Constant(Tensor<T>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddChannel(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    SliceChannels {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatChannels(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Conv2d {
        x: NodeId,
        weight: NodeId,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: NodeId,
        running_var: NodeId,
        eps: T,
        training: bool,
    },
    MaxPool2d {
        x: NodeId,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: NodeId,
    },
    GroupBilinear {
        x: NodeId,
        groups: usize,
        encoding: Option<Tensor<T>>,
    },
    ChannelInterpolate {
        x: NodeId,
        target: usize,
    },
    GroupingLoss {
        x: NodeId,
        groups: usize,
        normalize: bool,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddChannel(..) => "add_channel",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatChannels(_) => "concat_channels",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::GroupBilinear { .. } => "group_bilinear",
            Op::ChannelInterpolate { .. } => "channel_interpolate",
            Op::GroupingLoss { .. } => "grouping_loss",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddChannel(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::SliceChannels { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::GroupBilinear { x, .. }
            | Op::ChannelInterpolate { x, .. }
            | Op::GroupingLoss { x, .. } => vec![*x],
            Op::ConcatChannels(xs) => xs.clone(),
            Op::Conv2d { x, weight, .. } => vec![*x, *weight],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![*x, *gamma, *beta, *running_mean, *running_var],
            Op::SoftmaxCrossEntropy { logits, labels } => vec![*logits, *labels],
        }
    }
}

/// Context an op keeps from its forward pass for the backward pass.
#[derive(Clone)]
enum Saved<T> {
    None,
    BatchNorm { xhat: Vec<T>, stats: Option<BatchStats<T>>, var: Vec<T> },
    ArgMax(Vec<usize>),
    Probs { probs: Vec<T>, labels: Vec<usize> },
}

struct Tape<T> {
    values: Vec<Tensor<T>>,
    saved: Vec<Saved<T>>,
    consumed: bool,
}

/// A recorded computation over named inputs.
///
/// Ops are appended through the builder methods, which only record; the graph
/// is run by [`Graph::evaluate`]. The forward values form a tape that a single
/// call to [`Graph::gradients`] consumes. Evaluating again re-records it.
pub struct Graph<T: Element = f32> {
    ops: Vec<Op<T>>,
    inputs: HashMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
    tape: Option<Tape<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            inputs: HashMap::new(),
            outputs: Vec::new(),
            tape: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        for input in op.inputs() {
            assert!(input.0 < self.ops.len(), "node {} does not exist", input.0);
        }
        self.ops.push(op);
        self.tape = None;
        NodeId(self.ops.len() - 1)
    }

    /// Declares a free input. Declaring the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant(value))
    }

    /// Names a node as an output of [`Graph::evaluate`].
    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), node));
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    /// Adds a per-channel vector `[C]` to `[B, C, ...]`.
    pub fn add_channel(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddChannel(x, bias))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        self.push(Op::Reshape(a, shape.into()))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceChannels { x, start, len })
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat of nothing");
        self.push(Op::ConcatChannels(xs.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, stride: usize, padding: usize) -> NodeId {
        self.push(Op::Conv2d {
            x,
            weight,
            stride,
            padding,
        })
    }

    /// Batch norm over the channel axis. `running_mean`/`running_var` are read
    /// only in eval mode; train-mode batch statistics are available from
    /// [`Graph::batch_stats`] after evaluation.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: NodeId,
        running_var: NodeId,
        eps: T,
        training: bool,
    ) -> NodeId {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            training,
        })
    }

    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize, padding: usize) -> NodeId {
        self.push(Op::MaxPool2d {
            x,
            kernel,
            stride,
            padding,
        })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(x))
    }

    /// Mean softmax cross entropy. `labels` is a `[B]` tensor of class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, labels })
    }

    /// Fused within-group outer product summed over groups, per position.
    pub fn group_bilinear(&mut self, x: NodeId, groups: usize, encoding: Option<Tensor<T>>) -> NodeId {
        self.push(Op::GroupBilinear { x, groups, encoding })
    }

    pub fn channel_interpolate(&mut self, x: NodeId, target: usize) -> NodeId {
        self.push(Op::ChannelInterpolate { x, target })
    }

    /// Batch-mean grouping loss `L_intra + L_inter` as a `[1]` tensor.
    pub fn grouping_loss(&mut self, x: NodeId, groups: usize, normalize: bool) -> NodeId {
        self.push(Op::GroupingLoss { x, groups, normalize })
    }

    fn mismatch(&self, id: usize, expected: impl Into<String>, actual: &[usize]) -> Error {
        Error::ShapeMismatch {
            op: id,
            name: self.ops[id].name(),
            expected: expected.into(),
            actual: shape_str(actual),
        }
    }

    /// Runs the graph forward and returns every named output.
    pub fn evaluate(&mut self, bindings: &Bindings<T>) -> Result<HashMap<String, Tensor<T>>> {
        self.tape = None;
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.ops.len());
        let mut saved = Vec::with_capacity(self.ops.len());
        for id in 0..self.ops.len() {
            let (value, ctx) = self.forward_op(id, &values, bindings)?;
            values.push(value);
            saved.push(ctx);
        }
        let outputs = self
            .outputs
            .iter()
            .map(|(name, node)| (name.clone(), values[node.0].clone()))
            .collect();
        self.tape = Some(Tape {
            values,
            saved,
            consumed: false,
        });
        Ok(outputs)
    }

    /// Forward value of any node from the last evaluation.
    pub fn value(&self, node: NodeId) -> Result<&Tensor<T>> {
        let tape = self.tape.as_ref().ok_or(Error::NotEvaluated)?;
        tape.values.get(node.0).ok_or(Error::UnknownNode(node.0))
    }

    /// Train-mode batch statistics recorded by a batch-norm node.
    pub fn batch_stats(&self, node: NodeId) -> Option<&BatchStats<T>> {
        match self.tape.as_ref()?.saved.get(node.0)? {
            Saved::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    fn forward_op(&self, id: usize, v: &[Tensor<T>], bindings: &Bindings<T>) -> Result<(Tensor<T>, Saved<T>)> {
        let plain = |t: Tensor<T>| Ok((t, Saved::None));
        match &self.ops[id] {
            Op::Input(name) => {
                let t = bindings.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
                plain(t.clone())
            }
            Op::Constant(t) => plain(t.clone()),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (&v[a.0], &v[b.0]);
                if a.shape() != b.shape() {
                    return Err(self.mismatch(id, shape_str(a.shape()), b.shape()));
                }
                let f: fn(T, T) -> T = match &self.ops[id] {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                plain(Tensor::from_parts(a.shape().to_vec(), data))
            }
            Op::Scale(a, factor) => plain(v[a.0].map(|x| x * *factor)),
            Op::AddChannel(x, bias) => {
                let (x, bias) = (&v[x.0], &v[bias.0]);
                let (batch, channels, spatial) =
                    channel_layout(x.shape()).ok_or_else(|| self.mismatch(id, "[B, C, ...]", x.shape()))?;
                if bias.shape() != [channels] {
                    return Err(self.mismatch(id, format!("[{channels}]"), bias.shape()));
                }
                let mut data = x.data().to_vec();
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * spatial;
                        data[off..off + spatial].iter_mut().for_each(|d| *d += bias.data()[c]);
                    }
                }
                plain(Tensor::from_parts(x.shape().to_vec(), data))
            }
            Op::MatMul(a, b) => {
                let (a, b) = (&v[a.0], &v[b.0]);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.mismatch(
                        id,
                        format!("[m, k] x [k, n] with lhs {:?}", a.shape()),
                        b.shape(),
                    ));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![T::zero(); m * n];
                kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut out);
                plain(Tensor::from_parts(vec![m, n], out))
            }
            Op::Transpose(a) => {
                let a = &v[a.0];
                if a.rank() != 2 {
                    return Err(self.mismatch(id, "rank 2", a.shape()));
                }
                plain(transpose2(a))
            }
            Op::Reshape(a, shape) => {
                let a = &v[a.0];
                let t = a.reshape(shape.clone()).map_err(|_| self.mismatch(id, shape_str(shape), a.shape()))?;
                plain(t.with_grad(false))
            }
            Op::SliceChannels { x, start, len } => {
                let x = &v[x.0];
                let (batch, channels, spatial) =
                    channel_layout(x.shape()).ok_or_else(|| self.mismatch(id, "[B, C, ...]", x.shape()))?;
                if *len == 0 || start + len > channels {
                    return Err(self.mismatch(id, format!("at least {} channels", start + len), x.shape()));
                }
                let mut data = Vec::with_capacity(batch * len * spatial);
                for b in 0..batch {
                    let off = (b * channels + start) * spatial;
                    data.extend_from_slice(&x.data()[off..off + len * spatial]);
                }
                let mut shape = x.shape().to_vec();
                shape[1] = *len;
                plain(Tensor::from_parts(shape, data))
            }
            Op::ConcatChannels(xs) => {
                let first = &v[xs[0].0];
                let (batch, _, spatial) =
                    channel_layout(first.shape()).ok_or_else(|| self.mismatch(id, "[B, C, ...]", first.shape()))?;
                let mut total = 0;
                for x in xs {
                    let s = v[x.0].shape();
                    if s.len() != first.rank() || s[0] != batch || s[2..] != first.shape()[2..] {
                        return Err(self.mismatch(id, shape_str(first.shape()), s));
                    }
                    total += s[1];
                }
                let mut data = Vec::with_capacity(batch * total * spatial);
                for b in 0..batch {
                    for x in xs {
                        let t = &v[x.0];
                        let c = t.shape()[1];
                        data.extend_from_slice(&t.data()[b * c * spatial..(b + 1) * c * spatial]);
                    }
                }
                let mut shape = first.shape().to_vec();
                shape[1] = total;
                plain(Tensor::from_parts(shape, data))
            }
            Op::Sum(a) => plain(Tensor::scalar(v[a.0].sum())),
            Op::Mean(a) => {
                let a = &v[a.0];
                plain(Tensor::scalar(a.sum() / T::of(a.numel() as f64)))
            }
            Op::Tanh(a) => plain(v[a.0].map(|x| x.tanh())),
            Op::Relu(a) => plain(v[a.0].map(|x| if x > T::zero() { x } else { T::zero() })),
            Op::Exp(a) => plain(v[a.0].map(|x| x.exp())),
            Op::Log(a) => plain(v[a.0].map(|x| x.ln())),
            Op::Conv2d {
                x,
                weight,
                stride,
                padding,
            } => {
                let (x, w) = (&v[x.0], &v[weight.0]);
                let (geo, out_channels) = self.conv_geometry(id, x.shape(), w.shape(), *stride, *padding)?;
                let (ho, wo) = geo.output_hw().expect("checked");
                let batch = x.shape()[0];
                let out = kernels::conv2d_forward(&geo, batch, out_channels, x.data(), w.data());
                plain(Tensor::from_parts(vec![batch, out_channels, ho, wo], out))
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                training,
            } => {
                let x = &v[x.0];
                let (batch, channels, spatial) =
                    channel_layout(x.shape()).ok_or_else(|| self.mismatch(id, "[B, C, ...]", x.shape()))?;
                for p in [gamma, beta, running_mean, running_var] {
                    if v[p.0].shape() != [channels] {
                        return Err(self.mismatch(id, format!("[{channels}] parameter"), v[p.0].shape()));
                    }
                }
                let (g, b) = (v[gamma.0].data(), v[beta.0].data());
                if *training {
                    if batch * spatial < 2 {
                        return Err(Error::BatchTooSmall(batch * spatial));
                    }
                    let (y, xhat, stats) = kernels::batch_norm_train(batch, channels, spatial, x.data(), g, b, *eps);
                    let var = stats.var.clone();
                    Ok((
                        Tensor::from_parts(x.shape().to_vec(), y),
                        Saved::BatchNorm {
                            xhat,
                            stats: Some(stats),
                            var,
                        },
                    ))
                } else {
                    let var = v[running_var.0].data();
                    let (y, xhat) = kernels::batch_norm_eval(
                        batch,
                        channels,
                        spatial,
                        x.data(),
                        g,
                        b,
                        v[running_mean.0].data(),
                        var,
                        *eps,
                    );
                    Ok((
                        Tensor::from_parts(x.shape().to_vec(), y),
                        Saved::BatchNorm {
                            xhat,
                            stats: None,
                            var: var.to_vec(),
                        },
                    ))
                }
            }
            Op::MaxPool2d {
                x,
                kernel,
                stride,
                padding,
            } => {
                let x = &v[x.0];
                if x.rank() != 4 {
                    return Err(self.mismatch(id, "[B, C, H, W]", x.shape()));
                }
                let s = x.shape();
                let geo = ConvGeometry {
                    in_channels: s[1],
                    height: s[2],
                    width: s[3],
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                let (ho, wo) = geo
                    .output_hw()
                    .ok_or_else(|| self.mismatch(id, format!("spatial >= {kernel}"), s))?;
                let (out, arg) = kernels::max_pool2d(s[0], s[1], &geo, x.data());
                Ok((Tensor::from_parts(vec![s[0], s[1], ho, wo], out), Saved::ArgMax(arg)))
            }
            Op::GlobalAvgPool(x) => {
                let x = &v[x.0];
                if x.rank() != 4 {
                    return Err(self.mismatch(id, "[B, C, H, W]", x.shape()));
                }
                let (batch, channels, spatial) = channel_layout(x.shape()).expect("rank 4");
                let inv = T::one() / T::of(spatial as f64);
                let data = x
                    .data()
                    .chunks(spatial)
                    .map(|c| c.iter().copied().sum::<T>() * inv)
                    .collect();
                plain(Tensor::from_parts(vec![batch, channels], data))
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let (logits, labels) = (&v[logits.0], &v[labels.0]);
                if logits.rank() != 2 || labels.shape() != [logits.shape()[0]] {
                    return Err(self.mismatch(id, format!("logits [B, K] and labels [B], labels {:?}", labels.shape()), logits.shape()));
                }
                let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
                let labels = label_indices(labels.data(), classes)?;
                let (loss, probs) = kernels::softmax_cross_entropy(batch, classes, logits.data(), &labels);
                Ok((Tensor::scalar(loss), Saved::Probs { probs, labels }))
            }
            Op::GroupBilinear { x, groups, encoding } => {
                let x = &v[x.0];
                let (batch, channels, spatial) =
                    channel_layout(x.shape()).ok_or_else(|| self.mismatch(id, "[B, N, ...]", x.shape()))?;
                if *groups == 0 || channels % groups != 0 {
                    return Err(self.mismatch(id, format!("channels divisible by {groups}"), x.shape()));
                }
                let size = channels / groups;
                if let Some(p) = encoding {
                    if p.shape() != [*groups, size] {
                        return Err(self.mismatch(id, format!("encoding [{groups}, {size}]"), p.shape()));
                    }
                }
                let out = kernels::group_bilinear_forward(
                    batch,
                    *groups,
                    size,
                    spatial,
                    x.data(),
                    encoding.as_ref().map(|p| p.data()),
                );
                let mut shape = x.shape().to_vec();
                shape[1] = size * size;
                plain(Tensor::from_parts(shape, out))
            }
            Op::ChannelInterpolate { x, target } => {
                let x = &v[x.0];
                let (batch, channels, spatial) =
                    channel_layout(x.shape()).ok_or_else(|| self.mismatch(id, "[B, M, ...]", x.shape()))?;
                if channels < 2 || *target < 2 {
                    return Err(self.mismatch(id, format!("at least 2 channels, target {target}"), x.shape()));
                }
                if channels == *target {
                    return plain(x.clone().with_grad(false));
                }
                let out = kernels::channel_interpolate_forward(batch, channels, *target, spatial, x.data());
                let mut shape = x.shape().to_vec();
                shape[1] = *target;
                plain(Tensor::from_parts(shape, out))
            }
            Op::GroupingLoss { x, groups, normalize } => {
                let x = &v[x.0];
                let (batch, channels, spatial) =
                    channel_layout(x.shape()).ok_or_else(|| self.mismatch(id, "[B, N, ...]", x.shape()))?;
                if *groups == 0 || channels % groups != 0 {
                    return Err(self.mismatch(id, format!("channels divisible by {groups}"), x.shape()));
                }
                let (intra, inter) =
                    kernels::grouping_loss_forward(batch, channels, spatial, *groups, *normalize, x.data());
                plain(Tensor::scalar(intra + inter))
            }
        }
    }

    fn conv_geometry(
        &self,
        id: usize,
        x: &[usize],
        w: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<(ConvGeometry, usize)> {
        if x.len() != 4 {
            return Err(self.mismatch(id, "input [B, C, H, W]", x));
        }
        if w.len() != 4 || w[2] != w[3] || w[1] != x[1] {
            return Err(self.mismatch(id, format!("weight [O, {}, k, k]", x[1]), w));
        }
        let geo = ConvGeometry {
            in_channels: x[1],
            height: x[2],
            width: x[3],
            kernel: w[2],
            stride,
            padding,
        };
        if geo.output_hw().is_none() {
            return Err(self.mismatch(id, format!("spatial size fitting a {}x{} kernel", w[2], w[3]), x));
        }
        Ok((geo, w[0]))
    }

    /// Reverse-mode gradients of a `[1]`-shaped node with respect to every
    /// bound input whose tensor has `requires_grad` set. Inputs that do not
    /// influence the output receive zeros. Consumes the tape.
    pub fn gradients(&mut self, output: NodeId) -> Result<HashMap<String, Tensor<T>>> {
        let tape = self.tape.as_mut().ok_or(Error::NotEvaluated)?;
        if tape.consumed {
            return Err(Error::TapeConsumed);
        }
        let out_shape = tape.values.get(output.0).ok_or(Error::UnknownNode(output.0))?.shape();
        if out_shape != [1] {
            return Err(Error::NonScalarSeed(out_shape.to_vec()));
        }
        tape.consumed = true;
        let saved = std::mem::take(&mut tape.saved);
        let tape = self.tape.as_ref().expect("present");
        let values = &tape.values;

        // Which nodes carry gradient: reachable from a requires_grad input.
        let mut live = vec![false; self.ops.len()];
        for (id, op) in self.ops.iter().enumerate() {
            live[id] = match op {
                Op::Input(_) => values[id].requires_grad(),
                Op::Constant(_) => false,
                _ => op.inputs().iter().any(|i| live[i.0]),
            };
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.ops.len()];
        grads[output.0] = Some(vec![T::one()]);
        for id in (0..=output.0).rev() {
            if !live[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Input(_) = self.ops[id] {
                grads[id] = Some(g);
                continue;
            }
            self.backward_op(id, &g, values, &saved[id], &live, &mut grads);
        }

        let mut result = HashMap::new();
        for (name, id) in &self.inputs {
            let value = &values[id.0];
            if !value.requires_grad() {
                continue;
            }
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); value.numel()]);
            result.insert(name.clone(), Tensor::from_parts(value.shape().to_vec(), g));
        }
        Ok(result)
    }

    fn backward_op(
        &self,
        id: usize,
        g: &[T],
        v: &[Tensor<T>],
        saved: &Saved<T>,
        live: &[bool],
        grads: &mut [Option<Vec<T>>],
    ) {
        let mut acc = |node: NodeId, delta: Vec<T>| {
            if !live[node.0] {
                return;
            }
            match &mut grads[node.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += *d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.ops[id] {
            Op::Input(_) | Op::Constant(_) => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v[a.0].data(), v[b.0].data());
                acc(*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
            }
            Op::Scale(a, factor) => acc(*a, g.iter().map(|&x| x * *factor).collect()),
            Op::AddChannel(x, bias) => {
                acc(*x, g.to_vec());
                if live[bias.0] {
                    let (batch, channels, spatial) = channel_layout(v[x.0].shape()).expect("checked");
                    let mut db = vec![T::zero(); channels];
                    for b in 0..batch {
                        for (c, d) in db.iter_mut().enumerate() {
                            let off = (b * channels + c) * spatial;
                            *d += g[off..off + spatial].iter().copied().sum::<T>();
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (&v[a.0], &v[b.0]);
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if live[a.0] {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, g, bt.data(), &mut da);
                    acc(*a, da);
                }
                if live[b.0] {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, at.data(), g, &mut db);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let s = v[id].shape();
                let gt = Tensor::from_parts(s.to_vec(), g.to_vec());
                acc(*a, transpose2(&gt).into_vec());
            }
            Op::Reshape(a, _) => acc(*a, g.to_vec()),
            Op::SliceChannels { x, start, len } => {
                let (batch, channels, spatial) = channel_layout(v[x.0].shape()).expect("checked");
                let mut dx = vec![T::zero(); batch * channels * spatial];
                for b in 0..batch {
                    let dst = (b * channels + start) * spatial;
                    dx[dst..dst + len * spatial].copy_from_slice(&g[b * len * spatial..(b + 1) * len * spatial]);
                }
                acc(*x, dx);
            }
            Op::ConcatChannels(xs) => {
                let (batch, total, spatial) = channel_layout(v[id].shape()).expect("checked");
                let mut offset = 0;
                for x in xs {
                    let c = v[x.0].shape()[1];
                    if live[x.0] {
                        let mut dx = Vec::with_capacity(batch * c * spatial);
                        for b in 0..batch {
                            let src = (b * total + offset) * spatial;
                            dx.extend_from_slice(&g[src..src + c * spatial]);
                        }
                        acc(*x, dx);
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => acc(*a, vec![g[0]; v[a.0].numel()]),
            Op::Mean(a) => {
                let n = v[a.0].numel();
                acc(*a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Tanh(a) => {
                let y = v[id].data();
                acc(*a, g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect());
            }
            Op::Relu(a) => {
                let x = v[a.0].data();
                acc(*a, g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect());
            }
            Op::Exp(a) => {
                let y = v[id].data();
                acc(*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect());
            }
            Op::Log(a) => {
                let x = v[a.0].data();
                acc(*a, g.iter().zip(x).map(|(&g, &x)| g / x).collect());
            }
            Op::Conv2d {
                x,
                weight,
                stride,
                padding,
            } => {
                let (xt, wt) = (&v[x.0], &v[weight.0]);
                let (geo, out_channels) = self
                    .conv_geometry(id, xt.shape(), wt.shape(), *stride, *padding)
                    .expect("validated in forward");
                let (dx, dw) = kernels::conv2d_backward(
                    &geo,
                    xt.shape()[0],
                    out_channels,
                    xt.data(),
                    wt.data(),
                    g,
                    live[x.0],
                    live[weight.0],
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*weight, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                training,
                ..
            } => {
                let Saved::BatchNorm { xhat, var, .. } = saved else {
                    unreachable!("batch norm saves its context")
                };
                let (batch, channels, spatial) = channel_layout(v[x.0].shape()).expect("checked");
                let gam = v[gamma.0].data();
                if *training {
                    let (dx, dgamma, dbeta) =
                        kernels::batch_norm_train_backward(batch, channels, spatial, xhat, gam, var, *eps, g);
                    acc(*x, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                } else {
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dgamma = vec![T::zero(); channels];
                    let mut dbeta = vec![T::zero(); channels];
                    for b in 0..batch {
                        for c in 0..channels {
                            let scale = gam[c] / (var[c] + *eps).sqrt();
                            let off = (b * channels + c) * spatial;
                            for i in off..off + spatial {
                                dx[i] = g[i] * scale;
                                dgamma[c] += g[i] * xhat[i];
                                dbeta[c] += g[i];
                            }
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
            }
            Op::MaxPool2d { x, .. } => {
                let Saved::ArgMax(arg) = saved else {
                    unreachable!("max pool saves argmax")
                };
                let mut dx = vec![T::zero(); v[x.0].numel()];
                for (&i, &gv) in arg.iter().zip(g) {
                    dx[i] += gv;
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, spatial) = channel_layout(v[x.0].shape()).expect("checked");
                let inv = T::one() / T::of(spatial as f64);
                let mut dx = Vec::with_capacity(v[x.0].numel());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * inv, spatial));
                }
                acc(*x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, .. } => {
                let Saved::Probs { probs, labels } = saved else {
                    unreachable!("softmax saves probabilities")
                };
                let (batch, classes) = (v[logits.0].shape()[0], v[logits.0].shape()[1]);
                let scale = g[0] / T::of(batch as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * classes + l] -= scale;
                }
                acc(*logits, d);
            }
            Op::GroupBilinear { x, groups, encoding } => {
                let xt = &v[x.0];
                let (batch, channels, spatial) = channel_layout(xt.shape()).expect("checked");
                let dx = kernels::group_bilinear_backward(
                    batch,
                    *groups,
                    channels / groups,
                    spatial,
                    xt.data(),
                    encoding.as_ref().map(|p| p.data()),
                    g,
                );
                acc(*x, dx);
            }
            Op::ChannelInterpolate { x, target } => {
                let (batch, channels, spatial) = channel_layout(v[x.0].shape()).expect("checked");
                if channels == *target {
                    acc(*x, g.to_vec());
                } else {
                    acc(*x, kernels::channel_interpolate_backward(batch, channels, *target, spatial, g));
                }
            }
            Op::GroupingLoss { x, groups, normalize } => {
                let xt = &v[x.0];
                let (batch, channels, spatial) = channel_layout(xt.shape()).expect("checked");
                acc(
                    *x,
                    kernels::grouping_loss_backward(batch, channels, spatial, *groups, *normalize, xt.data(), g[0]),
                );
            }
        }
    }
}

fn transpose2<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

pub(crate) fn label_indices<T: Element>(labels: &[T], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            let f = l.as_f64();
            if f < 0.0 || f.fract() != 0.0 || f as usize >= classes {
                Err(Error::LabelOutOfRange {
                    label: f.max(0.0) as usize,
                    classes,
                })
            } else {
                Ok(f as usize)
            }
        })
        .collect()
}
