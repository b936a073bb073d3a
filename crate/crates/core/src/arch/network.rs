use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::cost::needs_projection;
use super::ArchDescriptor;
use crate::dbt::{bilinear_bn_name, record_dbt_branch, DbtConfig, DbtNodes};
use crate::error::{Error, Result};
use crate::nn::record::{record_batch_norm, record_conv, weight_name};
use crate::nn::{blend, kaiming_normal, BN_EPS, BN_MOMENTUM};
use crate::tensor::{Bindings, Element, Graph, NodeId, Tensor};

pub const FC_WEIGHT: &str = "fc.weight";
pub const FC_BIAS: &str = "fc.bias";

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Kaiming,
    Classifier,
    Const(f64),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_spec(specs: &mut Vec<ParamSpec>, layer: &str, out: usize, inp: usize, k: usize) {
    specs.push(ParamSpec {
        name: weight_name(layer),
        shape: vec![out, inp, k, k],
        init: Init::Kaiming,
    });
}

fn bn_spec(specs: &mut Vec<ParamSpec>, layer: &str, channels: usize, gamma: f64) {
    for (field, init) in [
        ("gamma", Init::Const(gamma)),
        ("beta", Init::Const(0.0)),
        ("running_mean", Init::Const(0.0)),
        ("running_var", Init::Const(1.0)),
    ] {
        specs.push(ParamSpec {
            name: format!("{layer}.{field}"),
            shape: vec![channels],
            init,
        });
    }
}

/// Parameter layout of a descriptor, in initialisation order. DBT batch
/// norms draw no random numbers, so a DBT network and its plain
/// counterpart built from one seed share every common tensor.
fn param_specs(d: &ArchDescriptor) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let s = &d.stem;
    conv_spec(&mut specs, "stem.conv", s.out_channels, s.in_channels, s.kernel);
    bn_spec(&mut specs, "stem.bn", s.out_channels, 1.0);
    let mut in_ch = s.out_channels;
    for st in &d.stages {
        let [c0, c1, c2] = st.channels;
        for b in 0..st.repeats {
            let p = format!("{}.{b}", st.name);
            conv_spec(&mut specs, &format!("{p}.conv1"), c0, in_ch, 1);
            bn_spec(&mut specs, &format!("{p}.bn1"), c0, 1.0);
            if st.dbt_for_block(b).is_some() {
                bn_spec(&mut specs, &bilinear_bn_name(&p), c0, 0.0);
            }
            conv_spec(&mut specs, &format!("{p}.conv2"), c1, c0, 3);
            bn_spec(&mut specs, &format!("{p}.bn2"), c1, 1.0);
            conv_spec(&mut specs, &format!("{p}.conv3"), c2, c1, 1);
            bn_spec(&mut specs, &format!("{p}.bn3"), c2, 1.0);
            if needs_projection(st, b, in_ch) {
                conv_spec(&mut specs, &format!("{p}.downsample.conv"), c2, in_ch, 1);
                bn_spec(&mut specs, &format!("{p}.downsample.bn"), c2, 1.0);
            }
            in_ch = c2;
        }
    }
    specs.push(ParamSpec {
        name: FC_WEIGHT.into(),
        shape: vec![in_ch, d.head.classes],
        init: Init::Classifier,
    });
    specs.push(ParamSpec {
        name: FC_BIAS.into(),
        shape: vec![d.head.classes],
        init: Init::Const(0.0),
    });
    specs
}

/// Running statistics are state, not learnable parameters.
pub fn is_learnable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// Graph handles of one DBT block inside a network.
#[derive(Clone, Debug)]
pub struct DbtBlockHandle {
    /// `{stage}.{index}`.
    pub prefix: String,
    pub stage: String,
    pub config: DbtConfig,
    pub nodes: DbtNodes,
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub logits: NodeId,
    /// Output of the stem and of every residual block, in order.
    pub blocks: Vec<(String, NodeId)>,
    /// Batch norm layer names and their nodes.
    pub batch_norms: Vec<(String, NodeId)>,
    pub dbt_blocks: Vec<DbtBlockHandle>,
}

/// A residual network built from a descriptor, holding every parameter and
/// running statistic by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Element = f32> {
    descriptor: ArchDescriptor,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Network<T> {
    /// Kaiming-normal convolutions, `N(0, 1/fan_in)` classifier, zero bias,
    /// unit batch-norm scale except the DBT-branch scale, which starts at 0.
    pub fn build(d: &ArchDescriptor, classes: usize, seed: u64) -> Result<Self> {
        let mut d = d.clone();
        d.head.classes = classes;
        d.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for spec in param_specs(&d) {
            let t = match spec.init {
                Init::Kaiming => kaiming_normal(spec.shape.clone(), &mut rng),
                Init::Classifier => {
                    let normal = Normal::new(0.0, 1.0 / (spec.shape[0] as f64).sqrt()).expect("positive std");
                    let n = spec.shape.iter().product();
                    Tensor::from_vec(spec.shape.clone(), (0..n).map(|_| T::of(normal.sample(&mut rng))).collect())?
                }
                Init::Const(v) => Tensor::full(spec.shape.clone(), T::of(v)),
            };
            params.insert(spec.name, t);
        }
        Ok(Network { descriptor: d, params })
    }

    /// Wraps loaded tensors, checking names and shapes against the layout.
    pub fn from_params(d: &ArchDescriptor, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        d.validate()?;
        let expected: BTreeMap<String, Vec<usize>> = param_specs(d).into_iter().map(|s| (s.name, s.shape)).collect();
        let mut diffs = Vec::new();
        for (name, shape) in &expected {
            match params.get(name) {
                None => diffs.push(format!("missing {name} {shape:?}")),
                Some(t) if t.shape() != shape.as_slice() => {
                    diffs.push(format!("{name}: expected {shape:?}, found {:?}", t.shape()))
                }
                _ => {}
            }
        }
        diffs.extend(params.keys().filter(|n| !expected.contains_key(*n)).map(|n| format!("unexpected {n}")));
        if !diffs.is_empty() {
            return Err(Error::CheckpointMismatch(diffs.join("; ")));
        }
        Ok(Network {
            descriptor: d.clone(),
            params,
        })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    pub fn classes(&self) -> usize {
        self.descriptor.head.classes
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> u64 {
        self.params
            .iter()
            .filter(|(n, _)| is_learnable(n))
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    /// Binds every tensor by name; learnable ones get `requires_grad`.
    pub fn bind(&self, bindings: &mut Bindings<T>, requires_grad: bool) {
        for (name, t) in &self.params {
            bindings.insert(name.clone(), t.clone().with_grad(requires_grad && is_learnable(name)));
        }
    }

    /// Records the forward pass on `x: [B, 3, S, S]`.
    pub fn record(&self, g: &mut Graph<T>, x: NodeId, training: bool) -> Result<ForwardNodes> {
        let d = &self.descriptor;
        let mut bns = Vec::new();
        let bn = |g: &mut Graph<T>, bns: &mut Vec<(String, NodeId)>, x: NodeId, layer: String| {
            let node = record_batch_norm(g, x, &layer, BN_EPS, training);
            bns.push((layer, node));
            node
        };
        let s = &d.stem;
        let mut h = record_conv(g, x, "stem.conv", s.stride, s.kernel / 2);
        h = bn(g, &mut bns, h, "stem.bn".into());
        h = g.relu(h);
        if s.max_pool {
            h = g.max_pool2d(h, 3, 2, 1);
        }
        let mut blocks = vec![("stem".to_string(), h)];
        let mut dbt_blocks = Vec::new();
        let mut in_ch = s.out_channels;
        for st in &d.stages {
            for b in 0..st.repeats {
                let p = format!("{}.{b}", st.name);
                let stride = if b == 0 { st.stride } else { 1 };
                let mut y = record_conv(g, h, &format!("{p}.conv1"), stride, 0);
                let bn1 = bn(g, &mut bns, y, format!("{p}.bn1"));
                y = g.relu(bn1);
                if let Some(cfg) = st.dbt_for_block(b) {
                    let sg_output = y;
                    let (out, gl, dbt_bn) = record_dbt_branch(g, sg_output, &p, cfg, training)?;
                    bns.push((bilinear_bn_name(&p), dbt_bn));
                    dbt_blocks.push(DbtBlockHandle {
                        prefix: p.clone(),
                        stage: st.name.clone(),
                        config: cfg.clone(),
                        nodes: DbtNodes {
                            sg_output,
                            output: out,
                            grouping_loss: gl,
                            sg_bn: bn1,
                            bilinear_bn: dbt_bn,
                        },
                    });
                    y = out;
                }
                y = record_conv(g, y, &format!("{p}.conv2"), 1, 1);
                y = bn(g, &mut bns, y, format!("{p}.bn2"));
                y = g.relu(y);
                y = record_conv(g, y, &format!("{p}.conv3"), 1, 0);
                y = bn(g, &mut bns, y, format!("{p}.bn3"));
                let shortcut = if needs_projection(st, b, in_ch) {
                    let sc = record_conv(g, h, &format!("{p}.downsample.conv"), stride, 0);
                    bn(g, &mut bns, sc, format!("{p}.downsample.bn"))
                } else {
                    h
                };
                let sum = g.add(y, shortcut);
                h = g.relu(sum);
                blocks.push((p, h));
                in_ch = st.channels[2];
            }
        }
        let pooled = g.global_avg_pool(h);
        let w = g.input(FC_WEIGHT);
        let bias = g.input(FC_BIAS);
        let logits = g.matmul(pooled, w);
        let logits = g.add_channel(logits, bias);
        Ok(ForwardNodes {
            logits,
            blocks,
            batch_norms: bns,
            dbt_blocks,
        })
    }

    /// Folds the batch statistics of an evaluated train-mode graph into the
    /// running estimates.
    pub fn update_running_stats(&mut self, g: &Graph<T>, nodes: &ForwardNodes) -> Result<()> {
        for (layer, node) in &nodes.batch_norms {
            let stats = g
                .batch_stats(*node)
                .ok_or_else(|| Error::Config(format!("{layer} has no batch statistics; was the graph in train mode?")))?;
            for (field, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let key = format!("{layer}.{field}");
                let old = &self.params[&key];
                let new = blend(old, batch, BN_MOMENTUM);
                self.params.insert(key, new);
            }
        }
        Ok(())
    }

    /// Eval-mode forward pass returning logits `[B, classes]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, false)?.logits)
    }

    /// Forward pass without touching running statistics; also returns the
    /// grouped feature of every DBT block.
    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new();
        let input = g.input("x");
        let nodes = self.record(&mut g, input, training)?;
        let mut bindings = Bindings::new();
        self.bind(&mut bindings, false);
        bindings.insert("x".into(), x.clone());
        g.evaluate(&bindings)?;
        let mut sg_outputs = Vec::new();
        for b in &nodes.dbt_blocks {
            sg_outputs.push((b.prefix.clone(), g.value(b.nodes.sg_output)?.clone()));
        }
        Ok(ForwardOutput {
            logits: g.value(nodes.logits)?.clone(),
            sg_outputs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Element = f32> {
    pub logits: Tensor<T>,
    /// `(block prefix, grouped feature)` per DBT block.
    pub sg_outputs: Vec<(String, Tensor<T>)>,
}

/// Builds a network from a descriptor with `classes` outputs, deterministic
/// from `seed`.
pub fn build_network(d: &ArchDescriptor, classes: usize, seed: u64) -> Result<Network<f32>> {
    Network::build(d, classes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{count_params, preset};
    use rand::Rng;

    fn image(batch: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * 3 * size * size;
        Tensor::from_vec([batch, 3, size, size], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let d = preset("dbtnet-tiny").unwrap();
        let a = build_network(&d, 8, 11).unwrap();
        assert_eq!(a, build_network(&d, 8, 11).unwrap());
        assert_ne!(a, build_network(&d, 8, 12).unwrap());
    }

    #[test]
    fn counter_matches_built_tensors() {
        for name in ["dbtnet-tiny", "plain-tiny", "resnet-50", "dbtnet-50"] {
            let d = preset(name).unwrap();
            let net = Network::<f32>::build(&d, d.head.classes, 0).unwrap();
            assert_eq!(net.learnable_count(), count_params(&d).unwrap(), "{name}");
        }
    }

    #[test]
    fn fresh_dbt_equals_plain_counterpart() {
        let d = preset("dbtnet-tiny").unwrap();
        let dbt = build_network(&d, 8, 3).unwrap();
        let plain_d = d.plain_counterpart();
        let mut plain = build_network(&plain_d, 8, 99).unwrap();
        for (name, t) in plain.params_mut().iter_mut() {
            *t = dbt.params()[name].clone();
        }
        let x = image(2, 32, 1);
        for training in [false, true] {
            let a = dbt.forward(&x, training).unwrap().logits;
            let b = plain.forward(&x, training).unwrap().logits;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn running_stats_update_and_logit_shape() {
        let d = preset("dbtnet-tiny").unwrap();
        let mut net = build_network(&d, 8, 3).unwrap();
        let mut g = Graph::new();
        let x = g.input("x");
        let nodes = net.record(&mut g, x, true).unwrap();
        assert_eq!(nodes.dbt_blocks.len(), 4);
        let mut b = Bindings::new();
        net.bind(&mut b, true);
        b.insert("x".into(), image(2, 32, 2));
        g.evaluate(&b).unwrap();
        assert_eq!(g.value(nodes.logits).unwrap().shape(), &[2, 8]);
        net.update_running_stats(&g, &nodes).unwrap();
        assert!(net.params()["stem.bn.running_mean"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn loading_reports_named_differences() {
        let d = preset("dbtnet-tiny").unwrap();
        let net = build_network(&d, 8, 3).unwrap();
        let mut params = net.params().clone();
        params.insert("fc.bias".into(), Tensor::zeros([9]));
        params.remove("IV.0.dbt_bn.gamma");
        let err = Network::from_params(&d, params).unwrap_err().to_string();
        assert!(err.contains("fc.bias") && err.contains("IV.0.dbt_bn.gamma"), "{err}");
    }
}
