use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::TrainConfig;
use crate::arch::{ForwardNodes, Network};
use crate::data::{batch, split, Sample};
use crate::error::{Error, Result};
use crate::nn::SgdCosine;
use crate::tensor::{Bindings, Graph, NodeId, Tensor};

pub const METRICS_HEADER: &str = "epoch,l_c,sum_l_g,lr,train_acc,test_acc";
pub const EVAL_BATCH: usize = 64;

/// Classification metrics of a model over a sample set, in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_l_c: f64,
    /// Mean grouping loss per DBT block, by block prefix.
    pub mean_l_g: Vec<(String, f64)>,
}

impl EvalMetrics {
    pub fn sum_l_g(&self) -> f64 {
        self.mean_l_g.iter().map(|(_, v)| v).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch classification loss over the epoch.
    pub l_c: f64,
    /// Mean minibatch sum of block grouping losses over the epoch.
    pub sum_l_g: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.6},{:.6}",
            self.epoch, self.l_c, self.sum_l_g, self.lr, self.train_acc, self.test_acc
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    /// Train-split metrics of the freshly initialised model.
    pub initial: EvalMetrics,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
}

fn label_tensor(labels: &[usize]) -> Tensor<f32> {
    Tensor::from_vec([labels.len()], labels.iter().map(|&l| l as f32).collect()).expect("non-empty batch")
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Recorded {
    graph: Graph<f32>,
    nodes: ForwardNodes,
    ce: NodeId,
    total: NodeId,
}

fn record(net: &Network<f32>, training: bool) -> Result<Recorded> {
    let mut graph = Graph::new();
    let x = graph.input("x");
    let nodes = net.record(&mut graph, x, training)?;
    let labels = graph.input("labels");
    let ce = graph.softmax_cross_entropy(nodes.logits, labels);
    let mut total = ce;
    for b in &nodes.dbt_blocks {
        let w = b.config.grouping_loss_weight;
        if w > 0.0 {
            let scaled = graph.scale(b.nodes.grouping_loss, w as f32);
            total = graph.add(total, scaled);
        }
    }
    Ok(Recorded {
        graph,
        nodes,
        ce,
        total,
    })
}

fn bindings(net: &Network<f32>, x: Tensor<f32>, labels: &[usize], requires_grad: bool) -> Bindings<f32> {
    let mut b = Bindings::new();
    net.bind(&mut b, requires_grad);
    b.insert("x".into(), x);
    b.insert("labels".into(), label_tensor(labels));
    b
}

fn scalar(g: &Graph<f32>, node: NodeId) -> Result<f64> {
    Ok(g.value(node)?.data()[0] as f64)
}

/// Accuracy, mean classification loss and per-block grouping losses with
/// batch norm in eval mode.
pub fn evaluate_model(net: &Network<f32>, samples: &[Sample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty set".into()));
    }
    let mut rec = record(net, false)?;
    let all: Vec<usize> = (0..samples.len()).collect();
    let (mut correct, mut l_c) = (0usize, 0.0f64);
    let mut l_g = vec![0.0f64; rec.nodes.dbt_blocks.len()];
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, labels) = batch(samples, chunk)?;
        rec.graph.evaluate(&bindings(net, x, &labels, false))?;
        let logits = rec.graph.value(rec.nodes.logits)?;
        let k = logits.shape()[1];
        correct += logits
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        let n = chunk.len() as f64;
        l_c += scalar(&rec.graph, rec.ce)? * n;
        for (acc, b) in l_g.iter_mut().zip(&rec.nodes.dbt_blocks) {
            *acc += scalar(&rec.graph, b.nodes.grouping_loss)? * n;
        }
    }
    let n = samples.len() as f64;
    Ok(EvalMetrics {
        samples: samples.len(),
        accuracy: correct as f64 / n,
        mean_l_c: l_c / n,
        mean_l_g: rec
            .nodes
            .dbt_blocks
            .iter()
            .zip(l_g)
            .map(|(b, v)| (b.prefix.clone(), v / n))
            .collect(),
    })
}

/// Names the first block whose output went non-finite.
fn locate_non_finite(g: &Graph<f32>, nodes: &ForwardNodes) -> String {
    for (name, node) in &nodes.blocks {
        if g.value(*node).map(|t| !t.all_finite()).unwrap_or(false) {
            return format!("block {name}");
        }
    }
    for b in &nodes.dbt_blocks {
        if g.value(b.nodes.grouping_loss).map(|t| !t.all_finite()).unwrap_or(false) {
            return format!("grouping loss of block {}", b.prefix);
        }
    }
    "classifier head".into()
}

/// Train and test splits plus the class count.
pub fn prepare_data(cfg: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>, usize)> {
    let (data, classes) = cfg.load_data()?;
    let (train, test) = split(&data, cfg.train_fraction, cfg.seed)?;
    Ok((train, test, classes))
}

/// Loads `cfg.checkpoint_path()` into the configured architecture.
pub fn load_network(cfg: &TrainConfig, classes: usize) -> Result<Network<f32>> {
    let mut d = cfg.descriptor()?;
    d.head.classes = classes;
    Network::from_params(&d, load_checkpoint(&cfg.checkpoint_path())?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Optimises `L_c + Σ_b λ_b L_g^(b)` with cosine-scheduled SGD.
///
/// Writes to `cfg.output_dir`: the resolved `config.toml` and `arch.toml`,
/// `initial.dbtc`, `metrics.csv` with one row per epoch, and after at least
/// one epoch `final.dbtc` and `best.dbtc` (highest test accuracy).
pub fn train(cfg: &TrainConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (train_set, test_set, classes) = prepare_data(cfg)?;
    let mut desc = cfg.descriptor()?;
    desc.head.classes = classes;
    write_text(&dir.join("config.toml"), &cfg.to_toml_string())?;
    write_text(&dir.join("arch.toml"), &desc.to_toml_string())?;

    let mut net = Network::<f32>::build(&desc, classes, cfg.seed)?;
    save_checkpoint(&dir.join("initial.dbtc"), net.params())?;
    let initial = evaluate_model(&net, &train_set)?;

    let metrics_path = dir.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let steps_per_epoch = train_set.len() / cfg.batch_size;
    if cfg.epochs > 0 && steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} training samples cannot fill a batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let mut summary = RunSummary {
        dir: dir.clone(),
        initial,
        epochs: Vec::new(),
        best_epoch: None,
    };
    if cfg.epochs == 0 {
        return Ok(summary);
    }

    let mut opt = SgdCosine::new(cfg.optimizer.schedule(cfg.epochs * steps_per_epoch))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut rec = record(&net, true)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best_acc = f64::NEG_INFINITY;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<Vec<usize>> = order
            .chunks_exact(cfg.batch_size)
            .map(|c| c.to_vec())
            .collect();
        let (mut l_c, mut l_g, mut lr) = (0.0, 0.0, 0.0);
        let mut step_fn = |i: usize, x: Tensor<f32>, labels: Vec<usize>| -> Result<()> {
            let step = (epoch - 1) * steps_per_epoch + i;
            rec.graph.evaluate(&bindings(&net, x, &labels, true))?;
            let loss = scalar(&rec.graph, rec.total)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch} step {i}; first non-finite value in {}",
                    locate_non_finite(&rec.graph, &rec.nodes)
                )));
            }
            l_c += scalar(&rec.graph, rec.ce)?;
            for b in &rec.nodes.dbt_blocks {
                l_g += scalar(&rec.graph, b.nodes.grouping_loss)?;
            }
            net.update_running_stats(&rec.graph, &rec.nodes)?;
            let grads = rec.graph.gradients(rec.total)?;
            lr = opt.step(net.params_mut(), &grads, step)?;
            Ok(())
        };
        if cfg.deterministic {
            for (i, idx) in batches.iter().enumerate() {
                let (x, labels) = batch(&train_set, idx)?;
                step_fn(i, x, labels)?;
            }
        } else {
            // Batch assembly runs one step ahead on a second thread.
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = sync_channel(2);
                let data = &train_set;
                let batches = &batches;
                s.spawn(move || {
                    for idx in batches {
                        if tx.send(batch(data, idx)).is_err() {
                            break;
                        }
                    }
                });
                for (i, item) in rx.iter().enumerate() {
                    let (x, labels) = item?;
                    step_fn(i, x, labels)?;
                }
                Ok(())
            })?;
        }
        let steps = batches.len() as f64;
        let train_acc = evaluate_model(&net, &train_set)?.accuracy;
        let test_acc = evaluate_model(&net, &test_set)?.accuracy;
        let row = EpochMetrics {
            epoch,
            l_c: l_c / steps,
            sum_l_g: l_g / steps,
            lr,
            train_acc,
            test_acc,
        };
        writeln!(metrics, "{}", row.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        if test_acc > best_acc {
            best_acc = test_acc;
            summary.best_epoch = Some(epoch);
            save_checkpoint(&dir.join("best.dbtc"), net.params())?;
        }
        summary.epochs.push(row);
    }
    save_checkpoint(&dir.join("final.dbtc"), net.params())?;
    Ok(summary)
}

/// Parses a metrics file written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Parse(format!("{}: missing metrics header", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad metrics row {line:?}")))
            };
            Ok(EpochMetrics {
                epoch: num(0)? as usize,
                l_c: num(1)?,
                sum_l_g: num(2)?,
                lr: num(3)?,
                train_acc: num(4)?,
                test_acc: num(5)?,
            })
        })
        .collect()
}

/// Human-readable summary of an evaluation.
pub fn format_eval(name: &str, m: &EvalMetrics) -> String {
    let mut out = format!(
        "{name}: samples={} accuracy={:.4} mean_l_c={:.6} sum_l_g={:.6}",
        m.samples,
        m.accuracy,
        m.mean_l_c,
        m.sum_l_g()
    );
    for (block, v) in &m.mean_l_g {
        write!(out, " l_g[{block}]={v:.6}").expect("string write");
    }
    out
}
