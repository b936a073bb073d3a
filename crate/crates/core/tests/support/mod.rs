#![allow(dead_code)]

//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance run. Each returns its worst relative error.

use dbtnet::dbt::{group_index_encoding, record_dbt_block, DbtBlockParams, DbtConfig};
use dbtnet::nn::NormMode;
use dbtnet::tensor::{finite_difference_check, Bindings};
use dbtnet::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-5;
pub const EPS: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: NodeId, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
    let r = g.constant(random(shape, rng));
    let m = g.mul(y, r);
    g.sum(m)
}

fn check(g: &mut Graph<f64>, out: NodeId, point: &Bindings<f64>) -> f64 {
    finite_difference_check(g, out, point, EPS).unwrap()
}

pub fn bind(pairs: Vec<(&str, Tensor<f64>)>) -> Bindings<f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v.with_grad(true))).collect()
}

pub fn conv2d() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.input("w");
    let y = g.conv2d(x, w, 2, 1);
    let out = project(&mut g, y, &[2, 4, 2, 2], &mut rng);
    let p = bind(vec![("x", random(&[2, 3, 4, 4], &mut rng)), ("w", random(&[4, 3, 3, 3], &mut rng))]);
    worst = worst.max(check(&mut g, out, &p));

    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.input("w");
    let y = g.conv2d(x, w, 1, 0);
    let out = project(&mut g, y, &[2, 5, 4, 4], &mut rng);
    let p = bind(vec![("x", random(&[2, 16, 4, 4], &mut rng)), ("w", random(&[5, 16, 1, 1], &mut rng))]);
    worst = worst.max(check(&mut g, out, &p));
    worst
}

pub fn batch_norm_train_and_eval() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for training in [true, false] {
        let mut g = Graph::new();
        let x = g.input("x");
        let gamma = g.input("gamma");
        let beta = g.input("beta");
        let mean = g.input("mean");
        let var = g.input("var");
        let y = g.batch_norm(x, gamma, beta, mean, var, 1e-5, training);
        let out = project(&mut g, y, &[2, 6, 3, 3], &mut rng);
        let mut p = bind(vec![
            ("x", random(&[2, 6, 3, 3], &mut rng)),
            ("gamma", random(&[6], &mut rng)),
            ("beta", random(&[6], &mut rng)),
        ]);
        p.insert("mean".into(), random(&[6], &mut rng));
        p.insert("var".into(), Tensor::full([6], 0.7));
        worst = worst.max(check(&mut g, out, &p));
    }
    worst
}

pub fn group_bilinear_with_and_without_encoding() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for use_encoding in [false, true] {
        let cfg = DbtConfig {
            use_encoding,
            ..DbtConfig::new(16, 4)
        };
        let enc = use_encoding.then(|| group_index_encoding(&cfg).unwrap().as_tensor::<f64>());
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.group_bilinear(x, 4, enc);
        let out = project(&mut g, y, &[2, 16, 4, 4], &mut rng);
        worst = worst.max(check(&mut g, out, &bind(vec![("x", random(&[2, 16, 4, 4], &mut rng))])));
    }
    worst
}

pub fn channel_interpolate() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (from, to) in [(16, 8), (4, 7)] {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.channel_interpolate(x, to);
        let out = project(&mut g, y, &[2, to, 3, 3], &mut rng);
        worst = worst.max(check(&mut g, out, &bind(vec![("x", random(&[2, from, 3, 3], &mut rng))])));
    }
    worst
}

pub fn grouping_loss() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for normalize in [false, true] {
        let mut g = Graph::new();
        let x = g.input("x");
        let out = g.grouping_loss(x, 4, normalize);
        worst = worst.max(check(&mut g, out, &bind(vec![("x", random(&[2, 16, 4, 4], &mut rng))])));
    }
    worst
}

pub fn softmax_cross_entropy() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let logits = g.input("logits");
    let labels = g.input("labels");
    let out = g.softmax_cross_entropy(logits, labels);
    let mut p = bind(vec![("logits", random(&[4, 5], &mut rng))]);
    p.insert("labels".into(), Tensor::from_vec([4], vec![0.0, 4.0, 2.0, 2.0]).unwrap());
    worst = worst.max(check(&mut g, out, &p));
    worst
}

pub fn pooling_and_elementwise() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.input("w");
    let b = g.input("b");
    let p = g.max_pool2d(x, 3, 2, 1);
    let t = g.tanh(p);
    let r = g.relu(t);
    let pooled = g.global_avg_pool(r);
    let h = g.matmul(pooled, w);
    let h = g.add_channel(h, b);
    let e = g.exp(h);
    let s = g.scale(e, 0.5);
    let out = project(&mut g, s, &[2, 3], &mut rng);
    let point = bind(vec![
        ("x", random(&[2, 4, 4, 4], &mut rng)),
        ("w", random(&[4, 3], &mut rng)),
        ("b", random(&[3], &mut rng)),
    ]);
    worst = worst.max(check(&mut g, out, &point));
    worst
}

pub fn full_dbt_block() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (cfg, c_in) in [(DbtConfig::new(16, 4), 8), (DbtConfig::new(8, 2), 4)] {
        let mut params = DbtBlockParams::<f64>::init(c_in, &cfg, 1, &mut rng).unwrap();
        // A non-zero branch scale so the bilinear path contributes.
        params.bilinear_bn.gamma = random(&[cfg.channels], &mut rng);
        params.set_mode(NormMode::Train);
        let mut g = Graph::new();
        let x = g.input("x");
        let nodes = record_dbt_block(&mut g, x, "b", &cfg, 1, true).unwrap();
        let y = project(&mut g, nodes.output, &[2, cfg.channels, 4, 4], &mut rng);
        let gl = g.scale(nodes.grouping_loss, 0.1);
        let out = g.add(y, gl);
        let mut point = Bindings::new();
        params.bind("b", &mut point, true);
        point.insert("x".into(), random(&[2, c_in, 4, 4], &mut rng).with_grad(true));
        worst = worst.max(check(&mut g, out, &point));
    }
    worst
}

/// Every case by name.
pub type Case = (&'static str, fn() -> f64);

pub const CASES: &[Case] = &[
    ("conv2d", conv2d),
    ("batch_norm_train_and_eval", batch_norm_train_and_eval),
    ("group_bilinear_with_and_without_encoding", group_bilinear_with_and_without_encoding),
    ("channel_interpolate", channel_interpolate),
    ("grouping_loss", grouping_loss),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("pooling_and_elementwise", pooling_and_elementwise),
    ("full_dbt_block", full_dbt_block),
];
