//! Finite-difference checks of every differentiable op at 64-bit.

mod support;

use dbtnet::dbt::{record_dbt_block, DbtBlockParams, DbtConfig};
use dbtnet::tensor::{finite_difference_check, Bindings};
use dbtnet::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{random, EPS, TOL};

#[test]
fn conv2d() {
    let err = support::conv2d();
    assert!(err < TOL, "{err}");
}

#[test]
fn batch_norm_train_and_eval() {
    let err = support::batch_norm_train_and_eval();
    assert!(err < TOL, "{err}");
}

#[test]
fn group_bilinear_with_and_without_encoding() {
    let err = support::group_bilinear_with_and_without_encoding();
    assert!(err < TOL, "{err}");
}

#[test]
fn channel_interpolate() {
    let err = support::channel_interpolate();
    assert!(err < TOL, "{err}");
}

#[test]
fn grouping_loss() {
    let err = support::grouping_loss();
    assert!(err < TOL, "{err}");
}

#[test]
fn softmax_cross_entropy() {
    let err = support::softmax_cross_entropy();
    assert!(err < TOL, "{err}");
}

#[test]
fn pooling_and_elementwise() {
    let err = support::pooling_and_elementwise();
    assert!(err < TOL, "{err}");
}

#[test]
fn full_dbt_block() {
    let err = support::full_dbt_block();
    assert!(err < TOL, "{err}");
}

/// The gradient of `L_c + λ L_g` is the gradient of `L_c` plus `λ` times
/// the gradient of `L_g`.
#[test]
fn total_loss_gradient_composes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = DbtConfig::new(16, 4);
    let mut params = DbtBlockParams::<f64>::init(4, &cfg, 1, &mut rng).unwrap();
    params.bilinear_bn.gamma = random(&[16], &mut rng);
    let mut point = Bindings::new();
    params.bind("b", &mut point, true);
    point.insert("x".into(), random(&[2, 4, 3, 3], &mut rng).with_grad(true));
    point.insert("w".into(), random(&[16, 3], &mut rng).with_grad(true));
    point.insert("labels".into(), Tensor::from_vec([2], vec![1.0, 2.0]).unwrap());

    let grads = |lambda: Option<f64>, with_ce: bool| {
        let mut g = Graph::new();
        let x = g.input("x");
        let nodes = record_dbt_block(&mut g, x, "b", &cfg, 1, true).unwrap();
        let pooled = g.global_avg_pool(nodes.output);
        let w = g.input("w");
        let logits = g.matmul(pooled, w);
        let labels = g.input("labels");
        let ce = g.softmax_cross_entropy(logits, labels);
        let out = match (with_ce, lambda) {
            (true, Some(l)) => {
                let s = g.scale(nodes.grouping_loss, l);
                g.add(ce, s)
            }
            (true, None) => ce,
            (false, _) => nodes.grouping_loss,
        };
        assert!(finite_difference_check(&mut g, out, &point, EPS).unwrap() < TOL);
        g.evaluate(&point).unwrap();
        g.gradients(out).unwrap()
    };
    let ce_only = grads(None, true);
    let gl_only = grads(None, false);
    for lambda in [0.0, 1.0] {
        let total = grads(Some(lambda), true);
        for (name, t) in &total {
            let expect: Vec<f64> = ce_only[name]
                .data()
                .iter()
                .zip(gl_only[name].data())
                .map(|(a, b)| a + lambda * b)
                .collect();
            let diff = t.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "{name}: {diff}");
        }
    }
}
