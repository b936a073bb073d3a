//! Finite-difference check of a group bilinear layer followed by the
//! grouping loss, in double precision.
//!
//! `cargo run --example gradcheck`

use dbtnet::dbt::{group_index_encoding, DbtConfig};
use dbtnet::tensor::{finite_difference_check, Bindings};
use dbtnet::{Graph, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> dbtnet::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let cfg = DbtConfig::new(8, 2);
    let enc = group_index_encoding(&cfg)?.as_tensor::<f64>();

    let mut g = Graph::<f64>::new();
    let x = g.input("x");
    let y = g.group_bilinear(x, cfg.groups, Some(enc));
    let y = g.channel_interpolate(y, cfg.channels);
    let y = g.tanh(y);
    let cls = g.mean(y);
    let gl = g.grouping_loss(x, cfg.groups, false);
    let gl = g.scale(gl, 0.1);
    let total = g.add(cls, gl);

    let data: Vec<f64> = (0..2 * 8 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut b = Bindings::new();
    b.insert("x".into(), Tensor::from_vec([2, 8, 3, 3], data)?.with_grad(true));
    let err = finite_difference_check(&mut g, total, &b, 1e-5)?;
    println!("worst relative error {err:.3e} (bound 1e-5): {}", if err < 1e-5 { "ok" } else { "FAILED" });
    Ok(())
}
