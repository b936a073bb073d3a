//! Record a tiny graph, evaluate it and read reverse-mode gradients.
//!
//! `cargo run --example autodiff`

use dbtnet::tensor::Bindings;
use dbtnet::{Graph, Tensor};

fn main() -> dbtnet::Result<()> {
    // loss = mean(tanh(x @ w) * x @ w)
    let mut g = Graph::<f64>::new();
    let x = g.input("x");
    let w = g.input("w");
    let xw = g.matmul(x, w);
    let t = g.tanh(xw);
    let prod = g.mul(t, xw);
    let loss = g.mean(prod);
    g.output("loss", loss);

    let mut b = Bindings::new();
    b.insert("x".into(), Tensor::from_vec([2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?);
    b.insert("w".into(), Tensor::from_vec([3, 2], vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.6])?.with_grad(true));
    let outputs = g.evaluate(&b)?;
    println!("loss = {:.6}", outputs["loss"].data()[0]);

    let grads = g.gradients(loss)?;
    println!("dloss/dw = {:?}", grads["w"].data());
    println!("x carries no gradient: {}", !grads.contains_key("x"));
    Ok(())
}
