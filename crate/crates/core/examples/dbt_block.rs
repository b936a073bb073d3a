//! Eager forward pass of one DBT block, with and without the shortcut.
//!
//! `cargo run --example dbt_block`

use dbtnet::dbt::{dbt_block_forward, DbtBlockParams, DbtConfig};
use dbtnet::nn::NormMode;
use dbtnet::Tensor;
use rand::{Rng, SeedableRng};

fn main() -> dbtnet::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    // 32 channels in 4 groups: 4 * 8^2 = 256 bilinear features, interpolated back to 32.
    let cfg = DbtConfig::new(32, 4);
    println!(
        "N={} G={} bilinear channels={} interpolation={}",
        cfg.channels,
        cfg.groups,
        cfg.bilinear_channels(),
        cfg.needs_interpolation()
    );
    let x: Vec<f32> = (0..4 * 16 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec([4, 16, 8, 8], x)?;

    let mut params = DbtBlockParams::<f32>::init(16, &cfg, 1, &mut rng)?;
    let out = dbt_block_forward(&x, &mut params, &cfg)?;
    println!("output shape {:?}", out.output.shape());
    println!(
        "grouping loss: intra {:.3} inter {:.3} total {:.3}",
        out.grouping_loss.intra, out.grouping_loss.inter, out.grouping_loss.total
    );
    // The bilinear batch norm starts at gamma = 0, so a fresh block returns its SG output.
    println!("fresh block == SG output: {}", out.output == out.sg_output);

    params.set_mode(NormMode::Eval);
    let eval = dbt_block_forward(&x, &mut params, &cfg)?;
    println!("eval-mode output shape {:?}", eval.output.shape());
    Ok(())
}
