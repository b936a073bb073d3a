//! Reference bilinear variants next to the grouped one.
//!
//! `cargo run --example bilinear_zoo`

use dbtnet::dbt::{group_bilinear, DbtConfig};
use dbtnet::zoo::{bilinear_pool, compact_bilinear_rm, hadamard_lowrank, masked_bilinear_oracle, CompactRmParams, HadamardParams};
use dbtnet::Tensor;
use rand::{Rng, SeedableRng};

fn main() -> dbtnet::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let (n, hw) = (16, 9);
    let x: Vec<f64> = (0..n * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let feats = Tensor::from_vec([n, hw], x.clone())?;

    let full = bilinear_pool(&feats)?;
    println!("full bilinear pool: {} features", full.numel());

    // Single-position variants act on one channel vector.
    let column = Tensor::from_vec([n], x[..n].to_vec())?;
    let rm = CompactRmParams::from_seed(64, n, 1)?;
    let compact = compact_bilinear_rm(&column, &rm)?;
    println!("compact (random Maclaurin): {} features", compact.numel());

    let h = HadamardParams::random(n, 8, 4, &mut rng)?;
    println!("low-rank Hadamard: {:?}", hadamard_lowrank(&column, &h)?.data());

    // Grouped bilinear at one position equals the masked outer product.
    let cfg = DbtConfig {
        use_encoding: false,
        ..DbtConfig::new(n, 4)
    };
    let fused = group_bilinear(&Tensor::from_vec([1, n, 1, 1], x[..n].to_vec())?, &cfg, None)?;
    let oracle = masked_bilinear_oracle(&column, 4)?;
    let fused = fused.reshape([oracle.numel()])?;
    println!("grouped vs masked oracle, max |diff| = {:.2e}", fused.max_abs_diff(&oracle));
    Ok(())
}
