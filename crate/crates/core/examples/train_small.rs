//! Train dbtnet-tiny for a few epochs on a small generated set and print the
//! per-epoch metrics.
//!
//! `cargo run --release --example train_small`

use dbtnet::train::{train, TrainConfig};

const CONFIG: &str = r#"
arch = "dbtnet-tiny"
epochs = 4
batch_size = 16
lambda = 3e-4
seed = 1
output_dir = "runs/train-small"

[dataset]
classes = 8
samples_per_class = 24
image_size = 32
seed = 1
"#;

fn main() -> dbtnet::Result<()> {
    let cfg = TrainConfig::from_toml_str(CONFIG)?;
    let run = train(&cfg)?;
    println!(
        "initial: l_c={:.4} accuracy={:.3}",
        run.initial.mean_l_c, run.initial.accuracy
    );
    println!("{}", dbtnet::train::METRICS_HEADER);
    for e in &run.epochs {
        println!("{}", e.csv_row());
    }
    println!("best epoch {:?}, files in {}", run.best_epoch, run.dir.display());
    Ok(())
}
