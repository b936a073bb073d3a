//! Channel interaction matrix of a trained run's last DBT stage, exported as
//! CSV and PGM. Trains a short run first if no checkpoint is given.
//!
//! `cargo run --release --example interactions -- [config.toml]`

use std::path::Path;

use dbtnet::train::{export_matrix, interaction_matrix, load_network, prepare_data, train, MatrixFormat, TrainConfig};

const FALLBACK: &str = r#"
arch = "dbtnet-tiny"
epochs = 3
batch_size = 16
lambda = 3e-4
output_dir = "runs/interactions"

[dataset]
classes = 8
samples_per_class = 24
image_size = 32
"#;

fn main() -> dbtnet::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => TrainConfig::load(Path::new(&path))?,
        None => {
            let cfg = TrainConfig::from_toml_str(FALLBACK)?;
            train(&cfg)?;
            cfg
        }
    };
    let (train_set, test_set, classes) = prepare_data(&cfg)?;
    let net = load_network(&cfg, classes)?;
    let all: Vec<_> = train_set.into_iter().chain(test_set).collect();
    for stage in ["IV", "V"] {
        let m = interaction_matrix(&net, &all, stage)?;
        println!(
            "stage {stage} ({}): {} channels in {} groups, mean intra {:.4e}, mean inter {:.4e}",
            m.block,
            m.channels(),
            m.groups,
            m.mean_intra(),
            m.mean_inter()
        );
        for ext in ["csv", "pgm"] {
            let path = cfg.output_dir.join(format!("interactions-{stage}.{ext}"));
            export_matrix(&m, &path, MatrixFormat::from_path(&path)?)?;
            println!("  wrote {}", path.display());
        }
    }
    Ok(())
}
