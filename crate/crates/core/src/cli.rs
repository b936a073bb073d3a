//! Command-line front end. Every subcommand reads a TOML run config and
//! accepts the same overrides. Failures print one line,
//! `error kind=<kind> message=<text>`, to stderr and exit nonzero.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::write_dataset;
use crate::error::{Error, Result};
use crate::train::{
    cost_report, evaluate_model, export_matrix, format_eval, interaction_matrix, load_network, prepare_data, train,
    MatrixFormat, Overrides, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "dbtnet", version, about = "Deep bilinear transformation networks on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Grouping-loss weight λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Group index encoding frequency.
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub no_encoding: bool,
    #[arg(long)]
    pub no_shortcut: bool,
    /// Stages keeping DBT, comma separated (stage names or `last`).
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CostFormat {
    Table,
    Toml,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train and write a run directory.
    Train(Common),
    /// Evaluate a checkpoint on both splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Parameter and FLOP report.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Square input side.
        #[arg(long)]
        input: Option<usize>,
        #[arg(long, value_enum, default_value = "table")]
        format: CostFormat,
    },
    /// Average channel interaction matrix of a DBT stage.
    Interactions {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        stage: Option<String>,
        /// Output `.csv` or `.pgm` path; repeatable.
        #[arg(long)]
        out: Vec<PathBuf>,
    },
    /// Generate the dataset into a binary container.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(&common.config)?;
    cfg.apply(&Overrides {
        lambda: common.lambda,
        t: common.t,
        no_encoding: common.no_encoding,
        no_shortcut: common.no_shortcut,
        stages: common.stages.clone(),
        seed: common.seed,
        deterministic: common.deterministic,
    });
    Ok(cfg)
}

/// Runs a parsed command, returning the text for stdout.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            let s = train(&cfg)?;
            let mut out = format!(
                "run {}: initial train l_c={:.6} accuracy={:.4}\n",
                s.dir.display(),
                s.initial.mean_l_c,
                s.initial.accuracy
            );
            if let Some(last) = s.epochs.last() {
                out += &format!(
                    "epoch {}: l_c={:.6} sum_l_g={:.6} train_acc={:.4} test_acc={:.4} best_epoch={}\n",
                    last.epoch,
                    last.l_c,
                    last.sum_l_g,
                    last.train_acc,
                    last.test_acc,
                    s.best_epoch.unwrap_or(0)
                );
            }
            Ok(out)
        }
        Command::Eval { common, checkpoint } => {
            let mut cfg = load(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            let (train_set, test_set, classes) = prepare_data(&cfg)?;
            let net = load_network(&cfg, classes)?;
            Ok(format!(
                "{}\n{}\n",
                format_eval("train", &evaluate_model(&net, &train_set)?),
                format_eval("test", &evaluate_model(&net, &test_set)?)
            ))
        }
        Command::Cost { common, input, format } => {
            let cfg = load(&common)?;
            let input = input.or(cfg.cost_input).unwrap_or(cfg.dataset.image_size);
            let r = cost_report(&cfg, input)?;
            Ok(match format {
                CostFormat::Table => r.to_table(),
                CostFormat::Toml => r.to_toml_string(),
            })
        }
        Command::Interactions {
            common,
            checkpoint,
            stage,
            out,
        } => {
            let mut cfg = load(&common)?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            let (train_set, test_set, classes) = prepare_data(&cfg)?;
            let net = load_network(&cfg, classes)?;
            let stage = match stage.or(cfg.interaction_stage.clone()) {
                Some(s) => s,
                None => net
                    .descriptor()
                    .stages
                    .iter()
                    .rev()
                    .find(|s| s.dbt_block_count() > 0)
                    .map(|s| s.name.clone())
                    .ok_or_else(|| Error::Config("architecture has no DBT stage".into()))?,
            };
            let all: Vec<_> = train_set.into_iter().chain(test_set).collect();
            let m = interaction_matrix(&net, &all, &stage)?;
            let mut text = format!(
                "stage={} block={} channels={} groups={} samples={} mean_intra={:.6e} mean_inter={:.6e}\n",
                m.stage,
                m.block,
                m.channels(),
                m.groups,
                m.samples,
                m.mean_intra(),
                m.mean_inter()
            );
            for path in out {
                export_matrix(&m, &path, MatrixFormat::from_path(&path)?)?;
                text += &format!("wrote {}\n", path.display());
            }
            Ok(text)
        }
        Command::GenData { common, out } => {
            let cfg = load(&common)?;
            cfg.dataset.validate()?;
            let path = out
                .or(cfg.dataset_path.clone())
                .unwrap_or_else(|| cfg.output_dir.join("dataset.dbtd"));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let data = crate::data::generate_dataset(&cfg.dataset)?;
            write_dataset(&path, &data, cfg.dataset.classes)?;
            Ok(format!("wrote {} samples to {}\n", data.len(), path.display()))
        }
    }
}

/// One-line error report.
pub fn error_line(kind: &str, message: &str) -> String {
    let flat: String = message.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error kind={kind} message={flat}")
}

/// Parses `args` (including the program name), runs, prints, and returns
/// the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}
