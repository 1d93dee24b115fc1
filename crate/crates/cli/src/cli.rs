use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "sadnet", version, about = "Construct, escape and analyze points of extreme overfitting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean baseline: train on the original train set.
    Train(RunArgs),
    /// Corrupt the test labels, append them to the train set and train to saturation.
    Sadpoint(RunArgs),
    /// Restart training on clean data from a saved checkpoint.
    Escape {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        from_checkpoint: PathBuf,
    },
    /// Distance-from-init summary and weight histograms over a directory of runs.
    Analyze {
        /// Directory whose subdirectories each hold `init.ckpt` and `final.ckpt`.
        #[arg(long)]
        runs_dir: PathBuf,
        #[arg(long, default_value = "analysis")]
        out_dir: PathBuf,
    },
    /// Finite-difference check of the analytic gradients on small random models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        models: usize,
    },
    /// Write tiny synthetic IDX and CIFAR-10 files.
    Fixtures {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Experiment flags. Unset flags fall back to the config file, then to defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// `key = value` config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mnist, fashion-mnist, cifar10 or synth.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Dataset directory; defaults to $SADNET_DATA_DIR.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// mlp or cnn.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// L2 penalty coefficient λ.
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_subset: Option<usize>,
    #[arg(long)]
    pub test_subset: Option<usize>,
    #[arg(long)]
    pub stop_at_train_acc: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
