//! `key = value` config files and their merge with command-line flags.
//!
//! Precedence, lowest to highest: built-in defaults, config file, flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sadnet::experiment::{ModelKind, TrainConfig};
use sadnet::optim::OptimizerKind;
use sadnet::{Error, Result};

use crate::cli::RunArgs;

pub const DATA_DIR_ENV: &str = "SADNET_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    FashionMnist,
    Cifar10,
    Synth,
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "fashion-mnist" => Ok(Self::FashionMnist),
            "cifar10" => Ok(Self::Cifar10),
            "synth" => Ok(Self::Synth),
            other => Err(Error::Validation(format!(
                "unknown dataset '{other}' (expected mnist, fashion-mnist, cifar10 or synth)"
            ))),
        }
    }
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::FashionMnist => "fashion-mnist",
            Self::Cifar10 => "cifar10",
            Self::Synth => "synth",
        }
    }
}

/// Everything a subcommand needs after merging.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub train: TrainConfig,
    pub dataset: Dataset,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "model",
    "hidden",
    "optimizer",
    "lr",
    "batch_size",
    "epochs",
    "l2",
    "seed",
    "train_subset",
    "test_subset",
    "stop_at_train_acc",
    "out_dir",
];

/// Parses `key = value` lines; `#` starts a comment, dashes in keys read as underscores.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("config line {}: expected key = value", n + 1)))?;
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Validation(format!("config line {}: unknown key '{}'", n + 1, k.trim())));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Validation(format!("cannot parse {key} = '{v}'")))
}

pub fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Merges defaults, the optional config file and flags. `default_epochs`
/// differs per subcommand.
pub fn resolve(args: &RunArgs, default_epochs: usize) -> Result<Resolved> {
    let file = match &args.config {
        Some(p) => load_config_file(p)?,
        None => BTreeMap::new(),
    };
    let pick = |flag: Option<String>, key: &str| flag.or_else(|| file.get(key).cloned());

    let mut train = TrainConfig { epochs: default_epochs, ..TrainConfig::default() };
    let dataset: Dataset = pick(args.dataset.clone(), "dataset").as_deref().unwrap_or("mnist").parse()?;
    train.dataset = dataset.name().into();
    if let Some(v) = pick(args.model.clone(), "model") {
        train.model = v.parse::<ModelKind>()?;
    }
    if let Some(v) = pick(args.optimizer.clone(), "optimizer") {
        train.optimizer = v.parse::<OptimizerKind>()?;
    }
    let num = |flag: Option<String>, key: &str| pick(flag, key);
    if let Some(v) = num(args.hidden.map(|x| x.to_string()), "hidden") {
        train.hidden = parse("hidden", &v)?;
    }
    if let Some(v) = num(args.lr.map(|x| x.to_string()), "lr") {
        train.lr = parse("lr", &v)?;
    }
    if let Some(v) = num(args.batch_size.map(|x| x.to_string()), "batch_size") {
        train.batch_size = parse("batch_size", &v)?;
    }
    if let Some(v) = num(args.epochs.map(|x| x.to_string()), "epochs") {
        train.epochs = parse("epochs", &v)?;
    }
    if let Some(v) = num(args.l2.map(|x| x.to_string()), "l2") {
        train.l2_lambda = parse("l2", &v)?;
    }
    if let Some(v) = num(args.seed.map(|x| x.to_string()), "seed") {
        train.seed = parse("seed", &v)?;
    }
    if let Some(v) = num(args.train_subset.map(|x| x.to_string()), "train_subset") {
        train.train_subset = Some(parse("train_subset", &v)?);
    }
    if let Some(v) = num(args.test_subset.map(|x| x.to_string()), "test_subset") {
        train.test_subset = Some(parse("test_subset", &v)?);
    }
    if let Some(v) = num(args.stop_at_train_acc.map(|x| x.to_string()), "stop_at_train_acc") {
        train.stop_at_train_acc = Some(parse("stop_at_train_acc", &v)?);
    }
    let data_dir = pick(args.data_dir.as_ref().map(|p| p.display().to_string()), "data_dir")
        .or_else(|| std::env::var(DATA_DIR_ENV).ok())
        .map(PathBuf::from);
    let out_dir = pick(args.out_dir.as_ref().map(|p| p.display().to_string()), "out_dir")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok(Resolved { train, dataset, data_dir, out_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dashes() {
        let m = parse_config("# campaign\nbatch-size = 64\nlr=0.01  # faster\n\n").unwrap();
        assert_eq!(m["batch_size"], "64");
        assert_eq!(m["lr"], "0.01");
    }

    #[test]
    fn rejects_unknown_keys_and_garbage() {
        assert!(parse_config("momentum = 0.9").unwrap_err().is_validation());
        assert!(parse_config("just words").unwrap_err().is_validation());
    }
}
