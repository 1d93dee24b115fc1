use std::fs;
use std::path::{Path, PathBuf};

use sadnet::data::{self, fixtures, subset, LabeledDataset};
use sadnet::experiment::{
    clean_gradient_norm, construct_sad_point_observed, derive_seed, distance_report, escape_run_observed, load_checkpoint, rng_for,
    save_checkpoint, train_clean_observed, Checkpoint, EpochRow, MetricsWriter, RunMeta, RunPair, RunRecord, SeedStream,
};
use sadnet::gradcheck;
use sadnet::{Error, Result};
use serde_json::json;

use crate::cli::RunArgs;
use crate::config::{resolve, Dataset, Resolved};

const SYNTH_CLASSES: usize = 10;
const SYNTH_SIDE: usize = 28;
const SYNTH_NOISE: f64 = 0.3;

fn load_data(r: &Resolved) -> Result<(LabeledDataset, LabeledDataset)> {
    let cfg = &r.train;
    if r.dataset == Dataset::Synth {
        let n_train = cfg.train_subset.unwrap_or(400);
        let n_test = cfg.test_subset.unwrap_or(100);
        let seed = derive_seed(cfg.seed, SeedStream::Subset);
        return fixtures::synthetic_pair(n_train, n_test, SYNTH_CLASSES, 1, SYNTH_SIDE, SYNTH_NOISE, seed);
    }
    let dir = r.data_dir.as_ref().ok_or_else(|| {
        Error::Validation(format!("dataset {} needs --data-dir or SADNET_DATA_DIR", r.dataset.name()))
    })?;
    if !dir.is_dir() {
        return Err(Error::Validation(format!("data directory {} does not exist", dir.display())));
    }
    let (train, test) = match r.dataset {
        Dataset::Cifar10 => data::load_cifar10(dir)?,
        _ => (data::load_idx_dir(dir, true)?, data::load_idx_dir(dir, false)?),
    };
    // one subset stream for both draws keeps them distinct yet reproducible
    let mut rng = rng_for(cfg.seed, SeedStream::Subset);
    let train = match cfg.train_subset {
        Some(n) if n < train.len() => subset(&train, n, &mut rng, true)?,
        Some(n) if n > train.len() => return Err(too_big("train", n, train.len())),
        _ => train,
    };
    let test = match cfg.test_subset {
        Some(n) if n < test.len() => subset(&test, n, &mut rng, true)?,
        Some(n) if n > test.len() => return Err(too_big("test", n, test.len())),
        _ => test,
    };
    Ok((train, test))
}

fn too_big(which: &str, n: usize, have: usize) -> Error {
    Error::Validation(format!("{which} subset of {n} requested but only {have} examples are available"))
}

/// Streams metrics into `<out>/<run_id>/` as rows arrive.
struct Sink {
    out: PathBuf,
    dir: Option<PathBuf>,
    writer: Option<MetricsWriter>,
    error: Option<Error>,
}

impl Sink {
    fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf(), dir: None, writer: None, error: None }
    }

    fn observe(&mut self, meta: &RunMeta, row: &EpochRow) {
        if self.error.is_some() {
            return;
        }
        if let Err(e) = self.try_observe(meta, row) {
            self.error = Some(e);
        }
    }

    fn try_observe(&mut self, meta: &RunMeta, row: &EpochRow) -> Result<()> {
        if self.writer.is_none() {
            let dir = self.out.join(&meta.run_id);
            self.writer = Some(MetricsWriter::create(&dir, meta)?);
            self.dir = Some(dir);
        }
        let w = self.writer.as_mut().expect("writer created above");
        w.append(row)?;
        w.flush()
    }

    fn finish(mut self) -> Result<PathBuf> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        self.dir.ok_or_else(|| Error::State("run produced no metrics".into()))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))
}

fn finish_run(dir: &Path, init: &Checkpoint, last: &Checkpoint, record: &RunRecord, extra: serde_json::Value) -> Result<()> {
    save_checkpoint(init, dir.join("init.ckpt"))?;
    save_checkpoint(last, dir.join("final.ckpt"))?;
    let mut summary = json!({
        "run_id": record.meta.run_id,
        "kind": record.meta.kind,
        "epochs_run": record.rows.len(),
        "stopped_early": record.stopped_early,
        "final": record.last(),
    });
    if let (Some(s), Some(e)) = (summary.as_object_mut(), extra.as_object()) {
        s.extend(e.clone());
    }
    write_json(&dir.join("summary.json"), &summary)?;
    let f = record.last();
    println!(
        "{} {}: epochs={} train_acc={:.4} test_acc={:.4} dist_from_init={:.3} -> {}",
        record.meta.kind,
        record.meta.run_id,
        record.rows.len(),
        f.train_acc,
        f.test_acc,
        f.dist_from_init,
        dir.display()
    );
    Ok(())
}

pub fn train(args: &RunArgs) -> Result<()> {
    let r = resolve(args, 30)?;
    r.train.validate()?;
    let (tr, te) = load_data(&r)?;
    let mut sink = Sink::new(&r.out_dir);
    let run = train_clean_observed(&tr, &te, &r.train, &mut |m, row| sink.observe(m, row))?;
    let dir = sink.finish()?;
    finish_run(&dir, &run.init, &run.checkpoint, &run.record, json!({}))
}

pub fn sadpoint(args: &RunArgs) -> Result<()> {
    let r = resolve(args, 200)?;
    r.train.validate()?;
    let (tr, te) = load_data(&r)?;
    let mut sink = Sink::new(&r.out_dir);
    let sad = construct_sad_point_observed(&tr, &te, &r.train, &mut |m, row| sink.observe(m, row))?;
    let dir = sink.finish()?;
    let grad_init = clean_gradient_norm(&sad.init, &tr)?;
    let grad_sad = clean_gradient_norm(&sad.checkpoint, &tr)?;
    let extra = json!({
        "saturated": sad.saturated,
        "clean_grad_norm_init": grad_init,
        "clean_grad_norm_sad": grad_sad,
        "clean_grad_ratio": grad_sad / grad_init,
        "train_acc": sad.train_acc,
        "test_acc": sad.test_acc,
        "corrupted_copies": sad.copies,
        "corrupted_train_size": tr.len() + sad.copies * te.len(),
    });
    finish_run(&dir, &sad.init, &sad.checkpoint, &sad.record, extra)?;
    if !sad.saturated {
        eprintln!(
            "warning: sad point not saturated (train_acc {:.4}, test_acc {:.4}); checkpoint flagged",
            sad.train_acc, sad.test_acc
        );
    }
    Ok(())
}

pub fn escape(args: &RunArgs, from: &Path) -> Result<()> {
    let mut r = resolve(args, 50)?;
    // the epoch count is validated separately: zero epochs is a legal identity escape
    let epochs = r.train.epochs;
    r.train.epochs = epochs.max(1);
    r.train.validate()?;
    r.train.epochs = epochs;
    if !from.is_file() {
        return Err(Error::Validation(format!("checkpoint {} does not exist", from.display())));
    }
    let start = load_checkpoint(from)?;
    let (tr, te) = load_data(&r)?;
    let mut sink = Sink::new(&r.out_dir);
    let (cp, record) = escape_run_observed(&start, &tr, &te, &r.train, &mut |m, row| sink.observe(m, row))?;
    let dir = sink.finish()?;
    finish_run(&dir, &start, &cp, &record, json!({ "from_checkpoint": from.display().to_string() }))
}

pub fn analyze(runs_dir: &Path, out_dir: &Path) -> Result<()> {
    let entries = fs::read_dir(runs_dir)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", runs_dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("init.ckpt").is_file() && p.join("final.ckpt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!("no runs with init.ckpt and final.ckpt under {}", runs_dir.display())));
    }
    let mut pairs = Vec::with_capacity(dirs.len());
    for d in &dirs {
        let init = load_checkpoint(d.join("init.ckpt"))?;
        let last = load_checkpoint(d.join("final.ckpt"))?;
        let label = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        pairs.push(RunPair { cohort: last.tag.to_string(), label, init, last });
    }
    let report = distance_report(&pairs)?;
    report.write_to(out_dir)?;
    for c in &report.cohorts {
        println!(
            "{:<8} runs={} distance={:.4}±{:.4} norm={:.4}±{:.4}",
            c.cohort, c.runs, c.mean_distance, c.std_distance, c.mean_norm, c.std_norm
        );
    }
    if let (Some(s), Some(c)) = (report.cohort("sad"), report.cohort("clean")) {
        println!("sad/clean distance ratio: {:.3}", s.mean_distance / c.mean_distance);
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

pub fn gradcheck(seed: u64, models: usize) -> Result<()> {
    if models == 0 {
        return Err(Error::Validation("--models must be at least 1".into()));
    }
    let report = gradcheck::run_suite(seed, models)?;
    for m in &report.models {
        let (i, a, n) = m.worst;
        println!(
            "{:<8} params={:<5} redraws={} max_rel_error={:.3e} (param {i}: analytic {a:.6e}, numeric {n:.6e})",
            m.name, m.parameters, m.redraws, m.max_rel_error
        );
    }
    println!("max relative error: {:.3e}", report.max_rel_error());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Consistency(format!(
            "gradient check failed: max relative error {:.3e} ≥ {:.0e}",
            report.max_rel_error(),
            gradcheck::REL_TOLERANCE
        )))
    }
}

pub fn fixtures(out_dir: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    if train == 0 || test == 0 {
        return Err(Error::Validation("--train and --test must be positive".into()));
    }
    fixtures::write_fixture_tree(out_dir, train, test, seed)?;
    println!("wrote {0}/mnist and {0}/cifar10", out_dir.display());
    Ok(())
}
