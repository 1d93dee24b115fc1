//! Training loops and the sad-point experiments built on them.
//!
//! Per-epoch metrics are always measured on the *original* train and test
//! sets, also when the optimizer sees the corrupted set.

mod analysis;
mod checkpoint;
mod metrics;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use analysis::{distance_report, CohortSummary, DistanceReport, Histogram, RunDistance, RunPair, HISTOGRAM_BINS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointTag, MAGIC};
pub use metrics::{deterministic_payload, read_jsonl, MetricsWriter, CSV_COLUMNS};

use crate::data::{batches, build_corrupted_train, corrupt_labels, corrupted_copies, BatchPlan, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{self, add_l2_gradients, cross_entropy, init_xavier_uniform, l2_penalty, Architecture, Model};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::par;
use crate::tensor::norm2_slice;

/// Corrupted-train accuracy at which sad-point training stops by default.
pub const DEFAULT_SAD_STOP_ACC: f64 = 0.995;
/// Sad-point postcondition: minimum accuracy on the original train set.
pub const SAD_MIN_TRAIN_ACC: f64 = 0.98;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "cnn" => Ok(Self::Cnn),
            other => Err(Error::Validation(format!("unknown model '{other}'"))),
        }
    }
}

/// Everything that determines a run. Identical configs give identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Hidden width of the MLP.
    pub hidden: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_lambda: f64,
    pub seed: u64,
    pub dataset: String,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Stop once accuracy on the optimized set reaches this value.
    pub stop_at_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Mlp,
            hidden: 512,
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            batch_size: 128,
            epochs: 30,
            l2_lambda: 0.0,
            seed: 0,
            dataset: "mnist".into(),
            train_subset: None,
            test_subset: None,
            stop_at_train_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return bad(format!("l2 lambda must be non-negative, got {}", self.l2_lambda));
        }
        if let Some(v) = self.stop_at_train_acc {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("stop_at_train_acc must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    /// Architecture for data with per-example shape `[C, H, W]`.
    pub fn architecture(&self, sample_shape: &[usize], classes: usize) -> Result<Architecture> {
        match self.model {
            ModelKind::Mlp => Ok(Architecture::mlp(sample_shape.iter().product(), self.hidden, classes)),
            ModelKind::Cnn => {
                if sample_shape.len() != 3 || sample_shape[1] != sample_shape[2] {
                    return Err(Error::Shape(format!("cnn needs square C×H×W inputs, got {sample_shape:?}")));
                }
                if !sample_shape[1].is_multiple_of(4) {
                    return Err(Error::Shape(format!("cnn input side {} must be a multiple of 4", sample_shape[1])));
                }
                Ok(Architecture::cnn(sample_shape[0], sample_shape[1], classes))
            }
        }
    }
}

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug)]
pub enum SeedStream {
    Init = 1,
    Corrupt = 2,
    Batches = 3,
    Subset = 4,
}

pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    // splitmix64 finalizer over the tagged seed
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: SeedStream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// A Xavier-initialized model for `cfg` on data shaped like `ds`.
pub fn init_model(cfg: &TrainConfig, ds: &LabeledDataset) -> Result<Model> {
    let mut model = Model::new(cfg.architecture(ds.sample_shape(), ds.classes)?)?;
    init_xavier_uniform(&mut model, &mut rng_for(cfg.seed, SeedStream::Init));
    Ok(model)
}

/// Metrics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// ‖w‖₂ of the flattened parameters.
    pub weight_norm: f64,
    /// ‖w − w₀‖₂ from the parameters the run started at.
    pub dist_from_init: f64,
    pub elapsed_secs: f64,
    /// Loss/accuracy on the optimized set; only present when a train-accuracy stop rule is active.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub kind: String,
    pub config: TrainConfig,
    pub init_weight_hash: String,
    pub train_set: String,
    pub eval_train_set: String,
    pub eval_test_set: String,
    pub pixel_normalization: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub meta: RunMeta,
    /// Metrics before the first update (epoch 0).
    pub initial: EpochRow,
    pub rows: Vec<EpochRow>,
    /// Largest single-coordinate update seen over the whole run.
    pub max_abs_update: f64,
    pub stopped_early: bool,
}

impl RunRecord {
    pub fn last(&self) -> &EpochRow {
        self.rows.last().unwrap_or(&self.initial)
    }
}

/// Mean loss and accuracy over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

const EVAL_CHUNK: usize = 500;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and argmax accuracy (ties go to the lowest class).
/// Uses inference only; the model is not modified.
pub fn evaluate(model: &Model, ds: &LabeledDataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let chunks = ds.len().div_ceil(EVAL_CHUNK);
    let parts = par::map_range(chunks, |c| -> Result<(f64, usize)> {
        let idx: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(ds.len())).collect();
        let (x, y) = ds.gather(&idx);
        let logits = model.infer(&x)?;
        let k = logits.shape()[1];
        let loss = cross_entropy(&logits, &y)?.mean_loss * idx.len() as f64;
        let correct = logits
            .data()
            .chunks(k)
            .zip(&y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        Ok((loss, correct))
    });
    let (mut loss, mut correct) = (0.0, 0usize);
    for p in parts {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    Ok(Evaluation {
        loss: loss / ds.len() as f64,
        accuracy: correct as f64 / ds.len() as f64,
    })
}

/// Full-batch gradient of the mean loss over `ds` (deterministic).
pub fn full_gradient(model: &mut Model, ds: &LabeledDataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Validation("gradient over an empty dataset".into()));
    }
    let mut total = vec![0.0; model.parameter_count()];
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(ds.len())).collect();
        let (x, y) = ds.gather(&idx);
        let logits = model.forward(&x)?;
        let loss = cross_entropy(&logits, &y)?;
        model.backward(&loss.logit_gradient)?;
        let w = idx.len() as f64 / ds.len() as f64;
        for (t, g) in total.iter_mut().zip(model.flatten_gradients()) {
            *t += w * g;
        }
    }
    Ok(total)
}

/// ‖∇ Loss(w, clean_train)‖₂ at the checkpoint's parameters, full batch.
pub fn clean_gradient_norm(cp: &Checkpoint, clean_train: &LabeledDataset) -> Result<f64> {
    let mut model = cp.to_model()?;
    if model.input_len() != clean_train.sample_len() || model.classes() != clean_train.classes {
        return Err(Error::Architecture(format!(
            "checkpoint model does not fit dataset {}",
            clean_train.name
        )));
    }
    Ok(norm2_slice(&full_gradient(&mut model, clean_train)?))
}

fn check_compatible(model: &Model, sets: &[&LabeledDataset]) -> Result<()> {
    for ds in sets {
        if ds.sample_len() != model.input_len() || ds.classes != model.classes() {
            return Err(Error::Consistency(format!(
                "dataset {} ({:?}, k={}) does not fit model input {:?} with k={}",
                ds.name,
                ds.sample_shape(),
                ds.classes,
                model.architecture().input_shape,
                model.classes()
            )));
        }
    }
    Ok(())
}

fn run_id(kind: &str, cfg: &TrainConfig, init_hash: &str) -> String {
    let text = format!("{kind}\n{}\n{init_hash}", serde_json::to_string(cfg).expect("config serializes"));
    checkpoint::params_hash(&text.bytes().map(f64::from).collect::<Vec<_>>())[..12].to_string()
}

/// Per-epoch callback; also sees the epoch-0 row measured before any update.
pub type Observer<'a> = &'a mut dyn FnMut(&RunMeta, &EpochRow);

/// Trains `model` in place on `train_ds`, recording metrics on the two
/// evaluation sets after every epoch. Stops after `cfg.epochs` or as soon as
/// accuracy on `train_ds` reaches `cfg.stop_at_train_acc`.
pub fn train(
    model: &mut Model,
    train_ds: &LabeledDataset,
    eval_train: &LabeledDataset,
    eval_test: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, RunRecord)> {
    train_observed(model, train_ds, eval_train, eval_test, cfg, "train", &mut |_, _| {})
}

pub fn train_observed(
    model: &mut Model,
    train_ds: &LabeledDataset,
    eval_train: &LabeledDataset,
    eval_test: &LabeledDataset,
    cfg: &TrainConfig,
    kind: &str,
    observer: Observer<'_>,
) -> Result<(Checkpoint, RunRecord)> {
    cfg.validate()?;
    run_epochs(model, train_ds, eval_train, eval_test, cfg, kind, observer)
}

fn run_epochs(
    model: &mut Model,
    train_ds: &LabeledDataset,
    eval_train: &LabeledDataset,
    eval_test: &LabeledDataset,
    cfg: &TrainConfig,
    kind: &str,
    observer: Observer<'_>,
) -> Result<(Checkpoint, RunRecord)> {
    check_compatible(model, &[train_ds, eval_train, eval_test])?;
    let start = Instant::now();
    let w0 = model.flatten_parameters();
    let init_hash = checkpoint::params_hash(&w0);
    let meta = RunMeta {
        run_id: run_id(kind, cfg, &init_hash),
        kind: kind.into(),
        config: cfg.clone(),
        init_weight_hash: init_hash,
        train_set: train_ds.name.clone(),
        eval_train_set: eval_train.name.clone(),
        eval_test_set: eval_test.name.clone(),
        pixel_normalization: "x/255".into(),
    };
    let track_fit = cfg.stop_at_train_acc.is_some();

    let measure = |model: &Model, epoch: usize| -> Result<EpochRow> {
        let tr = evaluate(model, eval_train)?;
        let te = evaluate(model, eval_test)?;
        let fit = if track_fit { Some(evaluate(model, train_ds)?) } else { None };
        let w = model.flatten_parameters();
        let dist = w.iter().zip(&w0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        Ok(EpochRow {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            test_loss: te.loss,
            test_acc: te.accuracy,
            weight_norm: norm2_slice(&w),
            dist_from_init: dist,
            elapsed_secs: start.elapsed().as_secs_f64(),
            fit_loss: fit.map(|f| f.loss),
            fit_acc: fit.map(|f| f.accuracy),
        })
    };

    let initial = measure(model, 0)?;
    observer(&meta, &initial);
    let mut record = RunRecord {
        meta,
        initial,
        rows: Vec::with_capacity(cfg.epochs),
        max_abs_update: 0.0,
        stopped_early: false,
    };
    let plan = BatchPlan::new(cfg.batch_size, derive_seed(cfg.seed, SeedStream::Batches))?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr)?;

    for epoch in 1..=cfg.epochs {
        for batch in batches(train_ds, &plan, epoch as u64) {
            let logits = model.forward(&batch.images)?;
            let loss = cross_entropy(&logits, &batch.labels)?;
            let total = loss.mean_loss + l2_penalty(model, cfg.l2_lambda)?;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite batch loss {total}"),
                    last_finite: Some(Box::new(record.last().clone())),
                });
            }
            model.backward(&loss.logit_gradient)?;
            add_l2_gradients(model, cfg.l2_lambda)?;
            let stats = opt.step(model)?;
            record.max_abs_update = record.max_abs_update.max(stats.max_abs_update);
        }
        let row = measure(model, epoch)?;
        if !row.train_loss.is_finite() || !row.test_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: "non-finite evaluation loss".into(),
                last_finite: Some(Box::new(record.last().clone())),
            });
        }
        observer(&record.meta, &row);
        let fit_done = matches!((cfg.stop_at_train_acc, row.fit_acc), (Some(t), Some(a)) if a >= t);
        record.rows.push(row);
        if fit_done {
            record.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let cp = Checkpoint::from_model(model, cfg.seed, Some(cfg.clone()), CheckpointTag::Clean);
    Ok((cp, record))
}

/// Output of a clean or sad training run, with its starting point.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub init: Checkpoint,
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
}

/// Clean baseline: Xavier init from `cfg.seed`, train on the clean train set.
pub fn train_clean(train_ds: &LabeledDataset, test_ds: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedRun> {
    train_clean_observed(train_ds, test_ds, cfg, &mut |_, _| {})
}

pub fn train_clean_observed(
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    observer: Observer<'_>,
) -> Result<TrainedRun> {
    cfg.validate()?;
    let mut model = init_model(cfg, train_ds)?;
    let init = Checkpoint::from_model(&model, cfg.seed, Some(cfg.clone()), CheckpointTag::Init);
    let (checkpoint, record) = run_epochs(&mut model, train_ds, train_ds, test_ds, cfg, "clean", observer)?;
    Ok(TrainedRun { init, checkpoint, record })
}

/// A constructed point of extreme overfitting and everything needed to audit it.
#[derive(Clone, Debug)]
pub struct SadPoint {
    pub init: Checkpoint,
    /// Tagged `sad`; `saturated` records whether the postcondition held.
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
    pub corrupted_test: LabeledDataset,
    /// Number of corrupted-test copies in the optimized set.
    pub copies: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub saturated: bool,
}

/// Corrupt the test labels, append `⌊train/test⌋+1` copies to the train set,
/// and train on the result from a Xavier init, evaluating on the original
/// sets. Training stops at `cfg.stop_at_train_acc` (default
/// [`DEFAULT_SAD_STOP_ACC`]) on the corrupted set or at the epoch cap.
pub fn construct_sad_point(train_ds: &LabeledDataset, test_ds: &LabeledDataset, cfg: &TrainConfig) -> Result<SadPoint> {
    construct_sad_point_observed(train_ds, test_ds, cfg, &mut |_, _| {})
}

pub fn construct_sad_point_observed(
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    observer: Observer<'_>,
) -> Result<SadPoint> {
    if train_ds.classes != test_ds.classes {
        return Err(Error::Consistency(format!(
            "train has {} classes, test has {}",
            train_ds.classes, test_ds.classes
        )));
    }
    let mut cfg = cfg.clone();
    cfg.stop_at_train_acc.get_or_insert(DEFAULT_SAD_STOP_ACC);
    cfg.validate()?;
    let corrupted_test = corrupt_labels(test_ds, &mut rng_for(cfg.seed, SeedStream::Corrupt))?;
    let corrupted_train = build_corrupted_train(train_ds, &corrupted_test)?;
    let mut model = init_model(&cfg, train_ds)?;
    let init = Checkpoint::from_model(&model, cfg.seed, Some(cfg.clone()), CheckpointTag::Init);
    let (mut checkpoint, record) = run_epochs(&mut model, &corrupted_train, train_ds, test_ds, &cfg, "sad", observer)?;
    let last = record.last();
    let (train_acc, test_acc) = (last.train_acc, last.test_acc);
    let saturated = train_acc >= SAD_MIN_TRAIN_ACC && test_acc <= 2.0 / train_ds.classes as f64;
    checkpoint.tag = CheckpointTag::Sad;
    checkpoint.saturated = Some(saturated);
    Ok(SadPoint {
        init,
        checkpoint,
        record,
        copies: corrupted_copies(train_ds.len(), test_ds.len()),
        corrupted_test,
        train_acc,
        test_acc,
        saturated,
    })
}

/// Restarts training from a sad point on the clean train set. Distances in
/// the returned record are measured from the sad point. With `cfg.epochs == 0`
/// the sad point is returned unchanged (retagged).
pub fn escape_run(
    sad: &Checkpoint,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, RunRecord)> {
    escape_run_observed(sad, train_ds, test_ds, cfg, &mut |_, _| {})
}

pub fn escape_run_observed(
    sad: &Checkpoint,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    observer: Observer<'_>,
) -> Result<(Checkpoint, RunRecord)> {
    let expected = cfg.architecture(train_ds.sample_shape(), train_ds.classes)?;
    let mut model = sad.to_model_as(&expected)?;
    let mut cfg = cfg.clone();
    cfg.seed = sad.seed;
    let epochs = cfg.epochs;
    cfg.epochs = epochs.max(1);
    cfg.validate()?;
    cfg.epochs = epochs;
    let (mut cp, record) = run_epochs(&mut model, train_ds, train_ds, test_ds, &cfg, "escape", observer)?;
    cp.tag = CheckpointTag::Escaped;
    Ok((cp, record))
}

/// Runs independent jobs, one per seed, on the worker pool. Results keep seed order.
pub fn campaign<T, F>(seeds: &[u64], job: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Send + Sync,
{
    par::map_range(seeds.len(), |i| job(seeds[i]))
}

/// Accuracy on a concatenation predicted from its parts:
/// `(n_train·acc_train + copies·n_test·acc_test) / (n_train + copies·n_test)`.
pub fn decomposed_accuracy(n_train: usize, acc_train: f64, copies: usize, n_test: usize, acc_test: f64) -> f64 {
    let hits = n_train as f64 * acc_train + (copies * n_test) as f64 * acc_test;
    hits / (n_train + copies * n_test) as f64
}

pub use nn::PROB_FLOOR;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::synthetic_pair;
    use crate::tensor::Tensor;

    fn blobs(n: usize, k: usize, seed: u64) -> (LabeledDataset, LabeledDataset) {
        synthetic_pair(n, n / 2, k, 1, 4, 0.15, seed).unwrap()
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            hidden: 16,
            epochs,
            batch_size: 16,
            dataset: "synth".into(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(matches!(c.validate(), Err(Error::Validation(_))));
        c.epochs = 1;
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c.lr = 0.001;
        c.stop_at_train_acc = Some(1.5);
        assert!(c.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = [SeedStream::Init, SeedStream::Corrupt, SeedStream::Batches, SeedStream::Subset]
            .iter()
            .map(|&st| derive_seed(7, st))
            .collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
    }

    #[test]
    fn one_epoch_one_row() {
        let (tr, _) = blobs(10, 2, 1);
        let mut m = init_model(&small_cfg(1), &tr).unwrap();
        let (_, rec) = train(&mut m, &tr, &tr, &tr, &small_cfg(1)).unwrap();
        assert_eq!(rec.rows.len(), 1);
        assert_eq!(rec.rows[0].epoch, 1);
    }

    #[test]
    fn zero_epochs_rejected() {
        let (tr, _) = blobs(10, 2, 1);
        let mut m = init_model(&small_cfg(1), &tr).unwrap();
        assert!(matches!(train(&mut m, &tr, &tr, &tr, &small_cfg(0)), Err(Error::Validation(_))));
    }

    #[test]
    fn initial_loss_is_near_ln_k() {
        let (tr, te) = blobs(200, 10, 2);
        let run = train_clean(&tr, &te, &small_cfg(1)).unwrap();
        let l = run.record.initial.train_loss;
        assert!((l - 10f64.ln()).abs() < 0.15 * 10f64.ln(), "{l}");
    }

    #[test]
    fn blobs_are_memorized() {
        let (tr, te) = blobs(200, 2, 3);
        let run = train_clean(&tr, &te, &small_cfg(50)).unwrap();
        assert_eq!(run.record.last().train_acc, 1.0);
        let rows = &run.record.rows;
        assert!(rows.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.train_acc) && (0.0..=1.0).contains(&r.test_acc)));
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, te) = blobs(60, 3, 4);
        let a = train_clean(&tr, &te, &small_cfg(3)).unwrap();
        let b = train_clean(&tr, &te, &small_cfg(3)).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        let strip = |r: &RunRecord| r.rows.iter().map(|x| EpochRow { elapsed_secs: 0.0, ..x.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&a.record), strip(&b.record));
        assert_eq!(a.record.meta, b.record.meta);
    }

    #[test]
    fn evaluate_uniform_model() {
        let (tr, _) = blobs(40, 4, 5);
        let m = Model::new(Architecture::mlp(16, 3, 4)).unwrap();
        let e = evaluate(&m, &tr).unwrap();
        // all-zero model: logits tie everywhere and argmax picks class 0
        assert!((e.loss - 4f64.ln()).abs() < 1e-12);
        let zeros = tr.labels.iter().filter(|&&y| y == 0).count() as f64 / tr.len() as f64;
        assert_eq!(e.accuracy, zeros);
        assert!((e.accuracy - 0.25).abs() < 0.1);
    }

    #[test]
    fn evaluate_saturated_single_example() {
        let images = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let ds = LabeledDataset::new(images, vec![1], 2, "one").unwrap();
        let mut m = Model::new(Architecture::mlp(1, 1, 2)).unwrap();
        // hidden = relu(x), logits = [0, 100·h]
        m.load_flat(&[1.0, 0.0, 0.0, 100.0, 0.0, 0.0]).unwrap();
        let e = evaluate(&m, &ds).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert!(e.loss < 1e-40);
    }

    #[test]
    fn evaluate_empty_is_error() {
        let m = Model::new(Architecture::mlp(1, 1, 2)).unwrap();
        let ds = LabeledDataset {
            images: Tensor::zeros(&[1, 1, 1, 1]),
            labels: vec![],
            classes: 2,
            name: "empty".into(),
        };
        assert!(matches!(evaluate(&m, &ds), Err(Error::Validation(_))));
    }

    #[test]
    fn binary_sad_point_has_zero_test_accuracy() {
        // enough input dimensions and width to memorize every flipped point
        let (tr, te) = synthetic_pair(60, 30, 2, 1, 8, 0.4, 6).unwrap();
        let cfg = TrainConfig { hidden: 64, lr: 0.01, stop_at_train_acc: Some(1.0), ..small_cfg(200) };
        let sad = construct_sad_point(&tr, &te, &cfg).unwrap();
        assert_eq!(sad.copies, 3);
        assert_eq!(sad.record.last().fit_acc, Some(1.0));
        assert_eq!(sad.train_acc, 1.0);
        assert_eq!(sad.test_acc, 0.0);
        assert!(sad.saturated);
        assert_eq!(sad.checkpoint.tag, CheckpointTag::Sad);
        // accuracy against the corrupted labels is the complement for k = 2
        let m = sad.checkpoint.to_model().unwrap();
        assert_eq!(evaluate(&m, &sad.corrupted_test).unwrap().accuracy, 1.0 - sad.test_acc);
    }

    #[test]
    fn escape_with_zero_epochs_is_identity() {
        let (tr, te) = blobs(40, 2, 7);
        let sad = construct_sad_point(&tr, &te, &small_cfg(5)).unwrap();
        let (cp, rec) = escape_run(&sad.checkpoint, &tr, &te, &small_cfg(0)).unwrap();
        assert_eq!(cp.params, sad.checkpoint.params);
        assert_eq!(cp.tag, CheckpointTag::Escaped);
        assert!(rec.rows.is_empty());
        assert_eq!(rec.initial.dist_from_init, 0.0);
    }

    #[test]
    fn escape_distance_is_measured_from_sad_point() {
        let (tr, te) = blobs(40, 2, 8);
        let sad = construct_sad_point(&tr, &te, &small_cfg(5)).unwrap();
        let (cp, rec) = escape_run(&sad.checkpoint, &tr, &te, &small_cfg(2)).unwrap();
        let d: f64 = cp.params.iter().zip(&sad.checkpoint.params).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((rec.last().dist_from_init - d).abs() < 1e-12);
        assert_eq!(rec.meta.init_weight_hash, sad.checkpoint.params_hash());
    }

    #[test]
    fn escape_rejects_wrong_architecture() {
        let (tr, te) = blobs(40, 2, 9);
        let sad = construct_sad_point(&tr, &te, &small_cfg(1)).unwrap();
        let cfg = TrainConfig { model: ModelKind::Cnn, ..small_cfg(1) };
        assert!(matches!(escape_run(&sad.checkpoint, &tr, &te, &cfg), Err(Error::Architecture(_))));
    }

    #[test]
    fn gradient_norm_vanishes_at_memorized_example() {
        let images = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let ds = LabeledDataset::new(images, vec![1], 2, "one").unwrap();
        let mut m = Model::new(Architecture::mlp(1, 1, 2)).unwrap();
        m.load_flat(&[1.0, 0.0, 0.0, 40.0, 0.0, 0.0]).unwrap();
        let cp = Checkpoint::from_model(&m, 0, None, CheckpointTag::Sad);
        assert!(clean_gradient_norm(&cp, &ds).unwrap() < 1e-3);
    }

    #[test]
    fn gradient_norm_invariant_under_duplication() {
        let (tr, _) = blobs(30, 3, 10);
        let m = init_model(&small_cfg(1), &tr).unwrap();
        let cp = Checkpoint::from_model(&m, 0, None, CheckpointTag::Init);
        let twice = crate::data::build_corrupted_train(&tr, &tr).unwrap(); // tr + 2 copies of tr
        let a = clean_gradient_norm(&cp, &tr).unwrap();
        let b = clean_gradient_norm(&cp, &twice).unwrap();
        assert!((a - b).abs() < 1e-12 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn decomposition_identity() {
        let (tr, te) = blobs(40, 3, 11);
        let sad = construct_sad_point(&tr, &te, &small_cfg(3)).unwrap();
        let m = sad.checkpoint.to_model().unwrap();
        let whole = crate::data::build_corrupted_train(&tr, &sad.corrupted_test).unwrap();
        let lhs = evaluate(&m, &whole).unwrap().accuracy;
        let rhs = decomposed_accuracy(
            tr.len(),
            evaluate(&m, &tr).unwrap().accuracy,
            sad.copies,
            te.len(),
            evaluate(&m, &sad.corrupted_test).unwrap().accuracy,
        );
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn campaign_keeps_seed_order() {
        let out = campaign(&[3, 1, 2], |s| Ok(s * 10));
        let v: Vec<u64> = out.into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(v, vec![30, 10, 20]);
    }
}
