//! The parallel and sequential code paths must produce bit-identical runs.
//! Kept in its own binary because it flips the process-wide parallel switch.

use sadnet::data::fixtures::synthetic_pair;
use sadnet::experiment::{train_clean, ModelKind, TrainConfig};
use sadnet::par;

#[test]
fn sequential_and_parallel_runs_agree_bitwise() {
    let (tr, te) = synthetic_pair(48, 16, 3, 1, 8, 0.3, 2).unwrap();
    for model in [ModelKind::Mlp, ModelKind::Cnn] {
        let cfg = TrainConfig { model, hidden: 16, epochs: 2, batch_size: 16, ..TrainConfig::default() };
        par::set_enabled(true);
        let a = train_clean(&tr, &te, &cfg).unwrap();
        par::set_enabled(false);
        let b = train_clean(&tr, &te, &cfg).unwrap();
        par::set_enabled(true);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.checkpoint.params), bits(&b.checkpoint.params), "{model:?}");
        assert_eq!(a.record.last().test_loss.to_bits(), b.record.last().test_loss.to_bits());
    }
}
