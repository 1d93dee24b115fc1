//! Experiment-level invariants checked over generated datasets.

use proptest::prelude::*;
use sadnet::data::build_corrupted_train;
use sadnet::data::fixtures::synthetic_pair;
use sadnet::experiment::{construct_sad_point, evaluate, train_clean, RunRecord, TrainConfig};

fn cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig { hidden: 48, lr: 0.01, batch_size: 16, epochs, seed, dataset: "synth".into(), ..TrainConfig::default() }
}

fn well_formed(rec: &RunRecord) -> Result<(), TestCaseError> {
    prop_assert_eq!(rec.initial.epoch, 0);
    let mut prev = 0;
    for r in &rec.rows {
        prop_assert!(r.epoch == prev + 1);
        prev = r.epoch;
        prop_assert!((0.0..=1.0).contains(&r.train_acc) && (0.0..=1.0).contains(&r.test_acc));
        prop_assert!(r.dist_from_init >= 0.0 && r.weight_norm > 0.0);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn records_are_well_formed(seed in 0u64..1000, classes in 2usize..5, epochs in 1usize..4) {
        let (tr, te) = synthetic_pair(30, 12, classes, 1, 4, 0.3, seed).unwrap();
        let run = train_clean(&tr, &te, &cfg(seed, epochs)).unwrap();
        prop_assert_eq!(run.record.rows.len(), epochs);
        well_formed(&run.record)?;
    }

    #[test]
    fn saturated_sad_points_obey_their_invariants(seed in 0u64..1000, classes in 2usize..4) {
        let (tr, te) = synthetic_pair(40, 10, classes, 1, 6, 0.4, seed).unwrap();
        let sad = construct_sad_point(&tr, &te, &TrainConfig { stop_at_train_acc: Some(1.0), ..cfg(seed, 150) }).unwrap();
        well_formed(&sad.record)?;
        let first = sad.record.rows[0].fit_acc.unwrap();
        let last = sad.record.last().fit_acc.unwrap();
        prop_assert_eq!(last, 1.0, "generated case did not saturate");
        // memorization pressure never leaves the run worse than after epoch 1
        prop_assert!(last >= first);
        // the clean train set is a prefix of the corrupted one
        prop_assert_eq!(sad.train_acc, 1.0);
        let m = sad.checkpoint.to_model().unwrap();
        let whole = build_corrupted_train(&tr, &sad.corrupted_test).unwrap();
        prop_assert_eq!(evaluate(&m, &whole).unwrap().accuracy, 1.0);
    }
}
