//! Distance-from-initialization and weight-distribution summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::norm2_slice;

pub const HISTOGRAM_BINS: usize = 64;

/// Uniform-bin histogram over the observed value range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let mut counts = vec![0u64; bins];
        if values.is_empty() {
            return Self { min: 0.0, max: 0.0, counts };
        }
        let width = max - min;
        for &v in values {
            let b = if width > 0.0 { (((v - min) / width) * bins as f64) as usize } else { 0 };
            // the maximum lands on the closing edge; fold it into the last bin
            counts[b.min(bins - 1)] += 1;
        }
        Self { min, max, counts }
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = (self.max - self.min) / self.counts.len() as f64;
        (self.min + w * bin as f64, self.min + w * (bin + 1) as f64)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// CSV with columns `bin_left,bin_right,count`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin_left", "bin_right", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            let (l, r) = self.edges(i);
            w.write_record([l.to_string(), r.to_string(), c.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// One run to summarize: where it started and where it ended.
#[derive(Clone, Debug)]
pub struct RunPair {
    pub cohort: String,
    pub label: String,
    pub init: Checkpoint,
    pub last: Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunDistance {
    pub cohort: String,
    pub label: String,
    pub distance: f64,
    pub final_norm: f64,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cohort: String,
    pub runs: usize,
    pub mean_distance: f64,
    pub std_distance: f64,
    pub mean_norm: f64,
    pub std_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub runs: Vec<RunDistance>,
    /// Sorted by cohort name.
    pub cohorts: Vec<CohortSummary>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    // sample standard deviation; a single run has none
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

pub fn distance_report(pairs: &[RunPair]) -> Result<DistanceReport> {
    let mut runs = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.init.arch != p.last.arch || p.init.params.len() != p.last.params.len() {
            return Err(Error::Architecture(format!(
                "run '{}': init is '{}' but final is '{}'",
                p.label, p.init.arch.name, p.last.arch.name
            )));
        }
        let distance = p
            .init
            .params
            .iter()
            .zip(&p.last.params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        runs.push(RunDistance {
            cohort: p.cohort.clone(),
            label: p.label.clone(),
            distance,
            final_norm: norm2_slice(&p.last.params),
            histogram: Histogram::of(&p.last.params, HISTOGRAM_BINS),
        });
    }
    let mut groups: BTreeMap<&str, Vec<&RunDistance>> = BTreeMap::new();
    for r in &runs {
        groups.entry(&r.cohort).or_default().push(r);
    }
    let cohorts = groups
        .into_iter()
        .map(|(name, rs)| {
            let (mean_distance, std_distance) = mean_std(&rs.iter().map(|r| r.distance).collect::<Vec<_>>());
            let (mean_norm, std_norm) = mean_std(&rs.iter().map(|r| r.final_norm).collect::<Vec<_>>());
            CohortSummary { cohort: name.to_string(), runs: rs.len(), mean_distance, std_distance, mean_norm, std_norm }
        })
        .collect();
    Ok(DistanceReport { runs, cohorts })
}

impl DistanceReport {
    pub fn cohort(&self, name: &str) -> Option<&CohortSummary> {
        self.cohorts.iter().find(|c| c.cohort == name)
    }

    /// Writes `summary.json`, `runs.csv` and one `hist_<label>.csv` per run into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = dir.join("summary.json");
        std::fs::write(&summary, serde_json::to_vec_pretty(&self.cohorts)?).map_err(|e| Error::io(&summary, e))?;
        let mut w = csv::Writer::from_path(dir.join("runs.csv"))?;
        w.write_record(["cohort", "label", "distance", "final_norm"])?;
        for r in &self.runs {
            w.write_record([r.cohort.clone(), r.label.clone(), r.distance.to_string(), r.final_norm.to_string()])?;
            let hist = dir.join(format!("hist_{}.csv", r.label));
            std::fs::write(&hist, r.histogram.to_csv()?).map_err(|e| Error::io(&hist, e))?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::CheckpointTag;
    use crate::nn::{build_cnn, build_mlp, init_xavier_uniform};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp_cp(seed: u64) -> Checkpoint {
        let mut m = build_mlp(5, 4, 3).unwrap();
        init_xavier_uniform(&mut m, &mut ChaCha8Rng::seed_from_u64(seed));
        Checkpoint::from_model(&m, seed, None, CheckpointTag::Init)
    }

    #[test]
    fn identical_pair_has_zero_distance() {
        let cp = mlp_cp(1);
        let r = distance_report(&[RunPair { cohort: "clean".into(), label: "a".into(), init: cp.clone(), last: cp }]).unwrap();
        assert_eq!(r.runs[0].distance, 0.0);
        assert_eq!(r.cohorts[0].std_distance, 0.0);
    }

    #[test]
    fn cohort_statistics() {
        let init = mlp_cp(1);
        let shifted = |by: f64| {
            let mut c = init.clone();
            c.params.iter_mut().take(1).for_each(|p| *p += by);
            c
        };
        let pairs: Vec<RunPair> = [1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &d)| RunPair { cohort: "sad".into(), label: i.to_string(), init: init.clone(), last: shifted(d) })
            .collect();
        let r = distance_report(&pairs).unwrap();
        let c = r.cohort("sad").unwrap();
        assert!((c.mean_distance - 2.0).abs() < 1e-12);
        assert!((c.std_distance - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let cnn = build_cnn(1, 4, 3).unwrap();
        let cp = Checkpoint::from_model(&cnn, 0, None, CheckpointTag::Clean);
        let err = distance_report(&[RunPair { cohort: "x".into(), label: "a".into(), init: mlp_cp(1), last: cp }]);
        assert!(matches!(err, Err(Error::Architecture(_))));
    }

    #[test]
    fn histogram_csv_layout() {
        let h = Histogram::of(&[0.0, 1.0, 2.0, 4.0], 4);
        assert_eq!(h.counts, vec![1, 1, 1, 1]);
        let csv = h.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_left,bin_right,count");
        assert_eq!(lines[1], "0,1,1");
        assert_eq!(lines.len(), 5);
    }

    proptest! {
        #[test]
        fn histogram_partitions_values(v in proptest::collection::vec(-1e3f64..1e3, 1..400)) {
            let h = Histogram::of(&v, HISTOGRAM_BINS);
            prop_assert_eq!(h.total(), v.len() as u64);
            prop_assert_eq!(h.counts.len(), HISTOGRAM_BINS);
        }
    }
}
