//! JSONL metrics with a CSV mirror.
//!
//! The first JSONL line is the run's [`RunMeta`] (which embeds the full
//! config); every following line is one [`EpochRow`]. The CSV mirror holds the
//! same rows in [`CSV_COLUMNS`] order.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{EpochRow, RunMeta, RunRecord};
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 10] = [
    "epoch",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "weight_norm",
    "dist_from_init",
    "elapsed_secs",
    "fit_loss",
    "fit_acc",
];

/// Append-only writer for one run.
pub struct MetricsWriter {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    jsonl_path: PathBuf,
}

impl MetricsWriter {
    /// Creates `metrics.jsonl` and `metrics.csv` in `dir` and writes the header line.
    pub fn create(dir: impl AsRef<Path>, meta: &RunMeta) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let jsonl_path = dir.join("metrics.jsonl");
        let csv_path = dir.join("metrics.csv");
        let file = File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?;
        let mut jsonl = BufWriter::new(file);
        serde_json::to_writer(&mut jsonl, meta)?;
        jsonl.write_all(b"\n").map_err(|e| Error::io(&jsonl_path, e))?;
        let mut csv = csv::Writer::from_path(&csv_path)?;
        csv.write_record(CSV_COLUMNS)?;
        Ok(Self { jsonl, csv, jsonl_path })
    }

    pub fn append(&mut self, row: &EpochRow) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, row)?;
        self.jsonl.write_all(b"\n").map_err(|e| Error::io(&self.jsonl_path, e))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.csv.write_record([
            row.epoch.to_string(),
            row.train_loss.to_string(),
            row.train_acc.to_string(),
            row.test_loss.to_string(),
            row.test_acc.to_string(),
            row.weight_norm.to_string(),
            row.dist_from_init.to_string(),
            row.elapsed_secs.to_string(),
            opt(row.fit_loss),
            opt(row.fit_acc),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.jsonl.flush().map_err(|e| Error::io(&self.jsonl_path, e))?;
        self.csv.flush().map_err(|e| Error::io(&self.jsonl_path, e))?;
        Ok(())
    }

    /// Writes a whole record (initial row included) and flushes.
    pub fn write_record(dir: impl AsRef<Path>, record: &RunRecord) -> Result<()> {
        let mut w = Self::create(dir, &record.meta)?;
        w.append(&record.initial)?;
        for row in &record.rows {
            w.append(row)?;
        }
        w.flush()
    }
}

/// Reads a metrics file back into its header and rows.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<(RunMeta, Vec<EpochRow>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let meta: RunMeta = serde_json::from_str(&first)?;
    let mut rows = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok((meta, rows))
}

/// The JSONL text with wall-clock fields removed, for reproducibility checks.
pub fn deterministic_payload(jsonl: &str) -> Result<String> {
    let mut out = String::with_capacity(jsonl.len());
    for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let mut v: serde_json::Value = serde_json::from_str(line)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("elapsed_secs");
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::synthetic_pair;
    use crate::experiment::{train_clean, TrainConfig};

    fn record(seed: u64) -> RunRecord {
        let (tr, te) = synthetic_pair(30, 10, 3, 1, 4, 0.2, 5).unwrap();
        let cfg = TrainConfig { hidden: 8, epochs: 3, batch_size: 8, seed, ..TrainConfig::default() };
        train_clean(&tr, &te, &cfg).unwrap().record
    }

    #[test]
    fn jsonl_round_trip_and_header_first() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record(1);
        MetricsWriter::write_record(dir.path(), &rec).unwrap();
        let (meta, rows) = read_jsonl(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(meta, rec.meta);
        assert_eq!(rows.len(), rec.rows.len() + 1);
        assert_eq!(rows[1..], rec.rows[..]);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    #[test]
    fn payload_ignores_wall_clock() {
        let a = "{\"epoch\":1,\"elapsed_secs\":0.5,\"train_acc\":0.25}\n";
        let b = "{\"epoch\":1,\"elapsed_secs\":9.0,\"train_acc\":0.25}\n";
        assert_eq!(deterministic_payload(a).unwrap(), deterministic_payload(b).unwrap());
        let c = "{\"epoch\":1,\"elapsed_secs\":9.0,\"train_acc\":0.5}\n";
        assert_ne!(deterministic_payload(a).unwrap(), deterministic_payload(c).unwrap());
    }

    #[test]
    fn same_seed_same_payload() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        MetricsWriter::write_record(d1.path(), &record(4)).unwrap();
        MetricsWriter::write_record(d2.path(), &record(4)).unwrap();
        let read = |d: &Path| deterministic_payload(&fs::read_to_string(d.join("metrics.jsonl")).unwrap()).unwrap();
        assert_eq!(read(d1.path()), read(d2.path()));
    }
}
