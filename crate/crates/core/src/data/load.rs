use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::FlowRecord;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

pub const DEFAULT_LABEL_COLUMN: &str = "Attack_type";

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub label_column: String,
    /// Columns removed by exact name. Edge-IIoTset ships both a binary and a
    /// multi-class label; whichever one is not the label would leak it.
    pub drop_columns: Vec<String>,
    /// Also drop any column whose name contains "time" (case-insensitive).
    pub drop_time_columns: bool,
    /// Stratified per-class subsample fraction in (0, 1].
    pub fraction: f64,
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            label_column: DEFAULT_LABEL_COLUMN.into(),
            drop_columns: vec![
                "Timestamp".into(),
                "Attack_label".into(),
                "Attack_type".into(),
            ],
            drop_time_columns: true,
            fraction: 1.0,
            seed: 0,
        }
    }
}

impl LoadOptions {
    fn drops(&self, column: &str) -> bool {
        column == self.label_column
            || self.drop_columns.iter().any(|d| d == column)
            || (self.drop_time_columns && column.to_lowercase().contains("time"))
    }
}

#[derive(Clone, Debug)]
pub struct FlowDataset {
    /// Kept feature columns in header order.
    pub columns: Vec<String>,
    pub records: Vec<FlowRecord>,
    /// Hex SHA-256 of the raw input bytes.
    pub source_sha256: String,
}

pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<FlowDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_csv_bytes(&bytes, opts)
}

pub fn load_csv_bytes(bytes: &[u8], opts: &LoadOptions) -> Result<FlowDataset> {
    if !(opts.fraction > 0.0 && opts.fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subsample fraction {} not in (0, 1]",
            opts.fraction
        )));
    }
    let source_sha256 = Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_idx = header
        .iter()
        .position(|h| *h == opts.label_column)
        .ok_or_else(|| {
            Error::Schema(format!(
                "label column {:?} not in header {header:?}",
                opts.label_column
            ))
        })?;
    let kept: Vec<usize> = (0..header.len())
        .filter(|&i| !opts.drops(&header[i]))
        .collect();
    let names: Vec<Arc<str>> = kept
        .iter()
        .map(|&i| Arc::from(header[i].as_str()))
        .collect();

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        records.push(FlowRecord {
            fields: kept
                .iter()
                .zip(&names)
                .map(|(&i, n)| (n.clone(), row[i].to_string()))
                .collect(),
            label: row[label_idx].to_string(),
        });
    }

    if opts.fraction < 1.0 {
        records = subsample(records, opts.fraction, opts.seed);
    }
    Ok(FlowDataset {
        columns: kept.iter().map(|&i| header[i].clone()).collect(),
        records,
        source_sha256,
    })
}

/// Keeps `round(fraction·n_c)` rows of each class (at least one), in file order.
fn subsample(records: Vec<FlowRecord>, fraction: f64, seed: u64) -> Vec<FlowRecord> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(&r.label).or_default().push(i);
    }
    let mut rng = rng_for(seed, &[stream::SUBSAMPLE]);
    let mut keep = vec![false; records.len()];
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        for &i in &idx[..n] {
            keep[i] = true;
        }
    }
    records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(label: &str) -> LoadOptions {
        LoadOptions {
            label_column: label.into(),
            ..LoadOptions::default()
        }
    }

    #[test]
    fn drops_timestamp_and_label_columns() {
        let csv =
            "a,b,Timestamp,Attack_label\n1,2,2021-01-01,0\n3,4,2021-01-02,1\n5,6,2021-01-03,1\n";
        let ds = load_csv_bytes(csv.as_bytes(), &opts("Attack_label")).unwrap();
        assert_eq!(ds.columns, vec!["a", "b"]);
        assert_eq!(ds.records.len(), 3);
        let names: Vec<&str> = ds.records[0].fields.iter().map(|(n, _)| &**n).collect();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(ds.records[2].label, "1");
        assert_eq!(ds.records[1].fields[1].1, "4");
    }

    #[test]
    fn time_substring_is_case_insensitive() {
        let csv = "frame.time_delta,RunTime,x,Attack_type,Attack_label\n1,2,3,Normal,0\n";
        let ds = load_csv_bytes(csv.as_bytes(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.columns, vec!["x"]);
        assert_eq!(ds.records[0].label, "Normal");
    }

    #[test]
    fn missing_label_column_is_a_schema_error() {
        let err = load_csv_bytes(b"a,b\n1,2\n", &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn ragged_row_reports_its_line() {
        let csv = "a,Attack_type\n1,x\n2\n";
        match load_csv_bytes(csv.as_bytes(), &LoadOptions::default()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn subsampling_is_stratified_and_seeded() {
        let mut csv = String::from("v,Attack_type\n");
        for i in 0..1000 {
            csv.push_str(&format!("{i},A\n"));
        }
        for i in 0..10 {
            csv.push_str(&format!("{i},B\n"));
        }
        let mut o = LoadOptions::default();
        o.fraction = 1.0;
        assert_eq!(
            load_csv_bytes(csv.as_bytes(), &o).unwrap().records.len(),
            1010
        );
        o.fraction = 0.3;
        o.seed = 11;
        let a = load_csv_bytes(csv.as_bytes(), &o).unwrap();
        let count = |l: &str| a.records.iter().filter(|r| r.label == l).count();
        assert_eq!(count("A"), 300);
        assert_eq!(count("B"), 3);
        let b = load_csv_bytes(csv.as_bytes(), &o).unwrap();
        assert_eq!(a.records, b.records);
        o.fraction = 0.0;
        assert!(load_csv_bytes(csv.as_bytes(), &o).is_err());
    }
}
