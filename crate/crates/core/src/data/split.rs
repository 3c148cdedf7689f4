use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{DatasetManifest, FlowRecord};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// `(train, test)` sizes for a class of `n` samples: train is
/// `fraction·n` rounded to the nearest integer.
///
/// Nearest rounding reproduces every row of the Edge-IIoTset class table
/// (e.g. 34,931 → 27,945 / 6,986), which flooring does not.
pub fn split_counts(n: usize, fraction: f64) -> (usize, usize) {
    let train = ((fraction * n as f64).round() as usize).min(n);
    (train, n - train)
}

#[derive(Clone, Debug)]
pub struct TrainTestSplit {
    pub train: Vec<FlowRecord>,
    pub test: Vec<FlowRecord>,
    pub manifest: DatasetManifest,
}

/// Stratified seeded split. Class ids follow the sorted class names; both
/// halves keep the input order.
pub fn split_train_test(
    records: Vec<FlowRecord>,
    train_fraction: f64,
    seed: u64,
) -> Result<TrainTestSplit> {
    if records.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} not in [0, 1]"
        )));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(&r.label).or_default().push(i);
    }
    let mut rng = rng_for(seed, &[stream::SPLIT]);
    let mut in_train = vec![false; records.len()];
    let mut manifest = DatasetManifest {
        class_names: Vec::with_capacity(by_class.len()),
        train_counts: Vec::with_capacity(by_class.len()),
        test_counts: Vec::with_capacity(by_class.len()),
        train_fraction,
        seed,
        source_sha256: None,
    };
    for (name, idx) in by_class.iter_mut() {
        idx.shuffle(&mut rng);
        let (n_train, n_test) = split_counts(idx.len(), train_fraction);
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
        manifest.class_names.push(name.to_string());
        manifest.train_counts.push(n_train);
        manifest.test_counts.push(n_test);
    }
    let (train, test): (Vec<_>, Vec<_>) = records.into_iter().zip(in_train).partition(|(_, t)| *t);
    Ok(TrainTestSplit {
        train: train.into_iter().map(|(r, _)| r).collect(),
        test: test.into_iter().map(|(r, _)| r).collect(),
        manifest,
    })
}
