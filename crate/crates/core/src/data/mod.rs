//! Flow ingestion: CSV loading, privacy hashing, stratified splits, example
//! building and a synthetic dataset generator.

mod examples;
mod hashing;
mod load;
mod prepare;
mod split;
mod synth;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use examples::build_examples;
pub use hashing::{field_digest, hash_encode};
pub use load::{load_csv, load_csv_bytes, FlowDataset, LoadOptions, DEFAULT_LABEL_COLUMN};
pub use prepare::{prepare, PreparedData};
pub use split::{split_counts, split_train_test, TrainTestSplit};
pub use synth::{generate_synthetic, SyntheticData, SyntheticSpec, EDGE_IIOT_CLASSES};

/// One flow: ordered `(column, value)` pairs plus its class name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowRecord {
    pub fields: Vec<(Arc<str>, String)>,
    pub label: String,
}

/// Model input for one flow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub token_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub label: usize,
}

/// Per-class train/test counts of a split. `class_names` fixes the label ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source_sha256: Option<String>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn total_counts(&self) -> Vec<usize> {
        self.train_counts
            .iter()
            .zip(&self.test_counts)
            .map(|(a, b)| a + b)
            .collect()
    }
}
