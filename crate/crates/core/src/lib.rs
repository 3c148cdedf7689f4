//! Federated intrusion-detection simulator.
//!
//! A compact BERT-style encoder classifies network flows that have been
//! privacy-hashed and tokenized with byte-level BPE. Training runs either
//! centrally or across simulated clients with FedAvg over IID or
//! Dirichlet-skewed partitions, and trained weights can be compressed with
//! per-channel int8 post-training quantization.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fed;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
