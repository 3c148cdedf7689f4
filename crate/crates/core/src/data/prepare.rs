use rayon::prelude::*;

use super::{
    build_examples, hash_encode, split_train_test, DatasetManifest, FlowRecord, LabeledExample,
};
use crate::error::Result;
use crate::tokenizer::TokenizerModel;

/// A split dataset ready for training: the tokenizer is fitted on the
/// training half only.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub manifest: DatasetManifest,
    pub tokenizer: TokenizerModel,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

pub fn prepare(
    records: Vec<FlowRecord>,
    train_fraction: f64,
    seed: u64,
    vocab_size: usize,
    seq_len: usize,
) -> Result<PreparedData> {
    let split = split_train_test(records, train_fraction, seed)?;
    let corpus: Vec<String> = split.train.par_iter().map(hash_encode).collect();
    let tokenizer = TokenizerModel::train(&corpus, vocab_size)?;
    let names = &split.manifest.class_names;
    let train = build_examples(&split.train, &tokenizer, names, seq_len)?;
    let test = build_examples(&split.test, &tokenizer, names, seq_len)?;
    Ok(PreparedData {
        manifest: split.manifest,
        tokenizer,
        train,
        test,
    })
}
