use rayon::prelude::*;

use super::{hash_encode, FlowRecord, LabeledExample};
use crate::error::{Error, Result};
use crate::tokenizer::TokenizerModel;

/// Hash, tokenize and label every record. Output order equals input order.
pub fn build_examples(
    records: &[FlowRecord],
    tokenizer: &TokenizerModel,
    class_names: &[String],
    seq_len: usize,
) -> Result<Vec<LabeledExample>> {
    records
        .par_iter()
        .map(|r| {
            let label = class_names
                .iter()
                .position(|c| *c == r.label)
                .ok_or_else(|| Error::UnknownLabel(r.label.clone()))?;
            let enc = tokenizer.encode(hash_encode(r).as_bytes(), seq_len)?;
            Ok(LabeledExample {
                token_ids: enc.ids,
                attention_mask: enc.mask,
                label,
            })
        })
        .collect()
}
