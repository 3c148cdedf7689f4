//! Byte-level byte-pair encoding.
//!
//! Ids 0..4 are the special tokens, ids 4..260 are the 256 raw bytes and every
//! learned merge gets the next id from 260 upward. Training is greedy: the most
//! frequent adjacent pair is merged until the vocabulary is full or no pair
//! occurs at least twice, with ties going to the smallest `(left, right)`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const BYTE_OFFSET: u32 = 4;
pub const FIRST_MERGE_ID: u32 = BYTE_OFFSET + 256;

/// Emitted by [`TokenizerModel::decode`] for `UNK` and out-of-vocabulary ids.
pub const UNK_MARKER: &[u8] = "\u{FFFD}".as_bytes();

const HEADER: &str = "bbpe-v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct TokenizerModel {
    target_vocab_size: usize,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    expansions: Vec<Vec<u8>>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.target_vocab_size == other.target_vocab_size && self.merges == other.merges
    }
}

impl Eq for TokenizerModel {}

/// Left-to-right, non-overlapping replacement of `pair` with `id`.
fn merge_pair(seq: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut out = 0;
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            seq[out] = id;
            i += 2;
        } else {
            seq[out] = seq[i];
            i += 1;
        }
        out += 1;
    }
    seq.truncate(out);
}

fn bytes_to_ids(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32 + BYTE_OFFSET).collect()
}

impl TokenizerModel {
    fn from_merges(target_vocab_size: usize, merges: Vec<(u32, u32)>) -> Result<Self> {
        if target_vocab_size < FIRST_MERGE_ID as usize {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {target_vocab_size} is below the byte floor {FIRST_MERGE_ID}"
            )));
        }
        if FIRST_MERGE_ID as usize + merges.len() > target_vocab_size {
            return Err(Error::Format(format!(
                "{} merges overflow vocabulary size {target_vocab_size}",
                merges.len()
            )));
        }
        let mut expansions: Vec<Vec<u8>> = vec![Vec::new(); BYTE_OFFSET as usize];
        expansions.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let id = FIRST_MERGE_ID + rank as u32;
            if l < BYTE_OFFSET || r < BYTE_OFFSET || l >= id || r >= id {
                return Err(Error::Format(format!(
                    "merge {rank} ({l}, {r}) references a token not defined before id {id}"
                )));
            }
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(Error::Format(format!("duplicate merge ({l}, {r})")));
            }
            let mut bytes = expansions[l as usize].clone();
            bytes.extend_from_slice(&expansions[r as usize]);
            expansions.push(bytes);
        }
        Ok(Self {
            target_vocab_size,
            merges,
            ranks,
            expansions,
        })
    }

    /// Learns merges from `corpus`.
    pub fn train<S: AsRef<[u8]>>(corpus: &[S], target_vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("tokenizer corpus"));
        }
        if target_vocab_size < FIRST_MERGE_ID as usize {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {target_vocab_size} is below the byte floor {FIRST_MERGE_ID}"
            )));
        }

        // Identical strings are common in flow data; count them once.
        let mut distinct: HashMap<&[u8], u64> = HashMap::new();
        for s in corpus {
            *distinct.entry(s.as_ref()).or_default() += 1;
        }
        let mut unique: Vec<(&[u8], u64)> = distinct.into_iter().collect();
        unique.sort_unstable();
        let weights: Vec<i64> = unique.iter().map(|&(_, c)| c as i64).collect();
        let mut seqs: Vec<Vec<u32>> = unique.iter().map(|(s, _)| bytes_to_ids(s)).collect();

        let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut occurs: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (i, seq) in seqs.iter().enumerate() {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += weights[i];
                occurs.entry((w[0], w[1])).or_default().insert(i);
            }
        }

        let mut merges = Vec::new();
        while FIRST_MERGE_ID as usize + merges.len() < target_vocab_size {
            let best = counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|(&p, _)| p);
            let Some(pair) = best else { break };
            let id = FIRST_MERGE_ID + merges.len() as u32;
            merges.push(pair);

            let mut affected: Vec<usize> = occurs
                .remove(&pair)
                .unwrap_or_default()
                .into_iter()
                .collect();
            affected.sort_unstable();
            for i in affected {
                let w = weights[i];
                for win in seqs[i].windows(2) {
                    *counts.get_mut(&(win[0], win[1])).unwrap() -= w;
                }
                merge_pair(&mut seqs[i], pair, id);
                for win in seqs[i].windows(2) {
                    let p = (win[0], win[1]);
                    *counts.entry(p).or_default() += w;
                    if p != pair {
                        occurs.entry(p).or_default().insert(i);
                    }
                }
            }
            counts.retain(|_, c| *c > 0);
        }
        Self::from_merges(target_vocab_size, merges)
    }

    pub fn target_vocab_size(&self) -> usize {
        self.target_vocab_size
    }

    /// Number of ids in use: specials, bytes and merges.
    pub fn vocab_size(&self) -> usize {
        FIRST_MERGE_ID as usize + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Merged token ids for `text`, no specials.
    pub fn tokenize(&self, text: &[u8]) -> Vec<u32> {
        let mut seq = bytes_to_ids(text);
        // Merging the lowest-ranked pair present, repeatedly, is equivalent to
        // applying every merge in training order.
        loop {
            let best = seq
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank as usize];
            merge_pair(&mut seq, pair, FIRST_MERGE_ID + rank);
        }
        seq
    }

    /// `[CLS] tokens…`, truncated and padded to exactly `max_len`.
    pub fn encode(&self, text: &[u8], max_len: usize) -> Result<Encoding> {
        if max_len < 2 {
            return Err(Error::InvalidArgument(format!(
                "max_len must be at least 2, got {max_len}"
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(self.tokenize(text).into_iter().take(max_len - 1));
        let real = ids.len();
        ids.resize(max_len, PAD);
        let mut mask = vec![1u8; real];
        mask.resize(max_len, 0);
        Ok(Encoding { ids, mask })
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                PAD | CLS | SEP => {}
                UNK => out.extend_from_slice(UNK_MARKER),
                _ => match self.expansions.get(id as usize) {
                    Some(bytes) => out.extend_from_slice(bytes),
                    None => out.extend_from_slice(UNK_MARKER),
                },
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} {}\n", self.target_vocab_size);
        for (rank, (l, r)) in self.merges.iter().enumerate() {
            let _ = writeln!(s, "{l} {r} {}", FIRST_MERGE_ID as usize + rank);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty tokenizer file".into()))?;
        let size = match header.split_whitespace().collect::<Vec<_>>()[..] {
            [HEADER, n] => n
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("vocabulary size {n:?}: {e}")))?,
            _ => return Err(Error::Format(format!("bad tokenizer header {header:?}"))),
        };
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let nums: Vec<u32> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i as u64 + 2,
                    message: format!("{line:?}: {e}"),
                })?;
            let [l, r, id] = nums[..] else {
                return Err(Error::Parse {
                    line: i as u64 + 2,
                    message: format!("expected `left right new`, got {line:?}"),
                });
            };
            if id != FIRST_MERGE_ID + merges.len() as u32 {
                return Err(Error::Parse {
                    line: i as u64 + 2,
                    message: format!("merge id {id} out of sequence"),
                });
            }
            merges.push((l, r));
        }
        Self::from_merges(size, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: u32 = b'a' as u32 + BYTE_OFFSET;
    const B: u32 = b'b' as u32 + BYTE_OFFSET;

    #[test]
    fn single_repeated_byte_learns_one_merge() {
        let tok = TokenizerModel::train(&["aaaa"], 261).unwrap();
        assert_eq!(tok.merges(), &[(A, A)]);
        assert_eq!(tok.vocab_size(), 261);
    }

    #[test]
    fn distinct_bytes_learn_nothing() {
        let tok = TokenizerModel::train(&["a", "b", "c", "xyz"], 300).unwrap();
        assert!(tok.merges().is_empty());
    }

    #[test]
    fn abab_trace() {
        let tok = TokenizerModel::train(&["abab", "abab"], 262).unwrap();
        assert_eq!(tok.merges(), &[(A, B), (260, 260)]);
        let enc = tok.encode(b"abab", 4).unwrap();
        assert_eq!(enc.ids, vec![CLS, 261, PAD, PAD]);
        assert_eq!(enc.mask, vec![1, 1, 0, 0]);
    }

    #[test]
    fn ties_go_to_the_smallest_pair() {
        // (a,b) and (c,d) both occur twice; (a,b) has the smaller ids.
        let tok = TokenizerModel::train(&["cdab", "abcd"], 261).unwrap();
        assert_eq!(tok.merges(), &[(A, B)]);
    }

    #[test]
    fn encode_offsets_and_padding() {
        let tok = TokenizerModel::train(&["x"], 260).unwrap();
        let enc = tok.encode(b"ab", 5).unwrap();
        assert_eq!(enc.ids, vec![1, 101, 102, 0, 0]);
        assert_eq!(enc.mask, vec![1, 1, 1, 0, 0]);
        let empty = tok.encode(b"", 4).unwrap();
        assert_eq!(empty.ids, vec![1, 0, 0, 0]);
        assert_eq!(empty.mask, vec![1, 0, 0, 0]);
        let cut = tok.encode(b"abcdef", 3).unwrap();
        assert_eq!(cut.ids, vec![1, 101, 102]);
        assert_eq!(cut.mask, vec![1, 1, 1]);
        assert!(tok.encode(b"a", 1).is_err());
    }

    #[test]
    fn decode_skips_specials_and_marks_unknowns() {
        let tok = TokenizerModel::train(&["abab", "abab"], 262).unwrap();
        assert_eq!(tok.decode(&[1, 0, 0]), b"");
        assert_eq!(tok.decode(&[101]), b"a");
        assert_eq!(tok.decode(&[261, 2]), b"abab");
        assert_eq!(tok.decode(&[UNK]), UNK_MARKER);
        assert_eq!(tok.decode(&[9999]), UNK_MARKER);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TokenizerModel::train::<&str>(&[], 300).is_err());
        assert!(TokenizerModel::train(&["a"], 259).is_err());
    }

    #[test]
    fn text_format_round_trips() {
        let tok = TokenizerModel::train(&["abab", "abab"], 262).unwrap();
        let text = tok.to_text();
        assert_eq!(text, format!("bbpe-v1 262\n{A} {B} 260\n260 260 261\n"));
        assert_eq!(TokenizerModel::from_text(&text).unwrap(), tok);
    }

    #[test]
    fn text_format_validation() {
        assert!(TokenizerModel::from_text("").is_err());
        assert!(TokenizerModel::from_text("bbpe-v2 300\n").is_err());
        // forward reference
        assert!(TokenizerModel::from_text("bbpe-v1 300\n260 4 260\n").is_err());
        // out of sequence id
        assert!(TokenizerModel::from_text("bbpe-v1 300\n4 4 261\n").is_err());
        // overflow
        assert!(TokenizerModel::from_text("bbpe-v1 260\n4 4 260\n").is_err());
        assert!(TokenizerModel::from_text("bbpe-v1 300\n4 4\n").is_err());
    }
}
