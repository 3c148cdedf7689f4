use fedids::tokenizer::{TokenizerModel, CLS, PAD};
use proptest::prelude::*;

fn hex_corpus() -> Vec<String> {
    (0..200u32)
        .map(|i| {
            format!(
                "{:08x} {:08x} 1f2e3d4c",
                i % 7 * 0x1111_1111,
                (i % 3) * 0xdead
            )
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn decode_inverts_encode(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let tok = TokenizerModel::train(&hex_corpus(), 400).unwrap();
        let enc = tok.encode(&bytes, bytes.len() + 2).unwrap();
        prop_assert_eq!(enc.ids[0], CLS);
        prop_assert_eq!(tok.decode(&enc.ids), bytes);
    }
}

proptest! {
    #[test]
    fn more_merges_never_lengthen(text in "[0-9a-f ]{0,80}", k in 260usize..330) {
        let corpus = hex_corpus();
        let small = TokenizerModel::train(&corpus, k).unwrap();
        let large = TokenizerModel::train(&corpus, k + 1).unwrap();
        prop_assert!(large.merges().starts_with(small.merges()));
        prop_assert!(large.tokenize(text.as_bytes()).len() <= small.tokenize(text.as_bytes()).len());
    }
}

#[test]
fn retraining_is_deterministic() {
    let a = TokenizerModel::train(&hex_corpus(), 500).unwrap();
    let b = TokenizerModel::train(&hex_corpus(), 500).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert!(a.vocab_size() <= 500);
}

#[test]
fn mask_is_a_prefix_of_ones() {
    let tok = TokenizerModel::train(&hex_corpus(), 400).unwrap();
    for text in ["", "00000000", "deadbeef 12345678 00000000 ffffffff"] {
        let enc = tok.encode(text.as_bytes(), 16).unwrap();
        let real = enc.mask.iter().filter(|&&m| m == 1).count();
        assert!(enc.mask[..real].iter().all(|&m| m == 1));
        assert!(enc.ids[real..].iter().all(|&id| id == PAD));
        assert_eq!(enc.ids.len(), 16);
    }
}

#[test]
fn save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.bbpe");
    let tok = TokenizerModel::train(&hex_corpus(), 300).unwrap();
    tok.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("bbpe-v1 300\n"));
    assert_eq!(TokenizerModel::load(&path).unwrap(), tok);
}
