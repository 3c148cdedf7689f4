use std::collections::HashMap;

use fedids::data::{
    build_examples, generate_synthetic, hash_encode, load_csv, load_csv_bytes, split_train_test,
    FlowRecord, LoadOptions, SyntheticSpec,
};
use fedids::tokenizer::{TokenizerModel, CLS};
use sha2::{Digest, Sha256};

fn fixture_spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 8,
        fields: 12,
        rows_per_class: 500,
        noise: 0.1,
        seed: 7,
        ..SyntheticSpec::default()
    }
}

#[test]
fn fixture_file_is_frozen() {
    let data = generate_synthetic(&fixture_spec()).unwrap();
    let digest: String = Sha256::digest(data.to_csv())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(digest, FIXTURE_SHA256);
}

const FIXTURE_SHA256: &str = "7ab281805830c42a67d34ded6f861bc9c59c8a4df57f8df05343c95c9ad89d64";

#[test]
fn fixture_marginals_match_signatures() {
    // Counting oracle over the parsed CSV, not over generator internals.
    let data = generate_synthetic(&fixture_spec()).unwrap();
    let ds = load_csv_bytes(&data.to_csv(), &LoadOptions::default()).unwrap();
    assert_eq!(ds.records.len(), 4000);
    for (c, sig) in data.signatures.iter().enumerate() {
        let rows: Vec<&FlowRecord> = ds
            .records
            .iter()
            .filter(|r| r.label == data.class_names[c])
            .collect();
        assert_eq!(rows.len(), 500);
        for (f, v) in sig.iter().enumerate() {
            let Some(v) = v else { continue };
            let want = format!("v{v}");
            let freq = rows.iter().filter(|r| r.fields[f].1 == want).count() as f64 / 500.0;
            // a noisy redraw lands on the signature value 1/16 of the time
            let expected = 0.9 + 0.1 / 16.0;
            assert!(
                (freq - expected).abs() <= 0.03,
                "class {c} field {f}: {freq}"
            );
        }
    }
}

/// Per-field categorical naive Bayes with add-one smoothing: an independent
/// yardstick for how much label information the fields carry.
fn naive_bayes_accuracy(train: &[FlowRecord], test: &[FlowRecord]) -> f64 {
    let mut class_count: HashMap<&str, f64> = HashMap::new();
    let mut value_count: HashMap<(&str, usize, &str), f64> = HashMap::new();
    for r in train {
        *class_count.entry(&r.label).or_default() += 1.0;
        for (f, (_, v)) in r.fields.iter().enumerate() {
            *value_count.entry((&r.label, f, v)).or_default() += 1.0;
        }
    }
    let mut classes: Vec<&str> = class_count.keys().copied().collect();
    classes.sort();
    let correct = test
        .iter()
        .filter(|r| {
            let best = classes
                .iter()
                .map(|&c| {
                    let n = class_count[c];
                    let score: f64 = n.ln()
                        + r.fields
                            .iter()
                            .enumerate()
                            .map(|(f, (_, v))| {
                                ((value_count.get(&(c, f, v.as_str())).copied().unwrap_or(0.0)
                                    + 1.0)
                                    / (n + 16.0))
                                    .ln()
                            })
                            .sum::<f64>();
                    (c, score)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            best == r.label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn noise_controls_separability() {
    for (noise, lo, hi) in [(0.0, 1.0, 1.0), (1.0, 0.125 - 0.05, 0.125 + 0.05)] {
        let spec = SyntheticSpec {
            noise,
            ..fixture_spec()
        };
        let data = generate_synthetic(&spec).unwrap();
        let ds = load_csv_bytes(&data.to_csv(), &LoadOptions::default()).unwrap();
        let split = split_train_test(ds.records, 0.8, 1).unwrap();
        let acc = naive_bayes_accuracy(&split.train, &split.test);
        assert!((lo..=hi).contains(&acc), "noise {noise}: accuracy {acc}");
    }
}

#[test]
fn examples_start_with_cls_and_reconcile_with_manifest() {
    let data = generate_synthetic(&SyntheticSpec {
        rows_per_class: 50,
        ..fixture_spec()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flows.csv");
    data.write_csv(&path).unwrap();
    let ds = load_csv(&path, &LoadOptions::default()).unwrap();
    assert_eq!(ds.columns.len(), 12);
    let split = split_train_test(ds.records, 0.8, 5).unwrap();
    let corpus: Vec<String> = split.train.iter().map(hash_encode).collect();
    let tok = TokenizerModel::train(&corpus, 512).unwrap();
    let m = &split.manifest;
    let train = build_examples(&split.train, &tok, &m.class_names, 64).unwrap();
    let test = build_examples(&split.test, &tok, &m.class_names, 64).unwrap();
    assert_eq!(train.len(), m.train_counts.iter().sum::<usize>());
    assert_eq!(test.len(), m.test_counts.iter().sum::<usize>());
    for (c, &n) in m.train_counts.iter().enumerate() {
        assert_eq!(train.iter().filter(|e| e.label == c).count(), n);
    }
    assert!(m.total_counts().iter().all(|&n| n == 50));
    for e in train.iter().chain(&test) {
        assert_eq!(e.token_ids[0], CLS);
        assert_eq!(e.token_ids.len(), 64);
        let real = e.attention_mask.iter().filter(|&&b| b == 1).count();
        assert!(e.attention_mask[..real].iter().all(|&b| b == 1));
    }

    // identical records → identical examples; truncation keeps a full mask
    let twice = build_examples(
        &[split.train[0].clone(), split.train[0].clone()],
        &tok,
        &m.class_names,
        64,
    )
    .unwrap();
    assert_eq!(twice[0], twice[1]);
    let short = build_examples(&split.train[..1], &tok, &m.class_names, 4).unwrap();
    assert_eq!(short[0].attention_mask, vec![1, 1, 1, 1]);

    let mut stranger = split.train[0].clone();
    stranger.label = "Nope".into();
    let err = build_examples(&[stranger], &tok, &m.class_names, 64).unwrap_err();
    assert!(err.to_string().contains("Nope"));
}
