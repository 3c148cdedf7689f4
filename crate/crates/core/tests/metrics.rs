use fedids::data::LabeledExample;
use fedids::metrics::{accuracy, confusion, per_class_metrics, time_inference, MetricsDocument};
use fedids::model::{ModelConfig, ModelWeights};
use proptest::prelude::*;

#[test]
fn accuracy_example() {
    assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
    assert!(accuracy(&[0], &[0, 1]).is_err());
    assert!(accuracy(&[], &[]).is_err());
}

#[test]
fn confusion_and_class_scores_example() {
    let cm = confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
    assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
    let report = per_class_metrics(&cm);
    let c0 = report.per_class[0];
    assert_eq!((c0.precision, c0.recall, c0.support), (1.0, 0.5, 2));
    assert!((c0.f1 - 2.0 / 3.0).abs() < 1e-12);
    let c1 = report.per_class[1];
    assert_eq!((c1.precision, c1.recall), (0.5, 1.0));
    assert!((report.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    assert!(confusion(&[2], &[0], 2).is_err());
}

#[test]
fn empty_class_scores_are_zero() {
    let cm = confusion(&[0, 0], &[0, 0], 3).unwrap();
    let r = per_class_metrics(&cm);
    assert_eq!(r.per_class[1].precision, 0.0);
    assert_eq!(r.per_class[2].f1, 0.0);
    assert_eq!(r.per_class[0].f1, 1.0);
}

#[test]
fn confusion_csv_layout() {
    let cm = confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
    let csv = cm
        .to_csv(&["Normal".into(), "Port_Scanning".into()])
        .unwrap();
    assert_eq!(
        csv,
        "true\\predicted,Normal,Port_Scanning\nNormal,1,1\nPort_Scanning,0,1\n"
    );
}

#[test]
fn metrics_document_round_trips() {
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let doc = MetricsDocument::new(&names, &[0, 1, 2, 2], &[0, 1, 1, 2], 0.5).unwrap();
    assert_eq!(doc.accuracy, 0.75);
    assert_eq!(doc.confusion.trace(), 3);
    let back: MetricsDocument =
        serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
    assert_eq!(back, doc);
}

proptest! {
    #[test]
    fn matrix_is_consistent(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = confusion(&preds, &labels, 5).unwrap();
        prop_assert_eq!(cm.total(), pairs.len() as u64);
        prop_assert_eq!(cm.accuracy(), accuracy(&preds, &labels).unwrap());
        for (c, row) in cm.counts.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<u64>(), labels.iter().filter(|&&l| l == c).count() as u64);
        }
    }

    #[test]
    fn relabelling_permutes_the_matrix(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..100),
        perm in Just((0usize..4).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = confusion(&preds, &labels, 4).unwrap();
        let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let pcm = confusion(&pp, &pl, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert_eq!(pcm.counts[perm[i]][perm[j]], cm.counts[i][j]);
            }
        }
        let (a, b) = (per_class_metrics(&cm), per_class_metrics(&pcm));
        for i in 0..4 {
            prop_assert_eq!(a.per_class[i], b.per_class[perm[i]]);
        }
    }
}

#[test]
fn timing_report() {
    let cfg = ModelConfig {
        num_layers: 1,
        hidden: 8,
        heads: 2,
        intermediate: 32,
        seq_len: 8,
        vocab_size: 300,
        num_classes: 3,
        dropout: 0.1,
    };
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let ex = LabeledExample {
        token_ids: vec![1, 260, 261, 0, 0, 0, 0, 0],
        attention_mask: vec![1, 1, 1, 0, 0, 0, 0, 0],
        label: 0,
    };
    let t = time_inference(&w, &ex, 10, 0).unwrap();
    assert_eq!((t.repetitions, t.warmup, t.batch_size), (10, 3, 1));
    assert!(t.median_seconds > 0.0 && t.median_seconds <= t.p95_seconds);
    assert!(!t.hardware.is_empty());
    assert!(time_inference(&w, &ex, 9, 3).is_err());
}
