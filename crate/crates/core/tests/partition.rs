use fedids::partition::{
    partition_stats, sample_dirichlet, sample_ln_gamma, split_dirichlet, split_iid, PartitionPlan,
};
use fedids::rng::rng_for;
use proptest::prelude::*;

fn balanced(classes: usize, per_class: usize) -> Vec<usize> {
    (0..classes * per_class).map(|i| i % classes).collect()
}

/// Largest gap, in proportion units, between a client's class share and the
/// global share (1/C on balanced data).
fn worst_deviation(plan: &PartitionPlan, labels: &[usize], classes: usize) -> f64 {
    let stats = partition_stats(plan, labels, classes).unwrap();
    let global = 1.0 / classes as f64;
    stats
        .histograms
        .iter()
        .flat_map(|h| {
            let m = h.iter().sum::<usize>() as f64;
            h.iter().map(move |&c| ((c as f64 / m) - global).abs())
        })
        .fold(0.0, f64::max)
}

// 800-sample clients see binomial noise of about 9% of a 1/8 share, so the
// worst of 80 client×class cells sits near 25% relative; a numpy oracle over
// 200 seeds put the worst absolute gap at 0.041 (IID) and 0.015 (alpha=1000).

#[test]
fn iid_clients_mirror_the_global_distribution() {
    let labels = balanced(8, 1000);
    let plan = split_iid(labels.len(), 10, 0).unwrap();
    plan.validate(labels.len()).unwrap();
    let dev = worst_deviation(&plan, &labels, 8);
    assert!(dev <= 0.05, "deviation {dev}");
}

#[test]
fn large_alpha_approaches_iid() {
    let labels = balanced(8, 1000);
    for seed in 0..5 {
        let plan = split_dirichlet(&labels, 10, 1000.0, seed).unwrap();
        plan.validate(labels.len()).unwrap();
        let dev = worst_deviation(&plan, &labels, 8);
        assert!(dev <= 0.02, "seed {seed}: deviation {dev}");
    }
}

#[test]
fn small_alpha_leaves_some_client_without_a_class() {
    let labels = balanced(8, 1000);
    for seed in 0..5 {
        let plan = split_dirichlet(&labels, 10, 0.07, seed).unwrap();
        plan.validate(labels.len()).unwrap();
        let stats = partition_stats(&plan, &labels, 8).unwrap();
        assert!(
            stats.histograms.iter().any(|h| h.contains(&0)),
            "seed {seed}: every client holds every class"
        );
    }
}

#[test]
fn skew_grows_as_alpha_shrinks() {
    let labels = balanced(8, 1000);
    let mean_l1 = |alpha: f64| {
        (0..5)
            .map(|s| {
                let plan = split_dirichlet(&labels, 10, alpha, s).unwrap();
                partition_stats(&plan, &labels, 8).unwrap().mean_l1_distance
            })
            .sum::<f64>()
            / 5.0
    };
    assert!(mean_l1(0.07) > mean_l1(1000.0));
}

#[test]
fn l1_distance_closed_forms() {
    let labels = balanced(4, 25);
    let iid = split_iid(labels.len(), 1, 0).unwrap();
    assert_eq!(
        partition_stats(&iid, &labels, 4).unwrap().l1_distance,
        vec![0.0]
    );
    // client 0 holds only class 0
    let class0: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let others: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
    let plan = PartitionPlan {
        clients: 2,
        alpha: None,
        seed: 0,
        shards: vec![class0, others],
    };
    let stats = partition_stats(&plan, &labels, 4).unwrap();
    assert!((stats.l1_distance[0] - 2.0 * 3.0 / 4.0).abs() < 1e-12);
}

#[test]
fn single_client_gets_everything() {
    let labels = balanced(3, 7);
    for alpha in [0.01, 0.07, 1.0, 1000.0] {
        let plan = split_dirichlet(&labels, 1, alpha, 3).unwrap();
        assert_eq!(plan.shards, vec![(0..21).collect::<Vec<_>>()]);
    }
}

#[test]
fn dirichlet_marginal_mean() {
    let mut rng = rng_for(0, &[]);
    for (alpha, k) in [(0.07, 10), (1.0, 5), (1000.0, 10)] {
        let draws = 10_000;
        let mean = (0..draws)
            .map(|_| sample_dirichlet(&mut rng, alpha, k)[0])
            .sum::<f64>()
            / draws as f64;
        assert!(
            (mean - 1.0 / k as f64).abs() <= 0.02,
            "alpha {alpha}: mean {mean}"
        );
    }
}

#[test]
fn gamma_moments() {
    let mut rng = rng_for(1, &[]);
    for alpha in [0.3, 1.0, 4.5] {
        let n = 50_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_ln_gamma(&mut rng, alpha).exp())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        // Gamma(α, 1) has mean α and variance α
        assert!(
            (mean - alpha).abs() < 0.03 * alpha.max(1.0),
            "alpha {alpha}: mean {mean}"
        );
        assert!(
            (var - alpha).abs() < 0.08 * alpha.max(1.0),
            "alpha {alpha}: var {var}"
        );
    }
}

#[test]
fn plans_round_trip_through_json() {
    let plan = split_dirichlet(&balanced(4, 10), 3, 0.5, 2).unwrap();
    let back: PartitionPlan = serde_json::from_str(&plan.to_json().unwrap()).unwrap();
    assert_eq!(plan, back);
}

proptest! {
    #[test]
    fn plans_are_exact_partitions(
        labels in prop::collection::vec(0usize..6, 1..300),
        k in 1usize..12,
        alpha in 0.01f64..100.0,
        seed in 0u64..1000,
    ) {
        prop_assume!(labels.len() >= k);
        let d = split_dirichlet(&labels, k, alpha, seed).unwrap();
        d.validate(labels.len()).unwrap();
        prop_assert_eq!(&d, &split_dirichlet(&labels, k, alpha, seed).unwrap());
        let i = split_iid(labels.len(), k, seed).unwrap();
        i.validate(labels.len()).unwrap();
        let sizes: Vec<usize> = i.shards.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
