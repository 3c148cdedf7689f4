//! Splitting a training set across simulated clients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Disjoint per-client index sets over a dataset. Each shard is sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub clients: usize,
    /// Dirichlet concentration; `None` for IID.
    pub alpha: Option<f64>,
    pub seed: u64,
    pub shards: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_samples(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    /// Checks that the shards are non-empty, disjoint and cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.shards.len() != self.clients {
            return Err(Error::Format(format!(
                "plan lists {} shards for {} clients",
                self.shards.len(),
                self.clients
            )));
        }
        let mut seen = vec![false; n];
        for (c, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Client {
                    client: c,
                    message: "empty shard".into(),
                });
            }
            for &i in shard {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Client {
                        client: c,
                        message: format!("index {i} out of range or assigned twice"),
                    });
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "index {missing} not assigned to any client"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

fn check_clients(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "client count must be at least 1".into(),
        ));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot cover {k} clients"
        )));
    }
    Ok(())
}

/// Seeded global shuffle dealt round-robin; shard sizes differ by at most 1.
pub fn split_iid(n: usize, k: usize, seed: u64) -> Result<PartitionPlan> {
    check_clients(n, k)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::PARTITION]));
    let mut shards = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, i) in order.into_iter().enumerate() {
        shards[pos % k].push(i);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(PartitionPlan {
        clients: k,
        alpha: None,
        seed,
        shards,
    })
}

/// `ln X` for `X ~ Gamma(alpha, 1)`.
///
/// Marsaglia-Tsang squeeze/rejection for `alpha ≥ 1`; for `alpha < 1` the
/// boost `X = Y·U^{1/alpha}` with `Y ~ Gamma(alpha + 1)`. Working in log
/// space keeps tiny concentrations from underflowing to zero.
pub fn sample_ln_gamma<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> f64 {
    if alpha < 1.0 {
        let u: f64 = rng.random();
        return sample_ln_gamma(rng, alpha + 1.0) + u.ln() / alpha;
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.random();
        if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// One draw from the symmetric Dirichlet(alpha·1_k).
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    let logs: Vec<f64> = (0..k).map(|_| sample_ln_gamma(rng, alpha)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Integer counts summing to `n`, proportional to `p`: floors first, then
/// the leftover units go to the largest remainders (lower index on ties).
fn largest_remainder(p: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|&q| q * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Dirichlet label skew: each class's shuffled indices are dealt to clients
/// in proportions drawn from Dirichlet(alpha·1_k). Clients left empty then
/// take one sample each from the currently largest shard.
pub fn split_dirichlet(labels: &[usize], k: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    check_clients(labels.len(), k)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng_for(seed, &[stream::PARTITION]);
    let mut shards = vec![Vec::new(); k];
    for mut idx in by_class {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let p = sample_dirichlet(&mut rng, alpha, k);
        let mut rest = idx.as_slice();
        for (client, n) in largest_remainder(&p, idx.len()).into_iter().enumerate() {
            let (take, tail) = rest.split_at(n);
            shards[client].extend_from_slice(take);
            rest = tail;
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..k)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .unwrap();
        let moved = shards[donor].pop().unwrap();
        shards[empty].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(PartitionPlan {
        clients: k,
        alpha: Some(alpha),
        seed,
        shards,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    /// `histograms[client][class]`.
    pub histograms: Vec<Vec<usize>>,
    /// L1 distance of each client's label distribution from the global one.
    pub l1_distance: Vec<f64>,
    pub mean_l1_distance: f64,
}

pub fn partition_stats(
    plan: &PartitionPlan,
    labels: &[usize],
    num_classes: usize,
) -> Result<PartitionStats> {
    plan.validate(labels.len())?;
    let mut global = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::Index {
                what: "label",
                index: l,
                bound: num_classes,
            });
        }
        global[l] += 1;
    }
    let n = labels.len() as f64;
    let histograms: Vec<Vec<usize>> = plan
        .shards
        .iter()
        .map(|s| {
            let mut h = vec![0usize; num_classes];
            for &i in s {
                h[labels[i]] += 1;
            }
            h
        })
        .collect();
    let l1_distance: Vec<f64> = histograms
        .iter()
        .map(|h| {
            let m = h.iter().sum::<usize>() as f64;
            h.iter()
                .zip(&global)
                .map(|(&a, &g)| (a as f64 / m - g as f64 / n).abs())
                .sum()
        })
        .collect();
    let mean_l1_distance = l1_distance.iter().sum::<f64>() / l1_distance.len() as f64;
    Ok(PartitionStats {
        histograms,
        l1_distance,
        mean_l1_distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.2, 0.7], 10), vec![1, 2, 7]);
        assert_eq!(largest_remainder(&[1.0, 0.0], 4), vec![4, 0]);
    }

    #[test]
    fn iid_balance() {
        let p = split_iid(10, 3, 0).unwrap();
        let mut sizes: Vec<usize> = p.shards.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert_eq!(
            split_iid(10, 1, 5).unwrap().shards[0],
            (0..10).collect::<Vec<_>>()
        );
        assert!(split_iid(2, 3, 0).is_err());
        assert!(split_iid(2, 0, 0).is_err());
    }

    #[test]
    fn tiny_alpha_does_not_underflow() {
        let mut rng = rng_for(0, &[]);
        for _ in 0..1000 {
            let p = sample_dirichlet(&mut rng, 0.001, 10);
            assert!(p.iter().all(|x| x.is_finite()));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
