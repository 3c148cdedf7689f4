//! Federated averaging over simulated clients.
//!
//! Each round broadcasts the global weights, trains every client on its own
//! shard, averages the returned weights by shard size and evaluates the result
//! on the shared test split. Clients keep their optimizer state across rounds
//! and draw epoch `round·E + j` from their own random stream, so a single
//! client replays centralized training exactly and concurrency never changes
//! results.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::model::ModelWeights;
use crate::partition::PartitionPlan;
use crate::rng::epoch_rng;
use crate::tensor::{AdamConfig, AdamState, Real, Tensor};
use crate::train::{evaluate, new_optimizer, train_epoch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Upper bound on concurrently training clients; `None` uses every core.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_epochs: 1,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
            workers: None,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::Config(
                "rounds and local epochs must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate<T = f32> {
    pub client: usize,
    pub weights: ModelWeights<T>,
    /// Number of local training samples.
    pub samples: usize,
    /// Mean training loss of the last local epoch.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 0 is the evaluation of the initial weights.
    pub round: usize,
    pub acc_global: f64,
    /// Final local loss keyed by client id; empty for round 0.
    pub loss_by_client: BTreeMap<String, f64>,
    pub seconds: f64,
}

/// Trains a copy of `global` for `epochs` epochs on `shard`.
#[allow(clippy::too_many_arguments)]
pub fn local_train<T: Real>(
    global: &ModelWeights<T>,
    shard: &[LabeledExample],
    optimizer: &mut AdamState<T>,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    client: usize,
    round: usize,
) -> Result<ClientUpdate<T>> {
    if shard.is_empty() {
        return Err(Error::Client {
            client,
            message: "empty shard".into(),
        });
    }
    let mut weights = global.clone();
    let mut loss = f64::NAN;
    for j in 0..epochs {
        let mut rng = epoch_rng(seed, client, round * epochs + j);
        loss = train_epoch(&mut weights, optimizer, shard, batch_size, &mut rng)
            .map_err(|e| Error::Client {
                client,
                message: e.to_string(),
            })?
            .loss;
    }
    Ok(ClientUpdate {
        client,
        weights,
        samples: shard.len(),
        loss,
    })
}

/// Sample-weighted average `Σ (n_k/Σn)·w_k`, accumulated in f64 in ascending
/// client-id order.
pub fn fedavg<T: Real>(updates: &[ClientUpdate<T>]) -> Result<ModelWeights<T>> {
    let first = updates.first().ok_or(Error::Empty("client updates"))?;
    let mut order: Vec<&ClientUpdate<T>> = updates.iter().collect();
    order.sort_by_key(|u| u.client);
    for u in &order {
        let same = u.weights.tensors.len() == first.weights.tensors.len()
            && u.weights
                .tensors
                .iter()
                .zip(&first.weights.tensors)
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Client {
                client: u.client,
                message: "weight shapes differ from the other updates".into(),
            });
        }
        if u.samples == 0 {
            return Err(Error::Client {
                client: u.client,
                message: "update trained on zero samples".into(),
            });
        }
    }
    let total: f64 = order.iter().map(|u| u.samples as f64).sum();
    let tensors = (0..first.weights.tensors.len())
        .map(|ti| {
            let mut acc = vec![0f64; first.weights.tensors[ti].len()];
            for u in &order {
                let share = u.samples as f64 / total;
                for (a, &w) in acc.iter_mut().zip(u.weights.tensors[ti].data()) {
                    *a += share * w.as_f64();
                }
            }
            let shape = first.weights.tensors[ti].shape().to_vec();
            Tensor::new(shape, acc.into_iter().map(T::of).collect())
        })
        .collect::<Result<_>>()?;
    Ok(ModelWeights {
        config: first.weights.config.clone(),
        tensors,
    })
}

struct Client<T: Real> {
    id: usize,
    shard: Vec<LabeledExample>,
    optimizer: AdamState<T>,
}

/// Server state between rounds.
pub struct Federation<'a, T: Real> {
    pub global: ModelWeights<T>,
    clients: Vec<Client<T>>,
    test: &'a [LabeledExample],
    config: RoundConfig,
    pool: rayon::ThreadPool,
    rounds_done: usize,
}

impl<'a, T: Real> Federation<'a, T> {
    pub fn new(
        initial: ModelWeights<T>,
        train: &[LabeledExample],
        test: &'a [LabeledExample],
        plan: &PartitionPlan,
        config: RoundConfig,
    ) -> Result<Self> {
        config.validate()?;
        plan.validate(train.len())?;
        let clients = plan
            .shards
            .iter()
            .enumerate()
            .map(|(id, idx)| Client {
                id,
                shard: idx.iter().map(|&i| train[i].clone()).collect(),
                optimizer: new_optimizer(&initial, &config.optimizer),
            })
            .collect();
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(w) = config.workers {
            pool = pool.num_threads(w);
        }
        let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            global: initial,
            clients,
            test,
            config,
            pool,
            rounds_done: 0,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn evaluate_global(&self) -> Result<f64> {
        let eval = evaluate(&self.global, self.test)?;
        let labels: Vec<usize> = self.test.iter().map(|e| e.label).collect();
        accuracy(&eval.predictions, &labels)
    }

    /// Report for the untrained global model.
    pub fn round_zero(&self) -> Result<RoundReport> {
        let t = Instant::now();
        let acc_global = self.evaluate_global()?;
        Ok(RoundReport {
            round: 0,
            acc_global,
            loss_by_client: BTreeMap::new(),
            seconds: t.elapsed().as_secs_f64(),
        })
    }

    /// Client updates for the next round without aggregating them.
    pub fn train_clients(&mut self, parallel: bool) -> Result<Vec<ClientUpdate<T>>> {
        let (global, cfg, round) = (&self.global, &self.config, self.rounds_done);
        let work = |c: &mut Client<T>| {
            local_train(
                global,
                &c.shard,
                &mut c.optimizer,
                cfg.local_epochs,
                cfg.batch_size,
                cfg.seed,
                c.id,
                round,
            )
        };
        if parallel {
            let clients = &mut self.clients;
            self.pool
                .install(|| clients.par_iter_mut().map(work).collect())
        } else {
            self.clients.iter_mut().map(work).collect()
        }
    }

    /// Broadcast, local training, aggregation and evaluation.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        self.run_round_with(true)
    }

    pub fn run_round_with(&mut self, parallel: bool) -> Result<RoundReport> {
        let t = Instant::now();
        let updates = self.train_clients(parallel)?;
        self.global = fedavg(&updates)?;
        self.rounds_done += 1;
        let acc_global = self.evaluate_global()?;
        Ok(RoundReport {
            round: self.rounds_done,
            acc_global,
            loss_by_client: updates
                .iter()
                .map(|u| (u.client.to_string(), u.loss))
                .collect(),
            seconds: t.elapsed().as_secs_f64(),
        })
    }
}

pub struct SimulationResult<T = f32> {
    pub reports: Vec<RoundReport>,
    pub weights: ModelWeights<T>,
}

/// Round 0 evaluation followed by `config.rounds` rounds. `on_round` sees
/// every report as it is produced.
pub fn run_simulation<T: Real>(
    initial: ModelWeights<T>,
    train: &[LabeledExample],
    test: &[LabeledExample],
    plan: &PartitionPlan,
    config: &RoundConfig,
    mut on_round: impl FnMut(&RoundReport) -> Result<()>,
) -> Result<SimulationResult<T>> {
    let mut fed = Federation::new(initial, train, test, plan, config.clone())?;
    let mut reports = Vec::with_capacity(config.rounds + 1);
    let r0 = fed.round_zero()?;
    on_round(&r0)?;
    reports.push(r0);
    for _ in 0..config.rounds {
        let r = fed.run_round()?;
        on_round(&r)?;
        reports.push(r);
    }
    Ok(SimulationResult {
        reports,
        weights: fed.global,
    })
}
