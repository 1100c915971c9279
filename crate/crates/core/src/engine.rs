//! Synchronous and asynchronous training loops and membership metrics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationContext, AggregationOutcome, AggregationRule};
use crate::attacks::{self, AttackKind, AttackerContext, CraftResult, Knowledge, References};
use crate::config::{participants, DataSource, DelayModel, ExperimentConfig, PartitionMode};
use crate::data::{self, AttackerData, Dataset, Partition};
use crate::error::{Error, Result};
use crate::model::{self, Example, ModelParams};
use crate::rng;
use crate::tensor::GradientVector;

/// `ceil(C * n)` distinct client ids, ascending, deterministic per
/// `(seed, round)`.
pub fn select_clients(n: usize, c: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidC(c));
    }
    let k = participants(n, c);
    let mut picked = index::sample(&mut rng::stream(seed, "select-clients", round as u64), n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Fraction of `test_set` classified correctly.
pub fn test_accuracy(params: &ModelParams, test_set: &[Example]) -> Result<f64> {
    model::accuracy(params, test_set)
}

/// Summary of one crafted malicious update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftSummary {
    pub alpha: Option<f64>,
    pub feasible: Option<bool>,
    pub objective: Option<f64>,
    pub angle_budget: Option<f64>,
    pub adaptive_iterations: Option<usize>,
    pub reference_count: usize,
    pub references: attacks::Provenance,
}

/// One asynchronous arrival.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedUpdate {
    pub client: usize,
    pub dispatched: usize,
    pub applied: usize,
    /// Rounds between dispatch and application.
    pub staleness: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    /// Membership guesses on the evaluation set after this round's update.
    pub predictions: Vec<bool>,
    pub membership_correct: usize,
    pub participants: Vec<usize>,
    /// Clients kept by the last aggregation of the round.
    pub kept_clients: Vec<usize>,
    pub craft: Option<CraftSummary>,
    pub applied: Vec<AppliedUpdate>,
}

impl RoundRecord {
    pub fn kept_count(&self) -> usize {
        self.kept_clients.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    /// Ground-truth membership of the evaluation set.
    pub truth: Vec<bool>,
    pub malicious_clients: Vec<usize>,
    pub attack_accuracy: f64,
    pub attack_precision: f64,
    pub attack_recall: f64,
    /// Round index (into `records`) with the best attack accuracy.
    pub best_round: usize,
    pub final_test_accuracy: f64,
}

fn correct_count(predictions: &[bool], truth: &[bool]) -> usize {
    predictions.iter().zip(truth).filter(|(p, t)| p == t).count()
}

/// Index of the first record with the highest membership accuracy.
pub fn best_round(records: &[RoundRecord], truth: &[bool]) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut best = 0;
    let mut best_correct = correct_count(&records[0].predictions, truth);
    for (i, r) in records.iter().enumerate().skip(1) {
        let c = correct_count(&r.predictions, truth);
        if c > best_correct {
            best = i;
            best_correct = c;
        }
    }
    Ok(best)
}

/// Highest per-round fraction of correct membership guesses.
pub fn attack_accuracy(records: &[RoundRecord], truth: &[bool]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptySet);
    }
    let best = best_round(records, truth)?;
    Ok(correct_count(&records[best].predictions, truth) as f64 / truth.len() as f64)
}

/// Precision and recall at the accuracy-best round. Precision is 0 when
/// nothing is predicted a member.
pub fn attack_precision_recall(records: &[RoundRecord], truth: &[bool]) -> Result<(f64, f64)> {
    let best = best_round(records, truth)?;
    let members = truth.iter().filter(|&&t| t).count();
    if members == 0 {
        return Err(Error::InvalidParams("evaluation set has no members".into()));
    }
    let preds = &records[best].predictions;
    let tp = preds.iter().zip(truth).filter(|(&p, &t)| p && t).count();
    let predicted = preds.iter().filter(|&&p| p).count();
    let precision = if predicted == 0 {
        0.0
    } else {
        tp as f64 / predicted as f64
    };
    Ok((precision, tp as f64 / members as f64))
}

/// Worker parallelism for per-client gradients. Zero runs sequentially;
/// results are identical at any setting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub threads: usize,
}

impl RunOptions {
    /// Reads `FEDARENA_THREADS` (unset or unparsable means 0).
    pub fn from_env() -> Self {
        Self {
            threads: std::env::var("FEDARENA_THREADS")
                .ok()
                .and_then(|v| v.trim().parse().ok())
                .unwrap_or(0),
        }
    }
}

/// A crafted malicious update as seen by observers.
pub struct CraftEvent<'a> {
    pub round: usize,
    pub kind: AttackKind,
    pub references: &'a References,
    pub gradient: &'a GradientVector,
    pub fedpoisonmia: Option<&'a CraftResult>,
}

/// Hooks into a running experiment.
pub trait RunObserver {
    fn on_craft(&mut self, _event: &CraftEvent<'_>) {}
}

/// Observer that ignores every event.
pub struct NoObserver;

impl RunObserver for NoObserver {}

/// Data and state derived from a config before the first round.
pub struct Setup {
    pub train: Dataset,
    pub test: Dataset,
    pub validation: Dataset,
    pub partition: Partition,
    pub malicious: Vec<usize>,
    pub attacker_data: AttackerData,
    pub attacker: Option<AttackerContext>,
    pub initial: ModelParams,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let d = &config.data;
        let full = match d.source {
            DataSource::Synthetic => data::synth_dataset(d.classes, d.features, d.per_class, d.spread, seed)?,
            DataSource::Csv => data::load_csv(d.path.as_deref().unwrap_or(Path::new("")))?,
        };
        let splits = data::split_dataset(
            &full,
            d.holdout_fraction,
            d.test_fraction,
            d.validation_fraction,
            seed,
        )?;
        let n = config.clients;
        let partition = match config.partition.mode {
            PartitionMode::Iid => data::partition_iid(&splits.train, n, seed)?,
            PartitionMode::Noniid => data::partition_noniid(&splits.train, n, config.partition.beta, seed)?,
        };
        let m = config.malicious_count();
        let malicious: Vec<usize> = (n - m..n).collect();
        let mask_samples = if m == 0 { 0 } else { d.mask_samples };
        let attacker_data = data::build_attacker_data(
            &partition,
            &splits.train,
            &splits.holdout,
            &malicious,
            d.attack_samples,
            mask_samples,
            seed,
        )?;
        let attacker = if config.attack.kind.is_active() {
            Some(AttackerContext::new(
                &attacker_data,
                config.attack_strategy(),
                full.num_classes(),
                seed,
            )?)
        } else {
            None
        };
        let shapes = model::mlp_shapes(full.feature_dim(), &config.hidden, full.num_classes());
        let initial = model::init_params(&shapes, seed)?;
        Ok(Self {
            train: splits.train,
            test: splits.test,
            validation: splits.validation,
            partition,
            malicious,
            attacker_data,
            attacker,
            initial,
        })
    }

    fn is_malicious(&self, client: usize) -> bool {
        self.malicious.binary_search(&client).is_ok()
    }

    fn shard_weight(&self, client: usize) -> f64 {
        self.partition.shard(client).len() as f64
    }

    /// The minibatch client `client` draws in `round`, in shard order.
    pub fn minibatch(&self, config: &ExperimentConfig, client: usize, round: usize) -> Vec<&Example> {
        let shard = self.partition.shard(client);
        let size = config.batch_size.min(shard.len());
        let stream_index = (round as u64) * config.clients as u64 + client as u64;
        let mut rng = rng::stream(config.seed, "minibatch", stream_index);
        let mut picked = index::sample(&mut rng, shard.len(), size).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| self.train.get(shard[i])).collect()
    }
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    setup: &'a Setup,
    rule: AggregationRule,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Runner<'a> {
    fn new(config: &'a ExperimentConfig, setup: &'a Setup, options: RunOptions) -> Result<Self> {
        let pool = if options.threads > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(options.threads)
                    .build()
                    .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            config,
            setup,
            rule: config.aggregation_rule(),
            pool,
        })
    }

    fn honest_gradients(
        &self,
        params: &ModelParams,
        clients: &[usize],
        round: usize,
    ) -> Result<Vec<GradientVector>> {
        let work = |&c: &usize| model::gradient(params, &self.setup.minibatch(self.config, c, round));
        match &self.pool {
            Some(pool) => pool.install(|| clients.par_iter().map(work).collect()),
            None => clients.iter().map(work).collect(),
        }
    }

    fn references(
        &self,
        params: &ModelParams,
        benign: &[GradientVector],
        round: usize,
        knowledge: Knowledge,
    ) -> Result<References> {
        match knowledge {
            Knowledge::Full => Ok(References::from_benign(benign.to_vec())),
            Knowledge::Partial => {
                let batches: Vec<Vec<Example>> = self
                    .setup
                    .malicious
                    .iter()
                    .map(|&c| {
                        self.setup
                            .minibatch(self.config, c, round)
                            .into_iter()
                            .cloned()
                            .collect()
                    })
                    .collect();
                References::from_malicious_batches(params, &batches)
            }
        }
    }

    /// The malicious update for `round`, shared by every selected
    /// malicious client.
    fn craft(
        &self,
        params: &ModelParams,
        benign: &[GradientVector],
        round: usize,
        observer: &mut dyn RunObserver,
    ) -> Result<(GradientVector, CraftSummary)> {
        let ctx = self.setup.attacker.as_ref().expect("active attack has a context");
        let strategy = &ctx.strategy;
        let refs = self.references(params, benign, round, strategy.knowledge)?;
        let mut summary = CraftSummary {
            alpha: None,
            feasible: None,
            objective: None,
            angle_budget: None,
            adaptive_iterations: None,
            reference_count: refs.gradients().len(),
            references: refs.provenance(),
        };
        let mut poison = None;
        let gradient = match strategy.kind {
            AttackKind::GradientAscent => {
                attacks::craft_gradient_ascent(params, &ctx.attack_set, strategy.ascent_scale)?
            }
            AttackKind::Agrevader => {
                attacks::craft_agrevader(params, &ctx.flipped_attack_set, &ctx.mask_set, refs.gradients())?
            }
            AttackKind::FedPoisonMia => {
                let r = attacks::craft_fedpoisonmia(ctx, params, &refs)?;
                summary.alpha = Some(r.chosen_alpha);
                summary.feasible = Some(r.feasible);
                summary.objective = Some(r.objective_value);
                summary.angle_budget = Some(r.angle_budget);
                let g = r.g_malicious.clone();
                poison = Some(r);
                g
            }
            AttackKind::Adaptive => {
                let trim = self
                    .config
                    .attack
                    .adaptive_trim
                    .or_else(|| self.rule.trim())
                    .unwrap_or(1);
                let max_trim = refs.gradients().len() / 2;
                let g_attack = attacks::attack_gradient(params, &ctx.flipped_attack_set)?;
                let out = attacks::craft_adaptive(refs.gradients(), &g_attack, trim.min(max_trim))?;
                summary.adaptive_iterations = Some(out.iterations);
                out.gradient
            }
            AttackKind::None | AttackKind::Passive => unreachable!("passive attackers do not craft"),
        };
        observer.on_craft(&CraftEvent {
            round,
            kind: strategy.kind,
            references: &refs,
            gradient: &gradient,
            fedpoisonmia: poison.as_ref(),
        });
        Ok((gradient, summary))
    }

    /// Gradients for `selected` (ascending ids) computed at `params`.
    fn round_gradients(
        &self,
        params: &ModelParams,
        selected: &[usize],
        round: usize,
        observer: &mut dyn RunObserver,
    ) -> Result<(Vec<GradientVector>, Option<CraftSummary>)> {
        let active = self.setup.attacker.is_some();
        let (crafted_ids, honest_ids): (Vec<usize>, Vec<usize>) = selected
            .iter()
            .partition(|&&c| active && self.setup.is_malicious(c));
        let honest = self.honest_gradients(params, &honest_ids, round)?;
        let benign: Vec<GradientVector> = honest_ids
            .iter()
            .zip(&honest)
            .filter(|(c, _)| !self.setup.is_malicious(**c))
            .map(|(_, g)| g.clone())
            .collect();
        let crafted = if crafted_ids.is_empty() {
            None
        } else {
            Some(self.craft(params, &benign, round, observer)?)
        };
        let mut honest = honest.into_iter();
        let grads = selected
            .iter()
            .map(|c| {
                if crafted_ids.contains(c) {
                    crafted
                        .as_ref()
                        .expect("crafted when malicious selected")
                        .0
                        .clone()
                } else {
                    honest.next().expect("one honest gradient per honest id")
                }
            })
            .collect();
        Ok((grads, crafted.map(|c| c.1)))
    }

    fn aggregate(
        &self,
        rule: &AggregationRule,
        params: &ModelParams,
        clients: &[usize],
        grads: &[GradientVector],
        dp_index: u64,
    ) -> Result<AggregationOutcome> {
        let weights: Vec<f64> = clients.iter().map(|&c| self.setup.shard_weight(c)).collect();
        let ctx = AggregationContext {
            weights: Some(&weights),
            model: Some(params),
            validation: Some(self.setup.validation.examples()),
            learning_rate: self.config.learning_rate,
            seed: rng::derive_seed(self.config.seed, "aggregation", dp_index),
        };
        aggregate(rule, grads, &ctx)
    }

    fn record(
        &self,
        round: usize,
        params: &ModelParams,
        participants: Vec<usize>,
        kept_clients: Vec<usize>,
        craft: Option<CraftSummary>,
        applied: Vec<AppliedUpdate>,
    ) -> Result<RoundRecord> {
        let predictions = attacks::passive_infer(params, &self.setup.attacker_data.attack_set)?;
        Ok(RoundRecord {
            round,
            test_accuracy: test_accuracy(params, self.setup.test.examples())?,
            membership_correct: correct_count(&predictions, &self.setup.attacker_data.member_flags),
            predictions,
            participants,
            kept_clients,
            craft,
            applied,
        })
    }

    fn finish(&self, records: Vec<RoundRecord>) -> Result<ExperimentResult> {
        let truth = self.setup.attacker_data.member_flags.clone();
        let (precision, recall) = attack_precision_recall(&records, &truth)?;
        Ok(ExperimentResult {
            attack_accuracy: attack_accuracy(&records, &truth)?,
            attack_precision: precision,
            attack_recall: recall,
            best_round: best_round(&records, &truth)?,
            final_test_accuracy: records.last().map_or(0.0, |r| r.test_accuracy),
            malicious_clients: self.setup.malicious.clone(),
            truth,
            records,
        })
    }

    fn run_sync(&self, observer: &mut dyn RunObserver) -> Result<ExperimentResult> {
        let config = self.config;
        let mut params = self.setup.initial.clone();
        let mut records = Vec::with_capacity(config.rounds);
        for round in 0..config.rounds {
            let mut step = || -> Result<RoundRecord> {
                let selected = select_clients(config.clients, config.participation, round, config.seed)?;
                let (grads, craft) = self.round_gradients(&params, &selected, round, observer)?;
                let outcome = self.aggregate(&self.rule, &params, &selected, &grads, round as u64)?;
                params = model::apply_update(&params, &outcome.aggregate, config.learning_rate)?;
                let kept = outcome.kept_indices.iter().map(|&i| selected[i]).collect();
                self.record(round, &params, selected, kept, craft, Vec::new())
            };
            records.push(step().map_err(|e| e.at_round(round))?);
        }
        self.finish(records)
    }

    fn run_async(&self, observer: &mut dyn RunObserver) -> Result<ExperimentResult> {
        let config = self.config;
        let tau_max = config.asynchronous.tau_max;
        let mut params = self.setup.initial.clone();
        let mut records = Vec::with_capacity(config.rounds);
        // (arrival, dispatch, client) -> gradient
        let mut in_flight: BTreeMap<(usize, usize, usize), GradientVector> = BTreeMap::new();
        let mut buffer: BTreeMap<usize, GradientVector> = BTreeMap::new();
        let mut aggregations = 0u64;
        for round in 0..config.rounds {
            let mut step = || -> Result<RoundRecord> {
                let selected = select_clients(config.clients, config.participation, round, config.seed)?;
                let (grads, craft) = self.round_gradients(&params, &selected, round, observer)?;
                for (&client, g) in selected.iter().zip(grads) {
                    let delay = match config.asynchronous.delays {
                        DelayModel::Fixed => tau_max,
                        DelayModel::Uniform => {
                            let idx = (round as u64) * config.clients as u64 + client as u64;
                            rng::stream(config.seed, "async-delay", idx).random_range(0..=tau_max)
                        }
                    };
                    in_flight.insert((round + delay, round, client), g);
                }
                let arrived: Vec<(usize, usize, usize)> = in_flight
                    .range((round, 0, 0)..(round + 1, 0, 0))
                    .map(|(k, _)| *k)
                    .collect();
                let mut applied = Vec::with_capacity(arrived.len());
                let mut kept_clients = Vec::new();
                for key in arrived {
                    let g = in_flight.remove(&key).expect("key listed from map");
                    let (_, dispatched, client) = key;
                    let (clients, grads) = if self.rule.combines_updates() {
                        buffer.insert(client, g);
                        (
                            buffer.keys().copied().collect(),
                            buffer.values().cloned().collect(),
                        )
                    } else {
                        (vec![client], vec![g])
                    };
                    let rule = self.rule.fit_to(grads.len());
                    let outcome = self.aggregate(&rule, &params, &clients, &grads, aggregations)?;
                    aggregations += 1;
                    params = model::apply_update(&params, &outcome.aggregate, config.learning_rate)?;
                    kept_clients = outcome.kept_indices.iter().map(|&i| clients[i]).collect();
                    applied.push(AppliedUpdate {
                        client,
                        dispatched,
                        applied: round,
                        staleness: round - dispatched,
                    });
                }
                self.record(round, &params, selected, kept_clients, craft, applied)
            };
            records.push(step().map_err(|e| e.at_round(round))?);
        }
        self.finish(records)
    }
}

/// Runs `config` in lock-step rounds.
pub fn run_sync(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_with(config, RunOptions::default(), &mut NoObserver, false)
}

/// Runs `config` with per-update delays and immediate server application.
///
/// Each selected client's gradient is computed at the round's starting
/// model and lands after a delay of `0..=tau_max` rounds. Arrivals are
/// applied one at a time in `(dispatch round, client id)` order. Rules that
/// combine updates re-aggregate over the latest gradient from every client
/// heard from so far; FedAvg applies the arriving gradient alone. Updates
/// still in flight after the last round are dropped.
pub fn run_async(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_with(config, RunOptions::default(), &mut NoObserver, true)
}

/// Runs `config`, asynchronously when `config.asynchronous.enabled`.
pub fn run(
    config: &ExperimentConfig,
    options: RunOptions,
    observer: &mut dyn RunObserver,
) -> Result<ExperimentResult> {
    run_with(config, options, observer, config.asynchronous.enabled)
}

/// Runs `config` on an already prepared (possibly modified) setup.
pub fn run_prepared(
    config: &ExperimentConfig,
    setup: &Setup,
    options: RunOptions,
    observer: &mut dyn RunObserver,
) -> Result<ExperimentResult> {
    let runner = Runner::new(config, setup, options)?;
    if config.asynchronous.enabled {
        runner.run_async(observer)
    } else {
        runner.run_sync(observer)
    }
}

fn run_with(
    config: &ExperimentConfig,
    options: RunOptions,
    observer: &mut dyn RunObserver,
    asynchronous: bool,
) -> Result<ExperimentResult> {
    let setup = Setup::new(config)?;
    let runner = Runner::new(config, &setup, options)?;
    if asynchronous {
        runner.run_async(observer)
    } else {
        runner.run_sync(observer)
    }
}
