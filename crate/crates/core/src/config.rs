//! Experiment configuration with documented defaults.
//!
//! Shipped defaults: 10 clients, 10% malicious, participation C = 0.8,
//! mask fraction 0.1, Non-IID bias 0.5, batch 64, learning rate 0.01,
//! maximum asynchronous delay 5.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationRule, FangMode};
use crate::attacks::{log_grid, AttackKind, AttackStrategy, Knowledge};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub malicious_fraction: f64,
    /// Fraction C of clients selected per round.
    pub participation: f64,
    pub learning_rate: f64,
    pub rounds: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub aggregation: AggregationConfig,
    pub attack: AttackConfig,
    #[serde(rename = "async")]
    pub asynchronous: AsyncConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clients: 10,
            malicious_fraction: 0.1,
            participation: 0.8,
            learning_rate: 0.01,
            rounds: 200,
            batch_size: 64,
            hidden: vec![32],
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            aggregation: AggregationConfig::default(),
            attack: AttackConfig::default(),
            asynchronous: AsyncConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// CSV path when `source = "csv"`.
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub features: usize,
    pub per_class: usize,
    pub spread: f64,
    pub holdout_fraction: f64,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    /// |D_attack|: half members, half non-members.
    pub attack_samples: usize,
    /// |D_mask|, drawn from malicious clients' shards.
    pub mask_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            classes: 3,
            features: 20,
            per_class: 200,
            spread: 1.0,
            holdout_fraction: 0.15,
            test_fraction: 0.15,
            validation_fraction: 0.05,
            attack_samples: 60,
            mask_samples: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    pub beta: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            mode: PartitionMode::Iid,
            beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    Fedavg,
    Median,
    TrimmedMean,
    Atm,
    MultiKrum,
    Dp,
    Topk,
    Fang,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    pub rule: RuleKind,
    /// Trim parameter b (Trimmed-mean, ATM).
    pub trim: usize,
    /// Multi-Krum f; defaults to the malicious client count.
    pub krum_f: Option<usize>,
    /// Multi-Krum candidate count; defaults to n - f.
    pub krum_candidates: Option<usize>,
    pub dp_sigma: f64,
    pub topk: usize,
    /// Inner rule for the DP and Top-k wrappers.
    pub inner: RuleKind,
    pub fang_mode: FangMode,
    pub fang_rejections: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            rule: RuleKind::Fedavg,
            trim: 1,
            krum_f: None,
            krum_candidates: None,
            dp_sigma: 0.01,
            topk: 100,
            inner: RuleKind::Fedavg,
            fang_mode: FangMode::Lfr,
            fang_rejections: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub gamma: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub alpha_points: usize,
    pub knowledge: Knowledge,
    /// Gradient-ascent multiplier.
    pub ascent_scale: f64,
    /// Trim parameter assumed by the adaptive attack; defaults to the
    /// aggregation trim.
    pub adaptive_trim: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::FedPoisonMia,
            gamma: 0.1,
            alpha_min: 0.01,
            alpha_max: 100.0,
            alpha_points: 25,
            knowledge: Knowledge::Full,
            ascent_scale: 1.0,
            adaptive_trim: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayModel {
    /// Uniform integer delay in `0..=tau_max`.
    Uniform,
    /// Every update is delayed by exactly `tau_max`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsyncConfig {
    pub enabled: bool,
    pub tau_max: usize,
    pub delays: DelayModel,
}

impl Default for AsyncConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            tau_max: 5,
            delays: DelayModel::Uniform,
        }
    }
}

fn invalid(key: &str, reason: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("{key}: {reason}"))
}

impl ExperimentConfig {
    /// Number of malicious clients, `round(fraction * n)`; zero without an
    /// attacker.
    pub fn malicious_count(&self) -> usize {
        if self.attack.kind == AttackKind::None {
            0
        } else {
            (self.malicious_fraction * self.clients as f64).round() as usize
        }
    }

    /// Clients selected per round, `ceil(C * n)`.
    pub fn participants_per_round(&self) -> usize {
        participants(self.clients, self.participation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(invalid("clients", "need at least two clients"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(invalid(
                "participation",
                format!("C must be in (0, 1], got {}", self.participation),
            ));
        }
        if !(0.0..1.0).contains(&self.malicious_fraction) {
            return Err(invalid("malicious_fraction", "must be in [0, 1)"));
        }
        if 2 * self.malicious_count() >= self.clients {
            return Err(invalid(
                "malicious_fraction",
                "malicious clients must be fewer than n / 2",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be > 0"));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden", "layer widths must be positive"));
        }
        let d = &self.data;
        if d.source == DataSource::Csv && d.path.is_none() {
            return Err(invalid("data.path", "required when data.source = \"csv\""));
        }
        if d.source == DataSource::Synthetic && (d.classes < 2 || d.features == 0 || d.per_class == 0) {
            return Err(invalid(
                "data",
                "synthetic data needs classes >= 2, features >= 1, per_class >= 1",
            ));
        }
        if !(d.spread >= 0.0 && d.spread.is_finite()) {
            return Err(invalid("data.spread", "must be >= 0"));
        }
        if d.attack_samples == 0 {
            return Err(invalid("data.attack_samples", "must be >= 1"));
        }
        if !(self.partition.beta > 0.0 && self.partition.beta <= 1.0) {
            return Err(invalid("partition.beta", "must be in (0, 1]"));
        }
        let a = &self.aggregation;
        if !(a.dp_sigma >= 0.0 && a.dp_sigma.is_finite()) {
            return Err(invalid("aggregation.dp_sigma", "must be >= 0"));
        }
        if matches!(a.inner, RuleKind::Dp | RuleKind::Topk) {
            return Err(invalid("aggregation.inner", "wrappers cannot nest"));
        }
        if a.topk == 0 {
            return Err(invalid("aggregation.topk", "must be >= 1"));
        }
        if a.fang_rejections == 0 {
            return Err(invalid("aggregation.fang_rejections", "must be >= 1"));
        }
        let per_round = self.participants_per_round();
        let trim_rule = matches!(a.rule, RuleKind::TrimmedMean | RuleKind::Atm)
            || (matches!(a.rule, RuleKind::Dp | RuleKind::Topk)
                && matches!(a.inner, RuleKind::TrimmedMean | RuleKind::Atm));
        if trim_rule && !self.asynchronous.enabled && 2 * a.trim >= per_round {
            return Err(invalid(
                "aggregation.trim",
                format!("2b must be below {per_round} participants"),
            ));
        }
        self.attack_strategy()
            .validate()
            .map_err(|e| invalid("attack", e))?;
        Ok(())
    }

    pub fn attack_strategy(&self) -> AttackStrategy {
        AttackStrategy {
            kind: self.attack.kind,
            gamma: self.attack.gamma,
            alpha_grid: log_grid(
                self.attack.alpha_min,
                self.attack.alpha_max,
                self.attack.alpha_points,
            ),
            knowledge: self.attack.knowledge,
            ascent_scale: self.attack.ascent_scale,
        }
    }

    fn simple_rule(&self, kind: RuleKind) -> AggregationRule {
        let a = &self.aggregation;
        match kind {
            RuleKind::Fedavg | RuleKind::Dp | RuleKind::Topk => AggregationRule::FedAvg,
            RuleKind::Median => AggregationRule::Median,
            RuleKind::TrimmedMean => AggregationRule::TrimmedMean { trim: a.trim },
            RuleKind::Atm => AggregationRule::Atm { trim: a.trim },
            RuleKind::MultiKrum => AggregationRule::MultiKrum {
                byzantine: a.krum_f.unwrap_or_else(|| self.malicious_count()),
                candidates: a.krum_candidates,
            },
            RuleKind::Fang => AggregationRule::Fang {
                mode: a.fang_mode,
                rejections: a.fang_rejections,
            },
        }
    }

    pub fn aggregation_rule(&self) -> AggregationRule {
        let a = &self.aggregation;
        match a.rule {
            RuleKind::Dp => AggregationRule::Dp {
                sigma: a.dp_sigma,
                inner: Box::new(self.simple_rule(a.inner)),
            },
            RuleKind::Topk => AggregationRule::TopK {
                k: a.topk,
                inner: Box::new(self.simple_rule(a.inner)),
            },
            kind => self.simple_rule(kind),
        }
    }
}

/// `ceil(C * n)`, robust to C * n landing a hair above an integer.
pub fn participants(n: usize, c: f64) -> usize {
    ((c * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize
}
