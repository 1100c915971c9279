//! Server-side aggregation rules behind one interface.
//!
//! Coordinate-wise rules (FedAvg, Median, Trimmed-mean) report every client
//! as kept. Selection rules (ATM, Multi-Krum, Fang) report the survivors in
//! ascending client order and average them in that order.

use std::cmp::Ordering;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Example, ModelParams};
use crate::rng;
use crate::tensor::{self, check_dims, pairwise_angles, GradientVector};

/// Fang's two rejection criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FangMode {
    /// Error-rate rejection.
    Err,
    /// Loss-function rejection.
    Lfr,
}

/// An aggregation rule and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AggregationRule {
    FedAvg,
    Median,
    TrimmedMean {
        trim: usize,
    },
    Atm {
        trim: usize,
    },
    MultiKrum {
        byzantine: usize,
        candidates: Option<usize>,
    },
    Dp {
        sigma: f64,
        inner: Box<AggregationRule>,
    },
    TopK {
        k: usize,
        inner: Box<AggregationRule>,
    },
    Fang {
        mode: FangMode,
        rejections: usize,
    },
}

impl AggregationRule {
    pub fn name(&self) -> String {
        match self {
            Self::FedAvg => "fedavg".into(),
            Self::Median => "median".into(),
            Self::TrimmedMean { .. } => "trimmed-mean".into(),
            Self::Atm { .. } => "atm".into(),
            Self::MultiKrum { .. } => "multi-krum".into(),
            Self::Dp { inner, .. } => format!("dp({})", inner.name()),
            Self::TopK { inner, .. } => format!("topk({})", inner.name()),
            Self::Fang { mode, .. } => match mode {
                FangMode::Err => "fang-err".into(),
                FangMode::Lfr => "fang-lfr".into(),
            },
        }
    }

    /// Trim parameter of the innermost trimming rule, if any.
    pub fn trim(&self) -> Option<usize> {
        match self {
            Self::TrimmedMean { trim } | Self::Atm { trim } => Some(*trim),
            Self::Dp { inner, .. } | Self::TopK { inner, .. } => inner.trim(),
            _ => None,
        }
    }

    /// Whether the rule's output depends on more than one update at a time.
    /// FedAvg of a single update is that update.
    pub fn combines_updates(&self) -> bool {
        match self {
            Self::FedAvg => false,
            Self::Dp { inner, .. } | Self::TopK { inner, .. } => inner.combines_updates(),
            _ => true,
        }
    }

    /// Clamps parameters so the rule is well defined on `count` gradients.
    ///
    /// Used where the input size varies (the asynchronous update buffer).
    pub fn fit_to(&self, count: usize) -> Self {
        let half = count.saturating_sub(1) / 2;
        match self {
            Self::TrimmedMean { trim } => Self::TrimmedMean {
                trim: (*trim).min(half),
            },
            Self::Atm { .. } if count < 2 => Self::FedAvg,
            Self::Atm { trim } => Self::Atm {
                trim: (*trim).min(half),
            },
            Self::MultiKrum { .. } if count < 2 => Self::FedAvg,
            Self::MultiKrum {
                byzantine,
                candidates,
            } => Self::MultiKrum {
                byzantine: (*byzantine).min(count - 2),
                candidates: candidates.map(|c| c.clamp(1, count)),
            },
            Self::Fang { .. } if count < 2 => Self::FedAvg,
            Self::Fang { mode, rejections } => Self::Fang {
                mode: *mode,
                rejections: (*rejections).min(count - 1),
            },
            Self::Dp { sigma, inner } => Self::Dp {
                sigma: *sigma,
                inner: Box::new(inner.fit_to(count)),
            },
            Self::TopK { k, inner } => Self::TopK {
                k: *k,
                inner: Box::new(inner.fit_to(count)),
            },
            other => other.clone(),
        }
    }
}

/// Extra per-rule output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// ATM mean angles, one per input gradient.
    pub mean_angles: Option<Vec<f64>>,
    /// Smallest mean angle that was trimmed (ATM with b > 0).
    pub trim_threshold: Option<f64>,
    /// Multi-Krum first-pass scores or Fang leave-one-out scores.
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    pub aggregate: GradientVector,
    pub kept_indices: Vec<usize>,
    pub diagnostics: Diagnostics,
}

impl AggregationOutcome {
    fn all(aggregate: GradientVector, n: usize) -> Self {
        Self {
            aggregate,
            kept_indices: (0..n).collect(),
            diagnostics: Diagnostics::default(),
        }
    }
}

/// Server-side state some rules need.
#[derive(Debug, Clone, Copy, Default)]
pub struct AggregationContext<'a> {
    /// FedAvg weights (`|D_k|`); equal weights when absent.
    pub weights: Option<&'a [f64]>,
    /// Current global model (Fang).
    pub model: Option<&'a ModelParams>,
    /// Server validation set (Fang).
    pub validation: Option<&'a [Example]>,
    /// Learning rate used for Fang's candidate models.
    pub learning_rate: f64,
    /// Seed for the DP noise stream.
    pub seed: u64,
}

fn check_set(grads: &[GradientVector]) -> Result<usize> {
    let first = grads.first().ok_or(Error::EmptyInput)?;
    for g in grads {
        check_dims(first.dim(), g.dim())?;
    }
    Ok(first.dim())
}

/// Applies `rule` to `grads`.
pub fn aggregate(
    rule: &AggregationRule,
    grads: &[GradientVector],
    ctx: &AggregationContext<'_>,
) -> Result<AggregationOutcome> {
    match rule {
        AggregationRule::FedAvg => match ctx.weights {
            Some(w) => fedavg(grads, w),
            None => fedavg(grads, &vec![1.0; grads.len()]),
        },
        AggregationRule::Median => coordinate_median(grads),
        AggregationRule::TrimmedMean { trim } => trimmed_mean(grads, *trim),
        AggregationRule::Atm { trim } => atm(grads, *trim),
        AggregationRule::MultiKrum {
            byzantine,
            candidates,
        } => multi_krum(
            grads,
            *byzantine,
            candidates.unwrap_or_else(|| grads.len().saturating_sub(*byzantine)),
        ),
        AggregationRule::Dp { sigma, inner } => dp_wrap(grads, *sigma, inner, ctx),
        AggregationRule::TopK { k, inner } => topk_wrap(grads, *k, inner, ctx),
        AggregationRule::Fang { mode, rejections } => {
            let model = ctx
                .model
                .ok_or_else(|| Error::InvalidParams("fang needs the global model".into()))?;
            let validation = ctx.validation.ok_or(Error::EmptyValidationSet)?;
            fang_filter(
                grads,
                model,
                validation,
                *mode,
                ctx.learning_rate,
                *rejections,
                ctx.weights,
            )
        }
    }
}

/// Weighted mean `sum_k w_k g_k / sum_k w_k`.
///
/// Equal weights take the unweighted running-mean path shared with the
/// other rules, so the results agree bit for bit.
pub fn fedavg(grads: &[GradientVector], weights: &[f64]) -> Result<AggregationOutcome> {
    let dim = check_set(grads)?;
    if weights.len() != grads.len() {
        return Err(Error::WeightMismatch(format!(
            "{} weights for {} gradients",
            weights.len(),
            grads.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::WeightMismatch("weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::WeightMismatch("weights sum to zero".into()));
    }
    if weights.iter().all(|&w| w == weights[0]) {
        return Ok(AggregationOutcome::all(tensor::mean(grads)?, grads.len()));
    }
    let mut acc = vec![0.0; dim];
    for (g, &w) in grads.iter().zip(weights) {
        for (a, x) in acc.iter_mut().zip(g.as_slice()) {
            *a += w * x;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(AggregationOutcome::all(
        GradientVector::from_raw(acc),
        grads.len(),
    ))
}

fn column(grads: &[GradientVector], j: usize) -> Vec<(f64, usize)> {
    grads.iter().enumerate().map(|(i, g)| (g[j], i)).collect()
}

fn by_value_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Per-coordinate median; the mean of the two central values for even counts.
pub fn coordinate_median(grads: &[GradientVector]) -> Result<AggregationOutcome> {
    let dim = check_set(grads)?;
    let n = grads.len();
    let values = (0..dim)
        .map(|j| {
            let mut col: Vec<f64> = grads.iter().map(|g| g[j]).collect();
            col.sort_by(f64::total_cmp);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / 2.0
            }
        })
        .collect();
    Ok(AggregationOutcome::all(GradientVector::from_raw(values), n))
}

/// Per-coordinate trimmed mean: drop the `b` largest and `b` smallest
/// values, average the rest in client order.
pub fn trimmed_mean(grads: &[GradientVector], b: usize) -> Result<AggregationOutcome> {
    let dim = check_set(grads)?;
    let n = grads.len();
    if 2 * b >= n {
        return Err(Error::TrimTooLarge { trim: b, count: n });
    }
    let mut values = Vec::with_capacity(dim);
    let mut dropped = vec![false; n];
    for j in 0..dim {
        dropped.iter_mut().for_each(|d| *d = false);
        if b > 0 {
            let mut col = column(grads, j);
            col.sort_by(by_value_then_index);
            for &(_, i) in col[..b].iter().chain(&col[n - b..]) {
                dropped[i] = true;
            }
        }
        let mut mean = 0.0;
        let mut count = 0.0;
        for (i, g) in grads.iter().enumerate() {
            if !dropped[i] {
                count += 1.0;
                mean += (g[j] - mean) / count;
            }
        }
        values.push(mean);
    }
    Ok(AggregationOutcome::all(GradientVector::from_raw(values), n))
}

/// Indices surviving an angular trim: rank by `(mean angle, index)`
/// ascending and keep the first `n - 2b`. Returned in ascending index order.
pub fn atm_survivors(mean_angles: &[f64], b: usize) -> Vec<usize> {
    let n = mean_angles.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| mean_angles[i].total_cmp(&mean_angles[j]).then(i.cmp(&j)));
    let mut kept = order[..n.saturating_sub(2 * b)].to_vec();
    kept.sort_unstable();
    kept
}

/// Angular trimmed mean.
///
/// Each gradient's mean angle to the other `n - 1` gradients is computed,
/// the `2b` largest are discarded (ties keep the lower index), and the
/// survivors are averaged.
pub fn atm(grads: &[GradientVector], b: usize) -> Result<AggregationOutcome> {
    check_set(grads)?;
    let n = grads.len();
    if n < 2 {
        return Err(Error::TooFewGradients {
            required: 2,
            found: n,
        });
    }
    if 2 * b >= n {
        return Err(Error::TrimTooLarge { trim: b, count: n });
    }
    let angles = pairwise_angles(grads)?;
    let mean_angles = angles.mean_angles();
    let kept = atm_survivors(&mean_angles, b);
    let trim_threshold = (0..n)
        .filter(|i| kept.binary_search(i).is_err())
        .map(|i| mean_angles[i])
        .min_by(f64::total_cmp);
    let aggregate = tensor::mean(kept.iter().map(|&i| &grads[i]))?;
    Ok(AggregationOutcome {
        aggregate,
        kept_indices: kept,
        diagnostics: Diagnostics {
            mean_angles: Some(mean_angles),
            trim_threshold,
            scores: None,
        },
    })
}

/// Multi-Krum: repeatedly move the remaining gradient with the smallest
/// sum of squared distances to its nearest neighbours into the candidate
/// set, then average the candidates.
///
/// The neighbour count is `n - f - 1`, capped at the remaining pool size
/// minus one as the pool shrinks.
pub fn multi_krum(grads: &[GradientVector], f: usize, count: usize) -> Result<AggregationOutcome> {
    check_set(grads)?;
    let n = grads.len();
    if n < f + 2 {
        return Err(Error::InvalidKrumParams(format!(
            "n - f - 1 must be >= 1 (n={n}, f={f})"
        )));
    }
    if count == 0 || count > n {
        return Err(Error::InvalidKrumParams(format!(
            "candidate count must be in 1..={n}, got {count}"
        )));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = grads[i].distance_squared(&grads[j])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let neighbours = n - f - 1;
    let score = |i: usize, pool: &[usize]| -> f64 {
        let mut ds: Vec<f64> = pool
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist[i * n + j])
            .collect();
        ds.sort_by(f64::total_cmp);
        ds.iter().take(neighbours.min(pool.len() - 1)).sum()
    };
    let mut pool: Vec<usize> = (0..n).collect();
    let first_scores: Vec<f64> = (0..n).map(|i| score(i, &pool)).collect();
    let mut selected = Vec::with_capacity(count);
    while selected.len() < count {
        let scores: Vec<f64> = pool.iter().map(|&i| score(i, &pool)).collect();
        let best = (0..pool.len())
            .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(pool[a].cmp(&pool[b])))
            .expect("pool is non-empty while selecting");
        selected.push(pool.remove(best));
    }
    selected.sort_unstable();
    let aggregate = tensor::mean(selected.iter().map(|&i| &grads[i]))?;
    Ok(AggregationOutcome {
        aggregate,
        kept_indices: selected,
        diagnostics: Diagnostics {
            scores: Some(first_scores),
            ..Diagnostics::default()
        },
    })
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every coordinate of every gradient,
/// then applies `inner`.
pub fn dp_wrap(
    grads: &[GradientVector],
    sigma: f64,
    inner: &AggregationRule,
    ctx: &AggregationContext<'_>,
) -> Result<AggregationOutcome> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "dp sigma must be >= 0, got {sigma}"
        )));
    }
    check_set(grads)?;
    if sigma == 0.0 {
        return aggregate(inner, grads, ctx);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let mut rng = rng::stream(ctx.seed, "dp-noise", 0);
    let noisy: Vec<GradientVector> = grads
        .iter()
        .map(|g| {
            GradientVector::from_raw(
                g.as_slice()
                    .iter()
                    .map(|&x| x + normal.sample(&mut rng))
                    .collect(),
            )
        })
        .collect();
    aggregate(inner, &noisy, ctx)
}

/// Keeps the `k` largest-magnitude coordinates of `g` (ties prefer the
/// lower coordinate) and zeroes the rest.
pub fn sparsify_top_k(g: &GradientVector, k: usize) -> Result<GradientVector> {
    if k == 0 || k > g.dim() {
        return Err(Error::InvalidK { k, dim: g.dim() });
    }
    let mut order: Vec<usize> = (0..g.dim()).collect();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; g.dim()];
    for &i in &order[..k] {
        out[i] = g[i];
    }
    Ok(GradientVector::from_raw(out))
}

/// Sparsifies each gradient to its top-`k` coordinates, then applies `inner`.
pub fn topk_wrap(
    grads: &[GradientVector],
    k: usize,
    inner: &AggregationRule,
    ctx: &AggregationContext<'_>,
) -> Result<AggregationOutcome> {
    let dim = check_set(grads)?;
    if k == 0 || k > dim {
        return Err(Error::InvalidK { k, dim });
    }
    if k == dim {
        return aggregate(inner, grads, ctx);
    }
    let sparse = grads
        .iter()
        .map(|g| sparsify_top_k(g, k))
        .collect::<Result<Vec<_>>>()?;
    aggregate(inner, &sparse, ctx)
}

/// Fang's error-rate / loss rejection.
///
/// For every client, the global model is stepped with the FedAvg of all
/// other gradients and scored on the validation set (error rate for ERR,
/// loss for LFR). The `rejections` clients whose removal yields the lowest
/// score are dropped (ties drop the lower index) and the rest are averaged.
pub fn fang_filter(
    grads: &[GradientVector],
    model: &ModelParams,
    validation: &[Example],
    mode: FangMode,
    learning_rate: f64,
    rejections: usize,
    weights: Option<&[f64]>,
) -> Result<AggregationOutcome> {
    if validation.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    check_set(grads)?;
    let n = grads.len();
    if n < 2 {
        return Err(Error::TooFewGradients {
            required: 2,
            found: n,
        });
    }
    if rejections == 0 || rejections >= n {
        return Err(Error::InvalidParams(format!(
            "fang rejections must be in 1..{n}, got {rejections}"
        )));
    }
    let weights: Vec<f64> = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
    if weights.len() != n {
        return Err(Error::WeightMismatch(format!(
            "{} weights for {n} gradients",
            weights.len()
        )));
    }
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let (others, w): (Vec<GradientVector>, Vec<f64>) = grads
            .iter()
            .zip(&weights)
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, (g, &w))| (g.clone(), w))
            .unzip();
        let candidate = model::apply_update(model, &fedavg(&others, &w)?.aggregate, learning_rate)?;
        let score = match mode {
            FangMode::Err => 1.0 - model::accuracy(&candidate, validation)?,
            FangMode::Lfr => model::loss(&candidate, validation)?,
        };
        scores.push(score);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[rejections..].to_vec();
    kept.sort_unstable();
    let survivors: Vec<GradientVector> = kept.iter().map(|&i| grads[i].clone()).collect();
    let survivor_weights: Vec<f64> = kept.iter().map(|&i| weights[i]).collect();
    let aggregate = fedavg(&survivors, &survivor_weights)?.aggregate;
    Ok(AggregationOutcome {
        aggregate,
        kept_indices: kept,
        diagnostics: Diagnostics {
            scores: Some(scores),
            ..Diagnostics::default()
        },
    })
}
