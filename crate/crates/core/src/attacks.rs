//! Attacker behaviours: the passive, gradient-ascent, AGREvader-style and
//! adaptive baselines, and the masked poisoning attack (label flipping,
//! greedy mask selection, scaling-factor search).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::atm_survivors;
use crate::data::AttackerData;
use crate::error::{Error, Result};
use crate::model::{self, Example, ModelParams};
use crate::rng;
use crate::tensor::{self, angle_between, pairwise_angles, scaled_add, GradientVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    Passive,
    GradientAscent,
    Agrevader,
    #[serde(rename = "fedpoisonmia")]
    FedPoisonMia,
    Adaptive,
}

impl AttackKind {
    /// Whether malicious clients submit crafted gradients.
    pub fn is_active(self) -> bool {
        !matches!(self, AttackKind::None | AttackKind::Passive)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Passive => "passive",
            AttackKind::GradientAscent => "gradient-ascent",
            AttackKind::Agrevader => "agrevader",
            AttackKind::FedPoisonMia => "fedpoisonmia",
            AttackKind::Adaptive => "adaptive",
        }
    }
}

/// What the attacker can observe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Knowledge {
    /// Reads every benign client's gradient for the round.
    Full,
    /// Reads only gradients computed on malicious clients' own data.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStrategy {
    pub kind: AttackKind,
    /// Fraction of the mask set to select, in (0, 1).
    pub gamma: f64,
    /// Candidate scaling factors, ascending.
    pub alpha_grid: Vec<f64>,
    pub knowledge: Knowledge,
    /// Gradient-ascent step multiplier.
    pub ascent_scale: f64,
}

impl AttackStrategy {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be in (0, 1), got {}",
                self.gamma
            )));
        }
        if self.alpha_grid.is_empty()
            || self.alpha_grid.iter().any(|a| !(a.is_finite() && *a > 0.0))
            || self.alpha_grid.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::InvalidConfig(
                "alpha grid must be non-empty, positive and ascending".into(),
            ));
        }
        if !(self.ascent_scale > 0.0 && self.ascent_scale.is_finite()) {
            return Err(Error::InvalidConfig("ascent scale must be > 0".into()));
        }
        Ok(())
    }
}

/// `points` log-spaced values over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..points)
                .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
                .collect()
        }
    }
}

/// 25 points log-spaced over `[0.01, 100]`.
pub fn default_alpha_grid() -> Vec<f64> {
    log_grid(0.01, 100.0, 25)
}

/// Where a set of reference gradients came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    BenignClients,
    MaliciousProxies,
}

/// The gradients an attacker measures its stealth constraint against.
#[derive(Debug, Clone, PartialEq)]
pub struct References {
    gradients: Vec<GradientVector>,
    provenance: Provenance,
}

impl References {
    /// Full knowledge: the benign clients' submitted gradients.
    pub fn from_benign(gradients: Vec<GradientVector>) -> Self {
        Self {
            gradients,
            provenance: Provenance::BenignClients,
        }
    }

    /// Partial knowledge: one proxy gradient per malicious client, computed
    /// on that client's own batch. A lone malicious client contributes two
    /// proxies from the halves of its batch.
    pub fn from_malicious_batches(params: &ModelParams, batches: &[Vec<Example>]) -> Result<Self> {
        let mut gradients = Vec::new();
        if batches.len() == 1 {
            let batch = &batches[0];
            if batch.len() < 2 {
                return Err(Error::TooFewReferences(batch.len()));
            }
            let mid = batch.len() / 2;
            gradients.push(model::gradient(params, &batch[..mid])?);
            gradients.push(model::gradient(params, &batch[mid..])?);
        } else {
            for batch in batches {
                gradients.push(model::gradient(params, batch)?);
            }
        }
        Ok(Self {
            gradients,
            provenance: Provenance::MaliciousProxies,
        })
    }

    pub fn gradients(&self) -> &[GradientVector] {
        &self.gradients
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

/// Replaces each label with a uniformly chosen different label.
pub fn flip_labels(set: &[Example], h: usize, seed: u64) -> Result<Vec<Example>> {
    if h < 2 {
        return Err(Error::SingleClassDataset);
    }
    let mut rng = rng::stream(seed, "flip-labels", 0);
    Ok(set
        .iter()
        .map(|ex| {
            let r = rng.random_range(0..h - 1);
            let label = if r >= ex.label { r + 1 } else { r };
            Example::new(ex.features.clone(), label)
        })
        .collect())
}

/// Gradient on the label-flipped attack set.
pub fn attack_gradient(params: &ModelParams, flipped: &[Example]) -> Result<GradientVector> {
    model::gradient(params, flipped)
}

/// Largest pairwise angle among the reference gradients.
pub fn benign_angle_budget(refs: &[GradientVector]) -> Result<f64> {
    if refs.len() < 2 {
        return Err(Error::TooFewReferences(refs.len()));
    }
    Ok(pairwise_angles(refs)?.max_angle())
}

/// Largest angle between `g` and any reference: the stealth objective.
pub fn max_reference_angle(g: &GradientVector, refs: &[GradientVector]) -> Result<f64> {
    refs.iter()
        .map(|r| angle_between(g, r))
        .try_fold(0.0_f64, |acc, a| a.map(|a| acc.max(a)))
}

/// One greedy step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    /// Index into the mask set.
    pub chosen: usize,
    pub objective: f64,
    /// Whether any candidate satisfied the constraint at this step.
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSelection {
    /// Selected mask-set indices in selection order.
    pub indices: Vec<usize>,
    pub trace: Vec<GreedyStep>,
    /// Mean gradient over the selected samples.
    pub g_mask: GradientVector,
}

/// Mask selection size `floor(gamma * |D_mask|)`.
pub fn mask_budget(mask_len: usize, gamma: f64) -> usize {
    (gamma * mask_len as f64).floor() as usize
}

/// Greedy mask sample selection.
///
/// Each step adds the candidate whose inclusion maximizes the largest
/// angle between `alpha_fixed * g_attack + g_mask` and the references while
/// staying within the benign angle budget. When no candidate is feasible
/// the one with the smallest objective is added instead, so the selection
/// always reaches its full size. Ties go to the lowest candidate index.
pub fn greedy_mask_select(
    mask_set: &[Example],
    gamma: f64,
    params: &ModelParams,
    g_attack: &GradientVector,
    alpha_fixed: f64,
    refs: &[GradientVector],
) -> Result<MaskSelection> {
    let budget = mask_budget(mask_set.len(), gamma);
    if budget == 0 {
        return Err(Error::EmptyMaskBudget);
    }
    let angle_budget = benign_angle_budget(refs)?;
    let per_sample: Vec<GradientVector> = mask_set
        .iter()
        .map(|ex| model::gradient(params, std::slice::from_ref(ex)))
        .collect::<Result<_>>()?;
    let dim = g_attack.dim();
    let mut sum = GradientVector::zeros(dim);
    let mut selected = vec![false; mask_set.len()];
    let mut indices = Vec::with_capacity(budget);
    let mut trace = Vec::with_capacity(budget);

    for step in 0..budget {
        let inv = 1.0 / (step + 1) as f64;
        let mut best_feasible: Option<(usize, f64)> = None;
        let mut best_repair: Option<(usize, f64)> = None;
        for (k, gk) in per_sample.iter().enumerate() {
            if selected[k] {
                continue;
            }
            let g_mask = sum.add(gk)?.scale(inv);
            let g_mal = scaled_add(alpha_fixed, g_attack, &g_mask)?;
            let obj = max_reference_angle(&g_mal, refs)?;
            if obj <= angle_budget {
                if best_feasible.is_none_or(|(_, b)| obj > b) {
                    best_feasible = Some((k, obj));
                }
            } else if best_repair.is_none_or(|(_, b)| obj < b) {
                best_repair = Some((k, obj));
            }
        }
        let (chosen, objective, feasible) = match (best_feasible, best_repair) {
            (Some((k, o)), _) => (k, o, true),
            (None, Some((k, o))) => (k, o, false),
            (None, None) => unreachable!("budget never exceeds the mask set size"),
        };
        selected[chosen] = true;
        sum = sum.add(&per_sample[chosen])?;
        indices.push(chosen);
        trace.push(GreedyStep {
            chosen,
            objective,
            feasible,
        });
    }
    let g_mask = sum.scale(1.0 / budget as f64);
    Ok(MaskSelection {
        indices,
        trace,
        g_mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaChoice {
    pub alpha: f64,
    pub feasible: bool,
    /// Objective of `alpha * g_attack + g_mask`.
    pub objective: f64,
}

/// Grid search for the scaling factor with the mask held fixed.
///
/// Among feasible grid points, returns the one with the largest objective
/// (lowest alpha on ties). With no feasible point, returns alpha = 0: the
/// bare mask gradient.
pub fn optimize_alpha(
    g_attack: &GradientVector,
    g_mask: &GradientVector,
    refs: &[GradientVector],
    alpha_grid: &[f64],
) -> Result<AlphaChoice> {
    let angle_budget = benign_angle_budget(refs)?;
    let mut best: Option<AlphaChoice> = None;
    for &alpha in alpha_grid {
        let g = scaled_add(alpha, g_attack, g_mask)?;
        let objective = max_reference_angle(&g, refs)?;
        if objective <= angle_budget && best.is_none_or(|b| objective > b.objective) {
            best = Some(AlphaChoice {
                alpha,
                feasible: true,
                objective,
            });
        }
    }
    match best {
        Some(b) => Ok(b),
        None => Ok(AlphaChoice {
            alpha: 0.0,
            feasible: false,
            objective: max_reference_angle(g_mask, refs)?,
        }),
    }
}

/// Everything the poisoning attacker holds.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerContext {
    pub attack_set: Vec<Example>,
    /// The attack set with flipped labels.
    pub flipped_attack_set: Vec<Example>,
    pub mask_set: Vec<Example>,
    pub strategy: AttackStrategy,
    /// Scaling factor held fixed during mask selection.
    pub alpha_fixed: f64,
}

impl AttackerContext {
    pub fn new(data: &AttackerData, strategy: AttackStrategy, num_classes: usize, seed: u64) -> Result<Self> {
        strategy.validate()?;
        Ok(Self {
            flipped_attack_set: flip_labels(&data.attack_set, num_classes, seed)?,
            attack_set: data.attack_set.clone(),
            mask_set: data.mask_set.clone(),
            strategy,
            alpha_fixed: 1.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CraftResult {
    pub g_malicious: GradientVector,
    pub chosen_alpha: f64,
    pub selected_mask_indices: Vec<usize>,
    pub feasible: bool,
    /// Largest angle between `g_malicious` and any reference.
    pub objective_value: f64,
    /// Largest pairwise reference angle.
    pub angle_budget: f64,
    pub trace: Vec<GreedyStep>,
}

/// Masked poisoning gradient: flip, select mask, search alpha, combine.
pub fn craft_fedpoisonmia(
    ctx: &AttackerContext,
    params: &ModelParams,
    refs: &References,
) -> Result<CraftResult> {
    let refs = refs.gradients();
    let g_attack = attack_gradient(params, &ctx.flipped_attack_set)?;
    let selection = greedy_mask_select(
        &ctx.mask_set,
        ctx.strategy.gamma,
        params,
        &g_attack,
        ctx.alpha_fixed,
        refs,
    )?;
    let choice = optimize_alpha(&g_attack, &selection.g_mask, refs, &ctx.strategy.alpha_grid)?;
    let g_malicious = scaled_add(choice.alpha, &g_attack, &selection.g_mask)?;
    Ok(CraftResult {
        objective_value: max_reference_angle(&g_malicious, refs)?,
        angle_budget: benign_angle_budget(refs)?,
        g_malicious,
        chosen_alpha: choice.alpha,
        selected_mask_indices: selection.indices,
        feasible: choice.feasible,
        trace: selection.trace,
    })
}

/// `-lambda * gradient(D_attack)`: ascent on the targets' loss.
pub fn craft_gradient_ascent(
    params: &ModelParams,
    attack_set: &[Example],
    lambda: f64,
) -> Result<GradientVector> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::InvalidParams(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(model::gradient(params, attack_set)?.scale(-lambda))
}

/// Largest pairwise Euclidean distance among `refs` (0 for fewer than two).
pub fn max_pairwise_distance(refs: &[GradientVector]) -> Result<f64> {
    let mut best: f64 = 0.0;
    for i in 0..refs.len() {
        for j in (i + 1)..refs.len() {
            best = best.max(refs[i].distance_squared(&refs[j])?.sqrt());
        }
    }
    Ok(best)
}

/// Distance from `g` to its closest reference.
pub fn nearest_distance(g: &GradientVector, refs: &[GradientVector]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for r in refs {
        best = best.min(g.distance_squared(r)?.sqrt());
    }
    Ok(best)
}

/// AGREvader-style blend: `s * g_attack + g_mask` over the whole mask set,
/// halving `s` until the result is within the largest benign pairwise
/// distance of some benign gradient. After 20 halvings, returns `g_mask`.
pub fn craft_agrevader(
    params: &ModelParams,
    flipped_attack_set: &[Example],
    mask_set: &[Example],
    refs: &[GradientVector],
) -> Result<GradientVector> {
    if refs.is_empty() {
        return Err(Error::TooFewReferences(0));
    }
    let g_attack = model::gradient(params, flipped_attack_set)?;
    let g_mask = model::gradient(params, mask_set)?;
    let budget = max_pairwise_distance(refs)?;
    let mut scale = 1.0;
    for _ in 0..=20 {
        let g = scaled_add(scale, &g_attack, &g_mask)?;
        if nearest_distance(&g, refs)? <= budget {
            return Ok(g);
        }
        scale /= 2.0;
    }
    Ok(g_mask)
}

/// Iteration cap for the adaptive attack.
pub const ADAPTIVE_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOutcome {
    pub gradient: GradientVector,
    /// Number of averaging updates performed.
    pub iterations: usize,
    /// True when the loop stopped because the gradient evades the trim.
    pub evades: bool,
}

/// Mean angles of `benign ∪ {candidate}` (candidate last) and the trim
/// threshold: the `2b`-th largest mean angle.
pub fn adaptive_threshold(
    benign: &[GradientVector],
    candidate: &GradientVector,
    b: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut all = benign.to_vec();
    all.push(candidate.clone());
    let means = pairwise_angles(&all)?.mean_angles();
    let mut desc = means.clone();
    desc.sort_by(|a, b| b.total_cmp(a));
    Ok((means, desc[2 * b - 1]))
}

/// Adaptive attack against angular trimming.
///
/// While the attack gradient's mean angle is not strictly below the
/// `2b`-th largest mean angle, it is averaged with the benign gradient
/// furthest from it, for at most [`ADAPTIVE_MAX_ITERATIONS`] updates.
pub fn craft_adaptive(
    benign: &[GradientVector],
    g_attack: &GradientVector,
    b: usize,
) -> Result<AdaptiveOutcome> {
    if benign.len() < 2 {
        return Err(Error::TooFewReferences(benign.len()));
    }
    if 2 * b > benign.len() {
        return Err(Error::TrimTooLarge {
            trim: b,
            count: benign.len() + 1,
        });
    }
    let mut current = g_attack.clone();
    if b == 0 {
        return Ok(AdaptiveOutcome {
            gradient: current,
            iterations: 0,
            evades: true,
        });
    }
    for iterations in 0..=ADAPTIVE_MAX_ITERATIONS {
        let (means, threshold) = adaptive_threshold(benign, &current, b)?;
        if means[benign.len()] < threshold {
            return Ok(AdaptiveOutcome {
                gradient: current,
                iterations,
                evades: true,
            });
        }
        if iterations == ADAPTIVE_MAX_ITERATIONS {
            break;
        }
        let mut far = (0, -1.0);
        for (k, g) in benign.iter().enumerate() {
            let a = angle_between(&current, g)?;
            if a > far.1 {
                far = (k, a);
            }
        }
        current = tensor::mean([&current, &benign[far.0]])?;
    }
    Ok(AdaptiveOutcome {
        gradient: current,
        iterations: ADAPTIVE_MAX_ITERATIONS,
        evades: false,
    })
}

/// Whether `candidate` survives an angular trim with parameter `b` when
/// submitted alongside `benign`.
pub fn survives_atm(benign: &[GradientVector], candidate: &GradientVector, b: usize) -> Result<bool> {
    let mut all = benign.to_vec();
    all.push(candidate.clone());
    let means = pairwise_angles(&all)?.mean_angles();
    Ok(atm_survivors(&means, b).contains(&benign.len()))
}

/// Membership guess per sample: correct prediction means member.
pub fn passive_infer(params: &ModelParams, eval_set: &[Example]) -> Result<Vec<bool>> {
    eval_set
        .iter()
        .map(|ex| Ok(model::predict(params, &ex.features)? == ex.label))
        .collect()
}
