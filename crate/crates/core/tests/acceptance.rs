//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedarena::aggregation::atm;
use fedarena::attacks::{self, craft_adaptive, greedy_mask_select, AttackKind, ADAPTIVE_MAX_ITERATIONS};
use fedarena::cli::{self, output};
use fedarena::config::{ExperimentConfig, RuleKind};
use fedarena::engine::{self, CraftEvent, ExperimentResult, RunObserver, RunOptions};
use fedarena::model::{self, Example, ModelParams};
use fedarena::tensor::GradientVector;
use fedarena::theory::{lemma1_check, AngleSample, TheoryGrid};

const ACCEPTANCE_CONFIG: &str = include_str!("../../../configs/acceptance.toml");
const THEORY_GRID: &str = include_str!("../../../configs/theory.toml");

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gv(values: Vec<f64>) -> GradientVector {
    GradientVector::new(values).unwrap()
}

fn random_vec(r: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-1.0..1.0)).collect()
}

// Independent angle: arccos of the clamped cosine, dot / sqrt(|u|^2 |v|^2).
fn naive_angle(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum();
    let nv: f64 = v.iter().map(|a| a * a).sum();
    (dot / (nu * nv).sqrt()).clamp(-1.0, 1.0).acos()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

// ---------------------------------------------------------------- 1, 2

fn bound_holds() -> Outcome {
    let start = Instant::now();
    let grid: TheoryGrid = toml::from_str(THEORY_GRID).unwrap();
    let rows = grid.run().unwrap();
    let elapsed = start.elapsed();
    let mut failures = Vec::new();
    for r in &rows {
        let (n, m, b) = (r.n as f64, r.m as f64, r.b as f64);
        let bound = 2.0 * (n - m) * (b + 1.0) * r.sigma2 / ((n - b - m) * (n - b - m));
        if (bound - r.bound).abs() > 1e-12 * bound.max(1.0) || r.empirical.is_nan() || r.empirical > bound {
            failures.push(format!("n={} m={} b={} {}", r.n, r.m, r.b, r.adversary.name()));
        }
    }
    let expected_points = 3 * (5 + 3 + 1);
    let ok = failures.is_empty() && rows.len() == expected_points && elapsed <= Duration::from_secs(10);
    let worst = rows.iter().map(|r| r.empirical / r.bound).fold(0.0, f64::max);
    outcome(
        ok,
        format!(
            "{} grid points, {} over bound, worst empirical/bound {worst:.3}, {:.2}s",
            rows.len(),
            failures.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn lemma_holds() -> Outcome {
    let start = Instant::now();
    let instances = 10_000;
    let mut counterexamples = 0;
    let mut disagreements = 0;
    for t in 0..instances {
        let mut r = rng(1_000 + t);
        let n = r.random_range(6..=30usize);
        let upper = n / 2 - 1;
        let b = r.random_range(1..=upper);
        let m = r.random_range(0..b);
        let mut angles: Vec<f64> = (0..n).map(|_| r.random_range(0.0..PI)).collect();
        angles.sort_by(f64::total_cmp);
        let positions: Vec<usize> = match t % 4 {
            0 => (0..m).collect(),
            1 => (n - m..n).collect(),
            2 => (0..m).map(|k| (2 * k) % n).collect(),
            _ => index::sample(&mut r, n, m).into_vec(),
        };
        let mut flags = vec![false; n];
        for p in positions {
            flags[p] = true;
        }
        let benign: Vec<f64> = angles
            .iter()
            .zip(&flags)
            .filter(|(_, &f)| !f)
            .map(|(&a, _)| a)
            .collect();
        let holds = (1..=n - 2 * b)
            .all(|i| benign[b - m + i - 1] <= angles[b + i - 1] && angles[b + i - 1] <= benign[b + i - 1]);
        if !holds {
            counterexamples += 1;
        }
        let sample = AngleSample::new(&angles, &flags).unwrap();
        if lemma1_check(&sample, b).unwrap() != holds {
            disagreements += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        counterexamples == 0 && disagreements == 0 && elapsed <= Duration::from_secs(5),
        format!(
            "{instances} instances, {counterexamples} counterexamples, {disagreements} checker disagreements, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3, 4

/// Random gradients, some duplicated so that mean angles tie.
fn atm_instance(seed: u64) -> (Vec<Vec<f64>>, usize) {
    let mut r = rng(seed);
    let n = r.random_range(2..=8usize);
    let d = r.random_range(2..=6usize);
    let mut grads: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, d)).collect();
    if n >= 3 && r.random_bool(0.3) {
        let src = r.random_range(0..n);
        let dst = (src + 1 + r.random_range(0..n - 1)) % n;
        grads[dst] = grads[src].clone();
    }
    let b = r.random_range(0..=(n - 1) / 2);
    (grads, b)
}

fn naive_atm(grads: &[Vec<f64>], b: usize, include_self: bool) -> Vec<usize> {
    let n = grads.len();
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                if j != i {
                    s += naive_angle(&grads[i], &grads[j]);
                }
            }
            let mean = if include_self {
                s / n as f64
            } else {
                s / (n - 1) as f64
            };
            (mean, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = scored[..n - 2 * b].iter().map(|s| s.1).collect();
    kept.sort_unstable();
    kept
}

fn atm_matches_reference() -> Outcome {
    let mut mismatches = 0;
    let mut ties = 0;
    for t in 0..500 {
        let (grads, b) = atm_instance(t);
        let lib: Vec<GradientVector> = grads.iter().cloned().map(gv).collect();
        let kept = atm(&lib, b).unwrap().kept_indices;
        if kept != naive_atm(&grads, b, false) {
            mismatches += 1;
        }
        let set: BTreeSet<u64> = grads.iter().map(|g| g[0].to_bits()).collect();
        ties += usize::from(set.len() < grads.len());
    }
    outcome(
        mismatches == 0,
        format!("500 instances ({ties} with tied gradients), {mismatches} mismatches"),
    )
}

fn atm_self_inclusion_equivalent() -> Outcome {
    let mut mismatches = 0;
    for t in 0..500 {
        let (grads, b) = atm_instance(10_000 + t);
        let lib: Vec<GradientVector> = grads.iter().cloned().map(gv).collect();
        let kept = atm(&lib, b).unwrap().kept_indices;
        let inclusive = naive_atm(&grads, b, true);
        let exclusive = naive_atm(&grads, b, false);
        if kept != inclusive || inclusive != exclusive {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("500 instances, {mismatches} ranking differences"),
    )
}

// ---------------------------------------------------------------- 5

fn naive_loss(params: &ModelParams, batch: &[Example]) -> f64 {
    // Straight-line forward pass written independently of the library.
    let mut total = 0.0;
    for ex in batch {
        let mut act = ex.features.clone();
        let shapes = params.layer_shapes().to_vec();
        let mut offset = 0;
        for (l, &(inp, out)) in shapes.iter().enumerate() {
            let w = &params.flat()[offset..offset + out * inp];
            let bias = &params.flat()[offset + out * inp..offset + out * inp + out];
            offset += out * inp + out;
            let mut z: Vec<f64> = (0..out)
                .map(|o| bias[o] + (0..inp).map(|i| w[o * inp + i] * act[i]).sum::<f64>())
                .collect();
            if l + 1 < shapes.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            act = z;
        }
        let mx = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + act.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - act[ex.label];
    }
    total / batch.len() as f64
}

fn gradient_correct() -> Outcome {
    let mut worst: f64 = 0.0;
    for t in 0..20u64 {
        let mut r = rng(500 + t);
        let input = r.random_range(2..=5usize);
        let classes = r.random_range(2..=4usize);
        let hidden: Vec<usize> = (0..r.random_range(0..=2))
            .map(|_| r.random_range(2..=5))
            .collect();
        let shapes = model::mlp_shapes(input, &hidden, classes);
        // Random biases keep pre-activations off the ReLU kink.
        let flat = random_vec(&mut r, model::param_count(&shapes));
        let params = ModelParams::from_flat(&shapes, flat).unwrap();
        let batch: Vec<Example> = (0..r.random_range(1..=6))
            .map(|_| Example::new(random_vec(&mut r, input), r.random_range(0..classes)))
            .collect();
        let g = model::gradient(&params, &batch).unwrap();
        for k in 0..params.dim() {
            let h = 1e-5 * params.flat()[k].abs().max(1.0);
            let at = |delta: f64| {
                let mut flat = params.flat().to_vec();
                flat[k] += delta;
                naive_loss(&ModelParams::from_flat(&shapes, flat).unwrap(), &batch)
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let rel = (numeric - g[k]).abs() / numeric.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    outcome(
        worst <= 1e-4,
        format!("20 instances, max relative error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 6

struct GreedyInstance {
    params: ModelParams,
    mask: Vec<Example>,
    g_attack: GradientVector,
    refs: Vec<GradientVector>,
}

fn greedy_instance(seed: u64) -> GreedyInstance {
    let mut r = rng(seed);
    let (input, classes) = (4, 3);
    let shapes = model::mlp_shapes(input, &[6], classes);
    let params = model::init_params(&shapes, seed).unwrap();
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| random_vec(&mut r, input)).collect();
    let sample = |r: &mut ChaCha8Rng| {
        let label = r.random_range(0..classes);
        let x = centers[label]
            .iter()
            .map(|c| c + 0.5 * r.random_range(-1.0..1.0))
            .collect();
        Example::new(x, label)
    };
    let mask: Vec<Example> = (0..12).map(|_| sample(&mut r)).collect();
    let attack: Vec<Example> = (0..8)
        .map(|_| {
            let ex = sample(&mut r);
            let flipped = (ex.label + r.random_range(1..classes)) % classes;
            Example::new(ex.features, flipped)
        })
        .collect();
    let refs = (0..5)
        .map(|_| {
            let batch: Vec<Example> = (0..8).map(|_| sample(&mut r)).collect();
            model::gradient(&params, &batch).unwrap()
        })
        .collect();
    GreedyInstance {
        g_attack: model::gradient(&params, &attack).unwrap(),
        params,
        mask,
        refs,
    }
}

/// Constrained objective of a subset at alpha = 1: the largest reference
/// angle if within the benign budget, otherwise zero.
fn subset_value(inst: &GreedyInstance, subset: &[usize], per_sample: &[GradientVector]) -> (f64, bool) {
    let d = inst.g_attack.dim();
    let mut g = vec![0.0; d];
    for &k in subset {
        for (a, b) in g.iter_mut().zip(per_sample[k].as_slice()) {
            *a += b / subset.len() as f64;
        }
    }
    for (a, b) in g.iter_mut().zip(inst.g_attack.as_slice()) {
        *a += b;
    }
    let obj = inst
        .refs
        .iter()
        .map(|r| naive_angle(&g, r.as_slice()))
        .fold(0.0, f64::max);
    let mut budget: f64 = 0.0;
    for i in 0..inst.refs.len() {
        for j in i + 1..inst.refs.len() {
            budget = budget.max(naive_angle(inst.refs[i].as_slice(), inst.refs[j].as_slice()));
        }
    }
    let feasible = obj <= budget;
    (if feasible { obj } else { 0.0 }, feasible)
}

fn greedy_effective() -> Outcome {
    let (mut greedy_sum, mut random_sum) = (0.0, 0.0);
    let mut budget1_mismatch = 0;
    for t in 0..100u64 {
        let inst = greedy_instance(2_000 + t);
        let per_sample: Vec<GradientVector> = inst
            .mask
            .iter()
            .map(|ex| model::gradient(&inst.params, std::slice::from_ref(ex)).unwrap())
            .collect();
        let sel =
            greedy_mask_select(&inst.mask, 0.25, &inst.params, &inst.g_attack, 1.0, &inst.refs).unwrap();
        assert_eq!(sel.indices.len(), 3);
        greedy_sum += subset_value(&inst, &sel.indices, &per_sample).0;
        let mut r = rng(9_000 + t);
        let best_random = (0..5)
            .map(|_| subset_value(&inst, &index::sample(&mut r, 12, 3).into_vec(), &per_sample).0)
            .fold(0.0, f64::max);
        random_sum += best_random;

        // Budget 1 (gamma = 1/12) against exhaustive search.
        let one = greedy_mask_select(
            &inst.mask,
            1.0 / 12.0,
            &inst.params,
            &inst.g_attack,
            1.0,
            &inst.refs,
        )
        .unwrap();
        let singles: Vec<(usize, f64, bool)> = (0..12)
            .map(|k| {
                let (v, f) = subset_value(&inst, &[k], &per_sample);
                let raw = inst
                    .refs
                    .iter()
                    .map(|r| {
                        naive_angle(
                            inst.g_attack.add(&per_sample[k]).unwrap().as_slice(),
                            r.as_slice(),
                        )
                    })
                    .fold(0.0, f64::max);
                (k, if f { v } else { raw }, f)
            })
            .collect();
        let expected = if singles.iter().any(|s| s.2) {
            singles
                .iter()
                .filter(|s| s.2)
                .fold(None::<(usize, f64)>, |best, s| match best {
                    Some((_, b)) if b >= s.1 => best,
                    _ => Some((s.0, s.1)),
                })
        } else {
            singles.iter().fold(None::<(usize, f64)>, |best, s| match best {
                Some((_, b)) if b <= s.1 => best,
                _ => Some((s.0, s.1)),
            })
        };
        if Some(one.indices[0]) != expected.map(|e| e.0) {
            budget1_mismatch += 1;
        }
    }
    let (g, rnd) = (greedy_sum / 100.0, random_sum / 100.0);
    outcome(
        g >= rnd && budget1_mismatch == 0,
        format!(
            "mean greedy {g:.4} vs best-of-5 random {rnd:.4}; budget-1 mismatches {budget1_mismatch}/100"
        ),
    )
}

// ---------------------------------------------------------------- 7-10

#[derive(Default)]
struct FeasibilityAudit {
    feasible: usize,
    crafted: usize,
    violations: usize,
}

impl RunObserver for FeasibilityAudit {
    fn on_craft(&mut self, event: &CraftEvent<'_>) {
        let Some(result) = event.fedpoisonmia else { return };
        self.crafted += 1;
        if !result.feasible {
            return;
        }
        self.feasible += 1;
        let refs = event.references.gradients();
        let mut budget: f64 = 0.0;
        for i in 0..refs.len() {
            for j in i + 1..refs.len() {
                budget = budget.max(naive_angle(refs[i].as_slice(), refs[j].as_slice()));
            }
        }
        let worst = refs
            .iter()
            .map(|r| naive_angle(event.gradient.as_slice(), r.as_slice()))
            .fold(0.0, f64::max);
        if worst > budget + 1e-9 {
            self.violations += 1;
        }
    }
}

struct Experiments {
    /// attack accuracy per (rule, attack) over seeds 0..4
    runs: Vec<(RuleKind, AttackKind, Vec<ExperimentResult>)>,
    criterion8_time: Duration,
    audit: FeasibilityAudit,
}

impl Experiments {
    fn get(&self, rule: RuleKind, kind: AttackKind) -> &[ExperimentResult] {
        &self.runs.iter().find(|r| r.0 == rule && r.1 == kind).unwrap().2
    }

    fn median_mia(&self, rule: RuleKind, kind: AttackKind) -> f64 {
        median(self.get(rule, kind).iter().map(|r| r.attack_accuracy).collect())
    }
}

fn base_config() -> ExperimentConfig {
    cli::parse_config_str(ACCEPTANCE_CONFIG).unwrap()
}

fn run_experiments() -> Experiments {
    let base = base_config();
    let mut audit = FeasibilityAudit::default();
    let mut runs = Vec::new();
    let go = |rule: RuleKind, kind: AttackKind, audit: &mut FeasibilityAudit| {
        let results: Vec<ExperimentResult> = (0..5)
            .map(|seed| {
                let mut c = base.clone();
                c.seed = seed;
                c.aggregation.rule = rule;
                c.attack.kind = kind;
                engine::run(&c, RunOptions::default(), audit).unwrap()
            })
            .collect();
        (rule, kind, results)
    };
    let start = Instant::now();
    for rule in [RuleKind::Fedavg, RuleKind::Median, RuleKind::TrimmedMean] {
        for kind in [AttackKind::Passive, AttackKind::FedPoisonMia] {
            runs.push(go(rule, kind, &mut audit));
        }
    }
    let criterion8_time = start.elapsed();
    runs.push(go(RuleKind::Atm, AttackKind::FedPoisonMia, &mut audit));
    runs.push(go(RuleKind::Fedavg, AttackKind::None, &mut audit));
    runs.push(go(RuleKind::Atm, AttackKind::None, &mut audit));
    Experiments {
        runs,
        criterion8_time,
        audit,
    }
}

fn feasibility_certified(e: &Experiments) -> Outcome {
    let a = &e.audit;
    outcome(
        a.violations == 0 && a.feasible > 0,
        format!(
            "{} crafted updates, {} feasible, {} violations",
            a.crafted, a.feasible, a.violations
        ),
    )
}

fn attack_beats_passive(e: &Experiments) -> Outcome {
    let mut ok = e.criterion8_time <= Duration::from_secs(120);
    let mut parts = Vec::new();
    for rule in [RuleKind::Fedavg, RuleKind::Median, RuleKind::TrimmedMean] {
        let poison = e.median_mia(rule, AttackKind::FedPoisonMia);
        let passive = e.median_mia(rule, AttackKind::Passive);
        ok &= poison - passive >= 0.05;
        parts.push(format!("{rule:?} {poison:.3} vs {passive:.3}"));
    }
    outcome(
        ok,
        format!("{}; {:.1}s", parts.join(", "), e.criterion8_time.as_secs_f64()),
    )
}

fn atm_defends(e: &Experiments) -> Outcome {
    let fedavg = e.median_mia(RuleKind::Fedavg, AttackKind::FedPoisonMia);
    let atm = e.median_mia(RuleKind::Atm, AttackKind::FedPoisonMia);
    outcome(
        fedavg - atm >= 0.03,
        format!("median attack accuracy ATM {atm:.3} vs FedAvg {fedavg:.3}"),
    )
}

fn fidelity(e: &Experiments) -> Outcome {
    let fedavg = e.get(RuleKind::Fedavg, AttackKind::None);
    let atm = e.get(RuleKind::Atm, AttackKind::None);
    let gaps: Vec<f64> = fedavg
        .iter()
        .zip(atm)
        .map(|(f, a)| (f.final_test_accuracy - a.final_test_accuracy).abs())
        .collect();
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst <= 0.05,
        format!("per-seed |test acc gap| max {worst:.3} over 5 seeds"),
    )
}

// ---------------------------------------------------------------- 11

fn adaptive_contract() -> Outcome {
    let mut violations = 0;
    let mut evaded = 0;
    for t in 0..100u64 {
        let mut r = rng(7_000 + t);
        let n = r.random_range(3..=9usize);
        let d = r.random_range(2..=8usize);
        let b = r.random_range(1..=n / 2);
        let benign: Vec<GradientVector> = (0..n).map(|_| gv(random_vec(&mut r, d))).collect();
        let attack = gv(random_vec(&mut r, d));
        let out = craft_adaptive(&benign, &attack, b).unwrap();
        if out.iterations > ADAPTIVE_MAX_ITERATIONS {
            violations += 1;
        }
        if out.evades {
            evaded += 1;
            let mut all: Vec<Vec<f64>> = benign.iter().map(|g| g.as_slice().to_vec()).collect();
            all.push(out.gradient.as_slice().to_vec());
            if !naive_atm(&all, b, false).contains(&n) {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("100 instances, {evaded} evasions, {violations} contract violations"),
    )
}

// ---------------------------------------------------------------- 12

fn determinism() -> Outcome {
    let mut base = base_config();
    base.rounds = 40;
    let mut problems = Vec::new();
    for asynchronous in [false, true] {
        for kind in [AttackKind::FedPoisonMia, AttackKind::Adaptive] {
            let mut c = base.clone();
            c.asynchronous.enabled = asynchronous;
            c.attack.kind = kind;
            c.aggregation.rule = RuleKind::Atm;
            let reference = engine::run(&c, RunOptions { threads: 0 }, &mut engine::NoObserver).unwrap();
            let again = engine::run(&c, RunOptions { threads: 0 }, &mut engine::NoObserver).unwrap();
            let threaded = engine::run(&c, RunOptions { threads: 3 }, &mut engine::NoObserver).unwrap();
            let label = format!("{}/{}", if asynchronous { "async" } else { "sync" }, kind.name());
            if output::rounds_csv(&reference) != output::rounds_csv(&again)
                || output::summary_json(&reference) != output::summary_json(&again)
            {
                problems.push(format!("{label}: repeat differs"));
            }
            if reference != threaded {
                problems.push(format!("{label}: threaded differs"));
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "sync and async repeat byte-identically; 3 threads match".into()
        } else {
            problems.join(", ")
        },
    )
}

fn main() -> ExitCode {
    let mut lines: Vec<(u32, &str, Outcome)> = vec![
        (1, "deviation bound", bound_holds()),
        (2, "order statistics", lemma_holds()),
        (3, "ATM reference equivalence", atm_matches_reference()),
        (4, "ATM self-inclusion ranking", atm_self_inclusion_equivalent()),
        (5, "gradient correctness", gradient_correct()),
        (6, "greedy mask selection", greedy_effective()),
    ];
    let experiments = run_experiments();
    lines.push((7, "feasibility certificate", feasibility_certified(&experiments)));
    lines.push((8, "attack efficacy", attack_beats_passive(&experiments)));
    lines.push((9, "defense efficacy", atm_defends(&experiments)));
    lines.push((10, "fidelity", fidelity(&experiments)));
    lines.push((11, "adaptive attack contract", adaptive_contract()));
    lines.push((12, "determinism", determinism()));
    lines.sort_by_key(|l| l.0);
    let mut all = true;
    for (id, name, o) in &lines {
        all &= o.passed;
        println!(
            "criterion {id:>2} {} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let _ = attacks::default_alpha_grid;
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
