//! Quick randomized property checks runnable from the binary.

use std::fmt;

use rand::Rng;

use crate::aggregation::atm;
use crate::attacks::{craft_adaptive, survives_atm, ADAPTIVE_MAX_ITERATIONS};
use crate::model::{self, Example};
use crate::rng;
use crate::tensor::{pairwise_angles, GradientVector};
use crate::theory::{lemma1_check, AngleSample};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn random_vectors(rng: &mut impl Rng, n: usize, d: usize) -> Vec<GradientVector> {
    (0..n)
        .map(|_| GradientVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite"))
        .collect()
}

fn atm_matches_definition(seed: u64) -> CheckLine {
    let mut bad = 0;
    let cases = 200;
    for t in 0..cases {
        let mut rng = rng::stream(seed, "selftest-atm", t);
        let n = rng.random_range(3..=8);
        let b = rng.random_range(0..=(n - 1) / 2);
        let grads = random_vectors(&mut rng, n, 4);
        let angles = pairwise_angles(&grads).expect("non-degenerate");
        let mut scored: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                (
                    (0..n).filter(|&j| j != i).map(|j| angles.get(i, j)).sum::<f64>() / (n - 1) as f64,
                    i,
                )
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut expected: Vec<usize> = scored[..n - 2 * b].iter().map(|s| s.1).collect();
        expected.sort_unstable();
        if atm(&grads, b).map(|o| o.kept_indices) != Ok(expected) {
            bad += 1;
        }
    }
    CheckLine {
        name: "atm-survivors",
        passed: bad == 0,
        detail: format!("{bad} mismatches in {cases} instances"),
    }
}

fn lemma_holds(seed: u64) -> CheckLine {
    let mut bad = 0;
    let cases = 1000;
    for t in 0..cases {
        let mut rng = rng::stream(seed, "selftest-lemma", t);
        let n = rng.random_range(6..=30);
        let upper = n / 2 - 1;
        let b = rng.random_range(1..=upper);
        let m = rng.random_range(0..b);
        let angles: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0.0..std::f64::consts::PI))
            .collect();
        let mut flags = vec![false; n];
        for f in flags.iter_mut().take(m) {
            *f = true;
        }
        let sample = AngleSample::new(&angles, &flags).expect("finite");
        if lemma1_check(&sample, b) != Ok(true) {
            bad += 1;
        }
    }
    CheckLine {
        name: "order-statistics",
        passed: bad == 0,
        detail: format!("{bad} counterexamples in {cases} instances"),
    }
}

fn gradient_matches_differences(seed: u64) -> CheckLine {
    let mut worst: f64 = 0.0;
    for t in 0..5 {
        let mut rng = rng::stream(seed, "selftest-grad", t);
        let shapes = model::mlp_shapes(3, &[4], 3);
        let params = model::init_params(&shapes, seed.wrapping_add(t)).expect("valid shapes");
        let batch: Vec<Example> = (0..4)
            .map(|_| {
                Example::new(
                    (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(0..3),
                )
            })
            .collect();
        let g = model::gradient(&params, &batch).expect("valid batch");
        for k in 0..params.dim() {
            let h = 1e-5 * params.flat()[k].abs().max(1.0);
            let shifted = |delta: f64| {
                let mut flat = params.flat().to_vec();
                flat[k] += delta;
                let p = model::ModelParams::from_flat(&shapes, flat).expect("same shape");
                model::loss(&p, &batch).expect("valid batch")
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let rel = (numeric - g[k]).abs() / numeric.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    CheckLine {
        name: "gradient",
        passed: worst <= 1e-4,
        detail: format!("max relative error {worst:.3e}"),
    }
}

fn adaptive_contract(seed: u64) -> CheckLine {
    let mut bad = 0;
    let cases = 50;
    for t in 0..cases {
        let mut rng = rng::stream(seed, "selftest-adaptive", t);
        let n = rng.random_range(4..=9);
        let b = rng.random_range(1..=(n - 1) / 2);
        let benign = random_vectors(&mut rng, n, 5);
        let attack = random_vectors(&mut rng, 1, 5).remove(0);
        match craft_adaptive(&benign, &attack, b) {
            Ok(out) => {
                let ok_iters = out.iterations <= ADAPTIVE_MAX_ITERATIONS;
                let ok_evade = !out.evades || survives_atm(&benign, &out.gradient, b) == Ok(true);
                if !(ok_iters && ok_evade) {
                    bad += 1;
                }
            }
            Err(_) => bad += 1,
        }
    }
    CheckLine {
        name: "adaptive-attack",
        passed: bad == 0,
        detail: format!("{bad} contract violations in {cases} instances"),
    }
}

/// Runs every check.
pub fn run(seed: u64) -> Vec<CheckLine> {
    vec![
        atm_matches_definition(seed),
        lemma_holds(seed),
        gradient_matches_differences(seed),
        adaptive_contract(seed),
    ]
}
