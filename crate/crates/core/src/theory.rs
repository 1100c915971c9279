//! Numerical checks of the trimmed-mean deviation bound and the
//! order-statistics sandwich behind it.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};
use crate::rng;

fn check_shape(n: usize, m: usize, b: usize) -> Result<()> {
    if 2 * m >= n {
        return Err(Error::InvalidParams(format!("need 2m < n, got n={n}, m={m}")));
    }
    if n <= b + m {
        return Err(Error::InvalidParams(format!(
            "need n - b - m > 0, got n={n}, m={m}, b={b}"
        )));
    }
    Ok(())
}

/// Upper bound on the mean squared deviation of the trimmed angle mean
/// from the benign mean: `2(n-m)(b+1)σ² / (n-b-m)²`.
pub fn theorem1_bound(n: usize, m: usize, b: usize, sigma2: f64) -> Result<f64> {
    check_shape(n, m, b)?;
    if !sigma2.is_finite() || sigma2 < 0.0 {
        return Err(Error::InvalidParams(format!(
            "variance must be finite and >= 0, got {sigma2}"
        )));
    }
    let (n, m, b) = (n as f64, m as f64, b as f64);
    Ok(2.0 * (n - m) * (b + 1.0) * sigma2 / ((n - b - m) * (n - b - m)))
}

/// Sorted angles with the positions held by adversaries.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleSample {
    theta: Vec<f64>,
    malicious: Vec<bool>,
}

impl AngleSample {
    /// Sorts `angles` ascending (stable), carrying the malicious flags along.
    pub fn new(angles: &[f64], malicious: &[bool]) -> Result<Self> {
        if angles.len() != malicious.len() {
            return Err(Error::InvalidParams(format!(
                "{} angles but {} flags",
                angles.len(),
                malicious.len()
            )));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite {
                context: "angle sample",
            });
        }
        let mut order: Vec<usize> = (0..angles.len()).collect();
        order.sort_by(|&i, &j| angles[i].total_cmp(&angles[j]));
        Ok(Self {
            theta: order.iter().map(|&i| angles[i]).collect(),
            malicious: order.iter().map(|&i| malicious[i]).collect(),
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn malicious_mask(&self) -> &[bool] {
        &self.malicious
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn malicious_count(&self) -> usize {
        self.malicious.iter().filter(|&&f| f).count()
    }

    /// Sorted benign subsequence.
    pub fn benign(&self) -> Vec<f64> {
        self.theta
            .iter()
            .zip(&self.malicious)
            .filter(|(_, &f)| !f)
            .map(|(&t, _)| t)
            .collect()
    }
}

/// Whether every order statistic kept by a `b`-per-side trim lies between
/// the benign order statistics `m` ranks below and at the same rank.
///
/// Requires `m < b <= n/2 - 1`, or `0 < b <= n/2 - 1` when there are no
/// adversaries.
pub fn lemma1_check(sample: &AngleSample, b: usize) -> Result<bool> {
    let n = sample.len();
    let m = sample.malicious_count();
    let upper = (n / 2).saturating_sub(1);
    let lower_ok = if m == 0 { b >= 1 } else { b > m };
    if !lower_ok || b > upper {
        return Err(Error::InvalidParams(format!(
            "b={b} outside the admissible range for n={n}, m={m}"
        )));
    }
    let hat = sample.benign();
    let theta = sample.theta();
    // 1-based ranks b-m+i, b+i for i in 1..=n-2b, shifted to 0-based.
    Ok((1..=n - 2 * b).all(|i| {
        let t = theta[b + i - 1];
        hat[b - m + i - 1] <= t && t <= hat[b + i - 1]
    }))
}

/// Benign angle law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AngleDistribution {
    /// Normal(`location`, `scale`²) conditioned on `[0, π]`.
    TruncatedGaussian {
        location: f64,
        scale: f64,
    },
    PointMass(f64),
}

impl AngleDistribution {
    pub fn truncated_gaussian(location: f64, scale: f64) -> Result<Self> {
        if !location.is_finite() || !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "truncated gaussian needs finite location and positive scale, got ({location}, {scale})"
            )));
        }
        let d = Self::TruncatedGaussian { location, scale };
        if d.truncation_mass() < 1e-6 {
            return Err(Error::InvalidParams("almost no mass inside [0, pi]".into()));
        }
        Ok(d)
    }

    fn truncation_mass(&self) -> f64 {
        match *self {
            Self::TruncatedGaussian { location, scale } => {
                let z = StatNormal::standard();
                z.cdf((PI - location) / scale) - z.cdf(-location / scale)
            }
            Self::PointMass(_) => 1.0,
        }
    }

    fn standardized_bounds(location: f64, scale: f64) -> (f64, f64) {
        (-location / scale, (PI - location) / scale)
    }

    /// Mean of the law.
    pub fn mean(&self) -> f64 {
        match *self {
            Self::TruncatedGaussian { location, scale } => {
                let z = StatNormal::standard();
                let (a, b) = Self::standardized_bounds(location, scale);
                location + scale * (z.pdf(a) - z.pdf(b)) / self.truncation_mass()
            }
            Self::PointMass(v) => v,
        }
    }

    /// Variance of the law.
    pub fn variance(&self) -> f64 {
        match *self {
            Self::TruncatedGaussian { location, scale } => {
                let z = StatNormal::standard();
                let (a, b) = Self::standardized_bounds(location, scale);
                let mass = self.truncation_mass();
                let r = (z.pdf(a) - z.pdf(b)) / mass;
                let s = (a * z.pdf(a) - b * z.pdf(b)) / mass;
                scale * scale * (1.0 + s - r * r)
            }
            Self::PointMass(_) => 0.0,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::TruncatedGaussian { location, scale } => {
                let normal = Normal::new(location, scale).expect("validated scale");
                loop {
                    let x: f64 = normal.sample(rng);
                    if (0.0..=PI).contains(&x) {
                        return x;
                    }
                }
            }
            Self::PointMass(v) => v,
        }
    }
}

/// Where adversaries put their angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adversary {
    /// Every adversary at π.
    ExtremeHigh,
    /// Every adversary at 0.
    ExtremeLow,
    /// Every adversary at the benign mean.
    MimicMean,
}

impl Adversary {
    pub const ALL: [Adversary; 3] = [Self::ExtremeHigh, Self::ExtremeLow, Self::MimicMean];

    pub fn name(self) -> &'static str {
        match self {
            Self::ExtremeHigh => "extreme-high",
            Self::ExtremeLow => "extreme-low",
            Self::MimicMean => "mimic-mean",
        }
    }

    fn angle(self, benign_mean: f64) -> f64 {
        match self {
            Self::ExtremeHigh => PI,
            Self::ExtremeLow => 0.0,
            Self::MimicMean => benign_mean,
        }
    }
}

/// Mean squared deviation from the benign mean under two trims.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviation {
    /// Sort and drop `b` from each end.
    pub symmetric: f64,
    /// Drop the `2b` largest.
    pub one_sided: f64,
}

fn trimmed_means(sorted: &[f64], b: usize) -> (f64, f64) {
    let n = sorted.len();
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (avg(&sorted[b..n - b]), avg(&sorted[..n - 2 * b]))
}

/// Monte-Carlo estimate of the squared deviation of the trimmed mean of
/// `n - m` benign draws plus `m` adversarial angles.
pub fn monte_carlo_deviation(
    dist: &AngleDistribution,
    n: usize,
    m: usize,
    b: usize,
    adversary: Adversary,
    trials: usize,
    seed: u64,
) -> Result<Deviation> {
    check_shape(n, m, b)?;
    if trials == 0 {
        return Err(Error::InvalidParams("trials must be >= 1".into()));
    }
    if 2 * b >= n {
        return Err(Error::InvalidParams(format!("need 2b < n, got n={n}, b={b}")));
    }
    let omega = dist.mean();
    let per_trial: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, "theory-trial", t as u64);
            let mut angles: Vec<f64> = (0..n - m).map(|_| dist.sample(&mut rng)).collect();
            angles.extend(std::iter::repeat_n(adversary.angle(omega), m));
            angles.sort_by(f64::total_cmp);
            let (sym, one) = trimmed_means(&angles, b);
            ((sym - omega).powi(2), (one - omega).powi(2))
        })
        .collect();
    let (sym, one) = per_trial
        .iter()
        .fold((0.0, 0.0), |(s, o), &(a, b)| (s + a, o + b));
    Ok(Deviation {
        symmetric: sym / trials as f64,
        one_sided: one / trials as f64,
    })
}

/// One `(n, m, b, adversary)` point of a bound sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub n: usize,
    pub m: usize,
    pub b: usize,
    pub sigma2: f64,
    pub adversary: Adversary,
    pub trials: usize,
    pub empirical: f64,
    pub bound: f64,
    pub pass: bool,
    pub one_sided_empirical: f64,
}

/// Grid of bound checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryGrid {
    pub n: Vec<usize>,
    pub m: Vec<usize>,
    /// `b` runs from `m + 1` to this value.
    pub b_max: usize,
    /// Location of the parent Gaussian.
    pub mean: f64,
    /// Variance of the parent Gaussian; the bound uses the truncated law's
    /// own variance.
    pub sigma2: f64,
    pub adversaries: Vec<Adversary>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for TheoryGrid {
    fn default() -> Self {
        Self {
            n: vec![20],
            m: vec![0, 2, 4],
            b_max: 5,
            mean: PI / 2.0,
            sigma2: 0.09,
            adversaries: Adversary::ALL.to_vec(),
            trials: 2000,
            seed: 0,
        }
    }
}

impl TheoryGrid {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma2.is_finite() || self.sigma2 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sigma2: must be >= 0, got {}",
                self.sigma2
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials: must be >= 1".into()));
        }
        if !self.mean.is_finite() {
            return Err(Error::InvalidConfig("mean: must be finite".into()));
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<AngleDistribution> {
        if self.sigma2 == 0.0 {
            Ok(AngleDistribution::PointMass(self.mean))
        } else {
            AngleDistribution::truncated_gaussian(self.mean, self.sigma2.sqrt())
                .map_err(|e| Error::InvalidConfig(format!("mean: {e}")))
        }
    }

    /// Valid `(n, m, b)` triples in grid order.
    pub fn points(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &m in &self.m {
                for b in m + 1..=self.b_max {
                    if 2 * m < n && 2 * b < n && n > b + m {
                        out.push((n, m, b));
                    }
                }
            }
        }
        out
    }

    pub fn run(&self) -> Result<Vec<BoundCheck>> {
        self.validate()?;
        let dist = self.distribution()?;
        let sigma2 = dist.variance();
        let mut rows = Vec::new();
        for (n, m, b) in self.points() {
            let bound = theorem1_bound(n, m, b, sigma2)?;
            for &adversary in &self.adversaries {
                let dev = monte_carlo_deviation(&dist, n, m, b, adversary, self.trials, self.seed)?;
                rows.push(BoundCheck {
                    n,
                    m,
                    b,
                    sigma2,
                    adversary,
                    trials: self.trials,
                    empirical: dev.symmetric,
                    bound,
                    pass: dev.symmetric <= bound,
                    one_sided_empirical: dev.one_sided,
                });
            }
        }
        Ok(rows)
    }
}
