//! Dense vector arithmetic and angular geometry.

use std::ops::Index;

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero when measuring angles.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A dense gradient (or any model-sized) vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "gradient vector",
            });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Callers guarantee finiteness (values produced by finite arithmetic on
    /// finite inputs).
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance_squared(&self, other: &Self) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::from_raw(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        scaled_add(1.0, self, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dims(self.dim(), other.dim())?;
        Ok(Self::from_raw(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<GradientVector> for Vec<f64> {
    fn from(g: GradientVector) -> Self {
        g.0
    }
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Angle in radians between `u` and `v`, in `[0, pi]`.
///
/// Errors with `DegenerateGradient { index }` where `index` is 0 for `u`
/// and 1 for `v`.
pub fn angle_between(u: &GradientVector, v: &GradientVector) -> Result<f64> {
    check_dims(u.dim(), v.dim())?;
    let nu = u.norm_squared();
    let nv = v.norm_squared();
    if nu.sqrt() <= DEGENERATE_NORM {
        return Err(Error::DegenerateGradient { index: 0 });
    }
    if nv.sqrt() <= DEGENERATE_NORM {
        return Err(Error::DegenerateGradient { index: 1 });
    }
    // sqrt(nu * nv) rather than |u||v| so that cos(u, u) is exactly 1.
    let cos = u.dot(v)? / (nu * nv).sqrt();
    Ok(cos.clamp(-1.0, 1.0).acos())
}

/// Symmetric matrix of pairwise angles with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl AngleMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// Mean angle of each gradient to all the others (self excluded,
    /// divisor `n - 1`).
    pub fn mean_angles(&self) -> Vec<f64> {
        let denom = (self.n - 1) as f64;
        (0..self.n)
            .map(|i| {
                let total: f64 = self
                    .row(i)
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, a)| a)
                    .sum();
                total / denom
            })
            .collect()
    }

    /// Largest off-diagonal entry.
    pub fn max_angle(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }
}

/// All pairwise angles of `grads`. Degenerate inputs report their index in
/// `grads`.
pub fn pairwise_angles(grads: &[GradientVector]) -> Result<AngleMatrix> {
    let n = grads.len();
    if n < 2 {
        return Err(Error::TooFewGradients {
            required: 2,
            found: n,
        });
    }
    let dim = grads[0].dim();
    for (i, g) in grads.iter().enumerate() {
        check_dims(dim, g.dim())?;
        if g.norm() <= DEGENERATE_NORM {
            return Err(Error::DegenerateGradient { index: i });
        }
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let a = angle_between(&grads[i], &grads[j])?;
            entries[i * n + j] = a;
            entries[j * n + i] = a;
        }
    }
    Ok(AngleMatrix { n, entries })
}

/// Elementwise `a * u + v`.
pub fn scaled_add(a: f64, u: &GradientVector, v: &GradientVector) -> Result<GradientVector> {
    check_dims(u.dim(), v.dim())?;
    Ok(GradientVector::from_raw(
        u.0.iter().zip(&v.0).map(|(x, y)| a * x + y).collect(),
    ))
}

/// Unweighted mean, accumulated as a running mean in slice order.
///
/// The running form returns a repeated vector bit-for-bit unchanged.
pub fn mean<'a, I>(grads: I) -> Result<GradientVector>
where
    I: IntoIterator<Item = &'a GradientVector>,
{
    let mut iter = grads.into_iter();
    let first = iter.next().ok_or(Error::EmptyInput)?;
    let mut acc = first.0.clone();
    for (k, g) in iter.enumerate() {
        check_dims(acc.len(), g.dim())?;
        let count = (k + 2) as f64;
        for (m, x) in acc.iter_mut().zip(&g.0) {
            *m += (x - *m) / count;
        }
    }
    Ok(GradientVector::from_raw(acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn gv(v: &[f64]) -> GradientVector {
        GradientVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn angle_examples() {
        let g = gv(&[0.3, -1.7, 2.2, 0.01]);
        assert_eq!(angle_between(&g, &g).unwrap(), 0.0);
        assert!((angle_between(&gv(&[1.0, 0.0]), &gv(&[0.0, 1.0])).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((angle_between(&gv(&[1.0, 0.0]), &gv(&[1.0, 1.0])).unwrap() - FRAC_PI_4).abs() < 1e-15);
        assert_eq!(angle_between(&g, &g.scale(-1.0)).unwrap(), PI);
    }

    #[test]
    fn angle_errors() {
        let z = gv(&[0.0, 1e-13]);
        let u = gv(&[1.0, 0.0]);
        assert_eq!(angle_between(&z, &u), Err(Error::DegenerateGradient { index: 0 }));
        assert_eq!(angle_between(&u, &z), Err(Error::DegenerateGradient { index: 1 }));
        assert!(matches!(
            angle_between(&u, &gv(&[1.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(GradientVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(GradientVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let basis = vec![gv(&[1.0, 0.0, 0.0]), gv(&[0.0, 1.0, 0.0]), gv(&[0.0, 0.0, 1.0])];
        let m = pairwise_angles(&basis).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { FRAC_PI_2 };
                assert!((m.get(i, j) - want).abs() < 1e-15);
            }
        }
        let g = gv(&[0.5, -2.0]);
        let same = pairwise_angles(&[g.clone(), g.clone(), g]).unwrap();
        assert!(same.entries.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn pairwise_reports_offending_index() {
        let grads = vec![gv(&[1.0, 0.0]), gv(&[0.0, 1.0]), gv(&[0.0, 0.0])];
        assert_eq!(
            pairwise_angles(&grads),
            Err(Error::DegenerateGradient { index: 2 })
        );
    }

    #[test]
    fn pairwise_matches_double_loop() {
        use rand::Rng;
        let mut rng = crate::rng::stream(7, "pairwise-test", 0);
        let grads: Vec<_> = (0..6)
            .map(|_| gv(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let m = pairwise_angles(&grads).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let (a, b) = (grads[i].as_slice(), grads[j].as_slice());
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let want = if i == j {
                    0.0
                } else {
                    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
                };
                assert!((m.get(i, j) - want).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn scaled_add_examples() {
        let u = gv(&[1.0, 2.0]);
        let v = gv(&[3.0, 4.0]);
        assert_eq!(scaled_add(0.0, &u, &v).unwrap(), v);
        assert_eq!(scaled_add(1.0, &u, &GradientVector::zeros(2)).unwrap(), u);
        assert_eq!(scaled_add(2.0, &u, &v).unwrap(), gv(&[5.0, 8.0]));
        assert!(scaled_add(1.0, &u, &gv(&[1.0])).is_err());
    }

    #[test]
    fn mean_of_repeated_vector_is_exact() {
        let g = gv(&[0.1, 0.7, -3.3]);
        let copies = vec![g.clone(); 7];
        assert_eq!(mean(&copies).unwrap(), g);
        assert_eq!(
            mean(std::iter::empty::<&GradientVector>()),
            Err(Error::EmptyInput)
        );
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
    }

    proptest! {
        #[test]
        fn angle_symmetric_and_scale_invariant(u in vec_strategy(4), v in vec_strategy(4), c in 0.01f64..100.0) {
            let (u, v) = (gv(&u), gv(&v));
            let a = angle_between(&u, &v).unwrap();
            prop_assert!((0.0..=PI).contains(&a));
            prop_assert_eq!(a, angle_between(&v, &u).unwrap());
            prop_assert!((angle_between(&u.scale(c), &v).unwrap() - a).abs() < 1e-7);
            prop_assert!((angle_between(&u, &u.scale(-1.0)).unwrap() - PI).abs() < 1e-7);
        }

        #[test]
        fn angle_matrix_invariants(raw in prop::collection::vec(vec_strategy(3), 2..8)) {
            let grads: Vec<_> = raw.iter().map(|v| gv(v)).collect();
            let m = pairwise_angles(&grads).unwrap();
            for i in 0..m.len() {
                prop_assert_eq!(m.get(i, i), 0.0);
                for j in 0..m.len() {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                    prop_assert!((0.0..=PI).contains(&m.get(i, j)));
                }
            }
        }
    }
}
