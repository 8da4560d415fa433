//! Numeric primitives shared by every other module: vectors, the clamped
//! cosine, a max-shifted softmax, and the seeded random stream.
//!
//! All arithmetic is `f64`.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Cosines are clamped to `[-1 + COS_EPS, 1 - COS_EPS]` so that `acos` and
/// `sqrt(1 - c^2)` stay finite with finite derivatives.
pub const COS_EPS: f64 = 1e-7;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Norm deviation below which a vector counts as already unit.
pub const UNIT_TOLERANCE: f64 = 1e-12;

/// A real-valued embedding or input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    normalized: bool,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, actual: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(Self { values, normalized: false })
    }

    /// Normalizes `values` on construction.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        l2_normalize(&Self::new(values)?)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

/// Pre-softmax scores, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(pub Vec<f64>);

/// A probability distribution over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates entries in `[0, 1]` summing to one within `1e-9`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, actual: 0 });
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter("probability outside [0, 1]".into()));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("probabilities sum to {total}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Divides by the L2 norm. Vectors already unit within [`UNIT_TOLERANCE`]
/// are returned unchanged, so normalization is idempotent bit for bit.
pub fn l2_normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let n = v.norm();
    if n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    if (n - 1.0).abs() <= UNIT_TOLERANCE {
        return Ok(FeatureVector { values: v.values.clone(), normalized: true });
    }
    Ok(FeatureVector {
        values: v.values.iter().map(|x| x / n).collect(),
        normalized: true,
    })
}

pub fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS)
}

/// Dot product of two unit vectors, clamped away from +-1.
pub fn cosine(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch { expected: u.dim(), actual: v.dim() });
    }
    Ok(clamp_cos(dot(&u.values, &v.values)))
}

/// `log(sum(exp(z)))` with the max shifted out.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax(z: &LogitVector) -> ProbVector {
    ProbVector(softmax_slice(&z.0))
}

/// Deterministic random stream: ChaCha8 keyed by a 64-bit seed.
///
/// The ChaCha8 keystream is fixed by its definition, so a given seed yields
/// the same draws on every platform. Independent sub-streams for workers
/// or subsystems come from [`Rng::split`], which selects a ChaCha stream id
/// under the same key.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh stream derived from this generator's seed and `stream`.
    pub fn split(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng { seed: self.seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let unit = l2_normalize(&fv(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(unit.values(), &[1.0, 0.0, 0.0]);
        assert!(unit.is_normalized());

        let v = l2_normalize(&fv(&[3.0, 4.0])).unwrap();
        assert!((v.values()[0] - 0.6).abs() < 1e-15);
        assert!((v.values()[1] - 0.8).abs() < 1e-15);

        assert!(matches!(l2_normalize(&fv(&[0.0, 0.0])), Err(Error::ZeroVector)));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVector::new(vec![]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let e1 = FeatureVector::unit(vec![1.0, 0.0]).unwrap();
        let e2 = FeatureVector::unit(vec![0.0, 1.0]).unwrap();
        let neg = FeatureVector::unit(vec![-1.0, 0.0]).unwrap();
        assert_eq!(cosine(&e1, &e1).unwrap(), 1.0 - COS_EPS);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert_eq!(cosine(&e1, &neg).unwrap(), -1.0 + COS_EPS);
        let e3 = FeatureVector::unit(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(cosine(&e1, &e3), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&LogitVector(vec![0.0, 0.0, 0.0]));
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&LogitVector(vec![1000.0, 0.0]));
        assert_eq!(p.values()[0], 1.0);
        assert!(p.values()[1] < 1e-300);
        let p = softmax(&LogitVector(vec![1f64.ln(), 3f64.ln()]));
        assert!((p.values()[0] - 0.25).abs() < 1e-15);
        assert!((p.values()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rng_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(43);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn rng_split_streams_differ() {
        let root = Rng::new(7);
        let mut s1 = root.split(1);
        let mut s2 = root.split(2);
        let mut s1b = root.split(1);
        let x = s1.next_u64();
        assert_ne!(x, s2.next_u64());
        assert_eq!(x, s1b.next_u64());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(z in prop::collection::vec(-700.0f64..700.0, 1..12)) {
            let p = softmax(&LogitVector(z));
            let total: f64 = p.values().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(ProbVector::new(p.values().to_vec()).is_ok());
        }

        #[test]
        fn softmax_shift_invariant(
            z in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&LogitVector(z.clone()));
            let q = softmax(&LogitVector(z.iter().map(|v| v + c).collect()));
            for (a, b) in p.values().iter().zip(q.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_symmetric_and_bounded(
            a in prop::collection::vec(-1.0f64..1.0, 3),
            b in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let u = FeatureVector::unit(a).unwrap();
            let v = FeatureVector::unit(b).unwrap();
            let c = cosine(&u, &v).unwrap();
            prop_assert_eq!(c, cosine(&v, &u).unwrap());
            prop_assert!((-1.0 + COS_EPS..=1.0 - COS_EPS).contains(&c));
        }

        #[test]
        fn normalize_idempotent(a in prop::collection::vec(-10.0f64..10.0, 1..9)) {
            prop_assume!(norm(&a) > 1e-6);
            let once = FeatureVector::unit(a).unwrap();
            prop_assert!((once.norm() - 1.0).abs() < 1e-9);
            let twice = l2_normalize(&once).unwrap();
            prop_assert_eq!(&once, &twice);
        }
    }
}
