//! Cosine-logit classification losses: plain normalized softmax, additive
//! angular margin, and the per-class scaled margin used for fair training.
//!
//! Logits are `s * cos(theta_j)` where `cos(theta_j) = W_j . x`. The target
//! class logit becomes `s * cos(theta_y + d_c * m)` under a margin. All three
//! losses share one kernel, [`margin_loss`], parameterized by the effective
//! margin `d_c * m`.
//!
//! Gradients are taken with respect to the raw dot products; keeping `x` and
//! the head columns on the unit sphere is the caller's job (the encoder
//! normalizes embeddings and the optimizer renormalizes head columns).

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::primitives::{clamp_cos, dot, log_sum_exp, norm, softmax_slice, LogitVector, Rng};

/// Largest target angle allowed once a margin is applied.
pub const MAX_TARGET_ANGLE: f64 = std::f64::consts::PI - 1e-3;

/// Class-prototype matrix with `classes` unit-norm columns of length `dim`.
/// Columns are stored contiguously. There is no bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    dim: usize,
    classes: usize,
    weights: Vec<f64>,
}

impl ClassifierHead {
    /// Builds a head from column-major weights, normalizing every column.
    pub fn new(dim: usize, classes: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::ShapeMismatch("head needs dim >= 1 and classes >= 1".into()));
        }
        if weights.len() != dim * classes {
            return Err(Error::ShapeMismatch(format!(
                "head weights have {} entries, expected {}",
                weights.len(),
                dim * classes
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("head weights"));
        }
        let mut head = Self { dim, classes, weights };
        head.renormalize()?;
        Ok(head)
    }

    /// Builds a head whose weights are taken verbatim (checkpoint restore).
    pub(crate) fn from_raw(dim: usize, classes: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || classes == 0 || weights.len() != dim * classes {
            return Err(Error::ShapeMismatch("head shape".into()));
        }
        Ok(Self { dim, classes, weights })
    }

    /// Gaussian columns projected onto the unit sphere.
    pub fn random(dim: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        let weights = (0..dim * classes).map(|_| rng.normal()).collect();
        Self::new(dim, classes, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Rescales every column to unit length.
    pub fn renormalize(&mut self) -> Result<()> {
        for col in self.weights.chunks_mut(self.dim) {
            let n = norm(col);
            if n < crate::primitives::ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            col.iter_mut().for_each(|w| *w /= n);
        }
        Ok(())
    }

    /// Largest deviation of any column norm from one.
    pub fn max_norm_error(&self) -> f64 {
        self.weights
            .chunks(self.dim)
            .map(|c| (norm(c) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Inference logits `s * cos(theta_j)` with no margin.
    pub fn logits(&self, x: &[f64], scale: f64) -> Result<LogitVector> {
        self.check_dim(x)?;
        Ok(LogitVector(
            (0..self.classes).map(|j| scale * clamp_cos(dot(self.column(j), x))).collect(),
        ))
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: x.len() });
        }
        Ok(())
    }
}

/// Scale `s` and base additive angular margin `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginParams {
    pub scale: f64,
    pub margin: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self { scale: 64.0, margin: 0.3 }
    }
}

impl MarginParams {
    pub fn new(scale: f64, margin: f64) -> Result<Self> {
        let mp = Self { scale, margin };
        mp.validate()?;
        Ok(mp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidParameter(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(self.margin >= 0.0 && self.margin < FRAC_PI_2) {
            return Err(Error::InvalidParameter(format!(
                "margin must lie in [0, pi/2), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Loss value with gradients for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_embedding: Vec<f64>,
    /// Same layout as [`ClassifierHead::weights`].
    pub d_weights: Vec<f64>,
}

/// Shared kernel: cross-entropy over cosine logits with `effective_margin`
/// added to the target angle.
pub fn margin_loss(
    x: &[f64],
    label: usize,
    head: &ClassifierHead,
    scale: f64,
    effective_margin: f64,
) -> Result<LossGrad> {
    head.check_dim(x)?;
    if label >= head.classes {
        return Err(Error::LabelOutOfRange { label, classes: head.classes });
    }
    if !(0.0..FRAC_PI_2).contains(&effective_margin) {
        return Err(Error::MarginOverflow { effective: effective_margin });
    }
    let classes = head.classes;
    let (cos_m, sin_m) = (effective_margin.cos(), effective_margin.sin());

    // logit and d(logit)/d(raw dot product) per class
    let mut logits = Vec::with_capacity(classes);
    let mut slopes = Vec::with_capacity(classes);
    for j in 0..classes {
        let raw = dot(head.column(j), x);
        let mut c = clamp_cos(raw);
        let mut live = c == raw;
        if j == label && effective_margin > 0.0 {
            let floor = MAX_TARGET_ANGLE.cos();
            if c < floor {
                c = floor;
                live = false;
            }
            let sin_theta = (1.0 - c * c).sqrt();
            logits.push(scale * (c * cos_m - sin_theta * sin_m));
            slopes.push(if live { scale * (cos_m + c * sin_m / sin_theta) } else { 0.0 });
        } else {
            logits.push(scale * c);
            slopes.push(if live { scale } else { 0.0 });
        }
    }

    // lse(z) - z_y written as ln(1 + sum_{j != y} exp(z_j - z_y)): the
    // rounding error then scales with the loss rather than with s
    let target = logits[label];
    let others: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, z)| (z - target).exp())
        .sum();
    let loss = if others.is_finite() { others.ln_1p() } else { log_sum_exp(&logits) - target };
    let probs = softmax_slice(&logits);

    let dim = head.dim;
    let mut d_embedding = vec![0.0; dim];
    let mut d_weights = vec![0.0; dim * classes];
    for j in 0..classes {
        let dl_dz = probs[j] - if j == label { 1.0 } else { 0.0 };
        let g = dl_dz * slopes[j];
        if g == 0.0 {
            continue;
        }
        let col = head.column(j);
        for k in 0..dim {
            d_embedding[k] += g * col[k];
        }
        for (dw, xk) in d_weights[j * dim..(j + 1) * dim].iter_mut().zip(x) {
            *dw = g * xk;
        }
    }
    Ok(LossGrad { loss, d_embedding, d_weights })
}

/// Normalized softmax cross-entropy (no margin).
pub fn softmax_ce_loss(
    x: &[f64],
    label: usize,
    head: &ClassifierHead,
    scale: f64,
) -> Result<LossGrad> {
    margin_loss(x, label, head, scale, 0.0)
}

/// Additive angular margin loss.
pub fn arcface_loss(
    x: &[f64],
    label: usize,
    head: &ClassifierHead,
    mp: MarginParams,
) -> Result<LossGrad> {
    mp.validate()?;
    margin_loss(x, label, head, mp.scale, mp.margin)
}

/// Angular margin loss with the margin scaled by the class coefficient
/// `d_c`. `d_c` is a constant here: no gradient flows into it.
pub fn fair_margin_loss(
    x: &[f64],
    label: usize,
    head: &ClassifierHead,
    mp: MarginParams,
    d_c: f64,
) -> Result<LossGrad> {
    mp.validate()?;
    if !(0.0..=2.0).contains(&d_c) {
        return Err(Error::InvalidParameter(format!("margin coefficient {d_c} outside [0, 2]")));
    }
    margin_loss(x, label, head, mp.scale, d_c * mp.margin)
}

/// Mean of [`fair_margin_loss`] over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossGrad {
    pub loss: f64,
    /// Per-sample embedding gradients of the mean loss (already divided by
    /// the batch size).
    pub d_embeddings: Vec<Vec<f64>>,
    pub d_weights: Vec<f64>,
}

/// Per-sample terms may run on the current rayon pool; the reduction is
/// always in sample order.
pub fn batch_loss(
    xs: &[&[f64]],
    labels: &[usize],
    head: &ClassifierHead,
    mp: MarginParams,
    margin_coeff: &[f64],
) -> Result<BatchLossGrad> {
    if xs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if xs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings vs {} labels",
            xs.len(),
            labels.len()
        )));
    }
    if margin_coeff.len() != head.classes {
        return Err(Error::ShapeMismatch(format!(
            "{} margin coefficients for {} classes",
            margin_coeff.len(),
            head.classes
        )));
    }
    let terms: Vec<LossGrad> = xs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &label)| {
            let d_c = *margin_coeff
                .get(label)
                .ok_or(Error::LabelOutOfRange { label, classes: head.classes })?;
            fair_margin_loss(x, label, head, mp, d_c)
        })
        .collect::<Result<_>>()?;

    let n = terms.len() as f64;
    let mut loss = 0.0;
    let mut d_weights = vec![0.0; head.weights.len()];
    let mut d_embeddings = Vec::with_capacity(terms.len());
    for t in terms {
        loss += t.loss;
        for (acc, g) in d_weights.iter_mut().zip(&t.d_weights) {
            *acc += g;
        }
        d_embeddings.push(t.d_embedding.into_iter().map(|g| g / n).collect());
    }
    d_weights.iter_mut().for_each(|g| *g /= n);
    Ok(BatchLossGrad { loss: loss / n, d_embeddings, d_weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, ref_margin_loss, relative_error};
    use crate::primitives::FeatureVector;
    use proptest::prelude::*;
    use crate::primitives::Rng;
    use std::f64::consts::PI;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        FeatureVector::unit(v).unwrap().into_values()
    }

    fn random_instance(rng: &mut Rng, dim: usize, classes: usize) -> (Vec<f64>, ClassifierHead) {
        let x = unit((0..dim).map(|_| rng.normal()).collect());
        let head = ClassifierHead::random(dim, classes, rng).unwrap();
        (x, head)
    }

    fn assert_close_grad(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (a, n) in analytic.iter().zip(numeric) {
            if let Some(rel) = relative_error(*a, *n) {
                assert!(rel < tol, "analytic {a} numeric {n} rel {rel}");
            }
        }
    }

    #[test]
    fn single_class_loss_is_zero() {
        let mut rng = Rng::new(1);
        let (x, head) = random_instance(&mut rng, 4, 1);
        let g = softmax_ce_loss(&x, 0, &head, 64.0).unwrap();
        assert_eq!(g.loss, 0.0);
    }

    #[test]
    fn symmetric_two_class_is_ln2() {
        let head = ClassifierHead::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = unit(vec![1.0, 1.0]);
        let g = softmax_ce_loss(&x, 0, &head, 1.0).unwrap();
        assert!((g.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn arcface_hand_value() {
        // theta_label = pi/3, theta_other = pi/2, m = pi/3
        let x = vec![(PI / 3.0).cos(), (PI / 3.0).sin()];
        let head = ClassifierHead::new(
            2,
            2,
            vec![1.0, 0.0, -(PI / 3.0).sin(), (PI / 3.0).cos()],
        )
        .unwrap();
        assert!(dot(head.column(1), &x).abs() < 1e-15);
        let mp = MarginParams::new(1.0, PI / 3.0).unwrap();
        let g = arcface_loss(&x, 0, &head, mp).unwrap();
        assert!((g.loss - 0.974_076_984_180_106_7).abs() < 1e-12, "{}", g.loss);
    }

    #[test]
    fn reduction_chain_exact() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let (x, head) = random_instance(&mut rng, 5, 4);
            let label = rng.index(4);
            let plain = softmax_ce_loss(&x, label, &head, 30.0).unwrap();
            let arc0 = arcface_loss(&x, label, &head, MarginParams::new(30.0, 0.0).unwrap()).unwrap();
            assert_eq!(plain, arc0);
            let mp = MarginParams::new(30.0, 0.4).unwrap();
            let arc = arcface_loss(&x, label, &head, mp).unwrap();
            let fair = fair_margin_loss(&x, label, &head, mp, 1.0).unwrap();
            assert!((arc.loss - fair.loss).abs() <= 1e-12);
            assert_eq!(arc, fair);
            let vanishing = fair_margin_loss(&x, label, &head, mp, 1e-9).unwrap();
            assert!((vanishing.loss - plain.loss).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(2024);
        for _ in 0..120 {
            let dim = 2 + rng.index(7);
            let classes = 1 + rng.index(6);
            let (x, head) = random_instance(&mut rng, dim, classes);
            let label = rng.index(classes);
            let scale = rng.uniform_range(1.0, 8.0);
            let mp = MarginParams::new(scale, rng.uniform_range(0.05, 0.5)).unwrap();
            let d_c = 1.5;
            type LossFn<'a> = &'a dyn Fn(&[f64], &ClassifierHead) -> Result<LossGrad>;
            let kinds: [(LossFn, f64); 3] = [
                (&|x, h| softmax_ce_loss(x, label, h, scale), 0.0),
                (&|x, h| arcface_loss(x, label, h, mp), mp.margin),
                (&|x, h| fair_margin_loss(x, label, h, mp, d_c), d_c * mp.margin),
            ];
            for (kind, margin) in kinds {
                let g = kind(&x, &head).unwrap();
                let mut analytic = g.d_embedding.clone();
                analytic.extend(&g.d_weights);
                let mut base = x.clone();
                base.extend(head.weights());
                let numeric =
                    central_diff(&base, |p| ref_margin_loss(&p[..dim], &p[dim..], label, scale, margin));
                assert_close_grad(&analytic, &numeric, 1e-6);
            }
        }
    }

    #[test]
    fn label_and_margin_errors() {
        let mut rng = Rng::new(3);
        let (x, head) = random_instance(&mut rng, 3, 2);
        assert!(matches!(
            softmax_ce_loss(&x, 2, &head, 1.0),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        let mp = MarginParams::new(1.0, 1.0).unwrap();
        assert!(matches!(
            fair_margin_loss(&x, 0, &head, mp, 1.8),
            Err(Error::MarginOverflow { .. })
        ));
        assert!(MarginParams::new(0.0, 0.3).is_err());
        assert!(MarginParams::new(1.0, 2.0).is_err());
        assert!(matches!(
            softmax_ce_loss(&[1.0, 0.0], 0, &head, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batch_examples() {
        let mut rng = Rng::new(11);
        let head = ClassifierHead::random(4, 3, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> =
            (0..4).map(|_| unit((0..4).map(|_| rng.normal()).collect())).collect();
        let labels = [0, 2, 1, 2];
        let d = [1.2, 0.7, 1.0];
        let mp = MarginParams::new(16.0, 0.3).unwrap();

        let single = batch_loss(&[&xs[0]], &[0], &head, mp, &d).unwrap();
        let direct = fair_margin_loss(&xs[0], 0, &head, mp, 1.2).unwrap();
        assert_eq!(single.loss, direct.loss);
        assert_eq!(single.d_weights, direct.d_weights);
        assert_eq!(single.d_embeddings[0], direct.d_embedding);

        let twice = batch_loss(&[&xs[0], &xs[0]], &[0, 0], &head, mp, &d).unwrap();
        assert!((twice.loss - single.loss).abs() < 1e-15);

        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let b = batch_loss(&refs, &labels, &head, mp, &d).unwrap();
        let mean: f64 = (0..4)
            .map(|i| fair_margin_loss(&xs[i], labels[i], &head, mp, d[labels[i]]).unwrap().loss)
            .sum::<f64>()
            / 4.0;
        assert!((b.loss - mean).abs() < 1e-12);

        assert!(matches!(batch_loss(&[], &[], &head, mp, &d), Err(Error::EmptyBatch)));
    }

    #[test]
    fn batch_reduction_independent_of_threads() {
        let mut rng = Rng::new(12);
        let head = ClassifierHead::random(6, 5, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> =
            (0..64).map(|_| unit((0..6).map(|_| rng.normal()).collect())).collect();
        let labels: Vec<usize> = (0..64).map(|i| i % 5).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let d = [1.0, 1.3, 0.6, 1.9, 0.2];
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| batch_loss(&refs, &labels, &head, MarginParams::default(), &d).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn monotone_in_margin_coefficient() {
        let head = ClassifierHead::new(2, 3, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let mp = MarginParams::new(8.0, 0.3).unwrap();
        // theta_label = 0.4 keeps theta + 1.9 * m below pi/2
        let x = vec![0.4f64.cos(), 0.4f64.sin()];
        let mut prev = f64::NEG_INFINITY;
        for step in 1..20 {
            let d_c = step as f64 * 0.1;
            let l = fair_margin_loss(&x, 0, &head, mp, d_c).unwrap().loss;
            assert!(l > prev);
            prev = l;
        }
    }

    proptest! {
        #[test]
        fn permuting_non_targets_keeps_loss(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let (x, head) = random_instance(&mut rng, 4, 4);
            let mp = MarginParams::new(10.0, 0.3).unwrap();
            let base = arcface_loss(&x, 0, &head, mp).unwrap().loss;
            let mut cols: Vec<f64> = head.column(0).to_vec();
            for j in [3, 1, 2] {
                cols.extend_from_slice(head.column(j));
            }
            let permuted = ClassifierHead::from_raw(4, 4, cols).unwrap();
            let other = arcface_loss(&x, 0, &permuted, mp).unwrap().loss;
            prop_assert!((base - other).abs() < 1e-12);
        }
    }
}
