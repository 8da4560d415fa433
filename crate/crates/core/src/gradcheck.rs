//! Finite-difference verification of every analytic gradient.
//!
//! The numeric side re-evaluates the loss and the encoder with an
//! independent double-double implementation, so the central difference at
//! step 1e-6 is not swamped by f64 rounding in the function values.

use std::fmt::Write as _;

use crate::dd::Dd;
use crate::encoder::{Activation, EncoderGrads, EncoderParams, EncoderSpec, Layer};
use crate::error::Result;
use crate::loss::{batch_loss, margin_loss, ClassifierHead, MarginParams, MAX_TARGET_ANGLE};
use crate::primitives::{FeatureVector, Rng, COS_EPS};

pub const FD_STEP: f64 = 1e-6;
/// Coordinates whose gradient magnitude is at or below this are not scored.
pub const MIN_GRAD: f64 = 1e-8;
/// Skip ReLU coordinates whose pre-activation lies this close to the kink.
const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub configs: usize,
    pub seed: u64,
    /// Tolerance for the loss and encoder sections.
    pub tolerance: f64,
    /// Tolerance for the encoder-plus-loss composition.
    pub end_to_end_tolerance: f64,
    pub scale_range: (f64, f64),
    pub margin_range: (f64, f64),
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            configs: 100,
            seed: 0,
            tolerance: 1e-5,
            end_to_end_tolerance: 1e-4,
            scale_range: (1.0, 16.0),
            margin_range: (0.0, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectionReport {
    pub name: &'static str,
    pub tolerance: f64,
    pub coordinates: usize,
    pub failures: usize,
    pub worst_relative_error: f64,
}

impl SectionReport {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self { name, tolerance, coordinates: 0, failures: 0, worst_relative_error: 0.0 }
    }

    fn compare(&mut self, analytic: &[f64], numeric: &[f64]) {
        for (&a, &n) in analytic.iter().zip(numeric) {
            if let Some(rel) = relative_error(a, n) {
                self.coordinates += 1;
                self.worst_relative_error = self.worst_relative_error.max(rel);
                if rel.is_nan() || rel >= self.tolerance {
                    self.failures += 1;
                }
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.coordinates > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub configs: usize,
    pub sections: Vec<SectionReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.sections.iter().all(SectionReport::passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "configurations {}", self.configs).unwrap();
        for s in &self.sections {
            writeln!(
                out,
                "{:<11} worst_rel {:.3e} tol {:.0e} coords {} failures {} {}",
                s.name,
                s.worst_relative_error,
                s.tolerance,
                s.coordinates,
                s.failures,
                if s.passed() { "PASS" } else { "FAIL" }
            )
            .unwrap();
        }
        writeln!(out, "result {}", if self.passed() { "PASS" } else { "FAIL" }).unwrap();
        out
    }
}

/// `|a - n| / max(|a|, |n|)`, or `None` when both are at most [`MIN_GRAD`].
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    if scale > MIN_GRAD {
        Some((analytic - numeric).abs() / scale)
    } else {
        None
    }
}

fn dd(v: f64) -> Dd {
    Dd::from(v)
}

fn dd_vec(v: &[f64]) -> Vec<Dd> {
    v.iter().copied().map(dd).collect()
}

/// Fourth-order central differences of `f` at `base` with step
/// [`FD_STEP`], evaluated in double-double.
pub(crate) fn central_diff(base: &[f64], f: impl Fn(&[Dd]) -> Dd) -> Vec<f64> {
    let mut point = dd_vec(base);
    let h = dd(FD_STEP);
    let mut at = |k: usize, offset: Dd| {
        point[k] = dd(base[k]) + offset;
        let v = f(&point);
        point[k] = dd(base[k]);
        v
    };
    (0..base.len())
        .map(|k| {
            let near = at(k, h) - at(k, -h);
            let far = at(k, h * 2.0) - at(k, h * -2.0);
            ((near * 8.0 - far) / (h * 12.0)).to_f64()
        })
        .collect()
}

fn dd_dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).fold(dd(0.0), |acc, (x, y)| acc + *x * *y)
}

fn dd_clamp(c: Dd, lo: f64, hi: f64) -> Dd {
    if c < dd(lo) {
        dd(lo)
    } else if c > dd(hi) {
        dd(hi)
    } else {
        c
    }
}

/// Reference margin loss on column-major head weights `w`.
pub(crate) fn ref_margin_loss(
    x: &[Dd],
    w: &[Dd],
    label: usize,
    scale: f64,
    effective_margin: f64,
) -> Dd {
    let dim = x.len();
    let classes = w.len() / dim;
    let (cos_m, sin_m) = (effective_margin.cos(), effective_margin.sin());
    let logits: Vec<Dd> = (0..classes)
        .map(|j| {
            let c = dd_clamp(dd_dot(&w[j * dim..(j + 1) * dim], x), -1.0 + COS_EPS, 1.0 - COS_EPS);
            if j == label && effective_margin > 0.0 {
                let c = dd_clamp(c, MAX_TARGET_ANGLE.cos(), 1.0);
                let sin_theta = (dd(1.0) - c * c).sqrt();
                (c * cos_m - sin_theta * sin_m) * scale
            } else {
                c * scale
            }
        })
        .collect();
    let target = logits[label];
    let others = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .fold(dd(0.0), |acc, (_, z)| acc + (*z - target).exp());
    others.ln_1p()
}

/// Encoder parameters flattened as weight then bias, layer by layer.
pub(crate) fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect()
}

/// Reference normalized embedding from flattened parameters.
pub(crate) fn ref_embed(spec: &EncoderSpec, params: &[Dd], input: &[Dd]) -> Vec<Dd> {
    let widths = spec.widths();
    let mut a = input.to_vec();
    let mut offset = 0;
    for l in 0..spec.layer_count() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let weight = &params[offset..offset + n_in * n_out];
        let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let mut z: Vec<Dd> =
            (0..n_out).map(|o| dd_dot(&weight[o * n_in..(o + 1) * n_in], &a) + bias[o]).collect();
        if l + 1 < spec.layer_count() {
            let act = spec.activations()[l];
            for v in &mut z {
                *v = match act {
                    Activation::Tanh => v.tanh(),
                    Activation::Relu => {
                        if *v > dd(0.0) {
                            *v
                        } else {
                            dd(0.0)
                        }
                    }
                };
            }
        }
        a = z;
    }
    let n = dd_dot(&a, &a).sqrt();
    a.iter().map(|v| *v / n).collect()
}

/// True when any ReLU pre-activation is within [`KINK_MARGIN`] of zero.
fn near_kink(encoder: &EncoderParams, input: &[f64]) -> bool {
    let spec = encoder.spec();
    let mut a = input.to_vec();
    for (l, layer) in encoder.layers().iter().enumerate() {
        let n_in = a.len();
        let z: Vec<f64> = layer
            .bias
            .iter()
            .enumerate()
            .map(|(o, b)| layer.weight[o * n_in..(o + 1) * n_in].iter().zip(&a).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect();
        if l + 1 == spec.layer_count() {
            break;
        }
        let act = spec.activations()[l];
        if act == Activation::Relu && z.iter().any(|v| v.abs() < KINK_MARGIN) {
            return true;
        }
        a = z.iter().map(|&v| if act == Activation::Relu { v.max(0.0) } else { v.tanh() }).collect();
    }
    false
}

struct Instance {
    encoder: EncoderParams,
    head: ClassifierHead,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    margin: MarginParams,
    coeff: Vec<f64>,
}

fn random_instance(rng: &mut Rng, cfg: &GradCheckConfig) -> Result<Instance> {
    let input_dim = 1 + rng.index(8);
    let embedding_dim = 2 + rng.index(7);
    let hidden: Vec<usize> = (0..rng.index(3)).map(|_| 1 + rng.index(8)).collect();
    let mut widths = vec![input_dim];
    widths.extend(&hidden);
    widths.push(embedding_dim);
    let activations =
        hidden.iter().map(|_| if rng.uniform() < 0.25 { Activation::Relu } else { Activation::Tanh }).collect();
    let spec = EncoderSpec::with_activations(widths, activations)?;
    let mut encoder = EncoderParams::init(&spec, rng);
    for layer in encoder.layers_mut() {
        layer.bias.iter_mut().for_each(|b| *b = rng.uniform_range(-0.5, 0.5));
    }
    let classes = 1 + rng.index(6);
    let head = ClassifierHead::random(embedding_dim, classes, rng)?;
    let batch = 1 + rng.index(4);
    let inputs = (0..batch).map(|_| (0..input_dim).map(|_| rng.normal()).collect()).collect();
    let labels = (0..batch).map(|_| rng.index(classes)).collect();
    let margin = MarginParams::new(
        rng.uniform_range(cfg.scale_range.0, cfg.scale_range.1),
        rng.uniform_range(cfg.margin_range.0, cfg.margin_range.1),
    )?;
    let coeff = (0..classes).map(|_| rng.uniform_range(0.2, 1.8)).collect();
    Ok(Instance { encoder, head, inputs, labels, margin, coeff })
}

fn perturb(values: &mut [f64], corrupt: bool) {
    if corrupt {
        values.iter_mut().for_each(|v| *v *= 1.0 + 1e-3);
    }
}

/// Runs the loss, encoder and end-to-end sections over `cfg.configs`
/// random configurations. `corrupt` scales every analytic gradient by
/// `1 + 1e-3` so the harness can be shown to fail.
pub fn run(cfg: &GradCheckConfig, corrupt: bool) -> Result<GradCheckReport> {
    let mut loss_section = SectionReport::new("loss", cfg.tolerance);
    let mut encoder_section = SectionReport::new("encoder", cfg.tolerance);
    let mut e2e_section = SectionReport::new("end-to-end", cfg.end_to_end_tolerance);
    let root = Rng::new(cfg.seed);

    for i in 0..cfg.configs {
        let mut rng = root.split(i as u64);
        let inst = random_instance(&mut rng, cfg)?;
        let dim = inst.head.dim();
        let (s, m) = (inst.margin.scale, inst.margin.margin);

        // loss section: softmax, ArcFace and per-class margin on unit x
        for (&label, input) in inst.labels.iter().zip(&inst.inputs) {
            let x = inst.encoder.embed(input)?.into_values();
            for margin in [0.0, m, inst.coeff[label] * m] {
                let g = margin_loss(&x, label, &inst.head, s, margin)?;
                let mut analytic = g.d_embedding.clone();
                analytic.extend(&g.d_weights);
                perturb(&mut analytic, corrupt);
                let mut base = x.clone();
                base.extend(inst.head.weights());
                let numeric = central_diff(&base, |p| ref_margin_loss(&p[..dim], &p[dim..], label, s, margin));
                loss_section.compare(&analytic, &numeric);
            }
        }

        let spec = inst.encoder.spec().clone();
        if inst.inputs.iter().any(|x| near_kink(&inst.encoder, x)) {
            continue;
        }
        let params = flatten_layers(inst.encoder.layers());

        // encoder section: u . embed(input) over parameters and input
        let input = &inst.inputs[0];
        let u: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let (_, tape) = inst.encoder.forward(input)?;
        let (grads, d_input) = inst.encoder.backward(&tape, &u)?;
        let mut analytic = flatten_layers(&grads.layers);
        analytic.extend(&d_input);
        perturb(&mut analytic, corrupt);
        let mut base = params.clone();
        base.extend(input);
        let u_dd = dd_vec(&u);
        let numeric = central_diff(&base, |p| {
            dd_dot(&u_dd, &ref_embed(&spec, &p[..params.len()], &p[params.len()..]))
        });
        encoder_section.compare(&analytic, &numeric);

        // end-to-end: mean batch loss through the encoder, rotating loss kinds
        let (margin, coeff) = match i % 3 {
            0 => (MarginParams { margin: 0.0, ..inst.margin }, vec![1.0; inst.coeff.len()]),
            1 => (inst.margin, vec![1.0; inst.coeff.len()]),
            _ => (inst.margin, inst.coeff.clone()),
        };
        let forward: Vec<(FeatureVector, _)> =
            inst.inputs.iter().map(|x| inst.encoder.forward(x)).collect::<Result<_>>()?;
        let xs: Vec<&[f64]> = forward.iter().map(|(e, _)| e.values()).collect();
        let out = batch_loss(&xs, &inst.labels, &inst.head, margin, &coeff)?;
        let mut enc_grads = EncoderGrads::zeros(&spec);
        for ((_, tape), g) in forward.iter().zip(&out.d_embeddings) {
            enc_grads.add_assign(&inst.encoder.backward(tape, g)?.0);
        }
        let mut analytic = flatten_layers(&enc_grads.layers);
        analytic.extend(&out.d_weights);
        perturb(&mut analytic, corrupt);
        let mut base = params.clone();
        base.extend(inst.head.weights());
        let inputs_dd: Vec<Vec<Dd>> = inst.inputs.iter().map(|x| dd_vec(x)).collect();
        let n = inst.inputs.len() as f64;
        let numeric = central_diff(&base, |p| {
            let (enc, w) = p.split_at(params.len());
            inputs_dd.iter().zip(&inst.labels).fold(dd(0.0), |acc, (x, &label)| {
                let e = ref_embed(&spec, enc, x);
                acc + ref_margin_loss(&e, w, label, margin.scale, coeff[label] * margin.margin)
            }) / n
        });
        e2e_section.compare(&analytic, &numeric);
    }
    Ok(GradCheckReport { configs: cfg.configs, sections: vec![loss_section, encoder_section, e2e_section] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run(&GradCheckConfig::default(), false).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        assert!(report.sections.iter().all(|s| s.coordinates > 1000), "{}", report.to_text());
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = GradCheckConfig { configs: 5, ..GradCheckConfig::default() };
        let report = run(&cfg, true).unwrap();
        assert!(!report.passed());
        assert!(report.sections.iter().all(|s| s.failures > 0));
    }

    #[test]
    fn report_names_sections() {
        let cfg = GradCheckConfig { configs: 2, ..GradCheckConfig::default() };
        let text = run(&cfg, false).unwrap().to_text();
        for name in ["loss", "encoder", "end-to-end", "result"] {
            assert!(text.lines().any(|l| l.starts_with(name)), "{text}");
        }
    }

    #[test]
    fn relative_error_threshold() {
        assert_eq!(relative_error(1e-9, 0.0), None);
        assert_eq!(relative_error(2.0, 1.0), Some(0.5));
    }

    #[test]
    fn reference_matches_library_loss() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let inst = random_instance(&mut rng, &GradCheckConfig::default()).unwrap();
            let x = inst.encoder.embed(&inst.inputs[0]).unwrap().into_values();
            let e = ref_embed(inst.encoder.spec(), &dd_vec(&flatten_layers(inst.encoder.layers())), &dd_vec(&inst.inputs[0]));
            for (a, b) in x.iter().zip(&e) {
                assert!((a - b.to_f64()).abs() < 1e-12, "{a} {b:?} {:?}", inst.encoder.spec());
            }
            let label = inst.labels[0];
            let m = inst.margin.margin;
            let lib = margin_loss(&x, label, &inst.head, inst.margin.scale, m).unwrap().loss;
            let reference = ref_margin_loss(&dd_vec(&x), &dd_vec(inst.head.weights()), label, inst.margin.scale, m).to_f64();
            assert!((lib - reference).abs() <= 1e-12 * (1.0 + lib.abs()), "{lib} {reference}");
        }
    }
}
