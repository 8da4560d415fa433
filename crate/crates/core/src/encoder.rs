//! Small feed-forward encoder producing unit-norm embeddings, with a manual
//! reverse pass.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::primitives::{dot, norm, FeatureVector, Rng, ZERO_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::ConfigInvalid(format!("unknown activation {other:?}"))),
        }
    }
}

/// Layer widths from input to embedding, plus one activation per hidden
/// layer. The last layer is linear and followed by L2 normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl EncoderSpec {
    /// Same activation on every hidden layer.
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        Self::with_activations(widths, vec![activation; hidden])
    }

    pub fn with_activations(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::ConfigInvalid("encoder needs at least one layer".into()));
        }
        if widths.contains(&0) {
            return Err(Error::ConfigInvalid("encoder widths must be >= 1".into()));
        }
        if activations.len() != widths.len() - 2 {
            return Err(Error::ConfigInvalid(format!(
                "{} activations for {} hidden layers",
                activations.len(),
                widths.len() - 2
            )));
        }
        Ok(Self { widths, activations })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Dense layer: `weight` is `out x in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    spec: EncoderSpec,
    layers: Vec<Layer>,
}

/// Gradients with the same shapes as [`EncoderParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Layer>,
}

impl EncoderGrads {
    pub fn zeros(spec: &EncoderSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Layer { weight: vec![0.0; w[0] * w[1]], bias: vec![0.0; w[1]] })
            .collect();
        Self { layers }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

/// Activations retained by [`EncoderParams::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    widths: Vec<usize>,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    raw_norm: f64,
    output: Vec<f64>,
}

impl Tape {
    pub fn embedding(&self) -> &[f64] {
        &self.output
    }
}

impl EncoderParams {
    /// Uniform `[-a, a]` weights with `a = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn init(spec: &EncoderSpec, rng: &mut Rng) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect(),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self { spec: spec.clone(), layers }
    }

    pub fn from_layers(spec: EncoderSpec, layers: Vec<Layer>) -> Result<Self> {
        if layers.len() != spec.layer_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} layers for a {}-layer spec",
                layers.len(),
                spec.layer_count()
            )));
        }
        for (l, (layer, w)) in layers.iter().zip(spec.widths.windows(2)).enumerate() {
            if layer.weight.len() != w[0] * w[1] || layer.bias.len() != w[1] {
                return Err(Error::ShapeMismatch(format!("layer {l} shape")));
            }
            if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("encoder parameters"));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward(&self, input: &[f64]) -> Result<(FeatureVector, Tape)> {
        let tape = self.forward_tape(input)?;
        let embedding = FeatureVector::new(tape.output.clone())?;
        Ok((crate::primitives::l2_normalize(&embedding)?, tape))
    }

    /// Normalized embedding only.
    pub fn embed(&self, input: &[f64]) -> Result<FeatureVector> {
        Ok(self.forward(input)?.0)
    }

    fn forward_tape(&self, input: &[f64]) -> Result<Tape> {
        if input.len() != self.spec.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim(),
                actual: input.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z: Vec<f64> = layer
                .weight
                .chunks(a.len())
                .zip(&layer.bias)
                .map(|(row, b)| dot(row, &a) + b)
                .collect();
            inputs.push(std::mem::take(&mut a));
            if l < last {
                let act = self.spec.activations[l];
                a = z.iter().map(|&v| act.apply(v)).collect();
                pre.push(z);
            } else {
                a = z;
            }
        }
        let raw_norm = norm(&a);
        if !raw_norm.is_finite() {
            return Err(Error::NonFinite("embedding"));
        }
        if raw_norm < ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        let output = a.iter().map(|v| v / raw_norm).collect();
        Ok(Tape { widths: self.spec.widths.clone(), inputs, pre, raw_norm, output })
    }

    /// Reverse pass for `upstream = dL/d(normalized embedding)`. Returns the
    /// parameter gradients and `dL/d(input)`.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(EncoderGrads, Vec<f64>)> {
        if tape.widths != self.spec.widths {
            return Err(Error::TapeMismatch);
        }
        if upstream.len() != self.spec.embedding_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.embedding_dim(),
                actual: upstream.len(),
            });
        }
        // through x / ||x||: (I - x_hat x_hat^T) g / ||x||
        let proj = dot(&tape.output, upstream);
        let mut grad: Vec<f64> = upstream
            .iter()
            .zip(&tape.output)
            .map(|(g, x)| (g - x * proj) / tape.raw_norm)
            .collect();

        let mut grads = EncoderGrads::zeros(&self.spec);
        for l in (0..self.layers.len()).rev() {
            if l < self.layers.len() - 1 {
                let act = self.spec.activations[l];
                let a_out = &tape.inputs[l + 1];
                for ((g, &z), &a) in grad.iter_mut().zip(&tape.pre[l]).zip(a_out) {
                    *g *= act.derivative(z, a);
                }
            }
            let a_in = &tape.inputs[l];
            let width_in = a_in.len();
            let layer = &self.layers[l];
            let out = &mut grads.layers[l];
            for (i, &g) in grad.iter().enumerate() {
                out.bias[i] = g;
                for (dw, a) in out.weight[i * width_in..(i + 1) * width_in].iter_mut().zip(a_in) {
                    *dw = g * a;
                }
            }
            let mut next = vec![0.0; width_in];
            for (i, &g) in grad.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(&layer.weight[i * width_in..(i + 1) * width_in]) {
                    *n += g * w;
                }
            }
            grad = next;
        }
        Ok((grads, grad))
    }
}
