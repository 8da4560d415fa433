//! Epoch loop: mini-batch SGD on the per-class margin loss, with the margin
//! coefficients refreshed from measured class favoritism after every epoch.
//!
//! Epoch `e` trains with the coefficients computed at the end of epoch
//! `e - 1`; the first epoch uses `d_c = 1` everywhere.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{class_count, split, LabeledSample};
use crate::encoder::{Activation, EncoderGrads, EncoderParams, EncoderSpec};
use crate::error::{Error, Result};
use crate::favoritism::{ConfidenceAccumulator, FairnessParams, FavoritismState};
use crate::loss::{batch_loss, ClassifierHead, MarginParams};
use crate::primitives::{softmax, Rng};

const ENCODER_INIT_STREAM: u64 = 10;
const HEAD_INIT_STREAM: u64 = 11;
const SHUFFLE_STREAM: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Normalized softmax: no margin and no favoritism.
    Softmax,
    /// Fixed additive angular margin.
    ArcFace,
    /// Margin scaled per class by the favoritism-driven coefficient.
    #[default]
    Fair,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Softmax => "softmax",
            LossKind::ArcFace => "arcface",
            LossKind::Fair => "fair",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(LossKind::Softmax),
            "arcface" => Ok(LossKind::ArcFace),
            "fair" => Ok(LossKind::Fair),
            other => Err(Error::ConfigInvalid(format!("unknown loss {other:?}"))),
        }
    }
}

/// Which split the end-of-epoch confidences are measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FavoritismSource {
    Train,
    #[default]
    Val,
}

impl fmt::Display for FavoritismSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FavoritismSource::Train => "train",
            FavoritismSource::Val => "val",
        })
    }
}

impl FromStr for FavoritismSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(FavoritismSource::Train),
            "val" => Ok(FavoritismSource::Val),
            other => Err(Error::ConfigInvalid(format!("unknown favoritism source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub loss: LossKind,
    pub margin: MarginParams,
    pub fairness: FairnessParams,
    pub favoritism_source: FavoritismSource,
    pub split_ratio: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation accuracy gain;
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    /// Hidden layer widths between the input and the embedding.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 30,
            lr_start: 1e-1,
            lr_end: 1e-4,
            weight_decay: 5e-5,
            momentum: 0.9,
            loss: LossKind::Fair,
            margin: MarginParams::default(),
            fairness: FairnessParams::default(),
            favoritism_source: FavoritismSource::Val,
            split_ratio: 0.9,
            seed: 0,
            early_stop_patience: 5,
            hidden: vec![64],
            embedding_dim: 32,
            activation: Activation::Tanh,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio must lie in (0, 1)");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad("learning rates must satisfy lr_start >= lr_end > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be >= 1");
        }
        self.margin.validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        self.fairness.validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        if self.margin.margin * 2.0 >= std::f64::consts::FRAC_PI_2 && self.effective_fairness().gamma > 0.0 {
            return bad("margin must stay below pi/4 so that d_c * m < pi/2 for d_c < 2");
        }
        Ok(())
    }

    /// Margin after applying the loss kind (zero for plain softmax).
    pub fn effective_margin(&self) -> MarginParams {
        match self.loss {
            LossKind::Softmax => MarginParams { margin: 0.0, ..self.margin },
            _ => self.margin,
        }
    }

    /// Fairness parameters after applying the loss kind: only the fair loss
    /// keeps a non-zero gamma.
    pub fn effective_fairness(&self) -> FairnessParams {
        match self.loss {
            LossKind::Fair => self.fairness,
            _ => FairnessParams { gamma: 0.0, ..self.fairness },
        }
    }

    pub fn encoder_spec(&self, input_dim: usize) -> Result<EncoderSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden);
        widths.push(self.embedding_dim);
        EncoderSpec::new(widths, self.activation)
    }
}

/// Linear interpolation from `lr_start` at step 0 to `lr_end` at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    cfg.lr_start * (1.0 - t) + cfg.lr_end * t
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
}

impl Model {
    pub fn init(cfg: &TrainConfig, input_dim: usize, classes: usize) -> Result<Self> {
        let root = Rng::new(cfg.seed);
        let spec = cfg.encoder_spec(input_dim)?;
        let encoder = EncoderParams::init(&spec, &mut root.split(ENCODER_INIT_STREAM));
        let head = ClassifierHead::random(cfg.embedding_dim, classes, &mut root.split(HEAD_INIT_STREAM))?;
        Ok(Self { encoder, head })
    }

    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        let e = self.encoder.embed(input)?;
        Ok(softmax(&self.head.logits(e.values(), 1.0)?).argmax())
    }
}

/// Momentum buffers for every trainable tensor.
#[derive(Debug, Clone)]
pub struct Sgd {
    encoder: EncoderGrads,
    head: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            encoder: EncoderGrads::zeros(model.encoder.spec()),
            head: vec![0.0; model.head.weights().len()],
            momentum,
            weight_decay,
        }
    }

    /// One update of every parameter. Biases are not decayed. Head columns
    /// are renormalized afterwards.
    pub fn step(
        &mut self,
        model: &mut Model,
        encoder_grads: &EncoderGrads,
        head_grads: &[f64],
        lr: f64,
    ) -> Result<()> {
        let layers = model.encoder.layers_mut();
        if layers.len() != encoder_grads.layers.len() {
            return Err(Error::ShapeMismatch("encoder gradient layers".into()));
        }
        for ((layer, grad), vel) in layers.iter_mut().zip(&encoder_grads.layers).zip(&mut self.encoder.layers) {
            sgd_step(&mut layer.weight, &grad.weight, &mut vel.weight, lr, self.momentum, self.weight_decay)?;
            sgd_step(&mut layer.bias, &grad.bias, &mut vel.bias, lr, self.momentum, 0.0)?;
        }
        sgd_step(model.head.weights_mut(), head_grads, &mut self.head, lr, self.momentum, self.weight_decay)?;
        model.head.renormalize()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_accuracy: f64,
    /// Statistics of the coefficients computed at the end of this epoch.
    pub d_min: f64,
    pub d_max: f64,
    pub d_mean: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub wall_time: f64,
}

pub const LOG_HEADER: &str = "epoch,mean_train_loss,val_accuracy,d_min,d_max,d_mean,f_min,f_max,wall_time";

impl TrainLogRecord {
    /// CSV row in [`LOG_HEADER`] order. Wall time is written as 0 unless
    /// requested, keeping logs reproducible byte for byte.
    pub fn to_csv_row(&self, include_wall_time: bool) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.epoch,
            self.mean_train_loss,
            self.val_accuracy,
            self.d_min,
            self.d_max,
            self.d_mean,
            self.f_min,
            self.f_max,
            if include_wall_time { self.wall_time } else { 0.0 }
        )
    }
}

pub fn log_to_csv(log: &[TrainLogRecord], include_wall_time: bool) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&r.to_csv_row(include_wall_time));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    /// Favoritism state per epoch, starting with the epoch-0 state.
    pub history: Vec<FavoritismState>,
    pub log: Vec<TrainLogRecord>,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
}

impl TrainOutput {
    pub fn state(&self) -> &FavoritismState {
        self.history.last().expect("history holds the epoch-0 state")
    }
}

/// Top-1 accuracy of the cosine classifier.
pub fn accuracy(model: &Model, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| model.predict(s.input.values()).map(|p| p == s.class_id))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

/// Own-class softmax confidence of the margin-free logits, summed per class.
pub fn measure_confidence(
    model: &Model,
    samples: &[LabeledSample],
    scale: f64,
) -> Result<ConfidenceAccumulator> {
    let probs: Vec<_> = samples
        .par_iter()
        .map(|s| {
            let e = model.encoder.embed(s.input.values())?;
            Ok(softmax(&model.head.logits(e.values(), scale)?))
        })
        .collect::<Result<_>>()?;
    let mut acc = ConfidenceAccumulator::new(model.head.classes());
    for (s, p) in samples.iter().zip(&probs) {
        acc.accumulate(s.class_id, p)?;
    }
    Ok(acc)
}

/// Trains on `dataset` with a stratified train/validation split.
pub fn train(dataset: &[LabeledSample], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(dataset, cfg, |_, _, _| Ok(()))
}

/// Like [`train`], calling `on_epoch` after every completed epoch.
pub fn train_with(
    dataset: &[LabeledSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &FavoritismState, &TrainLogRecord) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let Some(first) = dataset.first() else {
        return Err(Error::EmptyClass(0));
    };
    let classes = class_count(dataset);
    let (train, val) = split(dataset, cfg.split_ratio, cfg.seed)?;
    for (name, part) in [("train", &train), ("val", &val)] {
        let mut seen = vec![false; classes];
        part.iter().for_each(|s| seen[s.class_id] = true);
        if let Some(c) = seen.iter().position(|&s| !s) {
            let _ = name;
            return Err(Error::EmptyClass(c));
        }
    }

    let mut model = Model::init(cfg, first.input.dim(), classes)?;
    let mut sgd = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut shuffle_rng = Rng::new(cfg.seed).split(SHUFFLE_STREAM);
    let margin = cfg.effective_margin();
    let fairness = cfg.effective_fairness();

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut history = vec![FavoritismState::initial(classes)];
    let mut log = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let coeff = history.last().unwrap().margin_coeff.clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at(step, total_steps, cfg);
            let forward: Vec<_> = batch
                .par_iter()
                .map(|&i| model.encoder.forward(train[i].input.values()))
                .collect::<Result<_>>()?;
            let embeddings: Vec<&[f64]> = forward.iter().map(|(e, _)| e.values()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].class_id).collect();
            let out = batch_loss(&embeddings, &labels, &model.head, margin, &coeff)?;

            let per_sample: Vec<EncoderGrads> = forward
                .par_iter()
                .zip(out.d_embeddings.par_iter())
                .map(|((_, tape), g)| model.encoder.backward(tape, g).map(|(grads, _)| grads))
                .collect::<Result<_>>()?;
            let mut encoder_grads = EncoderGrads::zeros(model.encoder.spec());
            for g in &per_sample {
                encoder_grads.add_assign(g);
            }
            sgd.step(&mut model, &encoder_grads, &out.d_weights, lr)?;
            loss_sum += out.loss * batch.len() as f64;
            step += 1;
        }

        let val_accuracy = accuracy(&model, &val)?;
        let source = match cfg.favoritism_source {
            FavoritismSource::Train => &train,
            FavoritismSource::Val => &val,
        };
        let acc = measure_confidence(&model, source, margin.scale)?;
        let state = history.last().unwrap().update(&acc, fairness)?;

        let d = &state.margin_coeff;
        let f = &state.favoritism;
        let record = TrainLogRecord {
            epoch,
            mean_train_loss: loss_sum / train.len() as f64,
            val_accuracy,
            d_min: d.iter().copied().fold(f64::INFINITY, f64::min),
            d_max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            d_mean: d.iter().sum::<f64>() / d.len() as f64,
            f_min: f.iter().copied().fold(f64::INFINITY, f64::min),
            f_max: f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            wall_time: started.elapsed().as_secs_f64(),
        };
        on_epoch(&model, &state, &record)?;
        history.push(state);
        log.push(record);

        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            stale = 0;
        } else {
            stale += 1;
            if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutput { model, history, log, train, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GroupSpec, SyntheticSpec};

    fn toy(seed: u64) -> Vec<LabeledSample> {
        generate(&SyntheticSpec {
            groups: vec![GroupSpec {
                name: "a".into(),
                class_count: 2,
                noise_sigma: 0.05,
                samples_per_class: 20,
            }],
            input_dim: 4,
            prototype_separation: 2.0,
            seed,
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 30,
            hidden: vec![8],
            embedding_dim: 4,
            early_stop_patience: 0,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_vanilla_and_zero() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.5, 0.25], &mut v, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![0.5, -2.25]);

        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.3, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        assert!(matches!(
            sgd_step(&mut p, &[0.0], &mut v, 0.3, 0.9, 0.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn sgd_momentum_matches_unrolled_recurrence() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let (g1, g2) = (0.4, -0.7);
        let p0 = 2.0;
        let v1 = g1 + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;

        let mut p = vec![p0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[g1], &mut v, lr, mu, wd).unwrap();
        sgd_step(&mut p, &[g2], &mut v, lr, mu, wd).unwrap();
        assert!((p[0] - p2).abs() < 1e-12);
        assert!((v[0] - v2).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &cfg), 0.1);
        assert_eq!(lr_at(100, 100, &cfg), 1e-4);
        assert!((lr_at(50, 100, &cfg) - 0.05005).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = toy(1);
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let out = train(&data, &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.model, Model::init(&cfg, 4, 2).unwrap());
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let data = toy(5);
        let cfg = small_cfg();
        let out = train(&data, &cfg).unwrap();
        assert_eq!(accuracy(&out.model, &out.train).unwrap(), 1.0);
        assert!(out.log[1].mean_train_loss < out.log[0].mean_train_loss);
        assert!(out.model.head.max_norm_error() < 1e-9);
        for state in &out.history {
            state.check_invariants().unwrap();
        }
    }

    #[test]
    fn first_epoch_uses_unit_coefficients() {
        let data = toy(6);
        let cfg = TrainConfig { epochs: 2, ..small_cfg() };
        let out = train(&data, &cfg).unwrap();
        assert!(out.history[0].margin_coeff.iter().all(|&d| d == 1.0));
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.history[2].epoch, 2);
    }

    #[test]
    fn gamma_zero_matches_arcface() {
        let data = toy(7);
        let fair = TrainConfig {
            loss: LossKind::Fair,
            fairness: FairnessParams::new(0.0, 1.0).unwrap(),
            epochs: 5,
            ..small_cfg()
        };
        let arc = TrainConfig { loss: LossKind::ArcFace, epochs: 5, ..small_cfg() };
        let a = train(&data, &fair).unwrap();
        let b = train(&data, &arc).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(log_to_csv(&a.log, false), log_to_csv(&b.log, false));
    }

    #[test]
    fn deterministic_across_runs_and_threads() {
        let data = toy(8);
        let cfg = TrainConfig { epochs: 4, ..small_cfg() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train(&data, &cfg).unwrap())
        };
        let (a, b, c) = (run(1), run(1), run(3));
        assert_eq!(a.model, b.model);
        assert_eq!(a.model, c.model);
        assert_eq!(a.history, c.history);
        assert_eq!(log_to_csv(&a.log, false), log_to_csv(&c.log, false));
    }

    #[test]
    fn early_stopping_halts() {
        let data = toy(9);
        let cfg = TrainConfig { early_stop_patience: 2, ..small_cfg() };
        let out = train(&data, &cfg).unwrap();
        assert!(out.log.len() < 30);
    }

    #[test]
    fn config_validation() {
        let data = toy(1);
        for cfg in [
            TrainConfig { batch_size: 0, ..small_cfg() },
            TrainConfig { split_ratio: 1.0, ..small_cfg() },
            TrainConfig { lr_end: 0.5, ..small_cfg() },
        ] {
            assert!(matches!(train(&data, &cfg), Err(Error::ConfigInvalid(_))));
        }
    }
}
