//! Versioned text checkpoint: encoder spec and parameters, classifier head
//! and the latest favoritism state. Floats use shortest round-trip
//! formatting, so save, load and save again reproduces the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::{Activation, EncoderParams, EncoderSpec, Layer};
use crate::error::{Error, Result};
use crate::favoritism::{parse_f64, FavoritismState};
use crate::loss::ClassifierHead;
use crate::trainer::Model;

const MAGIC: &str = "fairmargin-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub state: FavoritismState,
}

fn join_floats(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v:?}").unwrap();
    }
    out
}

fn join_display<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let spec = self.model.encoder.spec();
        let head = &self.model.head;
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "encoder.widths {}", join_display(spec.widths())).unwrap();
        writeln!(out, "encoder.activations {}", join_display(spec.activations())).unwrap();
        for (l, layer) in self.model.encoder.layers().iter().enumerate() {
            writeln!(out, "layer{l}.weight {}", join_floats(&layer.weight)).unwrap();
            writeln!(out, "layer{l}.bias {}", join_floats(&layer.bias)).unwrap();
        }
        writeln!(out, "head.shape {} {}", head.dim(), head.classes()).unwrap();
        writeln!(out, "head.weights {}", join_floats(head.weights())).unwrap();
        out.push_str(&self.state.to_text());
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let bad = |line: u64, message: String| Error::Parse { line, message };
        let mut next = |key: &str| -> Result<(u64, String)> {
            let (line, raw) = lines.next().ok_or_else(|| bad(0, format!("missing {key}")))?;
            if key.is_empty() {
                return Ok((line, raw.to_string()));
            }
            let value = raw
                .strip_prefix(key)
                .and_then(|v| v.strip_prefix(' ').or(if v.is_empty() { Some("") } else { None }))
                .ok_or_else(|| bad(line, format!("expected {key:?}, found {raw:?}")))?;
            Ok((line, value.to_string()))
        };
        let floats = |line: u64, s: &str| -> Result<Vec<f64>> {
            s.split_whitespace().map(|t| parse_f64(t).map_err(|m| bad(line, m))).collect()
        };

        let (line, magic) = next("")?;
        if magic != MAGIC {
            return Err(bad(line, format!("expected {MAGIC:?}, found {magic:?}")));
        }
        let (line, widths) = next("encoder.widths")?;
        let widths = widths
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| bad(line, format!("width {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let (line, acts) = next("encoder.activations")?;
        let acts = acts
            .split_whitespace()
            .map(|t| t.parse::<Activation>().map_err(|e| bad(line, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let spec = EncoderSpec::with_activations(widths, acts).map_err(|e| bad(line, e.to_string()))?;

        let mut layers = Vec::new();
        for l in 0..spec.layer_count() {
            let (line, w) = next(&format!("layer{l}.weight"))?;
            let weight = floats(line, &w)?;
            let (line, b) = next(&format!("layer{l}.bias"))?;
            let bias = floats(line, &b)?;
            layers.push(Layer { weight, bias });
        }
        let encoder = EncoderParams::from_layers(spec, layers).map_err(|e| bad(line, e.to_string()))?;

        let (line, shape) = next("head.shape")?;
        let dims = shape
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| bad(line, format!("head shape {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let [dim, classes] = dims[..] else {
            return Err(bad(line, "head.shape needs two values".into()));
        };
        let (line, w) = next("head.weights")?;
        let head = ClassifierHead::from_raw(dim, classes, floats(line, &w)?)
            .map_err(|e| bad(line, e.to_string()))?;
        if dim != encoder.spec().embedding_dim() {
            return Err(bad(line, format!("head dim {dim} does not match embedding dim")));
        }

        let rest: String = lines.map(|(_, l)| format!("{l}\n")).collect();
        let state = FavoritismState::from_text(&rest).map_err(|e| match e {
            Error::Parse { line: l, message } => Error::Parse { line: l + line, message },
            other => other,
        })?;
        if state.classes() != classes {
            return Err(Error::SchemaMismatch(format!(
                "favoritism state has {} classes, head has {classes}",
                state.classes()
            )));
        }
        Ok(Self { model: Model { encoder, head }, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::Rng;
    use crate::trainer::TrainConfig;

    fn sample(seed: u64) -> Checkpoint {
        let cfg = TrainConfig { hidden: vec![5, 3], embedding_dim: 4, seed, ..TrainConfig::default() };
        let model = Model::init(&cfg, 6, 3).unwrap();
        let mut rng = Rng::new(seed);
        let mut state = FavoritismState::initial(3);
        state.epoch = 7;
        state.mean_conf = (0..3).map(|_| rng.uniform()).collect();
        state.grand_mean = state.mean_conf.iter().sum::<f64>() / 3.0;
        state.favoritism = state.mean_conf.iter().map(|m| m - state.grand_mean).collect();
        Checkpoint { model, state }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for seed in 0..5 {
            let ck = sample(seed);
            let text = ck.to_text();
            let back = Checkpoint::from_text(&text).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.txt");
        let ck = sample(3);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let text = sample(1).to_text();
        assert!(matches!(Checkpoint::from_text("nope\n"), Err(Error::Parse { line: 1, .. })));
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Checkpoint::from_text(&truncated), Err(Error::Parse { .. })));
        let broken = text.replacen("layer0.bias 0.0", "layer0.bias x", 1);
        assert!(matches!(Checkpoint::from_text(&broken), Err(Error::Parse { line: 5, .. })));
    }
}
