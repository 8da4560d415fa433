//! Class favoritism levels and the margin coefficients derived from them.
//!
//! At the end of every epoch the model's softmax confidence in each sample's
//! own class is averaged per class. A class whose mean confidence sits above
//! the unweighted mean over classes is favored (`f_c > 0`), one below it is
//! neglected (`f_c < 0`). The margin coefficient `d_c` is a two-sided
//! logistic of `f_c` that enlarges the margin of neglected classes and
//! shrinks it for favored ones; it is used unchanged throughout the next
//! epoch.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::primitives::ProbVector;

/// Slope `gamma` of the margin coefficient and harmony `h` damping the
/// favored side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairnessParams {
    pub gamma: f64,
    pub harmony: f64,
}

impl Default for FairnessParams {
    fn default() -> Self {
        Self { gamma: 10.0, harmony: 1.0 }
    }
}

impl FairnessParams {
    pub fn new(gamma: f64, harmony: f64) -> Result<Self> {
        let p = Self { gamma, harmony };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.harmony) {
            return Err(Error::InvalidParameter(format!(
                "harmony must lie in [0, 1], got {}",
                self.harmony
            )));
        }
        Ok(())
    }
}

/// `2 / (1 + exp(gamma * f))` for `f < 0`, `2 / (1 + exp(gamma * h * f))`
/// otherwise.
pub fn margin_coefficient(favoritism: f64, params: FairnessParams) -> f64 {
    let slope = if favoritism < 0.0 { params.gamma } else { params.gamma * params.harmony };
    2.0 / (1.0 + (slope * favoritism).exp())
}

/// Running per-class sums of own-class confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceAccumulator {
    sum_conf: Vec<f64>,
    count: Vec<u64>,
}

impl ConfidenceAccumulator {
    pub fn new(classes: usize) -> Self {
        Self { sum_conf: vec![0.0; classes], count: vec![0; classes] }
    }

    pub fn classes(&self) -> usize {
        self.count.len()
    }

    pub fn sums(&self) -> &[f64] {
        &self.sum_conf
    }

    pub fn counts(&self) -> &[u64] {
        &self.count
    }

    pub fn accumulate(&mut self, label: usize, probs: &ProbVector) -> Result<()> {
        if probs.len() != self.classes() {
            return Err(Error::DimensionMismatch { expected: self.classes(), actual: probs.len() });
        }
        if label >= self.classes() {
            return Err(Error::LabelOutOfRange { label, classes: self.classes() });
        }
        self.sum_conf[label] += probs.values()[label];
        self.count[label] += 1;
        Ok(())
    }

    /// Adds `other` into `self`. Callers merging worker partials should do
    /// so in a fixed order.
    pub fn merge(&mut self, other: &ConfidenceAccumulator) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::DimensionMismatch {
                expected: self.classes(),
                actual: other.classes(),
            });
        }
        for c in 0..self.classes() {
            self.sum_conf[c] += other.sum_conf[c];
            self.count[c] += other.count[c];
        }
        Ok(())
    }

    /// Mean confidences, grand mean and favoritism levels. Margin
    /// coefficients are left at 1 and the epoch at 0.
    pub fn finalize(&self) -> Result<FavoritismState> {
        if let Some(c) = self.count.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(c));
        }
        let mean_conf: Vec<f64> = self
            .sum_conf
            .iter()
            .zip(&self.count)
            .map(|(s, &n)| (s / n as f64).clamp(0.0, 1.0))
            .collect();
        // offset by the minimum so equal confidences give exactly zero favoritism
        let low = mean_conf.iter().copied().fold(f64::INFINITY, f64::min);
        let grand_mean =
            low + mean_conf.iter().map(|p| p - low).sum::<f64>() / mean_conf.len() as f64;
        let favoritism = mean_conf.iter().map(|p| p - grand_mean).collect();
        Ok(FavoritismState {
            epoch: 0,
            grand_mean,
            margin_coeff: vec![1.0; mean_conf.len()],
            mean_conf,
            favoritism,
        })
    }
}

/// Per-class favoritism snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct FavoritismState {
    pub epoch: u64,
    pub mean_conf: Vec<f64>,
    pub grand_mean: f64,
    pub favoritism: Vec<f64>,
    pub margin_coeff: Vec<f64>,
}

const STATE_MAGIC: &str = "favoritism-state v1";
const STATE_COLUMNS: &str = "class,mean_conf,favoritism,margin_coeff";

impl FavoritismState {
    /// State before any confidence has been measured: every `d_c` is 1, so
    /// the first epoch trains with the unscaled margin.
    pub fn initial(classes: usize) -> Self {
        Self {
            epoch: 0,
            mean_conf: vec![0.0; classes],
            grand_mean: 0.0,
            favoritism: vec![0.0; classes],
            margin_coeff: vec![1.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.margin_coeff.len()
    }

    /// Finalizes `acc`, maps every favoritism level through
    /// [`margin_coefficient`] and advances the epoch counter.
    pub fn update(&self, acc: &ConfidenceAccumulator, params: FairnessParams) -> Result<Self> {
        params.validate()?;
        if acc.classes() != self.classes() {
            return Err(Error::DimensionMismatch { expected: self.classes(), actual: acc.classes() });
        }
        let mut next = acc.finalize()?;
        next.margin_coeff = next.favoritism.iter().map(|&f| margin_coefficient(f, params)).collect();
        next.epoch = self.epoch + 1;
        Ok(next)
    }

    /// Checks the range and centering invariants. Returns a description of
    /// the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let sum: f64 = self.favoritism.iter().sum();
        if sum.abs() > 1e-9 {
            return Err(format!("favoritism sums to {sum}"));
        }
        for c in 0..self.classes() {
            let (p, f, d) = (self.mean_conf[c], self.favoritism[c], self.margin_coeff[c]);
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("mean_conf[{c}] = {p}"));
            }
            if !(-1.0..=1.0).contains(&f) {
                return Err(format!("favoritism[{c}] = {f}"));
            }
            if !(d > 0.0 && d < 2.0) {
                return Err(format!("margin_coeff[{c}] = {d}"));
            }
        }
        for i in 0..self.classes() {
            for j in 0..self.classes() {
                if self.favoritism[i] < self.favoritism[j]
                    && self.margin_coeff[i] < self.margin_coeff[j]
                {
                    return Err(format!("margin_coeff order broken between classes {i} and {j}"));
                }
            }
        }
        Ok(())
    }

    /// Versioned text table, one row per class.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{STATE_MAGIC}").unwrap();
        writeln!(out, "epoch {}", self.epoch).unwrap();
        writeln!(out, "grand_mean {:?}", self.grand_mean).unwrap();
        writeln!(out, "{STATE_COLUMNS}").unwrap();
        for c in 0..self.classes() {
            writeln!(
                out,
                "{c},{:?},{:?},{:?}",
                self.mean_conf[c], self.favoritism[c], self.margin_coeff[c]
            )
            .unwrap();
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let state = parse_state(&mut lines)?.ok_or(Error::Parse {
            line: 1,
            message: "empty favoritism table".into(),
        })?;
        if let Some((line, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::Parse { line, message: format!("trailing content {extra:?}") });
        }
        Ok(state)
    }
}

/// Concatenation of per-epoch tables.
pub fn history_to_text(history: &[FavoritismState]) -> String {
    history.iter().map(FavoritismState::to_text).collect()
}

pub fn history_from_text(text: &str) -> Result<Vec<FavoritismState>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
    let mut out = Vec::new();
    while let Some(state) = parse_state(&mut lines)? {
        out.push(state);
    }
    Ok(out)
}

fn parse_state<'a>(
    lines: &mut impl Iterator<Item = (u64, &'a str)>,
) -> Result<Option<FavoritismState>> {
    let bad = |line: u64, message: String| Error::Parse { line, message };
    let Some((line, magic)) = lines.find(|(_, l)| !l.trim().is_empty()) else {
        return Ok(None);
    };
    if magic != STATE_MAGIC {
        return Err(bad(line, format!("expected {STATE_MAGIC:?}, found {magic:?}")));
    }
    let mut field = |key: &str| -> Result<(u64, String)> {
        let (line, text) = lines.next().ok_or_else(|| bad(0, format!("missing {key}")))?;
        let value = text
            .strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .ok_or_else(|| bad(line, format!("expected {key:?}")))?;
        Ok((line, value.to_string()))
    };
    let (line, epoch) = field("epoch")?;
    let epoch = epoch.parse().map_err(|e| bad(line, format!("epoch: {e}")))?;
    let (line, grand) = field("grand_mean")?;
    let grand_mean = parse_f64(&grand).map_err(|m| bad(line, m))?;
    match lines.next() {
        Some((_, STATE_COLUMNS)) => {}
        Some((line, other)) => return Err(bad(line, format!("unexpected header {other:?}"))),
        None => return Err(bad(0, "missing column header".into())),
    }
    let mut state = FavoritismState {
        epoch,
        mean_conf: Vec::new(),
        grand_mean,
        favoritism: Vec::new(),
        margin_coeff: Vec::new(),
    };
    loop {
        let (line, row) = lines.next().ok_or_else(|| bad(0, "missing end marker".into()))?;
        if row == "end" {
            return Ok(Some(state));
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(line, format!("expected 4 fields, found {}", fields.len())));
        }
        let class: usize = fields[0].parse().map_err(|e| bad(line, format!("class: {e}")))?;
        if class != state.mean_conf.len() {
            return Err(bad(line, format!("class ids must be consecutive, found {class}")));
        }
        state.mean_conf.push(parse_f64(fields[1]).map_err(|m| bad(line, m))?);
        state.favoritism.push(parse_f64(fields[2]).map_err(|m| bad(line, m))?);
        state.margin_coeff.push(parse_f64(fields[3]).map_err(|m| bad(line, m))?);
    }
}

pub(crate) fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite value {s:?}"))
    }
}
