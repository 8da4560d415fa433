//! Verification scoring and fairness metrics over groups of users.
//!
//! Pairs are scored by cosine similarity. Per group we report EER and AUC;
//! across groups, the population standard deviation, Gini index and skewed
//! error ratio of the per-group EERs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Attributes;
use crate::error::{Error, Result};
use crate::primitives::{cosine, FeatureVector, Rng};

/// Floor substituted for a zero minimum EER in the skewed error ratio.
pub const SER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct VerificationPair {
    pub id_a: String,
    pub id_b: String,
    pub genuine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredPair {
    pub pair: VerificationPair,
    pub score: f64,
}

impl ScoredPair {
    /// Bare score with a placeholder pair, for metric tests and fixtures.
    pub fn anonymous(score: f64, genuine: bool) -> Self {
        Self { pair: VerificationPair { id_a: String::new(), id_b: String::new(), genuine }, score }
    }
}

/// Draws genuine pairs within each class and impostor pairs across classes,
/// without replacement. A class with a single sample contributes no genuine
/// pairs.
pub fn make_pairs(
    ids: &[(String, usize)],
    per_class_genuine: usize,
    impostor_count: usize,
    rng: &mut Rng,
) -> Result<Vec<VerificationPair>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, class)) in ids.iter().enumerate() {
        by_class.entry(*class).or_default().push(i);
    }
    let pair = |a: usize, b: usize, genuine| VerificationPair {
        id_a: ids[a].0.clone(),
        id_b: ids[b].0.clone(),
        genuine,
    };

    let mut out = Vec::new();
    if per_class_genuine > 0 {
        if by_class.values().all(|m| m.len() < 2) {
            return Err(Error::NotEnoughSamples("no class has two samples".into()));
        }
        for members in by_class.values() {
            let mut candidates: Vec<(usize, usize)> = members
                .iter()
                .enumerate()
                .flat_map(|(k, &a)| members[k + 1..].iter().map(move |&b| (a, b)))
                .collect();
            rng.shuffle(&mut candidates);
            candidates.truncate(per_class_genuine);
            out.extend(candidates.into_iter().map(|(a, b)| pair(a, b, true)));
        }
    }

    if impostor_count > 0 {
        if by_class.len() < 2 {
            return Err(Error::NotEnoughSamples("impostor pairs need two classes".into()));
        }
        let n = ids.len();
        let same_class: usize = by_class.values().map(|m| m.len() * (m.len() - 1) / 2).sum();
        let total = n * (n - 1) / 2 - same_class;
        if impostor_count * 2 >= total {
            let mut all: Vec<(usize, usize)> = (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .filter(|&(a, b)| ids[a].1 != ids[b].1)
                .collect();
            rng.shuffle(&mut all);
            all.truncate(impostor_count);
            out.extend(all.into_iter().map(|(a, b)| pair(a, b, false)));
        } else {
            let mut seen = HashSet::new();
            while seen.len() < impostor_count {
                let (a, b) = (rng.index(n), rng.index(n));
                if ids[a].1 == ids[b].1 {
                    continue;
                }
                if seen.insert((a.min(b), a.max(b))) {
                    out.push(pair(a, b, false));
                }
            }
        }
    }
    Ok(out)
}

pub fn score_pairs(
    pairs: &[VerificationPair],
    embeddings: &HashMap<String, FeatureVector>,
) -> Result<Vec<ScoredPair>> {
    let lookup = |id: &String| embeddings.get(id).ok_or_else(|| Error::UnknownId(id.clone()));
    pairs
        .iter()
        .map(|p| {
            let score = cosine(lookup(&p.id_a)?, lookup(&p.id_b)?)?;
            Ok(ScoredPair { pair: p.clone(), score })
        })
        .collect()
}

fn split_scores(scored: &[ScoredPair]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (gen, imp): (Vec<_>, Vec<_>) = scored.iter().partition(|s| s.pair.genuine);
    if gen.is_empty() || imp.is_empty() {
        return Err(Error::OneSidedInput);
    }
    let mut gen: Vec<f64> = gen.into_iter().map(|s| s.score).collect();
    let mut imp: Vec<f64> = imp.into_iter().map(|s| s.score).collect();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    Ok((gen, imp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

/// Accept iff `score >= t`. `FAR(t)` is the impostor acceptance rate,
/// `FRR(t)` the genuine rejection rate. Thresholds sweep the sorted distinct
/// scores (plus a point above the maximum, where FAR = 0 and FRR = 1);
/// `FAR - FRR` starts at 1 and is non-increasing. The EER is read where the
/// difference first reaches zero, interpolating linearly between the two
/// bracketing thresholds when it jumps across zero.
pub fn compute_eer(scored: &[ScoredPair]) -> Result<EerPoint> {
    let (gen, imp) = split_scores(scored)?;
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    let rates = |t: f64| {
        let far = (imp.len() - imp.partition_point(|&s| s < t)) as f64 / ni;
        let frr = gen.partition_point(|&s| s < t) as f64 / ng;
        (far, frr)
    };

    let mut prev: Option<(f64, f64, f64)> = None;
    for t in thresholds.iter().copied().map(Some).chain(std::iter::once(None)) {
        let (far, frr) = match t {
            Some(t) => rates(t),
            None => (0.0, 1.0),
        };
        let diff = far - frr;
        if diff <= 0.0 {
            let t_here = t.unwrap_or(f64::INFINITY);
            if diff == 0.0 {
                return Ok(EerPoint { eer: far, threshold: t_here });
            }
            // the first threshold always has FRR = 0 and FAR = 1
            let (t0, far0, frr0) = prev.expect("first threshold has FAR - FRR = 1");
            let d0 = far0 - frr0;
            let alpha = d0 / (d0 - diff);
            let eer = far0 + alpha * (far - far0);
            let threshold = if t_here.is_finite() { t0 + alpha * (t_here - t0) } else { t0 };
            return Ok(EerPoint { eer, threshold });
        }
        prev = Some((t.unwrap_or(f64::INFINITY), far, frr));
    }
    unreachable!("FAR - FRR reaches -1 above the largest score")
}

/// `P(genuine > impostor) + 0.5 P(tie)` via the rank-sum statistic.
pub fn compute_auc(scored: &[ScoredPair]) -> Result<f64> {
    let (gen, imp) = split_scores(scored)?;
    let mut all: Vec<(f64, bool)> =
        gen.iter().map(|&s| (s, true)).chain(imp.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the genuine rank sum, using midranks for ties (1-based ranks)
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid_x2 = (i + 1 + j) as u128;
        let genuine_here = all[i..j].iter().filter(|e| e.1).count() as u128;
        rank_sum_x2 += mid_x2 * genuine_here;
        i = j;
    }
    let (ng, ni) = (gen.len() as u128, imp.len() as u128);
    let u_x2 = rank_sum_x2 - ng * (ng + 1);
    Ok(u_x2 as f64 / (2 * ng * ni) as f64)
}

/// Mean absolute pairwise difference over twice the mean. Zero when the
/// mean is zero.
pub fn gini(errs: &[f64]) -> f64 {
    let n = errs.len();
    if n == 0 {
        return 0.0;
    }
    let mean = errs.iter().sum::<f64>() / n as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let mut sorted = errs.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum_i sum_j |e_i - e_j| = 2 sum_i (2i - n + 1) e_(i)
    let abs_diff_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, e)| (2.0 * i as f64 - n as f64 + 1.0) * e)
        .sum::<f64>()
        * 2.0;
    abs_diff_sum / (2.0 * (n * n) as f64 * mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SerValue {
    pub value: f64,
    /// The minimum was below [`SER_FLOOR`] and was replaced by it.
    pub floored: bool,
}

/// Largest over smallest error rate. Both are floored at [`SER_FLOOR`], so
/// all-zero rates give 1.
pub fn ser(errs: &[f64]) -> SerValue {
    let max = errs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = errs.iter().copied().fold(f64::INFINITY, f64::min);
    if min < SER_FLOOR {
        SerValue { value: max.max(SER_FLOOR) / SER_FLOOR, floored: true }
    } else {
        SerValue { value: max / min, floored: false }
    }
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Group name to member sample ids.
pub type Grouping = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Binarization {
    pub grouping: Grouping,
    /// Attributes with a single value over the sample set; their groups are
    /// empty.
    pub constant: Vec<String>,
}

/// Min-max scales each attribute to `[-1, 1]` over the given samples; a
/// sample belongs to the attribute's group iff its scaled value exceeds 0.5.
pub fn binarize_attributes<'a>(
    samples: impl IntoIterator<Item = (&'a str, &'a Attributes)> + Clone,
    attribute_names: &[String],
) -> Result<Binarization> {
    let mut grouping = Grouping::new();
    let mut constant = Vec::new();
    for name in attribute_names {
        let mut values = Vec::new();
        for (id, attrs) in samples.clone() {
            let v = *attrs.get(name).ok_or_else(|| Error::UnknownAttribute(name.clone()))?;
            values.push((id, v));
        }
        let min = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let max = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        let members = if max > min {
            values
                .iter()
                .filter(|(_, v)| 2.0 * (v - min) / (max - min) - 1.0 > 0.5)
                .map(|(id, _)| id.to_string())
                .collect()
        } else {
            constant.push(name.clone());
            BTreeSet::new()
        };
        grouping.insert(name.clone(), members);
    }
    Ok(Binarization { grouping, constant })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub eer: f64,
    pub auc: f64,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overall {
    pub eer: f64,
    pub auc: f64,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fairness {
    pub std: f64,
    pub gini: f64,
    pub ser: f64,
    pub ser_floored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: Overall,
    pub per_group: BTreeMap<String, GroupResult>,
    /// Groups without both genuine and impostor pairs.
    pub skipped_groups: Vec<String>,
    pub fairness: Option<Fairness>,
    /// Group EER minus the mean of group EERs.
    pub heatmap: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn require_fairness(&self) -> Result<&Fairness> {
        self.fairness.as_ref().ok_or(Error::TooFewGroups(self.per_group.len()))
    }

    /// Pretty JSON with keys in a fixed order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per group and a final `__overall__` row that also carries the
    /// fairness figures.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,eer,auc,genuine_pairs,impostor_pairs,std,gini,ser\n");
        for (name, g) in &self.per_group {
            writeln!(
                out,
                "{name},{:?},{:?},{},{},,,",
                g.eer, g.auc, g.genuine_pairs, g.impostor_pairs
            )
            .unwrap();
        }
        let o = &self.overall;
        let (std, gini, ser) = match &self.fairness {
            Some(f) => (format!("{:?}", f.std), format!("{:?}", f.gini), format!("{:?}", f.ser)),
            None => Default::default(),
        };
        writeln!(
            out,
            "__overall__,{:?},{:?},{},{},{std},{gini},{ser}",
            o.eer, o.auc, o.genuine_pairs, o.impostor_pairs
        )
        .unwrap();
        out
    }

    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("group,eer_deviation\n");
        for (name, d) in &self.heatmap {
            writeln!(out, "{name},{d:?}").unwrap();
        }
        out
    }
}

/// Scores every pair, then slices by group: a pair belongs to a group iff
/// both of its samples are members. Fairness figures need at least two
/// groups with both pair kinds; otherwise they are omitted.
pub fn evaluate(
    embeddings: &HashMap<String, FeatureVector>,
    pairs: &[VerificationPair],
    grouping: &Grouping,
) -> Result<EvalReport> {
    let scored = score_pairs(pairs, embeddings)?;
    let overall = Overall {
        eer: compute_eer(&scored)?.eer,
        auc: compute_auc(&scored)?,
        genuine_pairs: scored.iter().filter(|s| s.pair.genuine).count(),
        impostor_pairs: scored.iter().filter(|s| !s.pair.genuine).count(),
    };

    let groups: Vec<(&String, &BTreeSet<String>)> = grouping.iter().collect();
    let results: Vec<(String, Option<GroupResult>)> = groups
        .par_iter()
        .map(|(name, members)| {
            let subset: Vec<ScoredPair> = scored
                .iter()
                .filter(|s| members.contains(&s.pair.id_a) && members.contains(&s.pair.id_b))
                .cloned()
                .collect();
            let result = match (compute_eer(&subset), compute_auc(&subset)) {
                (Ok(e), Ok(auc)) => Some(GroupResult {
                    eer: e.eer,
                    auc,
                    genuine_pairs: subset.iter().filter(|s| s.pair.genuine).count(),
                    impostor_pairs: subset.iter().filter(|s| !s.pair.genuine).count(),
                }),
                _ => None,
            };
            (name.to_string(), result)
        })
        .collect();

    let mut per_group = BTreeMap::new();
    let mut skipped_groups = Vec::new();
    for (name, r) in results {
        match r {
            Some(r) => {
                per_group.insert(name, r);
            }
            None => skipped_groups.push(name),
        }
    }

    let eers: Vec<f64> = per_group.values().map(|g| g.eer).collect();
    let fairness = (eers.len() >= 2).then(|| {
        let s = ser(&eers);
        Fairness { std: population_std(&eers), gini: gini(&eers), ser: s.value, ser_floored: s.floored }
    });
    let heatmap = if eers.is_empty() {
        BTreeMap::new()
    } else {
        let mean = eers.iter().sum::<f64>() / eers.len() as f64;
        per_group.iter().map(|(k, g)| (k.clone(), g.eer - mean)).collect()
    };
    Ok(EvalReport { overall, per_group, skipped_groups, fairness, heatmap })
}
