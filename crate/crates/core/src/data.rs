//! Labeled samples, synthetic group-biased datasets, stratified splitting and
//! the CSV file formats.
//!
//! Dataset files have the header `id,class,attr:<name>...,x0,...,x{d-1}`;
//! embedding files use the same layout with `e0,...` value columns. Floats
//! are written in shortest round-trip decimal form, so save/load/save is
//! byte-stable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::favoritism::parse_f64;
use crate::primitives::{dot, FeatureVector, Rng};

const PROTOTYPE_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const HOLDOUT_STREAM: u64 = 3;
const SPLIT_STREAM: u64 = 4;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

pub type Attributes = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub class_id: usize,
    pub attributes: Attributes,
    pub input: FeatureVector,
}

/// One synthetic population. Larger `noise_sigma` makes its classes harder.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub class_count: usize,
    pub noise_sigma: f64,
    pub samples_per_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub groups: Vec<GroupSpec>,
    pub input_dim: usize,
    /// Minimum pairwise angle between class prototypes, radians.
    pub prototype_separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.groups.is_empty() {
            return bad("at least one group required".into());
        }
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if !(0.0..std::f64::consts::PI).contains(&self.prototype_separation) {
            return bad(format!("prototype_separation {} outside [0, pi)", self.prototype_separation));
        }
        let mut names = BTreeSet::new();
        for g in &self.groups {
            if g.name.is_empty() || g.name.contains([',', '\n', '"']) {
                return bad(format!("invalid group name {:?}", g.name));
            }
            if !names.insert(&g.name) {
                return bad(format!("duplicate group {:?}", g.name));
            }
            if g.class_count == 0 || g.samples_per_class == 0 {
                return bad(format!("group {:?} needs classes and samples", g.name));
            }
            if !(g.noise_sigma.is_finite() && g.noise_sigma > 0.0) {
                return bad(format!("group {:?} noise_sigma must be > 0", g.name));
            }
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.groups.iter().map(|g| g.class_count).sum()
    }
}

/// Attribute key marking membership in a synthetic group.
pub fn group_attribute(name: &str) -> String {
    format!("group:{name}")
}

/// Unit prototypes, one per class, at least `prototype_separation` apart.
pub fn prototypes(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed).split(PROTOTYPE_STREAM);
    let max_cos = spec.prototype_separation.cos();
    let mut placed: Vec<Vec<f64>> = Vec::with_capacity(spec.total_classes());
    for class in 0..spec.total_classes() {
        let mut attempts = 0;
        loop {
            if attempts == MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::PrototypePlacementFailed { class, attempts });
            }
            attempts += 1;
            let raw: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal()).collect();
            let Ok(unit) = FeatureVector::unit(raw) else { continue };
            let unit = unit.into_values();
            if placed.iter().all(|p| dot(p, &unit) <= max_cos) {
                placed.push(unit);
                break;
            }
        }
    }
    Ok(placed)
}

/// Draws the dataset described by `spec`: each sample is its class prototype
/// plus isotropic Gaussian noise with the group's sigma.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<LabeledSample>> {
    let protos = prototypes(spec)?;
    let mut rng = Rng::new(spec.seed).split(SAMPLE_STREAM);
    draw_samples(spec, &protos, None, &mut rng, "s")
}

/// Fresh samples of the same classes, independent of [`generate`]'s draws.
pub fn generate_holdout(spec: &SyntheticSpec, samples_per_class: usize) -> Result<Vec<LabeledSample>> {
    if samples_per_class == 0 {
        return Err(Error::SpecInvalid("holdout needs samples".into()));
    }
    let protos = prototypes(spec)?;
    let mut rng = Rng::new(spec.seed).split(HOLDOUT_STREAM);
    draw_samples(spec, &protos, Some(samples_per_class), &mut rng, "h")
}

fn draw_samples(
    spec: &SyntheticSpec,
    protos: &[Vec<f64>],
    per_class: Option<usize>,
    rng: &mut Rng,
    id_prefix: &str,
) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    let mut class_id = 0;
    for group in &spec.groups {
        let attributes: Attributes = spec
            .groups
            .iter()
            .map(|g| (group_attribute(&g.name), if g.name == group.name { 1.0 } else { -1.0 }))
            .collect();
        for _ in 0..group.class_count {
            for _ in 0..per_class.unwrap_or(group.samples_per_class) {
                let values = protos[class_id]
                    .iter()
                    .map(|p| p + group.noise_sigma * rng.normal())
                    .collect();
                out.push(LabeledSample {
                    id: format!("{id_prefix}{}", out.len()),
                    class_id,
                    attributes: attributes.clone(),
                    input: FeatureVector::new(values)?,
                });
            }
            class_id += 1;
        }
    }
    Ok(out)
}

/// Number of classes, i.e. one past the largest class id.
pub fn class_count(samples: &[LabeledSample]) -> usize {
    samples.iter().map(|s| s.class_id + 1).max().unwrap_or(0)
}

/// Stratified split. Each class keeps at least one sample on both sides;
/// both outputs preserve input order.
pub fn split(
    samples: &[LabeledSample],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::ConfigInvalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.class_id).or_default().push(i);
    }
    let mut rng = Rng::new(seed).split(SPLIT_STREAM);
    let mut is_train = vec![false; samples.len()];
    for (&class, indices) in &mut by_class {
        let n = indices.len();
        if n < 2 {
            return Err(Error::ClassTooSmall { class, count: n });
        }
        rng.shuffle(indices);
        let n_train = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
        for &i in &indices[..n_train] {
            is_train[i] = true;
        }
    }
    let (train, val): (Vec<_>, Vec<_>) =
        samples.iter().cloned().zip(is_train).partition(|(_, t)| *t);
    Ok((train.into_iter().map(|(s, _)| s).collect(), val.into_iter().map(|(s, _)| s).collect()))
}

/// A normalized embedding with its sample metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub class_id: usize,
    pub attributes: Attributes,
    pub embedding: FeatureVector,
}

/// Rows shared by the dataset and embedding formats.
struct Table {
    rows: Vec<(u64, String, usize, Attributes, Vec<f64>)>,
}

fn read_table(reader: impl Read, value_prefix: char) -> Result<Table> {
    let mut csv = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = csv.records();
    let header = match records.next() {
        Some(r) => r.map_err(csv_error)?,
        None => return Err(Error::SchemaMismatch("missing header row".into())),
    };
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "class" {
        return Err(Error::SchemaMismatch("header must start with id,class".into()));
    }
    let mut attr_names = Vec::new();
    let mut dim = 0;
    for col in &cols[2..] {
        if let Some(name) = col.strip_prefix("attr:") {
            if dim > 0 {
                return Err(Error::SchemaMismatch(format!("attribute column {col:?} after values")));
            }
            if name.is_empty() || attr_names.iter().any(|n| n == name) {
                return Err(Error::SchemaMismatch(format!("bad attribute column {col:?}")));
            }
            attr_names.push(name.to_string());
        } else if *col == format!("{value_prefix}{dim}") {
            dim += 1;
        } else {
            return Err(Error::SchemaMismatch(format!("unexpected column {col:?}")));
        }
    }
    if dim == 0 {
        return Err(Error::SchemaMismatch(format!("no {value_prefix}0.. value columns")));
    }
    let width = cols.len();
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for record in records {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse { line, message };
        if record.len() != width {
            return Err(bad(format!("expected {width} fields, found {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(bad(format!("empty or duplicate id {id:?}")));
        }
        let class: usize = record[1].parse().map_err(|e| bad(format!("class: {e}")))?;
        let mut attributes = Attributes::new();
        for (k, name) in attr_names.iter().enumerate() {
            attributes.insert(name.clone(), parse_f64(&record[2 + k]).map_err(bad)?);
        }
        let values = (2 + attr_names.len()..width)
            .map(|k| parse_f64(&record[k]))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        rows.push((line, id, class, attributes, values));
    }
    Ok(Table { rows })
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, message: format!("{other:?}") },
    }
}

fn attribute_columns<'a>(attrs: impl Iterator<Item = &'a Attributes>) -> Result<Vec<String>> {
    let mut names: Option<Vec<String>> = None;
    for a in attrs {
        let keys: Vec<String> = a.keys().cloned().collect();
        match &names {
            None => names = Some(keys),
            Some(n) if *n != keys => {
                return Err(Error::SchemaMismatch("samples carry different attribute sets".into()))
            }
            _ => {}
        }
    }
    Ok(names.unwrap_or_default())
}

fn write_table<'a>(
    out: impl Write,
    value_prefix: char,
    dim: usize,
    attr_names: &[String],
    rows: impl Iterator<Item = (&'a str, usize, &'a Attributes, &'a [f64])>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["id".to_string(), "class".to_string()];
    header.extend(attr_names.iter().map(|n| format!("attr:{n}")));
    header.extend((0..dim).map(|k| format!("{value_prefix}{k}")));
    w.write_record(&header).map_err(csv_write_error)?;
    for (id, class, attrs, values) in rows {
        if values.len() != dim {
            return Err(Error::SchemaMismatch("rows have different dimensions".into()));
        }
        let mut fields = vec![id.to_string(), class.to_string()];
        fields.extend(attr_names.iter().map(|n| format!("{:?}", attrs[n])));
        fields.extend(values.iter().map(|v| format!("{v:?}")));
        w.write_record(&fields).map_err(csv_write_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_write_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::SchemaMismatch(format!("{other:?}")),
    }
}

pub fn write_dataset(samples: &[LabeledSample], out: impl Write) -> Result<()> {
    let names = attribute_columns(samples.iter().map(|s| &s.attributes))?;
    let dim = samples.first().map_or(1, |s| s.input.dim());
    write_table(
        out,
        'x',
        dim,
        &names,
        samples.iter().map(|s| (s.id.as_str(), s.class_id, &s.attributes, s.input.values())),
    )
}

pub fn read_dataset(reader: impl Read) -> Result<Vec<LabeledSample>> {
    let table = read_table(reader, 'x')?;
    table
        .rows
        .into_iter()
        .map(|(line, id, class_id, attributes, values)| {
            let input = FeatureVector::new(values)
                .map_err(|e| Error::Parse { line, message: e.to_string() })?;
            Ok(LabeledSample { id, class_id, attributes, input })
        })
        .collect()
}

pub fn save_dataset(samples: &[LabeledSample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(samples, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledSample>> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn write_embeddings(records: &[EmbeddingRecord], out: impl Write) -> Result<()> {
    let names = attribute_columns(records.iter().map(|r| &r.attributes))?;
    let dim = records.first().map_or(1, |r| r.embedding.dim());
    write_table(
        out,
        'e',
        dim,
        &names,
        records.iter().map(|r| (r.id.as_str(), r.class_id, &r.attributes, r.embedding.values())),
    )
}

/// Rows are L2-normalized on load; a zero row is a parse error.
pub fn read_embeddings(reader: impl Read) -> Result<Vec<EmbeddingRecord>> {
    let table = read_table(reader, 'e')?;
    table
        .rows
        .into_iter()
        .map(|(line, id, class_id, attributes, values)| {
            let embedding = FeatureVector::unit(values)
                .map_err(|e| Error::Parse { line, message: e.to_string() })?;
            Ok(EmbeddingRecord { id, class_id, attributes, embedding })
        })
        .collect()
}

pub fn save_embeddings(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_embeddings(records, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    read_embeddings(BufReader::new(File::open(path)?))
}
