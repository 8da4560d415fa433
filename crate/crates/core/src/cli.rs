//! Command-line front end: `gen-data`, `train`, `eval`, `grad-check` and
//! `export-embeddings`.
//!
//! Exit codes: 0 success, 1 gradient check failure, 2 configuration or
//! usage error, 3 I/O error, 4 data error, 5 evaluation precondition.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate, generate_holdout, load_dataset, load_embeddings, save_dataset, save_embeddings,
    EmbeddingRecord, GroupSpec, LabeledSample, SyntheticSpec,
};
use crate::encoder::Activation;
use crate::error::{Error, Result};
use crate::eval::{binarize_attributes, evaluate, make_pairs, EvalReport, VerificationPair};
use crate::favoritism::{history_to_text, parse_f64, FairnessParams};
use crate::gradcheck::{self, GradCheckConfig};
use crate::loss::MarginParams;
use crate::primitives::{FeatureVector, Rng};
use crate::trainer::{self, log_to_csv, TrainConfig};

const PAIR_STREAM: u64 = 20;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_EVAL: i32 = 5;

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ConfigInvalid(_)
        | Error::SpecInvalid(_)
        | Error::InvalidParameter(_)
        | Error::MarginOverflow { .. }
        | Error::PrototypePlacementFailed { .. } => EXIT_CONFIG,
        Error::Io(_) => EXIT_IO,
        Error::TooFewGroups(_) | Error::OneSidedInput => EXIT_EVAL,
        _ => EXIT_DATA,
    }
}

/// Pair sampling and grouping options for `eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub genuine_per_class: usize,
    pub impostor_count: usize,
    /// Attributes to slice by; empty means every attribute in the data.
    pub attributes: Vec<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { genuine_per_class: 10, impostor_count: 2000, attributes: Vec::new() }
    }
}

/// Everything a `key=value` run configuration can set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub eval: EvalOptions,
    pub grad_check: GradCheckConfig,
    /// Write an extra checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::default(),
            synthetic: SyntheticSpec {
                groups: Vec::new(),
                input_dim: 16,
                prototype_separation: 0.5,
                seed: 0,
            },
            eval: EvalOptions::default(),
            grad_check: GradCheckConfig::default(),
            checkpoint_every: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::ConfigInvalid(format!("key {key:?}: cannot parse {value:?}: {e}")))
}

fn parse_real(key: &str, value: &str) -> Result<f64> {
    parse_f64(value).map_err(|m| Error::ConfigInvalid(format!("key {key:?}: {m}")))
}

fn parse_list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown and
    /// repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::ConfigInvalid(format!("line {}: expected key=value, found {line:?}", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigInvalid(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| match e {
                    Error::ConfigInvalid(m) => Error::ConfigInvalid(format!("line {}: {m}", n + 1)),
                    other => other,
                })?;
        }
        cfg.sync_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn group_mut(&mut self, name: &str) -> &mut GroupSpec {
        let groups = &mut self.synthetic.groups;
        let idx = match groups.iter().position(|g| g.name == name) {
            Some(i) => i,
            None => {
                groups.push(GroupSpec {
                    name: name.to_string(),
                    class_count: 10,
                    noise_sigma: 0.1,
                    samples_per_class: 40,
                });
                groups.len() - 1
            }
        };
        &mut groups[idx]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "lr_start" => t.lr_start = parse_real(key, value)?,
            "lr_end" => t.lr_end = parse_real(key, value)?,
            "weight_decay" => t.weight_decay = parse_real(key, value)?,
            "momentum" => t.momentum = parse_real(key, value)?,
            "scale" => t.margin.scale = parse_real(key, value)?,
            "margin" => t.margin.margin = parse_real(key, value)?,
            "gamma" => t.fairness.gamma = parse_real(key, value)?,
            "harmony" => t.fairness.harmony = parse_real(key, value)?,
            "loss" => t.loss = value.parse()?,
            "favoritism_source" => t.favoritism_source = value.parse()?,
            "split_ratio" => t.split_ratio = parse_real(key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse_value(key, value)?,
            "hidden" => {
                t.hidden = parse_list(value)
                    .iter()
                    .map(|w| parse_value(key, w))
                    .collect::<Result<_>>()?
            }
            "embedding_dim" => t.embedding_dim = parse_value(key, value)?,
            "activation" => t.activation = value.parse::<Activation>()?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "input_dim" => self.synthetic.input_dim = parse_value(key, value)?,
            "prototype_separation" => self.synthetic.prototype_separation = parse_real(key, value)?,
            "eval.genuine_per_class" => self.eval.genuine_per_class = parse_value(key, value)?,
            "eval.impostor_count" => self.eval.impostor_count = parse_value(key, value)?,
            "eval.attributes" => self.eval.attributes = parse_list(value),
            "grad_check.configs" => self.grad_check.configs = parse_value(key, value)?,
            _ => {
                let group = key
                    .strip_prefix("group.")
                    .and_then(|rest| rest.rsplit_once('.'))
                    .filter(|(name, _)| !name.is_empty());
                match group {
                    Some((name, "classes")) => self.group_mut(name).class_count = parse_value(key, value)?,
                    Some((name, "sigma")) => self.group_mut(name).noise_sigma = parse_real(key, value)?,
                    Some((name, "samples_per_class")) => {
                        self.group_mut(name).samples_per_class = parse_value(key, value)?
                    }
                    _ => return Err(Error::ConfigInvalid(format!("unknown key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Propagates the single `seed` into every seeded component.
    fn sync_seed(&mut self) {
        self.train.seed = self.seed;
        self.synthetic.seed = self.seed;
        self.grad_check.seed = self.seed;
    }

    fn apply(&mut self, common: &Common, overrides: Option<&TrainOverrides>) -> Result<()> {
        if let Some(seed) = common.seed {
            self.seed = seed;
        }
        self.sync_seed();
        if let Some(o) = overrides {
            if let Some(loss) = &o.loss {
                self.train.loss = loss.parse()?;
            }
            if let Some(g) = o.gamma {
                self.train.fairness.gamma = g;
            }
            if let Some(h) = o.harmony {
                self.train.fairness.harmony = h;
            }
            if let Some(src) = &o.favoritism_source {
                self.train.favoritism_source = src.parse()?;
            }
        }
        let t = &self.train;
        FairnessParams::new(t.fairness.gamma, t.fairness.harmony)
            .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        MarginParams::new(t.margin.scale, t.margin.margin)
            .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "fairmargin", version, about = "Fair angular-margin metric learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections; output does not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    /// softmax, arcface or fair.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    harmony: Option<f64>,
    /// train or val.
    #[arg(long)]
    favoritism_source: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the configured groups.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Also write a held-out set with this many samples per class.
        #[arg(long, requires = "holdout_out")]
        holdout: Option<usize>,
        #[arg(long)]
        holdout_out: Option<PathBuf>,
    },
    /// Train an encoder and classifier head.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Record real epoch durations in the log instead of 0.
        #[arg(long)]
        log_wall_time: bool,
    },
    /// Score verification pairs and report per-group and fairness metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "data", conflicts_with = "embeddings")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "checkpoint")]
        embeddings: Option<PathBuf>,
        /// CSV with columns id_a,id_b,genuine; sampled when absent.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Comma-separated attributes to slice by (default: all).
        #[arg(long)]
        attributes: Option<String>,
        /// Fail with exit code 5 unless fairness metrics can be computed.
        #[arg(long)]
        fairness: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write normalized embeddings of a dataset under a checkpoint.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::GradCheck { common, .. }
            | Command::ExportEmbeddings { common, .. } => common,
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let workers = cli.command.common().workers;
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers.unwrap_or(0)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_CONFIG;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common, overrides: Option<&TrainOverrides>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(common, overrides)?;
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData { common, out, holdout, holdout_out } => {
            let cfg = load_config(&common, None)?;
            cmd_gen_data(&cfg, &out, holdout.zip(holdout_out))
        }
        Command::Train { common, overrides, data, out_dir, log_wall_time } => {
            let cfg = load_config(&common, Some(&overrides))?;
            cmd_train(&cfg, &data, &out_dir, log_wall_time)
        }
        Command::Eval { common, checkpoint, data, embeddings, pairs, attributes, fairness, out_dir } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(list) = attributes {
                cfg.eval.attributes = parse_list(&list);
            }
            let records = match (checkpoint, data, embeddings) {
                (Some(ck), Some(data), _) => embed_dataset(&Checkpoint::load(&ck)?, &load_dataset(&data)?)?,
                (_, _, Some(path)) => load_embeddings(&path)?,
                _ => return Err(Error::ConfigInvalid("eval needs --checkpoint with --data, or --embeddings".into())),
            };
            cmd_eval(&cfg, &records, pairs.as_deref(), fairness, &out_dir)
        }
        Command::GradCheck { common, corrupt_gradient } => {
            let cfg = load_config(&common, None)?;
            let report = gradcheck::run(&cfg.grad_check, corrupt_gradient)?;
            print!("{}", report.to_text());
            Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::ExportEmbeddings { common, checkpoint, data, out } => {
            load_config(&common, None)?;
            let records = embed_dataset(&Checkpoint::load(&checkpoint)?, &load_dataset(&data)?)?;
            save_embeddings(&records, &out)?;
            println!("wrote {} embeddings", records.len());
            Ok(EXIT_OK)
        }
    }
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path, holdout: Option<(usize, PathBuf)>) -> Result<i32> {
    let samples = generate(&cfg.synthetic)?;
    save_dataset(&samples, out)?;
    let mut first_class = 0;
    for g in &cfg.synthetic.groups {
        println!(
            "group {}: classes {}..{} samples {}",
            g.name,
            first_class,
            first_class + g.class_count,
            g.class_count * g.samples_per_class
        );
        first_class += g.class_count;
    }
    println!("wrote {} samples", samples.len());
    if let Some((per_class, path)) = holdout {
        let held = generate_holdout(&cfg.synthetic, per_class)?;
        save_dataset(&held, &path)?;
        println!("wrote {} holdout samples", held.len());
    }
    Ok(EXIT_OK)
}

fn cmd_train(cfg: &RunConfig, data: &Path, out_dir: &Path, log_wall_time: bool) -> Result<i32> {
    let dataset = load_dataset(data)?;
    fs::create_dir_all(out_dir)?;
    let every = cfg.checkpoint_every;
    let out = trainer::train_with(&dataset, &cfg.train, |model, state, record| {
        if every > 0 && record.epoch % every == 0 {
            let ck = Checkpoint { model: model.clone(), state: state.clone() };
            ck.save(&out_dir.join(format!("checkpoint_epoch_{:03}.txt", record.epoch)))?;
        }
        Ok(())
    })?;
    let ck = Checkpoint { model: out.model.clone(), state: out.state().clone() };
    ck.save(&out_dir.join("checkpoint.txt"))?;
    fs::write(out_dir.join("favoritism.txt"), history_to_text(&out.history))?;
    fs::write(out_dir.join("train_log.csv"), log_to_csv(&out.log, log_wall_time))?;
    match out.log.last() {
        Some(r) => println!("epochs {} final validation accuracy {:.6}", out.log.len(), r.val_accuracy),
        None => println!("epochs 0 final validation accuracy {:.6}", trainer::accuracy(&out.model, &out.val)?),
    }
    Ok(EXIT_OK)
}

/// Embeddings of every sample under `ck`, normalized as on load.
pub fn embed_dataset(ck: &Checkpoint, samples: &[LabeledSample]) -> Result<Vec<EmbeddingRecord>> {
    use rayon::prelude::*;
    samples
        .par_iter()
        .map(|s| {
            Ok(EmbeddingRecord {
                id: s.id.clone(),
                class_id: s.class_id,
                attributes: s.attributes.clone(),
                embedding: ck.model.encoder.embed(s.input.values())?,
            })
        })
        .collect()
}

pub fn read_pairs(path: &Path) -> Result<Vec<VerificationPair>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse { line: 1, message: format!("{other:?}") },
        }
    })?;
    let header = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != ["id_a", "id_b", "genuine"] {
        return Err(Error::SchemaMismatch("pairs header must be id_a,id_b,genuine".into()));
    }
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = r.position().map_or(0, |p| p.line());
            if r.len() != 3 {
                return Err(Error::Parse { line, message: format!("expected 3 fields, found {}", r.len()) });
            }
            let genuine = match &r[2] {
                "1" => true,
                "0" => false,
                other => return Err(Error::Parse { line, message: format!("genuine must be 0 or 1, found {other:?}") }),
            };
            Ok(VerificationPair { id_a: r[0].to_string(), id_b: r[1].to_string(), genuine })
        })
        .collect()
}

pub fn pairs_to_csv(pairs: &[VerificationPair]) -> String {
    let mut out = String::from("id_a,id_b,genuine\n");
    for p in pairs {
        out.push_str(&format!("{},{},{}\n", p.id_a, p.id_b, u8::from(p.genuine)));
    }
    out
}

/// Pairs, grouping and report for a set of embeddings.
pub fn evaluate_records(
    cfg: &RunConfig,
    records: &[EmbeddingRecord],
    pairs: Option<Vec<VerificationPair>>,
) -> Result<(Vec<VerificationPair>, EvalReport)> {
    let pairs = match pairs {
        Some(p) => p,
        None => {
            let ids: Vec<(String, usize)> = records.iter().map(|r| (r.id.clone(), r.class_id)).collect();
            let mut rng = Rng::new(cfg.seed).split(PAIR_STREAM);
            make_pairs(&ids, cfg.eval.genuine_per_class, cfg.eval.impostor_count, &mut rng)?
        }
    };
    let names = if cfg.eval.attributes.is_empty() {
        records.first().map(|r| r.attributes.keys().cloned().collect()).unwrap_or_default()
    } else {
        cfg.eval.attributes.clone()
    };
    let binarized = binarize_attributes(records.iter().map(|r| (r.id.as_str(), &r.attributes)), &names)?;
    let embeddings: HashMap<String, FeatureVector> =
        records.iter().map(|r| (r.id.clone(), r.embedding.clone())).collect();
    let report = evaluate(&embeddings, &pairs, &binarized.grouping)?;
    Ok((pairs, report))
}

fn cmd_eval(
    cfg: &RunConfig,
    records: &[EmbeddingRecord],
    pairs_path: Option<&Path>,
    require_fairness: bool,
    out_dir: &Path,
) -> Result<i32> {
    let pairs = pairs_path.map(read_pairs).transpose()?;
    let (pairs, report) = evaluate_records(cfg, records, pairs)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), report.to_json())?;
    fs::write(out_dir.join("report.csv"), report.to_csv())?;
    fs::write(out_dir.join("heatmap.csv"), report.heatmap_csv())?;
    fs::write(out_dir.join("pairs.csv"), pairs_to_csv(&pairs))?;
    println!(
        "overall eer {:.6} auc {:.6} groups {}",
        report.overall.eer,
        report.overall.auc,
        report.per_group.len()
    );
    match &report.fairness {
        Some(f) => println!("fairness std {:.6} gini {:.6} ser {:.6}", f.std, f.gini, f.ser),
        None if require_fairness => {
            let err = report.require_fairness().unwrap_err();
            eprintln!("error: {err}");
            return Ok(exit_code(&err));
        }
        None => println!("fairness metrics need at least 2 groups"),
    }
    Ok(EXIT_OK)
}
