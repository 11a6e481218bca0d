//! Command-line front end: strict JSON run configs, hashed run directories
//! and one subcommand per pipeline stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{cka_gain, cka_matrix, evaluate, gap_closure, probe_systems, profile_throughput, MetricReport, Thresholds};
use crate::augment::{generate_trajectories, rattle_all, teacher_label, RattleConfig, RattleMode, RelaxationConfig};
use crate::data::{dataset_hash, generate_dataset, read_dataset, write_dataset, DataConfig, DatasetSplit, OracleParams, SplitName};
use crate::distill::{KDConfig, Strategy};
use crate::error::Error;
use crate::models::{Family, ModelConfig, ModelParams, TapKey};
use crate::rng::{rng_from_seed, stream_seed};
use crate::training::{train_run, RunData, TrainConfig};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "MOLKD_RUN_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    #[default]
    Rattle,
    Trajectories,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub kind: AugmentKind,
    pub rattle: RattleConfig,
    pub relaxation: RelaxationConfig,
    /// Rattled copies per source system.
    pub copies: usize,
    pub source_split: SplitName,
    /// Use at most this many source systems.
    pub max_systems: Option<usize>,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            kind: AugmentKind::Rattle,
            rattle: RattleConfig::default(),
            relaxation: RelaxationConfig::default(),
            copies: 1,
            source_split: SplitName::Train,
            max_systems: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub thresholds: Thresholds,
    /// Splits reported by `eval`.
    pub eval_splits: Vec<SplitName>,
    pub probe_split: SplitName,
    /// Systems in the CKA probe set.
    pub probe_size: usize,
    pub probe_seed: u64,
    /// Taps compared by `cka`; all taps of each model when absent.
    pub taps_teacher: Option<Vec<String>>,
    pub taps_student: Option<Vec<String>>,
    pub repetitions: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            eval_splits: SplitName::ALL.to_vec(),
            probe_split: SplitName::ValId,
            probe_size: 100,
            probe_seed: 0,
            taps_teacher: None,
            taps_student: None,
            repetitions: 5,
        }
    }
}

/// Every setting of one run. Unknown keys are rejected at any depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of dataset generation, augmentation and probe selection; training
    /// uses `train.seed`.
    pub seed: u64,
    pub data: DataConfig,
    /// Architecture trained by `train` and `distill`. Missing fields take the
    /// defaults of the given family.
    #[serde(deserialize_with = "model_with_family_defaults")]
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kd: KDConfig,
    pub augment: AugmentSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::pnet(),
            train: TrainConfig::default(),
            kd: KDConfig::default(),
            augment: AugmentSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

fn model_with_family_defaults<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ModelConfig, D::Error> {
    use serde::de::Error as _;
    let given = Value::deserialize(d)?;
    let Value::Object(given) = given else {
        return Err(D::Error::custom("model must be an object"));
    };
    let family: Family = match given.get("family") {
        Some(f) => serde_json::from_value(f.clone()).map_err(D::Error::custom)?,
        None => Family::P,
    };
    let mut base = serde_json::to_value(ModelConfig::default_for(family)).map_err(D::Error::custom)?;
    if let Value::Object(b) = &mut base {
        b.extend(given);
    }
    serde_json::from_value(base).map_err(D::Error::custom)
}

impl RunConfig {
    /// Checks every section that does not depend on input files.
    pub fn validate(&self) -> crate::Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.kd.validate()?;
        self.augment.rattle.validate()?;
        self.augment.relaxation.validate()?;
        if self.analysis.repetitions < 3 {
            return Err(Error::InvalidArgument("analysis.repetitions must be at least 3".into()));
        }
        for t in self.analysis.taps_teacher.iter().chain(&self.analysis.taps_student).flatten() {
            t.parse::<TapKey>()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Sets `a.b.c = value` in a JSON tree; `value` is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config(format!("override {assignment:?} has an empty key")));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Reads the config file (if any), applies overrides and parses strictly;
/// errors name the offending field path.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut tree = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

#[derive(Parser, Debug)]
#[command(name = "molkd", version, about = "Knowledge distillation for molecular graph networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory holding run directories (defaults to $MOLKD_RUN_ROOT or `runs`).
    #[arg(long)]
    pub run_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset from the analytic oracle.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model without distillation.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Teacher-labeled systems mixed in at `train.alpha_target`.
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Train a student against a frozen teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Report metrics of a checkpoint; with --baseline and --teacher also the
    /// closed fraction of the baseline/teacher gap.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// CKA between teacher and student taps, and the gain over a baseline.
    Cka {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Produce rattled or relaxation-trajectory systems labeled by a teacher.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Student for adversarial rattling.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Inference throughput of one or more checkpoints.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Distill { .. } => "distill",
            Command::Eval { .. } => "eval",
            Command::Cka { .. } => "cka",
            Command::Augment { .. } => "augment",
            Command::Profile { .. } => "profile",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Distill { common, .. }
            | Command::Eval { common, .. }
            | Command::Cka { common, .. }
            | Command::Augment { common, .. }
            | Command::Profile { common, .. } => common,
        }
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v: Vec<(&'static str, &Path)> = Vec::new();
        match self {
            Command::GenData { .. } => {}
            Command::Train { data, synthetic, .. } => {
                v.push(("data", data));
                v.extend(synthetic.as_deref().map(|p| ("synthetic", p)));
            }
            Command::Distill { data, teacher, synthetic, .. } => {
                v.push(("data", data));
                v.extend(teacher.as_deref().map(|p| ("teacher", p)));
                v.extend(synthetic.as_deref().map(|p| ("synthetic", p)));
            }
            Command::Eval { data, checkpoint, baseline, teacher, .. } => {
                v.push(("data", data));
                v.push(("checkpoint", checkpoint));
                v.extend(baseline.as_deref().map(|p| ("baseline", p)));
                v.extend(teacher.as_deref().map(|p| ("teacher", p)));
            }
            Command::Cka { data, teacher, student, baseline, .. } => {
                v.push(("data", data));
                v.push(("teacher", teacher));
                v.push(("student", student));
                v.extend(baseline.as_deref().map(|p| ("baseline", p)));
            }
            Command::Augment { data, teacher, student, .. } => {
                v.push(("data", data));
                v.push(("teacher", teacher));
                v.extend(student.as_deref().map(|p| ("student", p)));
            }
            Command::Profile { data, checkpoint, .. } => {
                v.push(("data", data));
                v.extend(checkpoint.iter().map(|p| ("checkpoint", p.as_path())));
            }
        }
        v
    }
}

fn file_hash(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Serialize)]
struct Manifest {
    subcommand: String,
    config_hash: String,
    inputs: Vec<(String, String, String)>,
    outputs: BTreeMap<String, String>,
}

struct RunDir {
    path: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    fn file(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.path.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> crate::Result<()> {
        let p = self.file(name);
        std::fs::write(p, serde_json::to_string_pretty(value)?)?;
        Ok(())
    }
}

fn load_data(path: &Path) -> crate::Result<DatasetSplit> {
    read_dataset(path)
}

fn load_model(path: &Path) -> crate::Result<ModelParams> {
    ModelParams::load(path)
}

fn validation_sets(data: &DatasetSplit) -> Vec<(String, &[crate::geometry::AtomicSystem])> {
    [SplitName::ValId, SplitName::ValOod]
        .into_iter()
        .filter(|&s| !data.split(s).is_empty())
        .map(|s| (s.as_str().to_string(), data.split(s)))
        .collect()
}

fn parse_taps(given: &Option<Vec<String>>, model: &ModelParams) -> crate::Result<Vec<TapKey>> {
    match given {
        Some(v) => v.iter().map(|s| s.parse()).collect(),
        None => Ok(model.config.tap_keys()),
    }
}

#[derive(Serialize)]
struct MetricsRow {
    split: String,
    #[serde(flatten)]
    metrics: MetricReport,
}

fn train_like(
    cfg: &RunConfig,
    dir: &mut RunDir,
    data: &Path,
    synthetic: Option<&Path>,
    teacher: Option<&ModelParams>,
) -> crate::Result<()> {
    let data = load_data(data)?;
    let synth = match synthetic {
        Some(p) => load_data(p)?.train,
        None => Vec::new(),
    };
    let run = RunData { train: &data.train, synthetic: &synth, validation: validation_sets(&data) };
    let kd = teacher.map(|t| (&cfg.kd, t));
    let result = train_run(&cfg.train, &cfg.model, &run, kd, Some(&dir.path))?;
    for f in ["metrics.csv", "validation.csv", "model.json", "train_state.json"] {
        dir.outputs.push(f.into());
    }
    dir.write_json("summary.json", &serde_json::json!({
        "lambda": result.lambda,
        "steps": result.state.step,
        "student_ms": result.student_ms,
        "teacher_ms": result.teacher_ms,
        "architecture_hash": result.model().architecture_hash(),
    }))?;
    Ok(())
}

fn execute(cmd: &Command, cfg: &RunConfig, dir: &mut RunDir) -> CliResult<()> {
    match cmd {
        Command::GenData { .. } => {
            let oracle = OracleParams::standard(cfg.data.n_species, cfg.data.cutoff)?;
            let split = generate_dataset(&cfg.data, &oracle, cfg.seed)?;
            let p = dir.file("dataset.jsonl");
            write_dataset(&split, p)?;
        }
        Command::Train { data, synthetic, .. } => train_like(cfg, dir, data, synthetic.as_deref(), None)?,
        Command::Distill { data, teacher, synthetic, .. } => {
            let teacher = match (cfg.kd.strategy, teacher) {
                (Strategy::None, _) => None,
                (_, Some(p)) => Some(load_model(p)?),
                (s, None) => return Err(CliError::Config(format!("strategy {} needs --teacher", s.as_str()))),
            };
            if let Some(t) = &teacher {
                cfg.kd.resolve(&cfg.model, &t.config).map_err(config_err)?;
            }
            train_like(cfg, dir, data, synthetic.as_deref(), teacher.as_ref())?;
        }
        Command::Eval { data, checkpoint, baseline, teacher, .. } => {
            let data = load_data(data)?;
            let model = load_model(checkpoint)?;
            let th = cfg.analysis.thresholds;
            let mut rows = Vec::new();
            for &s in &cfg.analysis.eval_splits {
                if data.split(s).is_empty() {
                    continue;
                }
                rows.push(MetricsRow { split: s.as_str().into(), metrics: evaluate(&model, data.split(s), th)? });
            }
            let mut w = csv::Writer::from_path(dir.file("metrics.csv")).map_err(Error::from)?;
            w.write_record(["split", "energy_mae", "force_mae", "force_cos", "efwt", "n_systems"]).map_err(Error::from)?;
            for r in &rows {
                let m = &r.metrics;
                w.serialize((&r.split, m.energy_mae, m.force_mae, m.force_cos, m.efwt, m.n_systems)).map_err(Error::from)?;
            }
            w.flush().map_err(Error::from)?;
            dir.write_json("metrics.json", &rows)?;
            if let (Some(b), Some(t)) = (baseline, teacher) {
                let (b, t) = (load_model(b)?, load_model(t)?);
                let mut gaps = BTreeMap::new();
                for r in &rows {
                    let split = data.split(r.split.parse_split());
                    let mb = evaluate(&b, split, th)?;
                    let mt = evaluate(&t, split, th)?;
                    gaps.insert(
                        r.split.clone(),
                        serde_json::json!({
                            "energy_gap_closed": gap_closure(mb.energy_mae, r.metrics.energy_mae, mt.energy_mae),
                            "force_gap_closed": gap_closure(mb.force_mae, r.metrics.force_mae, mt.force_mae),
                            "baseline": mb,
                            "teacher": mt,
                        }),
                    );
                }
                dir.write_json("gap_closure.json", &gaps)?;
            }
        }
        Command::Cka { data, teacher, student, baseline, .. } => {
            let data = load_data(data)?;
            let (t, s) = (load_model(teacher)?, load_model(student)?);
            let probe = probe_systems(data.split(cfg.analysis.probe_split), cfg.analysis.probe_size, cfg.analysis.probe_seed);
            let tt = parse_taps(&cfg.analysis.taps_teacher, &t)?;
            let ts = parse_taps(&cfg.analysis.taps_student, &s)?;
            let m = cka_matrix(&t, &s, &probe, &tt, &ts)?;
            dir.write_json("cka.json", &m)?;
            if let Some(b) = baseline {
                let b = load_model(b)?;
                let base = cka_matrix(&t, &b, &probe, &tt, &ts)?;
                dir.write_json("cka_baseline.json", &base)?;
                dir.write_json("cka_gain.json", &cka_gain(&m, &base)?)?;
            }
        }
        Command::Augment { data, teacher, student, .. } => {
            let data = load_data(data)?;
            let teacher = load_model(teacher)?;
            let mut source = data.split(cfg.augment.source_split).to_vec();
            if let Some(n) = cfg.augment.max_systems {
                source.truncate(n);
            }
            let out = match cfg.augment.kind {
                AugmentKind::Rattle => {
                    let student = student.as_deref().map(load_model).transpose()?;
                    if cfg.augment.rattle.mode == RattleMode::Adversarial && student.is_none() {
                        return Err(CliError::Config("adversarial rattling needs --student".into()));
                    }
                    let mut all = Vec::new();
                    for c in 0..cfg.augment.copies {
                        let models = student.as_ref().map(|s| (s, &teacher));
                        all.extend(rattle_all(&source, &cfg.augment.rattle, models, stream_seed(cfg.seed, &[c as u64]))?);
                    }
                    teacher_label(&all, &teacher)?
                }
                AugmentKind::Trajectories => {
                    let unl: Vec<_> = source.iter().map(|s| s.unlabeled()).collect();
                    generate_trajectories(&teacher, &unl, &cfg.augment.relaxation, &mut rng_from_seed(cfg.seed))?
                }
            };
            let split = DatasetSplit::from_train(out, cfg.seed);
            write_dataset(&split, dir.file("synthetic.jsonl"))?;
        }
        Command::Profile { data, checkpoint, .. } => {
            let data = load_data(data)?;
            let systems = data.split(cfg.analysis.probe_split);
            let mut out = Vec::new();
            for p in checkpoint {
                let m = load_model(p)?;
                let t = profile_throughput(&m, systems, cfg.analysis.repetitions)?;
                out.push(serde_json::json!({
                    "checkpoint": p.display().to_string(),
                    "family": m.family().to_string(),
                    "architecture_hash": m.architecture_hash(),
                    "throughput": t,
                }));
            }
            dir.write_json("throughput.json", &out)?;
        }
    }
    Ok(())
}

trait ParseSplit {
    fn parse_split(&self) -> SplitName;
}

impl ParseSplit for String {
    fn parse_split(&self) -> SplitName {
        SplitName::ALL.into_iter().find(|s| s.as_str() == self).unwrap_or(SplitName::Test)
    }
}

/// Runs one command and returns its run directory.
pub fn run(cli: &Cli) -> CliResult<PathBuf> {
    let cmd = &cli.command;
    let common = cmd.common();
    let cfg = load_config(common.config.as_deref(), &common.set)?;
    let inputs = cmd
        .inputs()
        .into_iter()
        .map(|(k, p)| Ok((k.to_string(), p.display().to_string(), file_hash(p)?)))
        .collect::<CliResult<Vec<_>>>()?;

    let mut h = Sha256::new();
    h.update(cmd.name().as_bytes());
    h.update(serde_json::to_vec(&cfg).expect("config serializes"));
    for (k, _, hash) in &inputs {
        h.update(k.as_bytes());
        h.update(hash.as_bytes());
    }
    let key = hex::encode(h.finalize());
    let root = common
        .run_root
        .clone()
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let path = root.join(format!("{}-{}", cmd.name(), &key[..16]));
    std::fs::create_dir_all(&path).map_err(Error::from)?;
    let mut dir = RunDir { path, outputs: Vec::new() };
    dir.write_json("config.json", &cfg)?;

    execute(cmd, &cfg, &mut dir)?;

    let mut outputs = BTreeMap::new();
    for name in &dir.outputs {
        outputs.insert(name.clone(), file_hash(&dir.path.join(name))?);
    }
    if let Ok(split) = read_dataset(dir.path.join("dataset.jsonl")) {
        outputs.insert("dataset_hash".into(), dataset_hash(&split));
    }
    let manifest = Manifest { subcommand: cmd.name().into(), config_hash: cfg.hash(), inputs, outputs };
    std::fs::write(dir.path.join("manifest.json"), serde_json::to_string_pretty(&manifest).map_err(Error::from)?).map_err(Error::from)?;
    Ok(dir.path)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
