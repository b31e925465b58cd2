//! The four-experiment matrix, per-seed runs with checkpoints and curve
//! logs, aggregation into the results file, and the reproducibility
//! package.
//!
//! Run directory layout under `--out-dir`:
//!
//! ```text
//! runs/<experiment>/seed-<seed>/
//!     checkpoint.bin   final weights (see `checkpoint`)
//!     curve.jsonl      one `StepRecord` per optimizer step
//!     report.json      full `EvalReport`
//!     record.json      `RunRecord`; written last, marks the run complete
//! results.json         `ResultsFile`
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint};
use crate::evaluation::{
    aggregate, eval_a, eval_b, evaluate, EvalReport, EvalSetup, ExperimentAggregate, Protocol, Summary,
    EVAL_B_POSITIONS,
};
use crate::model::{Model, ModelConfig};
use crate::rendering::{Family, PositionRange, TemplateRegistry};
use crate::task_data::{split, SplitSpec, MODULUS};
use crate::tokenizer::Vocabulary;
use crate::training::{self, BatchAccounting, CurriculumSchedule, StepRecord, TemplatePlan, TrainConfig};

pub const SEEDS: [u64; 3] = [42, 43, 44];
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("{id} seed {seed}: {stage} stage failed: {message}")]
    Stage {
        id: String,
        seed: u64,
        stage: Stage,
        message: String,
    },
    #[error("run directory {0} is locked by another process (remove `.lock` if stale)")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("missing runs: {}", .0.join(", "))]
    MissingRuns(Vec<String>),
    #[error("results schema: {0}")]
    Schema(String),
    #[error("package verification failed: {0}")]
    Verify(String),
    #[error("unknown experiment `{0}` (custom specs need the explicit escape hatch)")]
    UnknownExperiment(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Split,
    Train,
    Checkpoint,
    Evaluate,
    Persist,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Checkpoint => "checkpoint",
            Stage::Evaluate => "evaluate",
            Stage::Persist => "persist",
        };
        f.write_str(s)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunnerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RunnerError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Smoke,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Full => "full",
            Scale::Smoke => "smoke",
        }
    }
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Scale::Full),
            "smoke" => Ok(Scale::Smoke),
            _ => Err(format!("unknown scale `{s}` (expected full or smoke)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "baseline-001")]
    Baseline001,
    #[serde(rename = "i1-001-1")]
    I1_001_1,
    #[serde(rename = "i1-002a")]
    I1002a,
    #[serde(rename = "i1-002-alibi")]
    I1002Alibi,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 4] = [
        ExperimentId::Baseline001,
        ExperimentId::I1_001_1,
        ExperimentId::I1002a,
        ExperimentId::I1002Alibi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Baseline001 => "baseline-001",
            ExperimentId::I1_001_1 => "i1-001-1",
            ExperimentId::I1002a => "i1-002a",
            ExperimentId::I1002Alibi => "i1-002-alibi",
        }
    }

    /// The matrix entry at the given scale.
    ///
    /// * baseline-001: `{a}+{b}=` at position 0, K = 1, no consistency term.
    /// * i1-001-1: the bare format shifted by the curriculum, K = 4, lambda = 1.
    /// * i1-002a: curriculum, 40/40/20 template mixture, anchors, K = 4, lambda = 1.
    /// * i1-002-alibi: i1-002a with distance-biased attention instead of
    ///   learned positions.
    pub fn spec(self, scale: Scale) -> ExperimentSpec {
        let (steps, batch_size, protocol) = match scale {
            Scale::Full => (training::PAPER_STEPS, 256, Protocol::full()),
            Scale::Smoke => (1500, 128, Protocol::smoke()),
        };
        let steered = |templates, anchored| TrainConfig {
            steps,
            batch_size,
            accounting: BatchAccounting::Sequences,
            k: 4,
            lambda: 1.0,
            curriculum: CurriculumSchedule::standard(steps),
            templates,
            anchored,
            optimizer: Default::default(),
            snapshot_every: 250,
        };
        let full_mix = TemplatePlan::Families(vec![
            (Family::Padding, 0.4),
            (Family::Natural, 0.4),
            (Family::Mixed, 0.2),
        ]);
        let (model, train) = match self {
            ExperimentId::Baseline001 => (
                ModelConfig::default(),
                TrainConfig {
                    k: 1,
                    lambda: 0.0,
                    curriculum: CurriculumSchedule::constant(steps, PositionRange::fixed(0)),
                    ..steered(TemplatePlan::Single("bare".into()), false)
                },
            ),
            ExperimentId::I1_001_1 => (ModelConfig::default(), steered(TemplatePlan::Single("bare".into()), false)),
            ExperimentId::I1002a => (ModelConfig::default(), steered(full_mix, true)),
            ExperimentId::I1002Alibi => (ModelConfig::alibi(), steered(full_mix, true)),
        };
        ExperimentSpec {
            id: self.as_str().to_string(),
            custom: false,
            scale,
            model,
            train,
            protocol,
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = RunnerError;
    fn from_str(s: &str) -> Result<Self, RunnerError> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| RunnerError::UnknownExperiment(s.to_string()))
    }
}

/// Everything needed to train and evaluate one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    /// False only for the four matrix entries built by [`ExperimentId::spec`].
    pub custom: bool,
    pub scale: Scale,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: Protocol,
}

impl ExperimentSpec {
    /// Escape hatch for configurations outside the matrix. The id gets a
    /// `custom-` prefix so results can never be mistaken for a matrix entry.
    pub fn custom(name: &str, scale: Scale, model: ModelConfig, train: TrainConfig, protocol: Protocol) -> Self {
        Self {
            id: format!("custom-{name}"),
            custom: true,
            scale,
            model,
            train,
            protocol,
        }
    }

    /// Loads a spec file. Non-custom specs must equal their matrix entry.
    pub fn from_json(text: &str, allow_custom: bool) -> Result<Self, RunnerError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| RunnerError::Schema(e.to_string()))?;
        if spec.custom {
            if !allow_custom {
                return Err(RunnerError::UnknownExperiment(spec.id));
            }
            if !spec.id.starts_with("custom-") {
                return Err(RunnerError::Schema("custom spec ids must start with `custom-`".into()));
            }
        } else if ExperimentId::from_str(&spec.id)?.spec(spec.scale) != spec {
            return Err(RunnerError::Schema(format!(
                "`{}` differs from the matrix entry; mark it custom",
                spec.id
            )));
        }
        Ok(spec)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("serializable"))
    }

    pub fn setup(&self, registry: &TemplateRegistry) -> Result<EvalSetup, RunnerError> {
        EvalSetup::for_config(&self.train, registry).map_err(|e| RunnerError::Schema(e.to_string()))
    }
}

/// Vocabulary and template registry shared by every run.
#[derive(Clone, Debug)]
pub struct Assets {
    pub vocab: Vocabulary,
    pub registry: TemplateRegistry,
}

impl Assets {
    pub fn builtin() -> Self {
        Self {
            vocab: Vocabulary::builtin(),
            registry: TemplateRegistry::builtin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub seed: u64,
    pub scale: Scale,
    /// Paths relative to the run directory.
    pub checkpoint: String,
    pub curve_log: String,
    pub report: EvalReport,
    pub config_hash: String,
    pub model_config_hash: String,
    pub vocab_hash: String,
    pub registry_hash: String,
    pub checkpoint_hash: String,
    pub curve_hash: String,
    pub wall_clock_secs: f64,
}

pub fn run_dir(out_dir: &Path, experiment: &str, seed: u64) -> PathBuf {
    out_dir.join("runs").join(experiment).join(format!("seed-{seed}"))
}

/// Exclusive ownership of a run directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, RunnerError> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunnerError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Reduced evaluation logged into the training curve.
pub fn snapshot_metrics(
    model: &Model,
    split: &SplitSpec,
    setup: &EvalSetup,
    assets: &Assets,
) -> Option<serde_json::Value> {
    let protocol = Protocol::snapshot();
    let a = eval_a(model, split, setup, &protocol, &assets.vocab).ok()?;
    let b = eval_b(model, setup, &protocol, &assets.vocab, split.p).ok()?;
    let by_position: BTreeMap<usize, f64> = b.iter().map(|(&p, acc)| (p, acc.percent())).collect();
    let overall = by_position.values().sum::<f64>() / by_position.len() as f64;
    Some(serde_json::json!({
        "eval_a": a.percent(),
        "eval_b_overall": overall,
        "eval_b_by_position": by_position,
    }))
}

/// Splits, trains, evaluates, and persists one (experiment, seed).
pub fn run_experiment(spec: &ExperimentSpec, seed: u64, out_dir: &Path, assets: &Assets) -> Result<RunRecord, RunnerError> {
    let started = Instant::now();
    let dir = run_dir(out_dir, &spec.id, seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let _lock = RunLock::acquire(&dir)?;
    let fail = |stage, message: String| RunnerError::Stage {
        id: spec.id.clone(),
        seed,
        stage,
        message,
    };
    // A stale record from an interrupted rerun must not look complete.
    let record_path = dir.join("record.json");
    if record_path.exists() {
        fs::remove_file(&record_path).map_err(io_err(&record_path))?;
    }

    let split = split(seed, MODULUS).map_err(|e| fail(Stage::Split, e.to_string()))?;
    let setup = spec.setup(&assets.registry).map_err(|e| fail(Stage::Train, e.to_string()))?;

    log::info!("{} seed {seed}: training {} steps", spec.id, spec.train.steps);
    let mut model = Model::init(spec.model.clone(), seed).map_err(|e| fail(Stage::Train, e.to_string()))?;
    let curve = training::train(
        &mut model,
        &spec.train,
        &split.train,
        &assets.registry,
        &assets.vocab,
        seed,
        |_, m| snapshot_metrics(m, &split, &setup, assets),
    )
    .map_err(|e| fail(Stage::Train, e.to_string()))?;

    let curve_path = dir.join("curve.jsonl");
    write_curve(&curve_path, &curve).map_err(|e| fail(Stage::Persist, e.to_string()))?;

    let ck = Checkpoint {
        model,
        step: spec.train.steps,
        vocab_hash: assets.vocab.hash(),
        registry_hash: assets.registry.hash(),
    };
    let ck_bytes = ck.encode();
    let ck_path = dir.join("checkpoint.bin");
    fs::write(&ck_path, &ck_bytes).map_err(|e| fail(Stage::Checkpoint, e.to_string()))?;

    log::info!("{} seed {seed}: evaluating", spec.id);
    let report = evaluate(
        &ck.model,
        &spec.id,
        seed,
        &split,
        &setup,
        &spec.protocol,
        &assets.registry,
        &assets.vocab,
    )
    .map_err(|e| fail(Stage::Evaluate, e.to_string()))?;
    write_json(&dir.join("report.json"), &report)?;

    let curve_bytes = fs::read(&curve_path).map_err(io_err(&curve_path))?;
    let record = RunRecord {
        experiment: spec.id.clone(),
        seed,
        scale: spec.scale,
        checkpoint: "checkpoint.bin".into(),
        curve_log: "curve.jsonl".into(),
        report,
        config_hash: spec.hash(),
        model_config_hash: checkpoint::config_hash(&spec.model),
        vocab_hash: assets.vocab.hash(),
        registry_hash: assets.registry.hash(),
        checkpoint_hash: sha256_hex(&ck_bytes),
        curve_hash: sha256_hex(&curve_bytes),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&record_path, &record)?;
    Ok(record)
}

fn write_curve(path: &Path, curve: &[StepRecord]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in curve {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_curve(path: &Path) -> Result<Vec<StepRecord>, RunnerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| RunnerError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// A previously completed run whose spec hash still matches.
pub fn existing_record(spec: &ExperimentSpec, seed: u64, out_dir: &Path) -> Option<RunRecord> {
    let path = run_dir(out_dir, &spec.id, seed).join("record.json");
    let record: RunRecord = read_json(&path).ok()?;
    (record.config_hash == spec.hash()).then_some(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub experiment: String,
    pub eval_a: Summary,
    pub eval_b_overall: Summary,
    pub eval_c0: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_c1: Option<Summary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_correct_4: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub experiment: String,
    /// Aligned with `Table2::positions`.
    pub by_position: Vec<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2 {
    pub positions: Vec<usize>,
    pub rows: Vec<Table2Row>,
}

/// The aggregated results file. `experiments` is the primary data;
/// `table1` and `table2` repeat it in the published row/column layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub scale: Scale,
    pub seeds: Vec<u64>,
    pub complete: bool,
    #[serde(default)]
    pub missing: Vec<String>,
    pub experiments: BTreeMap<String, ExperimentAggregate>,
    pub table1: Vec<Table1Row>,
    pub table2: Table2,
}

impl ResultsFile {
    pub fn build(scale: Scale, seeds: &[u64], experiments: BTreeMap<String, ExperimentAggregate>, missing: Vec<String>) -> Self {
        let table1 = experiments
            .iter()
            .map(|(id, e)| Table1Row {
                experiment: id.clone(),
                eval_a: e.metrics.eval_a.clone(),
                eval_b_overall: e.metrics.eval_b_overall.clone(),
                eval_c0: e.metrics.eval_c0.clone(),
                eval_c1: e.metrics.eval_c1.clone(),
                consistency_correct_4: e.metrics.consistency_correct_4.clone(),
            })
            .collect();
        let rows = experiments
            .iter()
            .map(|(id, e)| Table2Row {
                experiment: id.clone(),
                by_position: e.metrics.eval_b_by_position.values().cloned().collect(),
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            scale,
            seeds: seeds.to_vec(),
            complete: missing.is_empty(),
            missing,
            experiments,
            table1,
            table2: Table2 {
                positions: EVAL_B_POSITIONS.to_vec(),
                rows,
            },
        }
    }

    /// Parses and validates; errors name the offending field.
    pub fn parse(text: &str) -> Result<Self, RunnerError> {
        let results: Self = serde_json::from_str(text).map_err(|e| RunnerError::Schema(e.to_string()))?;
        results.validate()?;
        Ok(results)
    }

    /// Structural checks beyond the serde schema: every summary is the
    /// mean of its per-seed values and the tables mirror `experiments`.
    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |field: String, msg: &str| Err(RunnerError::Schema(format!("{field}: {msg}")));
        if self.schema_version != SCHEMA_VERSION {
            return bad("schema_version".into(), "unsupported");
        }
        if self.complete != self.missing.is_empty() {
            return bad("complete".into(), "disagrees with `missing`");
        }
        let check = |field: String, s: &Summary, n: usize| -> Result<(), RunnerError> {
            if s.per_seed.len() != n {
                return bad(field, "per_seed length differs from the experiment's seeds");
            }
            let expected = Summary::of(&s.per_seed);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
            let std_ok = match (s.std, expected.std) {
                (Some(a), Some(b)) => close(a, b),
                (None, None) => true,
                _ => false,
            };
            if !close(s.mean, expected.mean) || !std_ok {
                return bad(field, "mean/std do not match per_seed");
            }
            Ok(())
        };
        for (id, e) in &self.experiments {
            let n = e.seeds.len();
            if n == 0 {
                return bad(format!("experiments.{id}.seeds"), "empty");
            }
            let m = &e.metrics;
            let f = |name: &str| format!("experiments.{id}.metrics.{name}");
            check(f("eval_a"), &m.eval_a, n)?;
            check(f("eval_b_overall"), &m.eval_b_overall, n)?;
            check(f("eval_c0"), &m.eval_c0, n)?;
            if let Some(s) = &m.eval_c1 {
                check(f("eval_c1"), s, n)?;
            }
            if let Some(s) = &m.consistency_correct_4 {
                check(f("consistency_correct_4"), s, n)?;
            }
            if m.eval_b_by_position.keys().copied().collect::<Vec<_>>() != EVAL_B_POSITIONS {
                return bad(f("eval_b_by_position"), "positions differ from the protocol");
            }
            for (pos, s) in &m.eval_b_by_position {
                check(format!("{}.{pos}", f("eval_b_by_position")), s, n)?;
            }
        }
        let mirror = Self::build(self.scale, &self.seeds, self.experiments.clone(), self.missing.clone());
        if mirror.table1 != self.table1 {
            return bad("table1".into(), "does not mirror `experiments`");
        }
        if mirror.table2 != self.table2 {
            return bad("table2".into(), "does not mirror `experiments`");
        }
        Ok(())
    }
}

/// Runs (or reuses) every (experiment, seed) and writes `results.json`.
/// Failed runs are logged and listed in `missing`; the file is still
/// written so partial progress is visible.
pub fn reproduce_all(
    out_dir: &Path,
    specs: &[ExperimentSpec],
    seeds: &[u64],
    assets: &Assets,
) -> Result<ResultsFile, RunnerError> {
    let scale = specs.first().map_or(Scale::Full, |s| s.scale);
    let mut experiments = BTreeMap::new();
    let mut missing = Vec::new();
    for spec in specs {
        let mut reports = Vec::new();
        for &seed in seeds {
            let record = match existing_record(spec, seed, out_dir) {
                Some(r) => {
                    log::info!("{} seed {seed}: reusing completed run", spec.id);
                    Ok(r)
                }
                None => run_experiment(spec, seed, out_dir, assets),
            };
            match record {
                Ok(r) => reports.push(r.report),
                Err(e) => {
                    log::error!("{e}");
                    missing.push(format!("{}/seed-{seed}", spec.id));
                }
            }
        }
        if !reports.is_empty() {
            let agg = aggregate(&reports).map_err(|e| RunnerError::Schema(e.to_string()))?;
            experiments.insert(spec.id.clone(), agg);
        }
    }
    let results = ResultsFile::build(scale, seeds, experiments, missing);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_json(&out_dir.join("results.json"), &results)?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package_version: String,
    pub os: String,
    pub arch: String,
    pub family: String,
    pub cpus: usize,
    pub float: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            family: std::env::consts::FAMILY.to_string(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            float: "f32".to_string(),
        }
    }
}

/// File inventory of a package: relative path to SHA-256.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub scale: Scale,
    pub runs: Vec<String>,
    pub files: BTreeMap<String, String>,
}

const RUN_FILES: [&str; 4] = ["record.json", "report.json", "curve.jsonl", "checkpoint.bin"];

/// Copies configs, assets, every run, the results file, and an environment
/// fingerprint into `dest`, then writes `manifest.json` and re-verifies.
pub fn export_reproducibility_package(
    out_dir: &Path,
    dest: &Path,
    specs: &[ExperimentSpec],
    seeds: &[u64],
    assets: &Assets,
) -> Result<Manifest, RunnerError> {
    let results_path = out_dir.join("results.json");
    let text = fs::read_to_string(&results_path).map_err(io_err(&results_path))?;
    let results = ResultsFile::parse(&text)?;
    let mut gaps = results.missing.clone();
    for spec in specs {
        for &seed in seeds {
            let dir = run_dir(out_dir, &spec.id, seed);
            let name = format!("{}/seed-{seed}", spec.id);
            if RUN_FILES.iter().any(|f| !dir.join(f).is_file()) && !gaps.contains(&name) {
                gaps.push(name);
            }
        }
    }
    if !gaps.is_empty() {
        return Err(RunnerError::MissingRuns(gaps));
    }

    let mut files = BTreeMap::new();
    let mut put = |rel: String, bytes: &[u8]| -> Result<(), RunnerError> {
        let path = dest.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        files.insert(rel, sha256_hex(bytes));
        Ok(())
    };
    put("assets/vocab.tsv".into(), assets.vocab.to_text().as_bytes())?;
    put("assets/templates.txt".into(), assets.registry.source().as_bytes())?;
    put("results.json".into(), text.as_bytes())?;
    let env = serde_json::to_string_pretty(&Environment::current()).expect("serializable");
    put("environment.json".into(), env.as_bytes())?;
    let mut runs = Vec::new();
    for spec in specs {
        let cfg = serde_json::to_string_pretty(spec).expect("serializable");
        put(format!("configs/{}.json", spec.id), cfg.as_bytes())?;
        for &seed in seeds {
            let src = run_dir(out_dir, &spec.id, seed);
            let rel = format!("runs/{}/seed-{seed}", spec.id);
            for f in RUN_FILES {
                let path = src.join(f);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                put(format!("{rel}/{f}"), &bytes)?;
            }
            runs.push(rel);
        }
    }
    let manifest = Manifest {
        version: SCHEMA_VERSION,
        scale: results.scale,
        runs,
        files,
    };
    write_json(&dest.join("manifest.json"), &manifest)?;
    verify_package(dest)
}

/// Re-hashes every file, checks run records against the bundled assets,
/// checkpoints, and curves, and checks that every aggregate value traces
/// to a per-run report.
pub fn verify_package(dir: &Path) -> Result<Manifest, RunnerError> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let fail = |msg: String| Err(RunnerError::Verify(msg));
    for (rel, hash) in &manifest.files {
        if rel.split('/').any(|c| c == ".." || c.is_empty()) || Path::new(rel).is_absolute() {
            return fail(format!("unsafe path `{rel}` in manifest"));
        }
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if &sha256_hex(&bytes) != hash {
            return fail(format!("{rel}: hash mismatch"));
        }
    }
    let hash_of = |rel: &str| {
        manifest
            .files
            .get(rel)
            .cloned()
            .ok_or_else(|| RunnerError::Verify(format!("`{rel}` missing from manifest")))
    };
    let vocab_hash = hash_of("assets/vocab.tsv")?;
    let registry_hash = hash_of("assets/templates.txt")?;
    let results_text = fs::read_to_string(dir.join("results.json")).map_err(io_err(dir))?;
    let results = ResultsFile::parse(&results_text)?;
    if !results.complete {
        return fail(format!("results are incomplete: {}", results.missing.join(", ")));
    }

    let mut reports: BTreeMap<(String, u64), EvalReport> = BTreeMap::new();
    for rel in &manifest.runs {
        let record: RunRecord = read_json(&dir.join(rel).join("record.json"))?;
        if record.vocab_hash != vocab_hash || record.registry_hash != registry_hash {
            return fail(format!("{rel}: record hashes do not match the bundled assets"));
        }
        if record.checkpoint_hash != hash_of(&format!("{rel}/checkpoint.bin"))? {
            return fail(format!("{rel}: checkpoint hash mismatch"));
        }
        if record.curve_hash != hash_of(&format!("{rel}/curve.jsonl"))? {
            return fail(format!("{rel}: curve log hash mismatch"));
        }
        let report: EvalReport = read_json(&dir.join(rel).join("report.json"))?;
        if report != record.report {
            return fail(format!("{rel}: report.json differs from the record"));
        }
        let ck = Checkpoint::load(&dir.join(rel).join("checkpoint.bin")).map_err(|e| RunnerError::Verify(format!("{rel}: {e}")))?;
        if ck.vocab_hash != vocab_hash || ck.registry_hash != registry_hash {
            return fail(format!("{rel}: checkpoint header hashes do not match the bundled assets"));
        }
        reports.insert((record.experiment.clone(), record.seed), record.report);
    }

    for (id, e) in &results.experiments {
        let m = &e.metrics;
        for (i, seed) in e.seeds.iter().enumerate() {
            let r = reports
                .get(&(id.clone(), *seed))
                .ok_or_else(|| RunnerError::Verify(format!("{id} seed {seed}: aggregate has no run")))?;
            let mut pairs = vec![
                ("eval_a", m.eval_a.per_seed[i], Some(r.eval_a)),
                ("eval_b_overall", m.eval_b_overall.per_seed[i], Some(r.eval_b_overall)),
                ("eval_c0", m.eval_c0.per_seed[i], Some(r.eval_c0)),
            ];
            if let Some(s) = &m.eval_c1 {
                pairs.push(("eval_c1", s.per_seed[i], r.eval_c1));
            }
            if let Some(s) = &m.consistency_correct_4 {
                pairs.push(("consistency_correct_4", s.per_seed[i], r.consistency_correct_4));
            }
            for (pos, s) in &m.eval_b_by_position {
                pairs.push(("eval_b_by_position", s.per_seed[i], r.eval_b_by_position.get(pos).copied()));
            }
            for (name, agg, raw) in pairs {
                if Some(agg) != raw {
                    return fail(format!("{id} seed {seed}: `{name}` does not trace to the run report"));
                }
            }
        }
    }
    Ok(manifest)
}
