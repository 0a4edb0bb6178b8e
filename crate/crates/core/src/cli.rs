//! Command implementations behind the `seqal` binary.
//!
//! Exit codes: 0 success, 2 configuration, 3 runtime, 4 missing run artifacts.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    generate_synthetic, parse_conll, serialize_conll, Corpus, CorpusError, LabelScheme, SynthSpec,
};
use crate::experiment::{
    self, checkpoint_name, ExperimentConfig, ExperimentError, RoundObserver, RoundOutcome,
    RoundRecord,
};
use crate::model::Tagger;
use crate::report;
use crate::stratified::{Selection, SelectionEntry};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("missing run artifact: {0}")]
    MissingArtifact(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::MissingArtifact(_) => 4,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::ConfigInvalid(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Writes through a temporary file so readers never see half a file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Exclusive hold on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(".lock");
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                CliError::Runtime(format!("{} is locked by another process ({e})", dir.display()))
            })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Where a run gets its corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Directory holding `train.conll`, `val.conll` and `test.conll`.
    Dir(PathBuf),
    Synthetic(SynthSpec),
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Parses a config file; relative corpus paths resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let CorpusSource::Dir(dir) = &mut config.corpus {
            if dir.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *dir = base.join(&*dir);
            }
            *dir = dir
                .canonicalize()
                .map_err(|e| CliError::Config(format!("corpus {}: {e}", dir.display())))?;
        }
        Ok(config)
    }

    pub fn corpus(&self) -> Result<Corpus, CliError> {
        let scheme = LabelScheme::for_task(self.experiment.task);
        match &self.corpus {
            CorpusSource::Synthetic(spec) => {
                if spec.task != self.experiment.task {
                    return Err(CliError::Config("synthetic spec task differs from experiment task".into()));
                }
                generate_synthetic(spec).map_err(|e| CliError::Config(e.to_string()))
            }
            CorpusSource::Dir(dir) => read_corpus_dir(dir, scheme),
        }
    }
}

pub fn read_corpus_dir(dir: &Path, scheme: LabelScheme) -> Result<Corpus, CliError> {
    let mut splits = Vec::with_capacity(3);
    let mut next_id = 0;
    for name in SPLITS {
        let path = dir.join(format!("{name}.conll"));
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let blocks = parse_conll(&text, &scheme, next_id)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        next_id += blocks.len();
        splits.push(blocks);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Corpus::new(scheme, train, val, test).map_err(|e| CliError::Config(e.to_string()))
}

/// SHA-256 over the serialized splits.
pub fn corpus_fingerprint(corpus: &Corpus) -> String {
    let mut hasher = Sha256::new();
    for (name, blocks) in SPLITS.iter().zip([&corpus.train, &corpus.val, &corpus.test]) {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(serialize_conll(blocks, &corpus.scheme).as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

pub fn cmd_generate(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::Config(format!("InvalidSpec: {}: {e}", spec_path.display())))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(CorpusError::InvalidSpec(e.to_string()).to_string()))?;
    let corpus = generate_synthetic(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    let _lock = DirLock::acquire(out)?;
    for (name, blocks) in SPLITS.iter().zip([&corpus.train, &corpus.val, &corpus.test]) {
        write_atomic(
            &out.join(format!("{name}.conll")),
            serialize_conll(blocks, &corpus.scheme).as_bytes(),
        )?;
    }
    write_atomic(&out.join("spec.json"), &to_json(&spec))?;
    log::info!("{}", crate::corpus::describe(&corpus));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub corpus_fingerprint: String,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub checkpoints: Vec<String>,
}

/// Per-round acquisition log, enough to rebuild the labeled set and the
/// selection snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionLog {
    pub round: usize,
    pub budget: usize,
    pub quotas: BTreeMap<usize, usize>,
    pub entries: Vec<SelectionEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub clusters: BTreeMap<usize, usize>,
}

impl SelectionLog {
    fn new(round: usize, selection: &Selection) -> Self {
        Self {
            round,
            budget: selection.entries.len(),
            quotas: selection.quotas.clone(),
            entries: selection.entries.clone(),
            clusters: selection.clusters.iter().map(|(&k, &v)| (k, v)).collect(),
        }
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.id).collect()
    }
}

pub fn selection_path(round: usize) -> String {
    format!("selections/round_{round}.json")
}

pub fn embeddings_path(round: usize) -> String {
    format!("embeddings/round_{round}.csv")
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Persists each round as it completes.
struct RunWriter<'a> {
    dir: &'a Path,
    strategy: String,
    train_size: usize,
    verbose: bool,
    manifest: RunManifest,
    records: Vec<RoundRecord>,
    timings: String,
}

impl RunWriter<'_> {
    fn write(&self, rel: &str, contents: &[u8]) -> Result<(), ExperimentError> {
        write_atomic(&self.dir.join(rel), contents).map_err(|e| ExperimentError::Observer(e.to_string()))
    }

    fn save_manifest(&self) -> Result<(), ExperimentError> {
        self.write("manifest.json", &to_json(&self.manifest))
    }
}

impl RoundObserver for RunWriter<'_> {
    fn on_init(&mut self, tagger: &Tagger) -> Result<(), ExperimentError> {
        let name = checkpoint_name(0);
        self.write(&name, tagger.to_checkpoint().as_bytes())?;
        self.manifest.checkpoints.push(name);
        self.save_manifest()
    }

    fn on_round(&mut self, o: &RoundOutcome) -> Result<(), ExperimentError> {
        let r = o.record.round;
        // The checkpoint and logs go first; rounds.csv marks the round done.
        self.write(&o.record.checkpoint, o.tagger.to_checkpoint().as_bytes())?;
        self.write(&selection_path(r), &to_json(&SelectionLog::new(r, o.selection)))?;
        if let Some(snapshot) = o.snapshot {
            self.write(&embeddings_path(r), snapshot.to_csv().as_bytes())?;
        }
        if self.verbose {
            let mut csv = String::from("id,score\n");
            for s in &o.selection.scores {
                csv.push_str(&format!("{},{:?}\n", s.id, s.score));
            }
            self.write(&format!("scores/round_{r}.csv"), csv.as_bytes())?;
        }
        self.records.push(o.record.clone());
        let curves = report::emit_curves(&self.records, &self.strategy, self.train_size, None);
        self.write("rounds.csv", curves.as_bytes())?;
        self.timings
            .push_str(&format!("{r},{:.3}\n", o.wall_time.as_secs_f64()));
        self.write("timings.csv", self.timings.as_bytes())?;
        self.manifest.checkpoints.push(o.record.checkpoint.clone());
        self.save_manifest()
    }
}

pub fn cmd_run(config_path: &Path, out: &Path, verbose: bool) -> Result<Vec<RoundRecord>, CliError> {
    let config = RunConfig::load(config_path)?;
    let corpus = config.corpus()?;
    config.experiment.validate(corpus.train.len())?;
    let _lock = DirLock::acquire(out)?;
    write_atomic(&out.join("config.json"), &to_json(&config))?;
    let mut writer = RunWriter {
        dir: out,
        strategy: config.experiment.strategy.name().to_string(),
        train_size: corpus.train.len(),
        verbose,
        manifest: RunManifest {
            config: config.clone(),
            corpus_fingerprint: corpus_fingerprint(&corpus),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: None,
            checkpoints: Vec::new(),
        },
        records: Vec::new(),
        timings: String::from("round,wall_seconds\n"),
    };
    let records = experiment::run_experiment_with(&corpus, &config.experiment, &mut writer)?;
    writer.manifest.finished_at = Some(now());
    writer.save_manifest()?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub token_accuracy: f64,
    pub val_f1: f64,
    pub n_labeled: usize,
    pub epochs: usize,
}

pub fn cmd_baseline(config_path: &Path, out: &Path) -> Result<BaselineMetrics, CliError> {
    let config = RunConfig::load(config_path)?;
    let corpus = config.corpus()?;
    config.experiment.validate(corpus.train.len())?;
    let _lock = DirLock::acquire(out)?;
    write_atomic(&out.join("config.json"), &to_json(&config))?;
    let passive = experiment::run_passive(&corpus, &config.experiment)?;
    let metrics = BaselineMetrics {
        precision: passive.test.precision,
        recall: passive.test.recall,
        f1: passive.test.f1,
        token_accuracy: passive.test.token_accuracy,
        val_f1: passive.val_f1,
        n_labeled: corpus.train.len(),
        epochs: config.experiment.rounds * config.experiment.train_config().epochs_per_round,
    };
    write_atomic(&out.join("metrics.json"), &to_json(&metrics))?;
    write_atomic(
        &out.join("checkpoints/passive.params"),
        passive.tagger.to_checkpoint().as_bytes(),
    )?;
    Ok(metrics)
}

fn read_artifact(dir: &Path, rel: &str) -> Result<String, CliError> {
    let path = dir.join(rel);
    fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact(path.display().to_string()))
}

fn load_checkpoint(dir: &Path, round: usize) -> Result<Tagger, CliError> {
    let text = read_artifact(dir, &checkpoint_name(round))?;
    Tagger::from_checkpoint(&text).map_err(|e| CliError::Runtime(format!("round {round} checkpoint: {e}")))
}

/// Rebuilds `rounds.csv` (and snapshots, when the run emitted them) from the
/// checkpoints and selection logs of a run directory. Returns the number of
/// rounds found.
pub fn cmd_report(run: &Path) -> Result<usize, CliError> {
    let config_text = read_artifact(run, "config.json")?;
    let config: RunConfig = serde_json::from_str(&config_text)
        .map_err(|e| CliError::Config(format!("config.json: {e}")))?;
    let mut logs = Vec::new();
    while run.join(selection_path(logs.len() + 1)).exists() {
        let r = logs.len() + 1;
        let text = read_artifact(run, &selection_path(r))?;
        let log: SelectionLog = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", selection_path(r))))?;
        logs.push(log);
    }
    if logs.is_empty() {
        return Err(CliError::MissingArtifact(run.join(selection_path(1)).display().to_string()));
    }
    let corpus = config.corpus()?;
    if let Ok(text) = fs::read_to_string(run.join("manifest.json")) {
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("manifest.json: {e}")))?;
        if manifest.corpus_fingerprint != corpus_fingerprint(&corpus) {
            return Err(CliError::Runtime("corpus fingerprint differs from the run's manifest".into()));
        }
    }
    let _lock = DirLock::acquire(run)?;

    let mut records = Vec::with_capacity(logs.len());
    let mut labeled: HashSet<usize> = HashSet::new();
    let mut snapshot_model = load_checkpoint(run, 0)?;
    for log in &logs {
        let trained = load_checkpoint(run, log.round)?;
        if config.experiment.emit_embeddings {
            let selection = Selection {
                entries: log.entries.clone(),
                quotas: log.quotas.clone(),
                scores: Vec::new(),
                clusters: log.clusters.iter().map(|(&k, &v)| (k, v)).collect(),
            };
            let snapshot = experiment::round_snapshot(&corpus, &snapshot_model, &labeled, &selection, log.round)?;
            write_atomic(&run.join(embeddings_path(log.round)), snapshot.to_csv().as_bytes())?;
        }
        labeled.extend(log.ids());
        records.push(experiment::evaluate_round(&corpus, &trained, log.round, log.ids(), labeled.len())?);
        snapshot_model = trained;
    }
    let curves = report::emit_curves(
        &records,
        config.experiment.strategy.name(),
        corpus.train.len(),
        None,
    );
    write_atomic(&run.join("rounds.csv"), curves.as_bytes())?;
    Ok(records.len())
}
