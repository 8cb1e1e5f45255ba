//! End-to-end commands: annotate, evaluate, compare and replay.
//!
//! A run directory holds:
//!
//! ```text
//! run-manifest.json          config snapshot, version, seeds
//! transcripts/transcripts.jsonl
//! reports/                   written by evaluate
//! ```
//!
//! While annotating, finished transcripts are appended to
//! `transcripts/partial.jsonl`; a restarted run picks them up and only
//! annotates what is missing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Method, RunConfig};
use crate::datasets::{load_dataset_with, sample_instances, Dataset, DatasetError};
use crate::discussion::{majority_vote, DiscussionEngine, Vote};
use crate::domain::{AgentBackend, Outcome, Transcript};
use crate::metrics::{mcnemar, McNemarMethod, MetricsError};
use crate::prompting::TemplateSet;
use crate::providers::{
    build_backend, Agent, BackendMode, Gateway, ProviderError, ResponseCache, RetryPolicy,
};
use crate::report::{build_report, write_reports, MetricsReport, RunInput};
use crate::strategies::EngineError;

pub const MANIFEST_FILE: &str = "run-manifest.json";
pub const TRANSCRIPTS_DIR: &str = "transcripts";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const PARTIAL_FILE: &str = "partial.jsonl";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("instance ids differ between stores: {0}")]
    IdMismatch(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

impl RunError {
    /// Process exit code: 2 for configuration and input problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Dataset(_) => 2,
            RunError::Engine(EngineError::Config(_)) => 2,
            _ => 1,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub run: String,
    pub method: String,
    pub initial: String,
    pub dataset_name: String,
    pub instances: usize,
    pub sample_seed: u64,
    /// Seeds of simulated agents by agent id.
    pub agent_seeds: BTreeMap<String, u64>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotateSummary {
    pub out: PathBuf,
    pub instances: usize,
    pub failed: usize,
    /// Instances taken from an interrupted earlier run.
    pub resumed: usize,
    /// Requests that missed the cache and reached a backend.
    pub backend_calls: usize,
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn read_transcripts(path: &Path, tolerate_torn_tail: bool) -> Result<Vec<Transcript>, RunError> {
    let file = File::open(path).map_err(io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(t) => out.push(t),
            // A crash can leave half a line at the end of the partial file.
            Err(_) if tolerate_torn_tail => continue,
            Err(e) => {
                return Err(RunError::Corrupt {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

fn transcript_line(t: &Transcript) -> String {
    let mut s = serde_json::to_string(t).expect("transcripts serialize");
    s.push('\n');
    s
}

/// Builds the agents of a config; fails before any backend call when a
/// credential is missing.
pub fn build_agents(cfg: &RunConfig, mode: BackendMode) -> Result<Vec<Agent>, RunError> {
    cfg.agents
        .iter()
        .map(|p| {
            build_backend(p, mode, RetryPolicy::default())
                .map(|b| Agent::new(p.clone(), b))
                .map_err(|e| RunError::Config(ConfigError(e.to_string())))
        })
        .collect()
}

/// Runs the configured strategy or discussion over the sampled instances.
pub fn annotate(cfg: &RunConfig, mode: BackendMode) -> Result<AnnotateSummary, RunError> {
    cfg.validate()?;
    let dataset = load_dataset_with(&cfg.dataset, &cfg.guideline, cfg.task.as_deref())?;
    let sample = sample_instances(&dataset.instances, cfg.n, cfg.seed);
    let templates = match &cfg.templates {
        Some(dir) => TemplateSet::load_dir(dir).map_err(|e| ConfigError(e.to_string()))?,
        None => TemplateSet::default(),
    };
    let group = build_agents(cfg, mode)?;
    let dcfg = cfg.discussion_config(group);
    dcfg.validate().map_err(|e| ConfigError(e.to_string()))?;

    let cache = ResponseCache::open(&cfg.cache_dir)?;
    let gateway = Gateway::new(Some(cache));
    let engine = DiscussionEngine::new(&gateway, &templates);

    let tdir = cfg.out.join(TRANSCRIPTS_DIR);
    fs::create_dir_all(&tdir).map_err(io(&tdir))?;
    let partial_path = tdir.join(PARTIAL_FILE);
    let wanted: HashSet<&str> = sample.iter().map(|i| i.id.as_str()).collect();
    let mut done: HashMap<String, Transcript> = HashMap::new();
    if partial_path.exists() {
        let mut clean = String::new();
        for t in read_transcripts(&partial_path, true)? {
            if wanted.contains(t.instance_id.as_str()) {
                clean.push_str(&transcript_line(&t));
                done.insert(t.instance_id.clone(), t);
            }
        }
        // Drop a torn tail so appends start on a fresh line.
        fs::write(&partial_path, clean).map_err(io(&partial_path))?;
    }
    let resumed = done.len();

    let partial = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&partial_path)
        .map_err(io(&partial_path))?;
    let writer = Mutex::new(partial);
    let todo: Vec<_> = sample.iter().filter(|i| !done.contains_key(&i.id)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| ConfigError(e.to_string()))?;
    let fresh: Vec<Transcript> = pool.install(|| {
        todo.par_iter()
            .map(|inst| {
                let t = engine.run(&dcfg, &dataset.task, inst)?;
                let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
                w.write_all(transcript_line(&t).as_bytes())
                    .and_then(|_| w.flush())
                    .map_err(io(&partial_path))?;
                Ok(t)
            })
            .collect::<Result<Vec<_>, RunError>>()
    })?;
    drop(writer);
    for t in fresh {
        done.insert(t.instance_id.clone(), t);
    }

    let mut body = String::new();
    let mut failed = 0;
    for inst in &sample {
        let t = &done[&inst.id];
        if t.final_decision.is_failed() {
            failed += 1;
        }
        body.push_str(&transcript_line(t));
    }
    let final_path = tdir.join(TRANSCRIPTS_FILE);
    let mut tmp = tempfile::NamedTempFile::new_in(&tdir).map_err(io(&tdir))?;
    tmp.write_all(body.as_bytes()).map_err(io(&final_path))?;
    tmp.persist(&final_path)
        .map_err(|e| RunError::Io {
            path: final_path.clone(),
            source: e.error,
        })?;
    fs::remove_file(&partial_path).map_err(io(&partial_path))?;

    let mut snapshot = cfg.clone();
    snapshot.dataset = absolute(&cfg.dataset);
    snapshot.guideline = absolute(&cfg.guideline);
    snapshot.cache_dir = absolute(&cfg.cache_dir);
    snapshot.out = absolute(&cfg.out);
    snapshot.templates = cfg.templates.as_deref().map(absolute);
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        run: cfg.run_name(),
        method: cfg.strategy.to_string(),
        initial: cfg.initial_name(),
        dataset_name: dataset.task.dataset_name.clone(),
        instances: sample.len(),
        sample_seed: cfg.seed,
        agent_seeds: cfg
            .agents
            .iter()
            .filter_map(|a| match &a.backend {
                AgentBackend::Simulated(p) => Some((a.agent_id.clone(), p.seed)),
                _ => None,
            })
            .collect(),
        config: snapshot,
    };
    let mpath = cfg.out.join(MANIFEST_FILE);
    let mut mtext = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    mtext.push('\n');
    fs::write(&mpath, mtext).map_err(io(&mpath))?;

    Ok(AnnotateSummary {
        out: cfg.out.clone(),
        instances: sample.len(),
        failed,
        resumed,
        backend_calls: gateway.backend_calls(),
    })
}

/// A finished run loaded from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub dataset: Dataset,
    pub transcripts: Vec<Transcript>,
}

impl LoadedRun {
    pub fn input(&self) -> RunInput {
        let cfg = &self.manifest.config;
        RunInput {
            run: self.manifest.run.clone(),
            dataset: self.dataset.task.dataset_name.clone(),
            discussion: cfg.strategy == Method::Discussion,
            initial: self.manifest.initial.clone(),
            agents: cfg
                .agents
                .iter()
                .map(|a| (a.agent_id.clone(), a.reasoning_effort.is_some()))
                .collect(),
            space: self.dataset.task.label_space.clone(),
            tie_policy: cfg.tie_policy,
            golds: self.dataset.golds(),
            transcripts: self.transcripts.clone(),
        }
    }
}

/// Loads a run directory. The dataset recorded in the manifest supplies the
/// gold labels unless `dataset` overrides it.
pub fn load_run(dir: &Path, dataset: Option<(&Path, &Path)>) -> Result<LoadedRun, RunError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| RunError::Corrupt {
        path: mpath.clone(),
        message: e.to_string(),
    })?;
    let cfg = &manifest.config;
    let (data, guide) = dataset.unwrap_or((&cfg.dataset, &cfg.guideline));
    let dataset = load_dataset_with(data, guide, cfg.task.as_deref())?;
    let transcripts = read_transcripts(&dir.join(TRANSCRIPTS_DIR).join(TRANSCRIPTS_FILE), false)?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        dataset,
        transcripts,
    })
}

/// Scores one or more runs and writes the report files into `reports_dir`.
pub fn evaluate(
    runs: &[LoadedRun],
    method: McNemarMethod,
    reports_dir: &Path,
) -> Result<MetricsReport, RunError> {
    let inputs: Vec<RunInput> = runs.iter().map(LoadedRun::input).collect();
    let report = build_report(&inputs, method)?;
    write_reports(&report, reports_dir).map_err(io(reports_dir))?;
    Ok(report)
}

/// Which outcome of a run a comparison looks at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    /// The final decision.
    Final,
    /// Majority vote over round 0.
    Majority,
    /// One agent's round-0 outcome.
    Agent(String),
}

impl std::str::FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "final" => Ok(Selector::Final),
            "mv" | "majority" => Ok(Selector::Majority),
            _ => s
                .strip_prefix("agent:")
                .map(|a| Selector::Agent(a.to_string()))
                .ok_or_else(|| format!("unknown selector {s:?} (final | mv | agent:<id>)")),
        }
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selector::Final => f.write_str("final"),
            Selector::Majority => f.write_str("mv"),
            Selector::Agent(a) => write!(f, "agent:{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub first: String,
    pub second: String,
    pub instances: usize,
    pub b: u64,
    pub c: u64,
    pub method: McNemarMethod,
    pub statistic: Option<f64>,
    pub p_value: f64,
}

impl CompareReport {
    /// Human-readable table with the p-value rounded to three decimals.
    pub fn table(&self) -> String {
        format!(
            "first\tsecond\tn\tb\tc\tmethod\tp\n{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            self.first,
            self.second,
            self.instances,
            self.b,
            self.c,
            self.method,
            crate::report::format_p(self.p_value)
        )
    }
}

fn correctness(run: &LoadedRun, sel: &Selector, golds: &HashMap<String, String>) -> Result<HashMap<String, bool>, RunError> {
    let space = &run.dataset.task.label_space;
    let policy = run.manifest.config.tie_policy;
    let mut out = HashMap::new();
    for t in &run.transcripts {
        let gold = golds
            .get(&t.instance_id)
            .ok_or_else(|| MetricsError::MissingGold(t.instance_id.clone()))?;
        let outcome = match sel {
            Selector::Final => t.final_decision.outcome(),
            Selector::Majority => {
                let o: Vec<Outcome> = t.initial().iter().map(|a| a.outcome.clone()).collect();
                match majority_vote(&o, space, policy, &t.instance_id) {
                    Vote::Label(l) => Outcome::Label(l),
                    Vote::Abstain => Outcome::Invalid,
                }
            }
            Selector::Agent(id) => {
                if !run.manifest.config.agents.iter().any(|a| &a.agent_id == id) {
                    return Err(ConfigError(format!("run {} has no agent {id:?}", run.manifest.run)).into());
                }
                t.annotation(0, id).map(|a| a.outcome.clone()).unwrap_or(Outcome::Invalid)
            }
        };
        out.insert(t.instance_id.clone(), outcome.matches(gold));
    }
    Ok(out)
}

/// Paired McNemar comparison of two runs over the same instances, scored
/// against the gold labels of the first run's dataset.
pub fn compare(
    a: &LoadedRun,
    sel_a: &Selector,
    b: &LoadedRun,
    sel_b: &Selector,
    method: McNemarMethod,
) -> Result<CompareReport, RunError> {
    let ids_a: HashSet<&String> = a.transcripts.iter().map(|t| &t.instance_id).collect();
    let ids_b: HashSet<&String> = b.transcripts.iter().map(|t| &t.instance_id).collect();
    if ids_a != ids_b {
        let mut diff: Vec<&&String> = ids_a.symmetric_difference(&ids_b).collect();
        diff.sort();
        return Err(RunError::IdMismatch(format!(
            "{} id(s) differ, first {:?}",
            diff.len(),
            diff[0]
        )));
    }
    let golds = a.dataset.golds();
    let ca = correctness(a, sel_a, &golds)?;
    let cb = correctness(b, sel_b, &golds)?;
    let order: Vec<&String> = a.transcripts.iter().map(|t| &t.instance_id).collect();
    let va: Vec<bool> = order.iter().map(|id| ca[*id]).collect();
    let vb: Vec<bool> = order.iter().map(|id| cb[*id]).collect();
    let r = mcnemar(&va, &vb, method)?;
    Ok(CompareReport {
        first: format!("{} [{sel_a}]", a.manifest.run),
        second: format!("{} [{sel_b}]", b.manifest.run),
        instances: order.len(),
        b: r.b,
        c: r.c,
        method: r.method,
        statistic: r.statistic,
        p_value: r.p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub identical: bool,
    pub instances: usize,
    pub failed: usize,
    pub replay_dir: PathBuf,
}

/// Re-runs a recorded run from its cache alone into `<run>/replay` and
/// checks that the transcripts come out byte-identical.
pub fn replay(run_dir: &Path) -> Result<ReplayOutcome, RunError> {
    let mpath = run_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| RunError::Corrupt {
        path: mpath.clone(),
        message: e.to_string(),
    })?;
    let mut cfg = manifest.config;
    let replay_dir = run_dir.join("replay");
    if replay_dir.exists() {
        fs::remove_dir_all(&replay_dir).map_err(io(&replay_dir))?;
    }
    cfg.out = replay_dir.clone();
    let summary = annotate(&cfg, BackendMode::CacheOnly)?;
    let original = run_dir.join(TRANSCRIPTS_DIR).join(TRANSCRIPTS_FILE);
    let replayed = replay_dir.join(TRANSCRIPTS_DIR).join(TRANSCRIPTS_FILE);
    let a = fs::read(&original).map_err(io(&original))?;
    let b = fs::read(&replayed).map_err(io(&replayed))?;
    Ok(ReplayOutcome {
        identical: a == b,
        instances: summary.instances,
        failed: summary.failed,
        replay_dir,
    })
}
