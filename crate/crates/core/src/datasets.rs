//! Dataset ingestion, seeded sampling and synthetic replay fixtures.
//!
//! A dataset is a JSON-lines file, one object per instance:
//!
//! ```json
//! {"id": "fomc-001", "content": "...", "choices": ["Dovish", "Hawkish", "Neutral"], "gold": "Neutral"}
//! ```
//!
//! plus a plain-text guideline file. Every line must carry the same ordered
//! `choices` list; it becomes the task's label space. An optional `meta`
//! object per line is accepted and ignored by the engine.
//!
//! Sampling draws a Fisher-Yates permutation from ChaCha8 seeded with the
//! 64-bit seed (see [`crate::rng`]), keeps its first `n` positions and returns
//! them in file order, so a seed selects the same ids on every platform.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discussion::{majority_vote, DiscussionConfig, DiscussionEngine, TiePolicy, Vote};
use crate::domain::{
    validate_dataset, AgentBackend, AgentProfile, AnnotationTask, DomainError, Instance,
    LabelSpace, Transcript, ValidationReport,
};
use crate::prompting::{TemplateSet, ANSWER_MARKER};
use crate::providers::{Agent, Gateway, ResponseCache, ScriptedBackend};
use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path} line {line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset rejected with {} issue(s)", .0.errors.len())]
    Validation(ValidationReport),
    #[error("fixture is infeasible: {0}")]
    Infeasible(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub content: String,
    pub choices: Vec<String>,
    #[serde(default)]
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Map<String, serde_json::Value>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: AnnotationTask,
    pub instances: Vec<Instance>,
}

impl Dataset {
    /// Gold labels keyed by instance id; instances without gold are skipped.
    pub fn golds(&self) -> HashMap<String, String> {
        self.instances
            .iter()
            .filter_map(|i| i.gold.clone().map(|g| (i.id.clone(), g)))
            .collect()
    }
}

/// Task description used when none is configured.
pub fn default_task_description(space: &LabelSpace) -> String {
    format!(
        "Assign the instance below exactly one of the {} labels defined by the annotation guideline.",
        space.len()
    )
}

/// Loads a dataset with the default task description. The dataset name is
/// the file stem of `data_path`.
pub fn load_dataset(data_path: &Path, guideline_path: &Path) -> Result<Dataset, DatasetError> {
    load_dataset_with(data_path, guideline_path, None)
}

pub fn load_dataset_with(
    data_path: &Path,
    guideline_path: &Path,
    task_description: Option<&str>,
) -> Result<Dataset, DatasetError> {
    let guideline = fs::read_to_string(guideline_path).map_err(|e| DatasetError::Parse {
        path: guideline_path.to_path_buf(),
        message: format!("cannot read guideline: {e}"),
    })?;
    let text = fs::read_to_string(data_path).map_err(|e| DatasetError::Parse {
        path: data_path.to_path_buf(),
        message: format!("cannot read dataset: {e}"),
    })?;

    let mut choices: Option<Vec<String>> = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            path: data_path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        match &choices {
            None => choices = Some(rec.choices.clone()),
            Some(c) if *c != rec.choices => {
                return Err(DatasetError::Schema {
                    path: data_path.to_path_buf(),
                    line: i + 1,
                    message: "choices differ from the first line".into(),
                })
            }
            Some(_) => {}
        }
        records.push(rec);
    }
    let choices = choices.ok_or_else(|| DatasetError::Parse {
        path: data_path.to_path_buf(),
        message: "dataset has no records".into(),
    })?;
    let space = LabelSpace::new(choices).map_err(|e| DatasetError::Schema {
        path: data_path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let name = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let description = task_description
        .map(str::to_string)
        .unwrap_or_else(|| default_task_description(&space));
    let task = AnnotationTask::new(name, description, guideline, space)?;
    let instances: Vec<Instance> = records
        .into_iter()
        .map(|r| Instance::new(r.id, r.content, r.gold))
        .collect();
    let report = validate_dataset(&instances, &task);
    if !report.is_accepted() {
        return Err(DatasetError::Validation(report));
    }
    Ok(Dataset { task, instances })
}

/// Writes `instances` as JSON lines carrying the task's choices.
pub fn write_dataset(
    path: &Path,
    task: &AnnotationTask,
    instances: &[Instance],
) -> Result<(), DatasetError> {
    let mut out = String::new();
    for inst in instances {
        let rec = DatasetRecord {
            id: inst.id.clone(),
            content: inst.content.clone(),
            choices: task.label_space.labels().to_vec(),
            gold: inst.gold.clone(),
            meta: None,
        };
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Seeded uniform sample of `min(n, len)` instances without replacement,
/// returned in their original order.
pub fn sample_instances(instances: &[Instance], n: usize, seed: u64) -> Vec<Instance> {
    if n >= instances.len() {
        return instances.to_vec();
    }
    let mut g = rng::from_seed(seed);
    let mut picked: Vec<usize> = rng::permutation(&mut g, instances.len())
        .into_iter()
        .take(n)
        .collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| instances[i].clone()).collect()
}

/// A block of instances sharing one per-round script.
///
/// Each round lists one token per agent: `gold`, `wrong:<k>` (the k-th
/// non-gold label in label order) or `invalid` (a response without an
/// answer line).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptBlock {
    pub count: usize,
    pub rounds: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub dataset_name: String,
    pub n_instances: usize,
    pub labels: Vec<String>,
    /// Number of instances per label, in label order.
    pub gold_distribution: Vec<usize>,
    pub agents: Vec<String>,
    #[serde(default = "default_r_max")]
    pub r_max: u32,
    #[serde(default)]
    pub tie_policy: TiePolicy,
    pub agent_scripts: Vec<ScriptBlock>,
    /// When set, the scripted framework accuracy must equal this value.
    #[serde(default)]
    pub expected_accuracy: Option<f64>,
}

fn default_r_max() -> u32 {
    2
}

fn block(count: usize, rounds: &[&[&str]]) -> ScriptBlock {
    ScriptBlock {
        count,
        rounds: rounds
            .iter()
            .map(|r| r.iter().map(|t| t.to_string()).collect())
            .collect(),
    }
}

/// The shipped replay fixture: 200 three-label instances whose scripted
/// discussion ends with 135 correct final labels (67.5%).
pub fn reference_fixture_spec() -> FixtureSpec {
    let g = "gold";
    let (w0, w1, inv) = ("wrong:0", "wrong:1", "invalid");
    FixtureSpec {
        dataset_name: "fomc-synthetic".into(),
        n_instances: 200,
        labels: vec!["Dovish".into(), "Hawkish".into(), "Neutral".into()],
        gold_distribution: vec![70, 70, 60],
        agents: vec!["annotator-a".into(), "annotator-b".into(), "annotator-c".into()],
        r_max: 2,
        tie_policy: TiePolicy::Abstain,
        agent_scripts: vec![
            block(90, &[&[g, g, g]]),
            block(30, &[&[g, g, w0], &[g, g, g]]),
            block(10, &[&[g, w0, w1], &[g, g, w0], &[g, g, w0]]),
            block(5, &[&[g, inv, w0], &[g, g, inv], &[g, g, inv]]),
            block(40, &[&[w0, w0, w0]]),
            block(15, &[&[w0, w0, g], &[w0, w0, w0]]),
            block(10, &[&[g, w0, w1], &[g, w0, w1], &[g, w0, w1]]),
        ],
        expected_accuracy: Some(0.675),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Gold,
    Wrong(usize),
    Invalid,
}

fn parse_token(s: &str, n_labels: usize) -> Result<Token, DatasetError> {
    let bad = || DatasetError::Infeasible(format!("bad script token {s:?}"));
    match s.trim() {
        "gold" => Ok(Token::Gold),
        "invalid" => Ok(Token::Invalid),
        t => {
            let k: usize = t
                .strip_prefix("wrong:")
                .ok_or_else(bad)?
                .parse()
                .map_err(|_| bad())?;
            if k + 1 >= n_labels {
                return Err(DatasetError::Infeasible(format!(
                    "{s:?} needs more than {n_labels} labels"
                )));
            }
            Ok(Token::Wrong(k))
        }
    }
}

fn token_label(t: Token, gold: usize, space: &LabelSpace) -> Option<&str> {
    match t {
        Token::Gold => space.get(gold),
        Token::Wrong(k) => space.get(if k < gold { k } else { k + 1 }),
        Token::Invalid => None,
    }
}

fn unanimous(round: &[Token]) -> bool {
    round[0] != Token::Invalid && round.iter().all(|t| *t == round[0])
}

const FIXTURE_TOPICS: &[&str] = &[
    "the policy rate path",
    "inflation expectations",
    "labor market slack",
    "balance sheet runoff",
    "credit conditions",
    "household spending",
    "energy prices",
    "wage growth",
];

const FIXTURE_TONES: &[&str] = &[
    "Members noted",
    "Participants observed",
    "The committee judged",
    "Several officials remarked",
];

fn response_text(label: Option<&str>) -> String {
    match label {
        Some(l) => format!(
            "The wording of the instance lines up with the guideline entry for {l}.\n{ANSWER_MARKER} {l}"
        ),
        None => "The instance could be read several ways and I will not commit to one.".into(),
    }
}

/// Paths of an emitted fixture.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub dataset: PathBuf,
    pub guideline: PathBuf,
    pub cache_dir: PathBuf,
    pub config: PathBuf,
    /// Framework accuracy the scripts produce.
    pub accuracy: f64,
    pub transcripts: Vec<Transcript>,
}

/// Fixed cache timestamp so fixture files are reproducible.
pub const FIXTURE_TIMESTAMP: u64 = 1_700_000_000;

/// Emits a dataset, guideline, run config and a response cache filled by
/// running the discussion protocol against scripted agents. A cache-only
/// run of the emitted config reproduces the scripted accuracy exactly.
pub fn make_fixture(spec: &FixtureSpec, seed: u64, out_dir: &Path) -> Result<Fixture, DatasetError> {
    let infeasible = |m: String| Err(DatasetError::Infeasible(m));
    if spec.labels.len() < 2 {
        return infeasible("need at least 2 labels".into());
    }
    let space = LabelSpace::new(spec.labels.clone())?;
    if spec.gold_distribution.len() != space.len() {
        return infeasible("gold_distribution needs one count per label".into());
    }
    if spec.gold_distribution.iter().sum::<usize>() != spec.n_instances {
        return infeasible("gold_distribution does not sum to n_instances".into());
    }
    if spec.agent_scripts.iter().map(|b| b.count).sum::<usize>() != spec.n_instances {
        return infeasible("script counts do not sum to n_instances".into());
    }
    if spec.agents.is_empty() {
        return infeasible("no agents".into());
    }

    let mut blocks = Vec::with_capacity(spec.agent_scripts.len());
    for (bi, block) in spec.agent_scripts.iter().enumerate() {
        let rounds = block
            .rounds
            .iter()
            .map(|r| {
                if r.len() != spec.agents.len() {
                    return Err(DatasetError::Infeasible(format!(
                        "script {bi}: every round needs {} tokens",
                        spec.agents.len()
                    )));
                }
                r.iter().map(|t| parse_token(t, space.len())).collect()
            })
            .collect::<Result<Vec<Vec<Token>>, _>>()?;
        let last = match rounds.len() {
            0 => return infeasible(format!("script {bi} has no rounds")),
            n if n > spec.r_max as usize + 1 => {
                return infeasible(format!("script {bi} runs past r_max"))
            }
            n => n - 1,
        };
        if let Some(r) = rounds[..last].iter().position(|r| unanimous(r)) {
            return infeasible(format!("script {bi} reaches consensus at round {r} but continues"));
        }
        if last < spec.r_max as usize && !unanimous(&rounds[last]) {
            return infeasible(format!("script {bi} stops early without consensus"));
        }
        blocks.push((block.count, rounds));
    }

    let mut g = rng::from_seed(seed);
    let n = spec.n_instances;
    let gold_slots: Vec<usize> = spec
        .gold_distribution
        .iter()
        .enumerate()
        .flat_map(|(l, &c)| std::iter::repeat_n(l, c))
        .collect();
    let gold_perm = rng::permutation(&mut g, n);
    let script_slots: Vec<usize> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, (c, _))| std::iter::repeat_n(b, *c))
        .collect();
    let script_perm = rng::permutation(&mut g, n);

    let width = n.to_string().len().max(4);
    let prefix: String = spec
        .dataset_name
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    let mut instances = Vec::with_capacity(n);
    let mut tables: Vec<HashMap<(String, u32), String>> = vec![HashMap::new(); spec.agents.len()];
    let mut correct = 0usize;
    for i in 0..n {
        let id = format!("{prefix}-{i:0width$}");
        let gold = gold_slots[gold_perm[i]];
        let (_, rounds) = &blocks[script_slots[script_perm[i]]];
        let topic = FIXTURE_TOPICS[rng::below(&mut g, FIXTURE_TOPICS.len() as u64) as usize];
        let tone = FIXTURE_TONES[rng::below(&mut g, FIXTURE_TONES.len() as u64) as usize];
        let content = format!("{tone} developments in {topic} during period {}.", i + 1);
        instances.push(Instance::new(&id, content, space.get(gold).map(str::to_string)));

        for (r, round) in rounds.iter().enumerate() {
            for (a, tok) in round.iter().enumerate() {
                tables[a].insert(
                    (id.clone(), r as u32),
                    response_text(token_label(*tok, gold, &space)),
                );
            }
        }
        let last = rounds.last().expect("checked non-empty");
        let decision = if unanimous(last) {
            token_label(last[0], gold, &space).map(str::to_string)
        } else {
            let outcomes: Vec<_> = last
                .iter()
                .map(|t| match token_label(*t, gold, &space) {
                    Some(l) => crate::domain::Outcome::Label(l.into()),
                    None => crate::domain::Outcome::Invalid,
                })
                .collect();
            match majority_vote(&outcomes, &space, spec.tie_policy, &id) {
                Vote::Label(l) => Some(l),
                Vote::Abstain => None,
            }
        };
        if decision.as_deref() == space.get(gold) {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / n as f64;
    if let Some(expected) = spec.expected_accuracy {
        if (expected - accuracy).abs() > 1e-9 {
            return infeasible(format!(
                "scripts give accuracy {accuracy} but {expected} was requested"
            ));
        }
    }

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let guideline = format!(
        "Annotation guideline for {}.\n\nRead the instance and choose the single label that best describes its stance.\n\n{}\n",
        spec.dataset_name,
        space
            .labels()
            .iter()
            .map(|l| format!("{l}: the instance primarily signals a {} stance.", l.to_lowercase()))
            .collect::<Vec<_>>()
            .join("\n")
    );
    let task = AnnotationTask::new(
        spec.dataset_name.clone(),
        default_task_description(&space),
        guideline.clone(),
        space.clone(),
    )?;
    let data_file = format!("{}.jsonl", spec.dataset_name);
    let dataset_path = out_dir.join(&data_file);
    let guideline_path = out_dir.join("guideline.txt");
    write_dataset(&dataset_path, &task, &instances)?;
    fs::write(&guideline_path, &guideline).map_err(io_err(&guideline_path))?;

    let cache_dir = out_dir.join("cache");
    let cache = ResponseCache::open(&cache_dir)
        .map_err(|e| DatasetError::Infeasible(e.to_string()))?
        .with_fixed_timestamp(FIXTURE_TIMESTAMP);
    let gateway = Gateway::new(Some(cache));
    let templates = TemplateSet::default();
    let engine = DiscussionEngine::new(&gateway, &templates);
    let group = spec
        .agents
        .iter()
        .zip(tables)
        .map(|(id, table)| {
            Agent::new(
                AgentProfile::new(id, AgentBackend::Scripted),
                std::sync::Arc::new(ScriptedBackend::by_instance_round(table)),
            )
        })
        .collect();
    let mut cfg = DiscussionConfig::new(group);
    cfg.r_max = spec.r_max;
    cfg.tie_policy = spec.tie_policy;
    let mut transcripts = Vec::with_capacity(n);
    for inst in &instances {
        let t = engine
            .run(&cfg, &task, inst)
            .map_err(|e| DatasetError::Infeasible(e.to_string()))?;
        if let crate::domain::FinalDecision::Failed { error } = &t.final_decision {
            return infeasible(format!("{}: {error}", inst.id));
        }
        transcripts.push(t);
    }
    let realized = transcripts
        .iter()
        .zip(&instances)
        .filter(|(t, i)| t.final_decision.outcome().matches(i.gold.as_deref().unwrap_or("")))
        .count();
    if realized != correct {
        return infeasible(format!(
            "protocol run gave {realized} correct, scripts predict {correct}"
        ));
    }

    let config_path = out_dir.join("config.toml");
    let mut config = String::new();
    config.push_str(&format!("dataset = \"{data_file}\"\nguideline = \"guideline.txt\"\n"));
    config.push_str("cache_dir = \"cache\"\nout = \"out\"\n");
    config.push_str(&format!(
        "seed = {seed}\nn = {n}\nr_max = {}\ntie_policy = \"{}\"\nstrategy = \"discussion\"\n",
        spec.r_max, spec.tie_policy
    ));
    for id in &spec.agents {
        config.push_str(&format!("\n[[agents]]\nagent_id = \"{id}\"\nbackend = {{ type = \"scripted\" }}\n"));
    }
    let mut f = fs::File::create(&config_path).map_err(io_err(&config_path))?;
    f.write_all(config.as_bytes()).map_err(io_err(&config_path))?;

    Ok(Fixture {
        dataset: dataset_path,
        guideline: guideline_path,
        cache_dir,
        config: config_path,
        accuracy,
        transcripts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> Vec<Instance> {
        (0..n)
            .map(|i| Instance::new(format!("i{i:04}"), format!("text {i}"), Some("A".into())))
            .collect()
    }

    #[test]
    fn sampling_is_deterministic_and_ordered() {
        let p = pool(1000);
        let a = sample_instances(&p, 200, 42);
        let b = sample_instances(&p, 200, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert!(a.windows(2).all(|w| w[0].id < w[1].id));
        let c = sample_instances(&p, 200, 1);
        let d = sample_instances(&p, 200, 2);
        assert_ne!(c, d);
    }

    #[test]
    fn sampling_saturates() {
        let p = pool(10);
        assert_eq!(sample_instances(&p, 10, 3), p);
        assert_eq!(sample_instances(&p, 50, 3), p);
    }

    #[test]
    fn tokens() {
        let s = LabelSpace::new(["A", "B", "C"]).unwrap();
        assert_eq!(token_label(Token::Gold, 1, &s), Some("B"));
        assert_eq!(token_label(Token::Wrong(0), 1, &s), Some("A"));
        assert_eq!(token_label(Token::Wrong(1), 1, &s), Some("C"));
        assert_eq!(token_label(Token::Wrong(1), 0, &s), Some("C"));
        assert!(parse_token("wrong:2", 3).is_err());
        assert!(parse_token("maybe", 3).is_err());
    }
}
