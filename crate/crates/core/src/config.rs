//! Run configuration: a TOML file whose keys can all be overridden from the
//! command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discussion::{DiscussionConfig, InitialStrategy, TiePolicy};
use crate::domain::{AgentBackend, AgentProfile, SimulatedPolicy};
use crate::metrics::McNemarMethod;
use crate::providers::Agent;
use crate::strategies::{StrategyConfig, StrategyKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn cfg_err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// What produces the final label of each instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Strategy(StrategyKind),
    #[default]
    Discussion,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Strategy(k) => f.write_str(short_name(*k)),
            Method::Discussion => f.write_str("discussion"),
        }
    }
}

fn short_name(k: StrategyKind) -> &'static str {
    match k {
        StrategyKind::Vanilla => "vanilla",
        StrategyKind::Cot => "cot",
        StrategyKind::SelfConsistency => "sc",
        StrategyKind::SelfRefine => "refine",
    }
}

fn parse_kind(s: &str) -> Option<StrategyKind> {
    match s {
        "vanilla" => Some(StrategyKind::Vanilla),
        "cot" => Some(StrategyKind::Cot),
        "sc" | "self-consistency" | "self_consistency" => Some(StrategyKind::SelfConsistency),
        "refine" | "self-refine" | "self_refine" => Some(StrategyKind::SelfRefine),
        _ => None,
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        if s == "discussion" {
            return Ok(Method::Discussion);
        }
        parse_kind(&s)
            .map(Method::Strategy)
            .ok_or_else(|| format!("unknown strategy {s:?} (vanilla | cot | sc | refine | discussion)"))
    }
}

impl TryFrom<String> for Method {
    type Error = String;
    fn try_from(v: String) -> Result<Self, Self::Error> {
        v.parse()
    }
}

impl From<Method> for String {
    fn from(v: Method) -> Self {
        v.to_string()
    }
}

/// How round 0 of a discussion is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Initial {
    Strategy(StrategyKind),
    DiscussInitial,
}

impl Default for Initial {
    fn default() -> Self {
        Initial::Strategy(StrategyKind::Cot)
    }
}

impl fmt::Display for Initial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Initial::Strategy(k) => f.write_str(short_name(*k)),
            Initial::DiscussInitial => f.write_str("discuss-initial"),
        }
    }
}

impl FromStr for Initial {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "discuss-initial" | "discuss_initial" => Ok(Initial::DiscussInitial),
            other => parse_kind(other)
                .map(Initial::Strategy)
                .ok_or_else(|| format!("unknown initial strategy {s:?}")),
        }
    }
}

impl TryFrom<String> for Initial {
    type Error = String;
    fn try_from(v: String) -> Result<Self, Self::Error> {
        v.parse()
    }
}

impl From<Initial> for String {
    fn from(v: Initial) -> Self {
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    /// Real endpoints are called on cache misses.
    #[default]
    Real,
    /// Only simulated and scripted agents are allowed; nothing leaves the host.
    Simulated,
}

impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(BackendChoice::Real),
            "simulated" => Ok(BackendChoice::Simulated),
            other => Err(format!("unknown backend {other:?} (real | simulated)")),
        }
    }
}

fn d_seed() -> u64 {
    42
}
fn d_n() -> usize {
    200
}
fn d_r_max() -> u32 {
    2
}
fn d_cache() -> PathBuf {
    PathBuf::from("cache")
}
fn d_out() -> PathBuf {
    PathBuf::from("out")
}
fn d_parallelism() -> usize {
    4
}
fn d_sc_samples() -> u32 {
    5
}
fn d_sc_temperature() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Label used in report rows; defaults to the method name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: PathBuf,
    pub guideline: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_r_max")]
    pub r_max: u32,
    #[serde(default)]
    pub tie_policy: TiePolicy,
    #[serde(default = "d_cache")]
    pub cache_dir: PathBuf,
    #[serde(default = "d_out")]
    pub out: PathBuf,
    #[serde(default = "d_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub backend: BackendChoice,
    #[serde(default)]
    pub strategy: Method,
    #[serde(default)]
    pub initial: Initial,
    #[serde(default = "d_sc_samples")]
    pub sc_samples: u32,
    #[serde(default = "d_sc_temperature")]
    pub sc_temperature: f64,
    #[serde(default)]
    pub mcnemar: McNemarMethod,
    #[serde(default)]
    pub agents: Vec<AgentProfile>,
}

/// Command-line values that replace config keys of the same name.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub name: Option<String>,
    pub dataset: Option<PathBuf>,
    pub guideline: Option<PathBuf>,
    pub task: Option<String>,
    pub templates: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub r_max: Option<u32>,
    pub tie_policy: Option<TiePolicy>,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub backend: Option<BackendChoice>,
    pub strategy: Option<Method>,
    pub initial: Option<Initial>,
    pub sc_samples: Option<u32>,
    pub sc_temperature: Option<f64>,
    pub mcnemar: Option<McNemarMethod>,
}

/// Three simulated annotators used when no agents are configured under the
/// simulated backend.
pub fn default_simulated_agents() -> Vec<AgentProfile> {
    (1..=3)
        .map(|i| {
            AgentProfile::simulated(
                format!("sim-{i}"),
                SimulatedPolicy {
                    accuracy: 0.7,
                    stubbornness: 0.5,
                    follow_majority: 0.5,
                    restrict_to_pool: false,
                    seed: i,
                },
            )
        })
        .collect()
}

impl RunConfig {
    /// Reads a TOML config. Relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.guideline, &mut cfg.cache_dir, &mut cfg.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(t) = cfg.templates.as_mut() {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
        Ok(cfg)
    }

    /// Builds a config purely from flags; dataset and guideline are required.
    pub fn from_overrides(o: &Overrides) -> Result<Self, ConfigError> {
        let (Some(dataset), Some(guideline)) = (&o.dataset, &o.guideline) else {
            return cfg_err("--dataset and --guideline are required without --config");
        };
        let mut cfg = RunConfig {
            name: None,
            dataset: dataset.clone(),
            guideline: guideline.clone(),
            task: None,
            templates: None,
            seed: d_seed(),
            n: d_n(),
            r_max: d_r_max(),
            tie_policy: TiePolicy::default(),
            cache_dir: d_cache(),
            out: d_out(),
            parallelism: d_parallelism(),
            backend: BackendChoice::default(),
            strategy: Method::default(),
            initial: Initial::default(),
            sc_samples: d_sc_samples(),
            sc_temperature: d_sc_temperature(),
            mcnemar: McNemarMethod::default(),
            agents: Vec::new(),
        };
        cfg.apply(o);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &o.$f {
                    self.$f = v.clone();
                }
            )*};
        }
        set!(dataset, guideline, seed, n, r_max, tie_policy, cache_dir, out, parallelism);
        set!(backend, strategy, initial, sc_samples, sc_temperature, mcnemar);
        if o.name.is_some() {
            self.name = o.name.clone();
        }
        if o.task.is_some() {
            self.task = o.task.clone();
        }
        if o.templates.is_some() {
            self.templates = o.templates.clone();
        }
        if self.agents.is_empty() && self.backend == BackendChoice::Simulated {
            self.agents = default_simulated_agents();
        }
    }

    /// Number of discussion rounds actually run: none for single strategies.
    pub fn effective_r_max(&self) -> u32 {
        match self.strategy {
            Method::Discussion => self.r_max,
            Method::Strategy(_) => 0,
        }
    }

    pub fn initial_strategy(&self) -> InitialStrategy {
        let sc = |kind| StrategyConfig {
            kind,
            sc_samples: self.sc_samples,
            sc_temperature: self.sc_temperature,
        };
        match (self.strategy, self.initial) {
            (Method::Strategy(k), _) => InitialStrategy::Strategy(sc(k)),
            (Method::Discussion, Initial::Strategy(k)) => InitialStrategy::Strategy(sc(k)),
            (Method::Discussion, Initial::DiscussInitial) => InitialStrategy::DiscussInitial,
        }
    }

    /// Name of the procedure that produced round 0.
    pub fn initial_name(&self) -> String {
        match self.strategy {
            Method::Strategy(k) => short_name(k).to_string(),
            Method::Discussion => self.initial.to_string(),
        }
    }

    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.strategy.to_string())
    }

    /// Checks everything that can be checked without calling a backend.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (what, p) in [("dataset", &self.dataset), ("guideline", &self.guideline)] {
            if !p.is_file() {
                return cfg_err(format!("{what} file {} does not exist", p.display()));
            }
        }
        if let Some(t) = &self.templates {
            if !t.is_dir() {
                return cfg_err(format!("templates directory {} does not exist", t.display()));
            }
        }
        if self.n == 0 {
            return cfg_err("n must be at least 1");
        }
        if self.parallelism == 0 {
            return cfg_err("parallelism must be at least 1");
        }
        if self.agents.is_empty() {
            return cfg_err("no agents configured");
        }
        for (i, a) in self.agents.iter().enumerate() {
            a.validate().map_err(|e| ConfigError(e.to_string()))?;
            if self.agents[..i].iter().any(|b| b.agent_id == a.agent_id) {
                return cfg_err(format!("duplicate agent id {:?}", a.agent_id));
            }
            if self.backend == BackendChoice::Simulated
                && matches!(a.backend, AgentBackend::Real { .. })
            {
                return cfg_err(format!(
                    "agent {:?} uses a real endpoint but the backend is simulated",
                    a.agent_id
                ));
            }
        }
        if self.strategy == Method::Discussion && self.r_max > 0 && self.agents.len() < 2 {
            return cfg_err("discussion needs at least 2 agents");
        }
        if let InitialStrategy::Strategy(s) = self.initial_strategy() {
            s.validate().map_err(|e| ConfigError(e.to_string()))?;
        }
        Ok(())
    }

    pub fn discussion_config(&self, group: Vec<Agent>) -> DiscussionConfig {
        let mut cfg = DiscussionConfig::new(group);
        cfg.r_max = self.effective_r_max();
        cfg.tie_policy = self.tie_policy;
        cfg.initial = self.initial_strategy();
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
dataset = "data.jsonl"
guideline = "guide.txt"
seed = 7
tie_policy = "label-order"
strategy = "discussion"

[[agents]]
agent_id = "a"
backend = { type = "simulated", accuracy = 0.8, stubbornness = 0.5, follow_majority = 0.5, seed = 1 }

[[agents]]
agent_id = "b"
reasoning_effort = "medium"
backend = { type = "real", endpoint = "open_ai", model = "o3-mini" }
"#;

    fn parse(s: &str) -> RunConfig {
        toml::from_str(s).unwrap()
    }

    #[test]
    fn parses_with_defaults() {
        let c = parse(SAMPLE);
        assert_eq!(c.seed, 7);
        assert_eq!(c.n, 200);
        assert_eq!(c.r_max, 2);
        assert_eq!(c.parallelism, 4);
        assert_eq!(c.tie_policy, TiePolicy::LabelOrder);
        assert_eq!(c.agents.len(), 2);
        assert_eq!(c.agents[1].model_identity(), "openai/o3-mini@medium");
    }

    #[test]
    fn overrides_win() {
        let mut c = parse(SAMPLE);
        c.apply(&Overrides {
            seed: Some(9),
            r_max: Some(1),
            strategy: Some("sc".parse().unwrap()),
            ..Default::default()
        });
        assert_eq!(c.seed, 9);
        assert_eq!(c.strategy, Method::Strategy(StrategyKind::SelfConsistency));
        assert_eq!(c.effective_r_max(), 0);
        assert_eq!(c.initial_name(), "sc");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("dataset='a'\nguideline='b'\nbogus=1").is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for s in ["vanilla", "cot", "sc", "refine", "discussion"] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
        assert!("debate".parse::<Method>().is_err());
        assert_eq!("discuss-initial".parse::<Initial>().unwrap(), Initial::DiscussInitial);
    }
}
