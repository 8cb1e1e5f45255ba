//! Shared data model: label spaces, tasks, instances, annotations, transcripts
//! and agent profiles.
//!
//! Every other module depends on these types only. Values are immutable once
//! constructed and can be shared freely across worker threads.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("label space is empty")]
    EmptyLabelSpace,
    #[error("duplicate label after canonicalization: {0:?}")]
    DuplicateLabel(String),
    #[error("label {0:?} is not in the label space")]
    NotInSpace(String),
    #[error("{0} must not be empty")]
    EmptyField(&'static str),
    #[error("invalid agent profile {id:?}: {reason}")]
    InvalidProfile { id: String, reason: String },
}

/// Canonical matching form of a label: surrounding whitespace trimmed and
/// case folded.
pub fn canonicalize(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Ordered, duplicate-free set of labels for one task.
///
/// The order is fixed and defines every deterministic tie-break in the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
    canonical: Vec<String>,
}

impl LabelSpace {
    pub fn new<I, S>(labels: I) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(DomainError::EmptyLabelSpace);
        }
        let mut canonical = Vec::with_capacity(labels.len());
        for label in &labels {
            let c = canonicalize(label);
            if c.is_empty() {
                return Err(DomainError::EmptyField("label"));
            }
            if canonical.contains(&c) {
                return Err(DomainError::DuplicateLabel(label.clone()));
            }
            canonical.push(c);
        }
        Ok(Self { labels, canonical })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    /// Position of a label, matched canonically.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let c = canonicalize(label);
        self.canonical.iter().position(|x| *x == c)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    /// Display form of a label given in any casing.
    pub fn resolve(&self, label: &str) -> Option<&str> {
        self.index_of(label).map(|i| self.labels[i].as_str())
    }

    pub(crate) fn canonical_forms(&self) -> &[String] {
        &self.canonical
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = DomainError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        LabelSpace::new(value)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(value: LabelSpace) -> Self {
        value.labels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub dataset_name: String,
    pub task_description: String,
    pub guideline: String,
    pub label_space: LabelSpace,
}

impl AnnotationTask {
    pub fn new(
        dataset_name: impl Into<String>,
        task_description: impl Into<String>,
        guideline: impl Into<String>,
        label_space: LabelSpace,
    ) -> Result<Self, DomainError> {
        let task = Self {
            dataset_name: dataset_name.into(),
            task_description: task_description.into(),
            guideline: guideline.into(),
            label_space,
        };
        if task.task_description.trim().is_empty() {
            return Err(DomainError::EmptyField("task_description"));
        }
        if task.guideline.trim().is_empty() {
            return Err(DomainError::EmptyField("guideline"));
        }
        Ok(task)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub content: String,
    pub gold: Option<String>,
}

impl Instance {
    pub fn new(id: impl Into<String>, content: impl Into<String>, gold: Option<String>) -> Self {
        Self {
            id: id.into(),
            content: content.into(),
            gold,
        }
    }
}

/// Result of one annotation attempt. `Invalid` marks output that did not
/// resolve to any label and is counted, never raised.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Label(String),
    Invalid,
}

impl Outcome {
    pub fn label(&self) -> Option<&str> {
        match self {
            Outcome::Label(l) => Some(l),
            Outcome::Invalid => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, Outcome::Label(_))
    }

    /// True when the outcome is a label canonically equal to `gold`.
    pub fn matches(&self, gold: &str) -> bool {
        self.label()
            .is_some_and(|l| canonicalize(l) == canonicalize(gold))
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Label(l) => f.write_str(l),
            Outcome::Invalid => f.write_str("INVALID"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub agent_id: String,
    pub round: u32,
    pub outcome: Outcome,
    pub reasoning: String,
    /// Cache key of the exchange the outcome was parsed from.
    pub raw_response_ref: String,
}

impl Annotation {
    /// Builds an annotation, normalizing a valid outcome to the display form
    /// of the label space. Fails if the label is not a member.
    pub fn new(
        space: &LabelSpace,
        agent_id: impl Into<String>,
        round: u32,
        outcome: Outcome,
        reasoning: impl Into<String>,
        raw_response_ref: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let outcome = match outcome {
            Outcome::Label(l) => Outcome::Label(
                space
                    .resolve(&l)
                    .ok_or(DomainError::NotInSpace(l.clone()))?
                    .to_string(),
            ),
            Outcome::Invalid => Outcome::Invalid,
        };
        Ok(Self {
            agent_id: agent_id.into(),
            round,
            outcome,
            reasoning: reasoning.into(),
            raw_response_ref: raw_response_ref.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinalDecision {
    Consensus { label: String },
    Majority { label: String },
    Abstain,
    Failed { error: String },
}

impl FinalDecision {
    pub fn label(&self) -> Option<&str> {
        match self {
            FinalDecision::Consensus { label } | FinalDecision::Majority { label } => Some(label),
            FinalDecision::Abstain | FinalDecision::Failed { .. } => None,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, FinalDecision::Failed { .. })
    }

    pub fn is_consensus(&self) -> bool {
        matches!(self, FinalDecision::Consensus { .. })
    }

    pub fn outcome(&self) -> Outcome {
        self.label()
            .map(|l| Outcome::Label(l.to_string()))
            .unwrap_or(Outcome::Invalid)
    }
}

/// Complete record of one instance: every round, and the decision. This is
/// the unit persisted to the transcript store and compared on replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub instance_id: String,
    /// `rounds[r]` holds one annotation per agent, in group order.
    pub rounds: Vec<Vec<Annotation>>,
    pub final_decision: FinalDecision,
    pub rounds_executed: u32,
}

impl Transcript {
    pub fn initial(&self) -> &[Annotation] {
        self.rounds.first().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn last_round(&self) -> &[Annotation] {
        self.rounds.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Annotation of `agent_id` in round `round`, if that round ran.
    pub fn annotation(&self, round: usize, agent_id: &str) -> Option<&Annotation> {
        self.rounds
            .get(round)?
            .iter()
            .find(|a| a.agent_id == agent_id)
    }

    pub fn agent_ids(&self) -> Vec<&str> {
        self.initial().iter().map(|a| a.agent_id.as_str()).collect()
    }
}

/// Behavior of a simulated annotator. All draws are seeded, so outputs are a
/// pure function of the policy and the annotation context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPolicy {
    /// Probability of emitting the gold label on an independent draw.
    pub accuracy: f64,
    /// Probability of repeating the agent's own previous label in discussion.
    pub stubbornness: f64,
    /// Probability of adopting the prior round's modal label when switching.
    pub follow_majority: f64,
    /// Project every drawn label onto the nearest member of the round-0 pool.
    #[serde(default)]
    pub restrict_to_pool: bool,
    #[serde(default)]
    pub seed: u64,
}

impl SimulatedPolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("stubbornness", self.stubbornness),
            ("follow_majority", self.follow_majority),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    /// Chat-completions shape: `messages` array with role/content.
    #[serde(alias = "openai")]
    OpenAi,
    /// Messages shape: top-level `system` string plus `messages` array.
    Anthropic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentBackend {
    Real {
        endpoint: EndpointKind,
        model: String,
        #[serde(default)]
        base_url: Option<String>,
    },
    Simulated(SimulatedPolicy),
    /// Responses are served from a prerecorded cache only.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    pub backend: AgentBackend,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "one")]
    pub samples_per_call: u32,
    #[serde(default)]
    pub reasoning_effort: Option<String>,
}

fn one() -> u32 {
    1
}

impl AgentProfile {
    pub fn new(agent_id: impl Into<String>, backend: AgentBackend) -> Self {
        Self {
            agent_id: agent_id.into(),
            backend,
            temperature: 0.0,
            samples_per_call: 1,
            reasoning_effort: None,
        }
    }

    pub fn simulated(agent_id: impl Into<String>, policy: SimulatedPolicy) -> Self {
        Self::new(agent_id, AgentBackend::Simulated(policy))
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let err = |reason: String| DomainError::InvalidProfile {
            id: self.agent_id.clone(),
            reason,
        };
        if self.agent_id.trim().is_empty() {
            return Err(err("agent id is empty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(err(format!("temperature {} is negative", self.temperature)));
        }
        if self.samples_per_call == 0 {
            return Err(err("samples_per_call must be at least 1".into()));
        }
        if let AgentBackend::Simulated(p) = &self.backend {
            p.validate().map_err(err)?;
        }
        Ok(())
    }

    /// Model identity used in cache keys. Two profiles share cached responses
    /// iff their identities are equal.
    pub fn model_identity(&self) -> String {
        let base = match &self.backend {
            AgentBackend::Real { endpoint, model, .. } => {
                let kind = match endpoint {
                    EndpointKind::OpenAi => "openai",
                    EndpointKind::Anthropic => "anthropic",
                };
                format!("{kind}/{model}")
            }
            AgentBackend::Simulated(p) => format!(
                "simulated/{}/p{}-s{}-f{}-r{}-seed{}",
                self.agent_id,
                p.accuracy,
                p.stubbornness,
                p.follow_majority,
                u8::from(p.restrict_to_pool),
                p.seed
            ),
            AgentBackend::Scripted => format!("scripted/{}", self.agent_id),
        };
        match &self.reasoning_effort {
            Some(effort) => format!("{base}@{effort}"),
            None => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValidationIssue {
    DuplicateId { id: String },
    GoldNotInSpace { id: String, gold: String },
    EmptyContent { id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: usize,
    pub errors: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_accepted(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks a dataset against its task. Problems are collected, not raised.
///
/// `ok` counts instances that carry no issue of their own; a duplicated id
/// taints every instance after the first occurrence.
pub fn validate_dataset(instances: &[Instance], task: &AnnotationTask) -> ValidationReport {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut errors = Vec::new();
    let mut tainted = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        if seen.insert(inst.id.as_str(), i).is_some() {
            errors.push(ValidationIssue::DuplicateId {
                id: inst.id.clone(),
            });
            tainted.insert(i, ());
        }
        if let Some(gold) = &inst.gold {
            if !task.label_space.contains(gold) {
                errors.push(ValidationIssue::GoldNotInSpace {
                    id: inst.id.clone(),
                    gold: gold.clone(),
                });
                tainted.insert(i, ());
            }
        }
        if inst.content.trim().is_empty() {
            errors.push(ValidationIssue::EmptyContent {
                id: inst.id.clone(),
            });
            tainted.insert(i, ());
        }
    }
    ValidationReport {
        ok: instances.len() - tainted.len(),
        errors,
    }
}
