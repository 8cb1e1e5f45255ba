//! Single-agent inference strategies: vanilla, zero-shot chain of thought,
//! self-consistency and self-refine. Each maps (agent, task, instance) to one
//! [`Annotation`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Annotation, AnnotationTask, DomainError, Instance, Outcome};
use crate::prompting::{
    parse_label, strip_answer_lines, with_format_correction, PromptBuilder, PromptError,
    PromptExtras, PromptMode, TemplateSet,
};
use crate::providers::{Agent, AnnotationContext, ChatMessage, ChatRequest, Gateway, ProviderError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Vanilla,
    Cot,
    #[serde(alias = "sc")]
    SelfConsistency,
    #[serde(alias = "refine")]
    SelfRefine,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::Cot => "cot",
            StrategyKind::SelfConsistency => "sc",
            StrategyKind::SelfRefine => "refine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default = "default_sc_samples")]
    pub sc_samples: u32,
    #[serde(default = "default_sc_temperature")]
    pub sc_temperature: f64,
}

fn default_sc_samples() -> u32 {
    5
}

fn default_sc_temperature() -> f64 {
    0.7
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            sc_samples: default_sc_samples(),
            sc_temperature: default_sc_temperature(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.sc_samples == 0 {
            return Err(EngineError::Config("sc_samples must be at least 1".into()));
        }
        if self.sc_temperature.is_nan() || self.sc_temperature < 0.0 {
            return Err(EngineError::Config("sc_temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// One parsed exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub outcome: Outcome,
    pub text: String,
    pub key: String,
}

/// Modal valid outcome; ties go to the label seen first in `outcomes`.
/// Returns the winning label and the index of its first occurrence.
pub fn first_seen_mode(outcomes: &[Outcome]) -> Option<(String, usize)> {
    let mut tally: Vec<(&str, usize, usize)> = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        let Some(l) = o.label() else { continue };
        match tally.iter_mut().find(|(x, _, _)| *x == l) {
            Some(entry) => entry.1 += 1,
            None => tally.push((l, 1, i)),
        }
    }
    let best = tally.iter().map(|t| t.1).max()?;
    tally
        .into_iter()
        .find(|t| t.1 == best)
        .map(|(l, _, first)| (l.to_string(), first))
}

/// Executes strategies for agents through a shared [`Gateway`].
pub struct StrategyRunner<'a> {
    gateway: &'a Gateway,
    prompts: PromptBuilder<'a>,
}

impl<'a> StrategyRunner<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet) -> Self {
        Self {
            gateway,
            prompts: PromptBuilder::new(templates),
        }
    }

    pub fn gateway(&self) -> &Gateway {
        self.gateway
    }

    pub fn prompts(&self) -> &PromptBuilder<'a> {
        &self.prompts
    }

    fn context(task: &AnnotationTask, instance: &Instance) -> AnnotationContext {
        AnnotationContext {
            instance_id: instance.id.clone(),
            gold: instance.gold.clone(),
            labels: task.label_space.labels().to_vec(),
            ..Default::default()
        }
    }

    /// Sends one request; without `retry_format`, a single raw exchange.
    #[allow(clippy::too_many_arguments)]
    fn exchange(
        &self,
        agent: &Agent,
        task: &AnnotationTask,
        messages: Vec<ChatMessage>,
        temperature: f64,
        sample_index: u32,
        ctx: &AnnotationContext,
        retry_format: bool,
    ) -> Result<Exchange, EngineError> {
        let request = ChatRequest::new(messages, temperature)
            .with_sample_index(sample_index)
            .with_context(ctx.clone());
        let done = self.gateway.cached_complete(agent, &request)?;
        let outcome = parse_label(&done.response.text, &task.label_space);
        if outcome.is_valid() || !retry_format {
            return Ok(Exchange {
                outcome,
                text: done.response.text,
                key: done.key,
            });
        }
        let mut retry_ctx = ctx.clone();
        retry_ctx.format_retry = true;
        let retry = ChatRequest::new(with_format_correction(&request.messages), temperature)
            .with_sample_index(sample_index)
            .with_context(retry_ctx);
        let done = self.gateway.cached_complete(agent, &retry)?;
        Ok(Exchange {
            outcome: parse_label(&done.response.text, &task.label_space),
            text: done.response.text,
            key: done.key,
        })
    }

    /// One prompt-and-parse step in `mode`, with a single format retry.
    pub(crate) fn single(
        &self,
        agent: &Agent,
        task: &AnnotationTask,
        instance: &Instance,
        mode: PromptMode,
        extras: &PromptExtras,
        ctx: AnnotationContext,
    ) -> Result<Annotation, EngineError> {
        let messages = self.prompts.build(mode, task, instance, extras)?;
        let ctx = AnnotationContext {
            mode: Some(mode),
            ..ctx
        };
        let ex = self.exchange(agent, task, messages, agent.profile.temperature, 0, &ctx, true)?;
        Ok(Annotation::new(
            &task.label_space,
            agent.id(),
            ctx.round,
            ex.outcome,
            strip_answer_lines(&ex.text),
            ex.key,
        )?)
    }

    pub fn run_vanilla(
        &self,
        agent: &Agent,
        task: &AnnotationTask,
        instance: &Instance,
    ) -> Result<Annotation, EngineError> {
        self.single(
            agent,
            task,
            instance,
            PromptMode::Vanilla,
            &PromptExtras::default(),
            Self::context(task, instance),
        )
    }

    pub fn run_cot(
        &self,
        agent: &Agent,
        task: &AnnotationTask,
        instance: &Instance,
    ) -> Result<Annotation, EngineError> {
        self.single(
            agent,
            task,
            instance,
            PromptMode::Cot,
            &PromptExtras::default(),
            Self::context(task, instance),
        )
    }

    /// Samples `sc_samples` chains of thought at `sc_temperature` and takes
    /// the majority. Unparseable samples are dropped before voting; ties go
    /// to the label sampled earliest.
    pub fn run_self_consistency(
        &self,
        agent: &Agent,
        task: &AnnotationTask,
        instance: &Instance,
        cfg: &StrategyConfig,
    ) -> Result<Annotation, EngineError> {
        self.self_consistency_in(agent, task, instance, cfg, Self::context(task, instance))
    }

    pub(crate) fn self_consistency_in(
        &self,
        agent: &Agent,
        task: &AnnotationTask,
        instance: &Instance,
        cfg: &StrategyConfig,
        ctx: AnnotationContext,
    ) -> Result<Annotation, EngineError> {
        cfg.validate()?;
        let messages = self
            .prompts
            .build(PromptMode::Cot, task, instance, &PromptExtras::default())?;
        let ctx = AnnotationContext {
            mode: Some(PromptMode::Cot),
            ..ctx
        };
        let samples = (0..cfg.sc_samples)
            .map(|i| {
                self.exchange(agent, task, messages.clone(), cfg.sc_temperature, i, &ctx, false)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let outcomes: Vec<Outcome> = samples.iter().map(|s| s.outcome.clone()).collect();
        let (outcome, chosen) = match first_seen_mode(&outcomes) {
            Some((label, first)) => (Outcome::Label(label), &samples[first]),
            None => (Outcome::Invalid, &samples[0]),
        };
        Ok(Annotation::new(
            &task.label_space,
            agent.id(),
            ctx.round,
            outcome,
            strip_answer_lines(&chosen.text),
            chosen.key.clone(),
        )?)
    }

    /// Generate, review, revise: three sequential exchanges with the same
    /// agent, each carrying the earlier turns as conversation. Only the last
    /// one is parsed.
    pub fn run_self_refine(
        &self,
        agent: &Agent,
        task: &AnnotationTask,
        instance: &Instance,
    ) -> Result<Annotation, EngineError> {
        self.self_refine_in(agent, task, instance, Self::context(task, instance))
    }

    pub(crate) fn self_refine_in(
        &self,
        agent: &Agent,
        task: &AnnotationTask,
        instance: &Instance,
        ctx: AnnotationContext,
    ) -> Result<Annotation, EngineError> {
        let t = agent.profile.temperature;
        let mut extras = PromptExtras::default();

        let step = |mode: PromptMode, extras: &PromptExtras| -> Result<Exchange, EngineError> {
            let messages = self.prompts.build(mode, task, instance, extras)?;
            let ctx = AnnotationContext {
                mode: Some(mode),
                ..ctx.clone()
            };
            self.exchange(agent, task, messages, t, 0, &ctx, mode == PromptMode::RefineRevise)
        };

        let draft = step(PromptMode::RefineGenerate, &extras)?;
        extras.draft = Some(non_empty(draft.text));
        let feedback = step(PromptMode::RefineReview, &extras)?;
        extras.feedback = Some(non_empty(feedback.text));
        let last = step(PromptMode::RefineRevise, &extras)?;
        Ok(Annotation::new(
            &task.label_space,
            agent.id(),
            ctx.round,
            last.outcome,
            strip_answer_lines(&last.text),
            last.key,
        )?)
    }

    pub fn run(
        &self,
        cfg: &StrategyConfig,
        agent: &Agent,
        task: &AnnotationTask,
        instance: &Instance,
    ) -> Result<Annotation, EngineError> {
        self.run_in(cfg, agent, task, instance, Self::context(task, instance))
    }

    pub(crate) fn run_in(
        &self,
        cfg: &StrategyConfig,
        agent: &Agent,
        task: &AnnotationTask,
        instance: &Instance,
        ctx: AnnotationContext,
    ) -> Result<Annotation, EngineError> {
        let none = PromptExtras::default();
        match cfg.kind {
            StrategyKind::Vanilla => {
                self.single(agent, task, instance, PromptMode::Vanilla, &none, ctx)
            }
            StrategyKind::Cot => self.single(agent, task, instance, PromptMode::Cot, &none, ctx),
            StrategyKind::SelfConsistency => self.self_consistency_in(agent, task, instance, cfg, ctx),
            StrategyKind::SelfRefine => self.self_refine_in(agent, task, instance, ctx),
        }
    }
}

/// Empty model turns would be rejected as missing extras; keep a placeholder.
fn non_empty(text: String) -> String {
    if text.trim().is_empty() {
        "(empty response)".to_string()
    } else {
        text
    }
}
