//! Multi-agent discussion: initial annotation, consensus check, rounds of
//! history-conditioned re-annotation, and a majority-vote fallback.
//!
//! Round 0 runs the configured initial strategy for every agent. While the
//! agents disagree and fewer than `r_max` discussion rounds have run, the
//! previous round is compiled into a discussion history and every agent
//! re-annotates with it. Consensus is checked after every round, including
//! the last; without it the final label is a majority vote over the last
//! round.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Annotation, AnnotationTask, FinalDecision, Instance, LabelSpace, Outcome, Transcript,
};
use crate::prompting::{compile_history, PromptExtras, PromptMode, TemplateSet};
use crate::providers::{Agent, AnnotationContext, Gateway, ProviderError};
use crate::rng;
use crate::strategies::{EngineError, StrategyConfig, StrategyKind, StrategyRunner};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("expected one annotation per agent ({expected}), got {got}")]
pub struct ArityError {
    pub expected: usize,
    pub got: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TiePolicy {
    #[default]
    Abstain,
    LabelOrder,
    SeededRandom(u64),
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TiePolicy::Abstain => f.write_str("abstain"),
            TiePolicy::LabelOrder => f.write_str("label-order"),
            TiePolicy::SeededRandom(s) => write!(f, "seeded-random:{s}"),
        }
    }
}

impl FromStr for TiePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        match s.as_str() {
            "abstain" => Ok(TiePolicy::Abstain),
            "label-order" => Ok(TiePolicy::LabelOrder),
            "seeded-random" => Ok(TiePolicy::SeededRandom(0)),
            _ => match s.strip_prefix("seeded-random:") {
                Some(seed) => seed
                    .parse()
                    .map(TiePolicy::SeededRandom)
                    .map_err(|_| format!("bad seed in tie policy {s:?}")),
                None => Err(format!(
                    "unknown tie policy {s:?} (abstain | label-order | seeded-random:<seed>)"
                )),
            },
        }
    }
}

impl TryFrom<String> for TiePolicy {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<TiePolicy> for String {
    fn from(value: TiePolicy) -> Self {
        value.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vote {
    Label(String),
    Abstain,
}

/// True iff every agent produced a valid label and all labels agree.
pub fn check_consensus(annotations: &[Annotation], n_agents: usize) -> Result<bool, ArityError> {
    if annotations.len() != n_agents {
        return Err(ArityError {
            expected: n_agents,
            got: annotations.len(),
        });
    }
    let mut labels = annotations.iter().map(|a| a.outcome.label());
    let Some(Some(first)) = labels.next() else {
        return Ok(false);
    };
    Ok(labels.all(|l| l == Some(first)))
}

/// Majority over valid outcomes. `salt` individualizes seeded tie draws
/// (typically the instance id).
pub fn majority_vote(
    outcomes: &[Outcome],
    space: &LabelSpace,
    policy: TiePolicy,
    salt: &str,
) -> Vote {
    let mut counts = vec![0usize; space.len()];
    for o in outcomes {
        if let Some(i) = o.label().and_then(|l| space.index_of(l)) {
            counts[i] += 1;
        }
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    if best == 0 {
        return Vote::Abstain;
    }
    let tied: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == best).collect();
    let pick = match (tied.len(), policy) {
        (1, _) => Some(tied[0]),
        (_, TiePolicy::Abstain) => None,
        (_, TiePolicy::LabelOrder) => Some(tied[0]),
        (_, TiePolicy::SeededRandom(seed)) => {
            let mut r = rng::from_parts(&[&seed.to_le_bytes(), salt.as_bytes()]);
            Some(tied[rng::below(&mut r, tied.len() as u64) as usize])
        }
    };
    match pick {
        Some(i) => Vote::Label(space.labels()[i].clone()),
        None => Vote::Abstain,
    }
}

/// How round 0 is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialStrategy {
    Strategy(StrategyConfig),
    /// Chain-of-thought style prompt that tells the agent its answer will be
    /// shared with the group.
    DiscussInitial,
}

impl Default for InitialStrategy {
    fn default() -> Self {
        InitialStrategy::Strategy(StrategyConfig::new(StrategyKind::Cot))
    }
}

#[derive(Debug, Clone)]
pub struct DiscussionConfig {
    pub r_max: u32,
    pub group: Vec<Agent>,
    pub tie_policy: TiePolicy,
    pub initial: InitialStrategy,
}

impl DiscussionConfig {
    pub fn new(group: Vec<Agent>) -> Self {
        Self {
            r_max: 2,
            group,
            tie_policy: TiePolicy::Abstain,
            initial: InitialStrategy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.group.is_empty() {
            return Err(EngineError::Config("agent group is empty".into()));
        }
        // A lone agent can only be run without discussion rounds.
        if self.r_max > 0 && self.group.len() < 2 {
            return Err(EngineError::Config("discussion needs at least 2 agents".into()));
        }
        for (i, a) in self.group.iter().enumerate() {
            a.profile.validate()?;
            if self.group[..i].iter().any(|b| b.id() == a.id()) {
                return Err(EngineError::Config(format!("duplicate agent id {:?}", a.id())));
            }
        }
        if let InitialStrategy::Strategy(s) = &self.initial {
            s.validate()?;
        }
        Ok(())
    }
}

pub struct DiscussionEngine<'a> {
    runner: StrategyRunner<'a>,
}

impl<'a> DiscussionEngine<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet) -> Self {
        Self {
            runner: StrategyRunner::new(gateway, templates),
        }
    }

    pub fn runner(&self) -> &StrategyRunner<'a> {
        &self.runner
    }

    fn base_context(task: &AnnotationTask, instance: &Instance) -> AnnotationContext {
        AnnotationContext {
            instance_id: instance.id.clone(),
            gold: instance.gold.clone(),
            labels: task.label_space.labels().to_vec(),
            ..Default::default()
        }
    }

    fn initial_round(
        &self,
        cfg: &DiscussionConfig,
        task: &AnnotationTask,
        instance: &Instance,
    ) -> Result<Vec<Annotation>, EngineError> {
        cfg.group
            .iter()
            .map(|agent| {
                let ctx = Self::base_context(task, instance);
                match &cfg.initial {
                    InitialStrategy::Strategy(s) => self.runner.run_in(s, agent, task, instance, ctx),
                    InitialStrategy::DiscussInitial => self.runner.single(
                        agent,
                        task,
                        instance,
                        PromptMode::DiscussInitial,
                        &PromptExtras::default(),
                        ctx,
                    ),
                }
            })
            .collect()
    }

    fn revise_round(
        &self,
        cfg: &DiscussionConfig,
        task: &AnnotationTask,
        instance: &Instance,
        initial: &[Annotation],
        previous: &[Annotation],
        round: u32,
    ) -> Result<Vec<Annotation>, EngineError> {
        let previous_outcomes: Vec<Outcome> = previous.iter().map(|a| a.outcome.clone()).collect();
        let pool: Vec<Outcome> = initial.iter().map(|a| a.outcome.clone()).collect();
        cfg.group
            .iter()
            .zip(previous)
            .map(|(agent, own)| {
                let extras = PromptExtras {
                    history: Some(compile_history(previous, agent.id())?),
                    ..Default::default()
                };
                let ctx = AnnotationContext {
                    round,
                    own_previous: Some(own.outcome.clone()),
                    previous_round: previous_outcomes.clone(),
                    initial_pool: pool.clone(),
                    ..Self::base_context(task, instance)
                };
                self.runner
                    .single(agent, task, instance, PromptMode::DiscussRevise, &extras, ctx)
            })
            .collect()
    }

    /// Runs the discussion protocol for one instance.
    ///
    /// Provider failures end the instance with a `Failed` decision that keeps
    /// the completed rounds. Authentication failures are returned as errors
    /// since no later instance can succeed either.
    pub fn run(
        &self,
        cfg: &DiscussionConfig,
        task: &AnnotationTask,
        instance: &Instance,
    ) -> Result<Transcript, EngineError> {
        cfg.validate()?;
        let n = cfg.group.len();
        let mut rounds: Vec<Vec<Annotation>> = Vec::new();
        let finish = |rounds: Vec<Vec<Annotation>>, decision| {
            let rounds_executed = rounds.len() as u32;
            Transcript {
                instance_id: instance.id.clone(),
                rounds,
                final_decision: decision,
                rounds_executed,
            }
        };
        let fail = |rounds: Vec<Vec<Annotation>>, e: EngineError| match e {
            EngineError::Provider(ProviderError::Auth(_)) | EngineError::Config(_) => Err(e),
            e => Ok(finish(rounds, FinalDecision::Failed { error: e.to_string() })),
        };

        match self.initial_round(cfg, task, instance) {
            Ok(r) => rounds.push(r),
            Err(e) => return fail(rounds, e),
        }
        let mut r = 0;
        loop {
            let last = rounds.last().expect("at least one round");
            if check_consensus(last, n).expect("one annotation per agent") {
                let label = last[0].outcome.label().expect("consensus is valid").to_string();
                return Ok(finish(rounds, FinalDecision::Consensus { label }));
            }
            if r >= cfg.r_max {
                break;
            }
            r += 1;
            match self.revise_round(cfg, task, instance, &rounds[0], last, r) {
                Ok(next) => rounds.push(next),
                Err(e) => return fail(rounds, e),
            }
        }
        let outcomes: Vec<Outcome> = rounds
            .last()
            .unwrap()
            .iter()
            .map(|a| a.outcome.clone())
            .collect();
        let decision = match majority_vote(&outcomes, &task.label_space, cfg.tie_policy, &instance.id) {
            Vote::Label(label) => FinalDecision::Majority { label },
            Vote::Abstain => FinalDecision::Abstain,
        };
        Ok(finish(rounds, decision))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AgentBackend, AgentProfile, SimulatedPolicy};
    use crate::providers::{ScriptedBackend, SimulatedBackend};
    use std::collections::HashMap;
    use std::sync::Arc;

    fn l(s: &str) -> Outcome {
        Outcome::Label(s.into())
    }

    fn ann(agent: &str, o: Outcome) -> Annotation {
        Annotation {
            agent_id: agent.into(),
            round: 0,
            outcome: o,
            reasoning: String::new(),
            raw_response_ref: String::new(),
        }
    }

    fn abc() -> LabelSpace {
        LabelSpace::new(["A", "B", "C"]).unwrap()
    }

    fn task() -> AnnotationTask {
        AnnotationTask::new("t", "Pick.", "Rules.", abc()).unwrap()
    }

    fn policy(p: f64, s: f64, f: f64, seed: u64) -> SimulatedPolicy {
        SimulatedPolicy {
            accuracy: p,
            stubbornness: s,
            follow_majority: f,
            restrict_to_pool: false,
            seed,
        }
    }

    fn sim(id: &str, p: SimulatedPolicy) -> Agent {
        Agent::new(
            AgentProfile::simulated(id, p.clone()),
            Arc::new(SimulatedBackend::new(p)),
        )
    }

    /// Agent whose label per round is fixed for every instance.
    fn fixed(id: &str, per_round: &[&str]) -> Agent {
        let per_round: Vec<String> = per_round.iter().map(|s| s.to_string()).collect();
        let backend = ScriptedBackend::from_fn(move |req| {
            let round = req.context.as_ref().unwrap().round as usize;
            let label = &per_round[round.min(per_round.len() - 1)];
            Ok(format!("because\nFINAL ANSWER: {label}"))
        });
        Agent::new(AgentProfile::new(id, AgentBackend::Scripted), Arc::new(backend))
    }

    #[test]
    fn consensus_rules() {
        let a = |o: Vec<Outcome>| o.into_iter().enumerate().map(|(i, o)| ann(&i.to_string(), o)).collect::<Vec<_>>();
        assert_eq!(check_consensus(&a(vec![l("A"), l("A"), l("A")]), 3), Ok(true));
        assert_eq!(check_consensus(&a(vec![l("A"), l("A"), l("B")]), 3), Ok(false));
        assert_eq!(check_consensus(&a(vec![l("A"), l("A"), Outcome::Invalid]), 3), Ok(false));
        assert_eq!(check_consensus(&a(vec![Outcome::Invalid, Outcome::Invalid, Outcome::Invalid]), 3), Ok(false));
        assert_eq!(
            check_consensus(&a(vec![l("A"), l("A")]), 3),
            Err(ArityError { expected: 3, got: 2 })
        );
    }

    #[test]
    fn vote_rules() {
        let s = abc();
        assert_eq!(majority_vote(&[l("A"), l("A"), l("B")], &s, TiePolicy::Abstain, "x"), Vote::Label("A".into()));
        assert_eq!(majority_vote(&[l("A"), l("B"), l("C")], &s, TiePolicy::Abstain, "x"), Vote::Abstain);
        let reordered = LabelSpace::new(["B", "A", "C"]).unwrap();
        assert_eq!(
            majority_vote(&[l("A"), l("B"), l("C")], &reordered, TiePolicy::LabelOrder, "x"),
            Vote::Label("B".into())
        );
        assert_eq!(majority_vote(&[Outcome::Invalid, Outcome::Invalid, Outcome::Invalid], &s, TiePolicy::LabelOrder, "x"), Vote::Abstain);
        assert_eq!(
            majority_vote(&[l("C"), Outcome::Invalid, Outcome::Invalid], &s, TiePolicy::Abstain, "x"),
            Vote::Label("C".into())
        );
    }

    #[test]
    fn seeded_random_ties_are_reproducible_members() {
        let s = abc();
        let o = [l("A"), l("B"), l("C")];
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..50 {
            let salt = format!("i{i}");
            let v = majority_vote(&o, &s, TiePolicy::SeededRandom(9), &salt);
            assert_eq!(v, majority_vote(&o, &s, TiePolicy::SeededRandom(9), &salt));
            let Vote::Label(x) = v else { panic!("tie must resolve") };
            seen.insert(x);
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn tie_policy_parses() {
        assert_eq!("abstain".parse(), Ok(TiePolicy::Abstain));
        assert_eq!("label_order".parse(), Ok(TiePolicy::LabelOrder));
        assert_eq!("seeded-random:7".parse(), Ok(TiePolicy::SeededRandom(7)));
        assert!("coin".parse::<TiePolicy>().is_err());
        assert_eq!(TiePolicy::SeededRandom(7).to_string(), "seeded-random:7");
    }

    fn run(cfg: &DiscussionConfig, gold: &str) -> Transcript {
        let gw = Gateway::uncached();
        let ts = TemplateSet::default();
        DiscussionEngine::new(&gw, &ts)
            .run(cfg, &task(), &Instance::new("i1", "text", Some(gold.into())))
            .unwrap()
    }

    #[test]
    fn unanimous_start_is_consensus_at_round_zero() {
        let group = (0..3).map(|i| sim(&format!("a{i}"), policy(1.0, 0.0, 0.0, i))).collect();
        let t = run(&DiscussionConfig::new(group), "B");
        assert_eq!(t.final_decision, FinalDecision::Consensus { label: "B".into() });
        assert_eq!(t.rounds_executed, 1);
    }

    #[test]
    fn follower_converges_after_one_round() {
        let group = vec![
            fixed("a", &["A"]),
            fixed("b", &["A"]),
            Agent::new(
                AgentProfile::simulated("c", policy(0.0, 0.0, 1.0, 3)),
                Arc::new(ScriptedBackend::from_fn({
                    let p = policy(0.0, 0.0, 1.0, 3);
                    move |req| {
                        let ctx = req.context.as_ref().unwrap();
                        if ctx.round == 0 {
                            return Ok("FINAL ANSWER: B".into());
                        }
                        Ok(crate::providers::simulate_response(&p, ctx, 0))
                    }
                })),
            ),
        ];
        let t = run(&DiscussionConfig::new(group), "A");
        assert_eq!(t.final_decision, FinalDecision::Consensus { label: "A".into() });
        assert_eq!(t.rounds_executed, 2);
    }

    #[test]
    fn stubborn_split_abstains_after_two_rounds() {
        let group = vec![fixed("a", &["A"]), fixed("b", &["B"]), fixed("c", &["C"])];
        let t = run(&DiscussionConfig::new(group), "A");
        assert_eq!(t.final_decision, FinalDecision::Abstain);
        assert_eq!(t.rounds_executed, 3);
        for (r, round) in t.rounds.iter().enumerate() {
            assert_eq!(round.len(), 3);
            assert!(round.iter().all(|a| a.round == r as u32));
        }
    }

    #[test]
    fn majority_fallback() {
        let group = vec![fixed("a", &["A"]), fixed("b", &["A"]), fixed("c", &["B"])];
        let t = run(&DiscussionConfig::new(group), "A");
        assert_eq!(t.final_decision, FinalDecision::Majority { label: "A".into() });
    }

    #[test]
    fn zero_rounds_means_vote_on_initial() {
        let group = vec![fixed("a", &["A"]), fixed("b", &["C"]), fixed("c", &["C"])];
        let mut cfg = DiscussionConfig::new(group);
        cfg.r_max = 0;
        let t = run(&cfg, "A");
        assert_eq!(t.rounds_executed, 1);
        assert_eq!(t.final_decision, FinalDecision::Majority { label: "C".into() });
    }

    #[test]
    fn discussion_prompt_contains_others_reasoning() {
        let seen: Arc<std::sync::Mutex<HashMap<u32, String>>> = Default::default();
        let s = seen.clone();
        let spy = Agent::new(
            AgentProfile::new("spy", AgentBackend::Scripted),
            Arc::new(ScriptedBackend::from_fn(move |req| {
                let ctx = req.context.as_ref().unwrap();
                s.lock().unwrap().insert(ctx.round, req.messages[1].content.clone());
                Ok("mine\nFINAL ANSWER: C".into())
            })),
        );
        let group = vec![fixed("a", &["A"]), fixed("b", &["B"]), spy];
        run(&DiscussionConfig::new(group), "A");
        let prompt = seen.lock().unwrap()[&1].clone();
        assert!(prompt.contains("Annotator 3 (your previous annotation):\nLabel: C"));
        assert!(prompt.contains("Annotator 1:\nLabel: A"));
    }

    #[test]
    fn provider_failure_marks_failed() {
        let broken = Agent::new(
            AgentProfile::new("x", AgentBackend::Scripted),
            Arc::new(ScriptedBackend::from_fn(|req| {
                if req.context.as_ref().unwrap().round == 0 {
                    Ok("FINAL ANSWER: B".into())
                } else {
                    Err(ProviderError::Timeout { attempts: 5 })
                }
            })),
        );
        let group = vec![fixed("a", &["A"]), fixed("b", &["A"]), broken];
        let t = run(&DiscussionConfig::new(group), "A");
        assert!(t.final_decision.is_failed());
        assert_eq!(t.rounds.len(), 1);
    }

    #[test]
    fn auth_failure_aborts() {
        let broken = Agent::new(
            AgentProfile::new("x", AgentBackend::Scripted),
            Arc::new(ScriptedBackend::from_fn(|_| Err(ProviderError::Auth("bad key".into())))),
        );
        let gw = Gateway::uncached();
        let ts = TemplateSet::default();
        let cfg = DiscussionConfig::new(vec![fixed("a", &["A"]), broken]);
        let err = DiscussionEngine::new(&gw, &ts)
            .run(&cfg, &task(), &Instance::new("i", "t", None))
            .unwrap_err();
        assert!(matches!(err, EngineError::Provider(ProviderError::Auth(_))));
    }

    #[test]
    fn duplicate_agents_rejected() {
        let cfg = DiscussionConfig::new(vec![fixed("a", &["A"]), fixed("a", &["B"])]);
        assert!(matches!(cfg.validate(), Err(EngineError::Config(_))));
    }
}
