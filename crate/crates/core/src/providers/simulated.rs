//! Deterministic stand-in annotator.
//!
//! A simulated agent answers from the structured [`AnnotationContext`] of a
//! request. Every draw comes from a generator keyed by the policy seed, the
//! instance, the round, the sample index and the (order-free) prior history,
//! so the same question always gets the same answer.

use std::collections::BTreeMap;

use super::{AnnotationContext, ChatBackend, ChatRequest, ChatResponse, ProviderError};
use crate::domain::{canonicalize, Outcome, SimulatedPolicy};
use crate::prompting::PromptMode;
use crate::rng;

pub struct SimulatedBackend {
    policy: SimulatedPolicy,
}

impl SimulatedBackend {
    pub fn new(policy: SimulatedPolicy) -> Self {
        Self { policy }
    }
}

impl ChatBackend for SimulatedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let ctx = request.context.as_ref().ok_or_else(|| {
            ProviderError::Unsupported("simulated backend needs an annotation context".into())
        })?;
        if ctx.labels.is_empty() {
            return Err(ProviderError::Unsupported("empty label list".into()));
        }
        Ok(ChatResponse::text(simulate_response(
            &self.policy,
            ctx,
            request.sample_index,
        )))
    }

    fn describe(&self) -> String {
        "simulated".into()
    }
}

fn index_of(labels: &[String], outcome: &Outcome) -> Option<usize> {
    let l = canonicalize(outcome.label()?);
    labels.iter().position(|x| canonicalize(x) == l)
}

/// Sorted label counts, so the history hash does not depend on agent order.
fn multiset(outcomes: &[Outcome]) -> String {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for o in outcomes {
        *counts.entry(o.to_string()).or_default() += 1;
    }
    counts
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Most frequent label of a round; ties go to the earliest label in the
/// label space.
fn modal(labels: &[String], outcomes: &[Outcome]) -> Option<usize> {
    let mut counts = vec![0usize; labels.len()];
    for o in outcomes {
        if let Some(i) = index_of(labels, o) {
            counts[i] += 1;
        }
    }
    let best = *counts.iter().max()?;
    (best > 0).then(|| counts.iter().position(|&c| c == best).unwrap())
}

/// Nearest pool member by label-space position; equal distances go to the
/// lower position.
fn project(pool: &[usize], idx: usize) -> usize {
    pool.iter()
        .copied()
        .min_by_key(|&p| (p.abs_diff(idx), p))
        .unwrap_or(idx)
}

/// Index of the label the policy emits in this context.
pub fn simulate_label(policy: &SimulatedPolicy, ctx: &AnnotationContext, sample_index: u32) -> usize {
    let labels = &ctx.labels;
    let n = labels.len() as u64;
    let seed = policy.seed.to_le_bytes();
    let round = ctx.round.to_le_bytes();
    let sample = sample_index.to_le_bytes();
    let own = ctx
        .own_previous
        .as_ref()
        .map(ToString::to_string)
        .unwrap_or_default();
    let prev = multiset(&ctx.previous_round);
    let mut rng = rng::from_parts(&[
        &seed,
        ctx.instance_id.as_bytes(),
        &round,
        &sample,
        own.as_bytes(),
        prev.as_bytes(),
    ]);
    let gold = ctx
        .gold
        .as_ref()
        .and_then(|g| index_of(labels, &Outcome::Label(g.clone())));

    let stubborn_roll = rng::unit(&mut rng);
    let follow_roll = rng::unit(&mut rng);
    let accuracy_roll = rng::unit(&mut rng);
    let wrong_pick = rng::below(&mut rng, (n - 1).max(1)) as usize;
    let any_pick = rng::below(&mut rng, n) as usize;
    let draw = || -> usize {
        match gold {
            Some(g) if accuracy_roll < policy.accuracy || n == 1 => g,
            // Uniform over the labels other than gold.
            Some(g) if wrong_pick >= g => wrong_pick + 1,
            Some(_) => wrong_pick,
            None => any_pick,
        }
    };

    let chosen = if ctx.round == 0 {
        draw()
    } else {
        let own = ctx.own_previous.as_ref().and_then(|o| index_of(labels, o));
        let majority = modal(labels, &ctx.previous_round);
        match (own, majority) {
            (Some(own), _) if stubborn_roll < policy.stubbornness => own,
            (_, Some(m)) if follow_roll < policy.follow_majority => m,
            _ => draw(),
        }
    };

    if policy.restrict_to_pool && ctx.round > 0 {
        let pool: Vec<usize> = ctx
            .initial_pool
            .iter()
            .filter_map(|o| index_of(labels, o))
            .collect();
        project(&pool, chosen)
    } else {
        chosen
    }
}

/// Full response text, ending in a well-formed final-answer line.
pub fn simulate_response(policy: &SimulatedPolicy, ctx: &AnnotationContext, sample_index: u32) -> String {
    let label = &ctx.labels[simulate_label(policy, ctx, sample_index)];
    match ctx.mode {
        Some(PromptMode::RefineReview) => format!(
            "Review of draft for instance {}: the draft label {label} is consistent with \
             the guideline; no change is needed.",
            ctx.instance_id
        ),
        Some(PromptMode::DiscussRevise) => format!(
            "Having read the other annotators' reasoning for instance {}, I settle on {label}.\n\
             FINAL ANSWER: {label}",
            ctx.instance_id
        ),
        _ => format!(
            "Reading instance {} against the guideline, the best fitting category is {label}.\n\
             FINAL ANSWER: {label}",
            ctx.instance_id
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(p: f64, s: f64, f: f64) -> SimulatedPolicy {
        SimulatedPolicy {
            accuracy: p,
            stubbornness: s,
            follow_majority: f,
            restrict_to_pool: false,
            seed: 11,
        }
    }

    fn ctx(id: &str, round: u32) -> AnnotationContext {
        AnnotationContext {
            instance_id: id.into(),
            gold: Some("Hawkish".into()),
            labels: vec!["Dovish".into(), "Hawkish".into(), "Neutral".into()],
            round,
            ..Default::default()
        }
    }

    fn lab(s: &str) -> Outcome {
        Outcome::Label(s.into())
    }

    #[test]
    fn perfect_accuracy_returns_gold() {
        for i in 0..100 {
            assert_eq!(simulate_label(&policy(1.0, 0.0, 0.0), &ctx(&format!("i{i}"), 0), 0), 1);
        }
    }

    #[test]
    fn zero_accuracy_binary_space_returns_complement() {
        let mut c = ctx("x", 0);
        c.labels = vec!["Yes".into(), "No".into()];
        c.gold = Some("No".into());
        for s in 0..20 {
            assert_eq!(simulate_label(&policy(0.0, 0.0, 0.0), &c, s), 0);
        }
    }

    #[test]
    fn full_stubbornness_repeats_own_label() {
        let p = policy(0.0, 1.0, 1.0);
        for i in 0..50 {
            let mut c = ctx(&format!("i{i}"), 0);
            let first = simulate_label(&p, &c, 0);
            for round in 1..=2 {
                c.round = round;
                c.own_previous = Some(lab(&c.labels[first].clone()));
                c.previous_round = vec![lab("Dovish"), lab("Dovish"), lab(&c.labels[first].clone())];
                assert_eq!(simulate_label(&p, &c, 0), first);
            }
        }
    }

    #[test]
    fn follower_adopts_modal_label() {
        let mut c = ctx("x", 1);
        c.own_previous = Some(lab("Neutral"));
        c.previous_round = vec![lab("Dovish"), lab("Dovish"), lab("Neutral")];
        assert_eq!(simulate_label(&policy(0.5, 0.0, 1.0), &c, 0), 0);
    }

    #[test]
    fn pool_restriction_projects_to_nearest() {
        assert_eq!(project(&[0, 4], 2), 0);
        assert_eq!(project(&[0, 4], 3), 4);
        assert_eq!(project(&[1], 7), 1);
        let mut p = policy(1.0, 0.0, 0.0);
        p.restrict_to_pool = true;
        let mut c = ctx("x", 1);
        c.initial_pool = vec![lab("Dovish"), lab("Dovish"), lab("Dovish")];
        c.previous_round = c.initial_pool.clone();
        c.own_previous = Some(lab("Dovish"));
        // Gold is Hawkish, but it was never proposed in round 0.
        assert_eq!(simulate_label(&p, &c, 0), 0);
    }

    #[test]
    fn response_has_final_answer_line() {
        let text = simulate_response(&policy(1.0, 0.0, 0.0), &ctx("x", 0), 0);
        assert!(text.ends_with("FINAL ANSWER: Hawkish"));
    }

    #[test]
    fn history_order_does_not_matter() {
        let p = policy(0.3, 0.2, 0.3);
        let mut a = ctx("x", 1);
        a.own_previous = Some(lab("Dovish"));
        a.previous_round = vec![lab("Dovish"), lab("Neutral"), lab("Hawkish")];
        let mut b = a.clone();
        b.previous_round.reverse();
        for s in 0..30 {
            assert_eq!(simulate_label(&p, &a, s), simulate_label(&p, &b, s));
        }
    }

    #[test]
    fn missing_context_is_rejected() {
        let backend = SimulatedBackend::new(policy(1.0, 0.0, 0.0));
        let req = ChatRequest::new(vec![], 0.0);
        assert!(matches!(backend.complete(&req), Err(ProviderError::Unsupported(_))));
    }
}
