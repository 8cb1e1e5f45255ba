//! Evaluation statistics over transcripts: accuracy, Fleiss' kappa,
//! McNemar's test, the initial-pool upper bound, per-round series and
//! per-agent behavior flows.
//!
//! Everything here is a pure function of its inputs.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::discussion::{majority_vote, TiePolicy, Vote};
use crate::domain::{FinalDecision, LabelSpace, Outcome, Transcript};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no gold label for instance {0:?}")]
    MissingGold(String),
    #[error("invalid rating table: {0}")]
    InvalidTable(String),
    #[error("degenerate rating table: expected agreement is 1 but observed agreement is not")]
    Degenerate,
    #[error("transcript {0:?} has a different agent set")]
    AgentMismatch(String),
}

/// Gold labels keyed by instance id.
pub type Golds = HashMap<String, String>;

fn gold_of<'a>(golds: &'a Golds, id: &str) -> Result<&'a str, MetricsError> {
    golds
        .get(id)
        .map(String::as_str)
        .ok_or_else(|| MetricsError::MissingGold(id.to_string()))
}

/// Share of outcomes equal to their gold label. Invalid outcomes (including
/// abstentions and failures) count as wrong. An empty input scores 0.
pub fn accuracy(outcomes: &[Outcome], golds: &[&str]) -> Result<f64, MetricsError> {
    if outcomes.len() != golds.len() {
        return Err(MetricsError::LengthMismatch(outcomes.len(), golds.len()));
    }
    if outcomes.is_empty() {
        return Ok(0.0);
    }
    let correct = outcomes
        .iter()
        .zip(golds)
        .filter(|(o, g)| o.matches(g))
        .count();
    Ok(correct as f64 / outcomes.len() as f64)
}

/// N items by k categories of rater counts; every row sums to the same
/// number of raters n.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingTable {
    counts: Vec<Vec<u32>>,
    raters: u32,
}

impl RatingTable {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self, MetricsError> {
        let first = counts
            .first()
            .ok_or_else(|| MetricsError::InvalidTable("no items".into()))?;
        let k = first.len();
        if k < 2 {
            return Err(MetricsError::InvalidTable("need at least 2 categories".into()));
        }
        let raters: u32 = first.iter().sum();
        if raters < 2 {
            return Err(MetricsError::InvalidTable("need at least 2 raters per item".into()));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != k {
                return Err(MetricsError::InvalidTable(format!("row {i} has {} categories", row.len())));
            }
            if row.iter().sum::<u32>() != raters {
                return Err(MetricsError::InvalidTable(format!("row {i} does not sum to {raters}")));
            }
        }
        Ok(Self { counts, raters })
    }

    /// Builds a table from per-item category assignments (one entry per rater).
    pub fn from_assignments(items: &[Vec<usize>], categories: usize) -> Result<Self, MetricsError> {
        let counts = items
            .iter()
            .map(|raters| {
                let mut row = vec![0u32; categories];
                for &c in raters {
                    row[c] += 1;
                }
                row
            })
            .collect();
        Self::new(counts)
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    pub fn categories(&self) -> usize {
        self.counts[0].len()
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.counts
    }
}

/// Fleiss' kappa. Returns exactly 1.0 when every item is unanimous.
pub fn fleiss_kappa(table: &RatingTable) -> Result<f64, MetricsError> {
    let n = table.raters as f64;
    let items = table.items() as f64;
    if table
        .counts
        .iter()
        .all(|row| row.contains(&table.raters))
    {
        return Ok(1.0);
    }
    let p_bar = table
        .counts
        .iter()
        .map(|row| {
            let sq: f64 = row.iter().map(|&c| (c as f64) * (c as f64)).sum();
            (sq - n) / (n * (n - 1.0))
        })
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..table.categories())
        .map(|j| {
            let col: u32 = table.counts.iter().map(|row| row[j]).sum();
            let p = col as f64 / (items * n);
            p * p
        })
        .sum();
    if (1.0 - p_e).abs() < f64::EPSILON {
        return Err(MetricsError::Degenerate);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    Exact,
    Chi2Cc,
    #[default]
    Auto,
}

impl fmt::Display for McNemarMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            McNemarMethod::Exact => "exact",
            McNemarMethod::Chi2Cc => "chi2_cc",
            McNemarMethod::Auto => "auto",
        })
    }
}

impl std::str::FromStr for McNemarMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "exact" => Ok(McNemarMethod::Exact),
            "chi2_cc" | "chi2" => Ok(McNemarMethod::Chi2Cc),
            "auto" => Ok(McNemarMethod::Auto),
            other => Err(format!("unknown McNemar method {other:?} (exact | chi2_cc | auto)")),
        }
    }
}

/// Discordant pairs below this use the exact test under `Auto`.
pub const AUTO_EXACT_BELOW: u64 = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// First system correct, second wrong.
    pub b: u64,
    /// First system wrong, second correct.
    pub c: u64,
    /// The variant actually applied (never `Auto`).
    pub method: McNemarMethod,
    pub statistic: Option<f64>,
    pub p_value: f64,
}

/// Two-sided exact p-value: `min(1, 2 P(X <= min(b, c)))`, X ~ Bin(b + c, 1/2).
pub fn mcnemar_exact_p(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let m = b.min(c);
    let tail = if n <= 1000 {
        // Linear recurrence from 2^-n; exact while binomials stay below 2^53.
        let mut pmf = 0.5f64.powi(n as i32);
        let mut tail = pmf;
        for k in 0..m {
            pmf = pmf * (n - k) as f64 / (k + 1) as f64;
            tail += pmf;
        }
        tail
    } else {
        let mut ln_pmf = -(n as f64) * std::f64::consts::LN_2;
        let mut tail = ln_pmf.exp();
        for k in 0..m {
            ln_pmf += ((n - k) as f64).ln() - ((k + 1) as f64).ln();
            tail += ln_pmf.exp();
        }
        tail
    };
    (2.0 * tail).min(1.0)
}

/// Continuity-corrected statistic `(|b - c| - 1)^2 / (b + c)` and its
/// chi-square (1 df) upper-tail p-value.
pub fn mcnemar_chi2_cc(b: u64, c: u64) -> (f64, f64) {
    let n = b + c;
    if n == 0 {
        return (0.0, 1.0);
    }
    let d = b.abs_diff(c) as f64 - 1.0;
    let stat = d * d / n as f64;
    let dist = ChiSquared::new(1.0).expect("one degree of freedom");
    (stat, dist.sf(stat))
}

pub fn mcnemar(
    correct_a: &[bool],
    correct_b: &[bool],
    method: McNemarMethod,
) -> Result<McNemarResult, MetricsError> {
    if correct_a.len() != correct_b.len() {
        return Err(MetricsError::LengthMismatch(correct_a.len(), correct_b.len()));
    }
    let b = correct_a.iter().zip(correct_b).filter(|(a, b)| **a && !**b).count() as u64;
    let c = correct_a.iter().zip(correct_b).filter(|(a, b)| !**a && **b).count() as u64;
    Ok(mcnemar_counts(b, c, method))
}

pub fn mcnemar_counts(b: u64, c: u64, method: McNemarMethod) -> McNemarResult {
    let method = match method {
        McNemarMethod::Auto if b + c < AUTO_EXACT_BELOW => McNemarMethod::Exact,
        McNemarMethod::Auto => McNemarMethod::Chi2Cc,
        m => m,
    };
    let (statistic, p_value) = match method {
        McNemarMethod::Exact => (None, mcnemar_exact_p(b, c)),
        _ if b + c == 0 => (None, 1.0),
        _ => {
            let (s, p) = mcnemar_chi2_cc(b, c);
            (Some(s), p)
        }
    };
    McNemarResult {
        b,
        c,
        method,
        statistic,
        p_value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    pub recoverable: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// An instance is recoverable iff its gold label is among the valid round-0
/// outcomes. Transcripts without a round 0 are irrecoverable.
pub fn upper_bound(transcripts: &[Transcript], golds: &Golds) -> Result<UpperBound, MetricsError> {
    let mut recoverable = 0;
    for t in transcripts {
        let gold = gold_of(golds, &t.instance_id)?;
        if t.initial().iter().any(|a| a.outcome.matches(gold)) {
            recoverable += 1;
        }
    }
    let total = transcripts.len();
    Ok(UpperBound {
        recoverable,
        total,
        accuracy: if total == 0 { 0.0 } else { recoverable as f64 / total as f64 },
    })
}

fn common_agents(transcripts: &[&Transcript]) -> Result<Vec<String>, MetricsError> {
    let Some(first) = transcripts.first() else {
        return Ok(Vec::new());
    };
    let agents: Vec<String> = first.agent_ids().iter().map(|s| s.to_string()).collect();
    for t in transcripts {
        if t.agent_ids() != agents.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(MetricsError::AgentMismatch(t.instance_id.clone()));
        }
    }
    Ok(agents)
}

/// Outcomes of each agent at `round`, carrying the last executed round
/// forward for instances that stopped earlier.
fn outcomes_at(t: &Transcript, round: usize) -> Vec<Outcome> {
    let r = round.min(t.rounds.len() - 1);
    t.rounds[r].iter().map(|a| a.outcome.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAccuracy {
    pub agent_id: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub instances: usize,
    pub agents: Vec<AgentAccuracy>,
    /// Consensus label where reached, else the running majority vote.
    pub framework_accuracy: f64,
    /// `None` when fewer than two agents or no instances.
    pub fleiss_kappa: Option<f64>,
}

/// Accuracy and agreement after every round. Failed transcripts are left
/// out; invalid outcomes form their own agreement category.
pub fn per_round_series(
    transcripts: &[Transcript],
    golds: &Golds,
    space: &LabelSpace,
    tie_policy: TiePolicy,
) -> Result<Vec<RoundStats>, MetricsError> {
    let live: Vec<&Transcript> = transcripts
        .iter()
        .filter(|t| !t.final_decision.is_failed() && !t.rounds.is_empty())
        .collect();
    let agents = common_agents(&live)?;
    let rounds = live.iter().map(|t| t.rounds.len()).max().unwrap_or(0);
    let invalid_category = space.len();
    let mut series = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let mut agent_correct = vec![0usize; agents.len()];
        let mut framework_correct = 0usize;
        let mut assignments = Vec::with_capacity(live.len());
        for t in &live {
            let gold = gold_of(golds, &t.instance_id)?;
            let outcomes = outcomes_at(t, r);
            for (i, o) in outcomes.iter().enumerate() {
                if o.matches(gold) {
                    agent_correct[i] += 1;
                }
            }
            if let Vote::Label(l) = majority_vote(&outcomes, space, tie_policy, &t.instance_id) {
                if Outcome::Label(l).matches(gold) {
                    framework_correct += 1;
                }
            }
            assignments.push(
                outcomes
                    .iter()
                    .map(|o| o.label().and_then(|l| space.index_of(l)).unwrap_or(invalid_category))
                    .collect::<Vec<_>>(),
            );
        }
        let n = live.len() as f64;
        let kappa = if agents.len() >= 2 {
            let table = RatingTable::from_assignments(&assignments, space.len() + 1)?;
            Some(fleiss_kappa(&table)?)
        } else {
            None
        };
        series.push(RoundStats {
            round: r,
            instances: live.len(),
            agents: agents
                .iter()
                .zip(&agent_correct)
                .map(|(a, &c)| AgentAccuracy {
                    agent_id: a.clone(),
                    accuracy: c as f64 / n,
                })
                .collect(),
            framework_accuracy: framework_correct as f64 / n,
            fleiss_kappa: kappa,
        });
    }
    Ok(series)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Move {
    Kept,
    Changed,
    NotReached,
}

/// Where an agent stands at one stage of the discussion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Node {
    Correct,
    Wrong,
    /// The instance was settled before this stage.
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowCell {
    pub initial: Node,
    /// One move per discussion round.
    pub moves: Vec<Move>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowLink {
    /// Link goes from `stage` to `stage + 1`.
    pub stage: usize,
    pub from: Node,
    pub to: Node,
    pub kind: Move,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminalCounts {
    pub consensus_correct: usize,
    pub consensus_wrong: usize,
    pub majority_correct: usize,
    pub majority_wrong: usize,
    pub abstain: usize,
}

impl TerminalCounts {
    pub fn total(&self) -> usize {
        self.consensus_correct
            + self.consensus_wrong
            + self.majority_correct
            + self.majority_wrong
            + self.abstain
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowTally {
    pub agent_id: String,
    pub instances: usize,
    pub stages: usize,
    pub cells: Vec<FlowCell>,
    pub links: Vec<FlowLink>,
    /// Entering counts per stage node, `nodes[stage]` as (node, count).
    pub nodes: Vec<Vec<(Node, usize)>>,
    pub terminal: TerminalCounts,
}

impl FlowTally {
    pub fn cell_total(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    pub fn changed(&self) -> usize {
        self.links
            .iter()
            .filter(|l| l.kind == Move::Changed)
            .map(|l| l.count)
            .sum()
    }

    /// Nodes whose inflow differs from their outflow, as (stage, node, in, out).
    pub fn conservation_violations(&self) -> Vec<(usize, Node, usize, usize)> {
        let mut bad = Vec::new();
        for (stage, nodes) in self.nodes.iter().enumerate() {
            for &(node, count) in nodes {
                let inflow = if stage == 0 {
                    count
                } else {
                    self.links
                        .iter()
                        .filter(|l| l.stage + 1 == stage && l.to == node)
                        .map(|l| l.count)
                        .sum()
                };
                let outflow = if stage + 1 == self.stages {
                    count
                } else {
                    self.links
                        .iter()
                        .filter(|l| l.stage == stage && l.from == node)
                        .map(|l| l.count)
                        .sum()
                };
                if inflow != count || outflow != count {
                    bad.push((stage, node, inflow, outflow));
                }
            }
        }
        bad
    }
}

fn node_for(outcome: &Outcome, gold: &str) -> Node {
    if outcome.matches(gold) {
        Node::Correct
    } else {
        Node::Wrong
    }
}

/// Per-agent trajectories: correctness at the start, whether the label was
/// kept or changed in each discussion round, and how the instance ended.
/// Failed transcripts are left out.
pub fn transition_flows(
    transcripts: &[Transcript],
    golds: &Golds,
) -> Result<Vec<FlowTally>, MetricsError> {
    let live: Vec<&Transcript> = transcripts
        .iter()
        .filter(|t| !t.final_decision.is_failed() && !t.rounds.is_empty())
        .collect();
    let agents = common_agents(&live)?;
    let stages = live.iter().map(|t| t.rounds.len()).max().unwrap_or(1);

    let mut terminal = TerminalCounts::default();
    for t in &live {
        let gold = gold_of(golds, &t.instance_id)?;
        let correct = t.final_decision.outcome().matches(gold);
        match (&t.final_decision, correct) {
            (FinalDecision::Consensus { .. }, true) => terminal.consensus_correct += 1,
            (FinalDecision::Consensus { .. }, false) => terminal.consensus_wrong += 1,
            (FinalDecision::Majority { .. }, true) => terminal.majority_correct += 1,
            (FinalDecision::Majority { .. }, false) => terminal.majority_wrong += 1,
            _ => terminal.abstain += 1,
        }
    }

    let mut out = Vec::with_capacity(agents.len());
    for (ai, agent) in agents.iter().enumerate() {
        let mut cells: Vec<FlowCell> = Vec::new();
        let mut links: HashMap<(usize, Node, Node, Move), usize> = HashMap::new();
        let mut nodes: Vec<HashMap<Node, usize>> = vec![HashMap::new(); stages];
        for t in &live {
            let gold = gold_of(golds, &t.instance_id)?;
            let mut prev = &t.rounds[0][ai].outcome;
            let initial = node_for(prev, gold);
            *nodes[0].entry(initial).or_default() += 1;
            let mut from = initial;
            let mut moves = Vec::with_capacity(stages - 1);
            #[allow(clippy::needless_range_loop)]
            for stage in 1..stages {
                let (to, kind) = match t.rounds.get(stage) {
                    Some(round) => {
                        let cur = &round[ai].outcome;
                        let kind = if cur == prev { Move::Kept } else { Move::Changed };
                        prev = cur;
                        (node_for(cur, gold), kind)
                    }
                    None => (Node::Resolved, Move::NotReached),
                };
                *links.entry((stage - 1, from, to, kind)).or_default() += 1;
                *nodes[stage].entry(to).or_default() += 1;
                moves.push(kind);
                from = to;
            }
            match cells.iter_mut().find(|c| c.initial == initial && c.moves == moves) {
                Some(c) => c.count += 1,
                None => cells.push(FlowCell {
                    initial,
                    moves,
                    count: 1,
                }),
            }
        }
        cells.sort_by(|a, b| (a.initial, &a.moves).cmp(&(b.initial, &b.moves)));
        let mut links: Vec<FlowLink> = links
            .into_iter()
            .map(|((stage, from, to, kind), count)| FlowLink {
                stage,
                from,
                to,
                kind,
                count,
            })
            .collect();
        links.sort_by_key(|l| (l.stage, l.from, l.to, l.kind));
        let nodes = nodes
            .into_iter()
            .map(|m| {
                let mut v: Vec<(Node, usize)> = m.into_iter().collect();
                v.sort();
                v
            })
            .collect();
        out.push(FlowTally {
            agent_id: agent.clone(),
            instances: live.len(),
            stages,
            cells,
            links,
            nodes,
            terminal: terminal.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Annotation;

    fn l(s: &str) -> Outcome {
        Outcome::Label(s.into())
    }

    #[test]
    fn accuracy_cases() {
        let golds: Vec<&str> = vec!["A"; 200];
        let mut outcomes = vec![l("A"); 135];
        outcomes.extend(vec![l("B"); 65]);
        let acc = accuracy(&outcomes, &golds).unwrap();
        assert_eq!(acc, 0.675);
        assert_eq!(format!("{:.1}", acc * 100.0), "67.5");
        assert_eq!(accuracy(&vec![l("A"); 200], &golds).unwrap(), 1.0);
        assert_eq!(accuracy(&vec![Outcome::Invalid; 200], &golds).unwrap(), 0.0);
        assert_eq!(accuracy(&[l("a")], &["A"]).unwrap(), 1.0);
        assert_eq!(
            accuracy(&[l("A")], &[]),
            Err(MetricsError::LengthMismatch(1, 0))
        );
    }

    #[test]
    fn kappa_hand_case() {
        let t = RatingTable::new(vec![vec![3, 0], vec![2, 1]]).unwrap();
        assert!((fleiss_kappa(&t).unwrap() - (-0.2)).abs() < 1e-12);
    }

    #[test]
    fn kappa_unanimous_is_one() {
        let t = RatingTable::new(vec![vec![3, 0, 0], vec![0, 3, 0], vec![3, 0, 0]]).unwrap();
        assert_eq!(fleiss_kappa(&t).unwrap(), 1.0);
        let single_category = RatingTable::new(vec![vec![3, 0]; 4]).unwrap();
        assert_eq!(fleiss_kappa(&single_category).unwrap(), 1.0);
    }

    #[test]
    fn kappa_column_permutation_invariant() {
        let t = RatingTable::new(vec![vec![2, 1, 0], vec![0, 1, 2], vec![1, 1, 1], vec![3, 0, 0]]).unwrap();
        let p = RatingTable::new(
            t.rows().iter().map(|r| vec![r[2], r[0], r[1]]).collect(),
        )
        .unwrap();
        assert!((fleiss_kappa(&t).unwrap() - fleiss_kappa(&p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rating_table_validation() {
        assert!(RatingTable::new(vec![]).is_err());
        assert!(RatingTable::new(vec![vec![3]]).is_err());
        assert!(RatingTable::new(vec![vec![1, 0]]).is_err());
        assert!(RatingTable::new(vec![vec![2, 1], vec![1, 1]]).is_err());
    }

    #[test]
    fn mcnemar_cases() {
        assert_eq!(mcnemar_counts(4, 4, McNemarMethod::Exact).p_value, 1.0);
        assert_eq!(mcnemar_counts(1, 8, McNemarMethod::Exact).p_value, 0.0390625);
        assert!((mcnemar_counts(600, 700, McNemarMethod::Exact).p_value - mcnemar_counts(600, 700, McNemarMethod::Chi2Cc).p_value).abs() < 1e-3);
        assert_eq!(mcnemar_counts(0, 0, McNemarMethod::Chi2Cc).p_value, 1.0);
        assert_eq!(mcnemar_counts(3, 4, McNemarMethod::Auto).method, McNemarMethod::Exact);
        assert_eq!(mcnemar_counts(20, 5, McNemarMethod::Auto).method, McNemarMethod::Chi2Cc);
        let r = mcnemar_counts(20, 5, McNemarMethod::Chi2Cc);
        assert!((r.statistic.unwrap() - 196.0 / 25.0).abs() < 1e-12);
    }

    #[test]
    fn mcnemar_vectors_and_symmetry() {
        let a = [true, true, false, false, true];
        let b = [false, true, true, true, true];
        let ab = mcnemar(&a, &b, McNemarMethod::Exact).unwrap();
        let ba = mcnemar(&b, &a, McNemarMethod::Exact).unwrap();
        assert_eq!((ab.b, ab.c), (1, 2));
        assert_eq!((ba.b, ba.c), (2, 1));
        assert_eq!(ab.p_value, ba.p_value);
        assert!(mcnemar(&a, &b[..2], McNemarMethod::Auto).is_err());
    }

    fn transcript(id: &str, rounds: &[&[&str]], decision: FinalDecision) -> Transcript {
        Transcript {
            instance_id: id.into(),
            rounds: rounds
                .iter()
                .enumerate()
                .map(|(r, labels)| {
                    labels
                        .iter()
                        .enumerate()
                        .map(|(i, lab)| Annotation {
                            agent_id: format!("a{i}"),
                            round: r as u32,
                            outcome: if *lab == "-" { Outcome::Invalid } else { l(lab) },
                            reasoning: String::new(),
                            raw_response_ref: String::new(),
                        })
                        .collect()
                })
                .collect(),
            final_decision: decision,
            rounds_executed: rounds.len() as u32,
        }
    }

    fn golds(pairs: &[(&str, &str)]) -> Golds {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn upper_bound_membership() {
        let ts = vec![
            transcript("x", &[&["A", "B", "C"]], FinalDecision::Abstain),
            transcript("y", &[&["A", "A", "A"]], FinalDecision::Consensus { label: "A".into() }),
        ];
        let ub = upper_bound(&ts, &golds(&[("x", "B"), ("y", "B")])).unwrap();
        assert_eq!((ub.recoverable, ub.total), (1, 2));
        assert_eq!(ub.accuracy, 0.5);
        assert_eq!(
            upper_bound(&ts, &golds(&[("x", "B")])),
            Err(MetricsError::MissingGold("y".into()))
        );
    }

    fn space() -> LabelSpace {
        LabelSpace::new(["A", "B", "C"]).unwrap()
    }

    #[test]
    fn series_carries_consensus_forward() {
        let ts = vec![
            transcript("x", &[&["A", "A", "A"]], FinalDecision::Consensus { label: "A".into() }),
            transcript(
                "y",
                &[&["A", "B", "B"], &["B", "B", "B"]],
                FinalDecision::Consensus { label: "B".into() },
            ),
        ];
        let g = golds(&[("x", "A"), ("y", "B")]);
        let s = per_round_series(&ts, &g, &space(), TiePolicy::Abstain).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].framework_accuracy, 1.0);
        assert_eq!(s[0].agents[0].accuracy, 0.5);
        assert_eq!(s[1].agents[0].accuracy, 1.0);
        assert_eq!(s[1].fleiss_kappa, Some(1.0));
        assert!(s[0].fleiss_kappa.unwrap() < 1.0);
    }

    #[test]
    fn series_invalid_is_its_own_category() {
        let ts = vec![
            transcript("x", &[&["A", "A", "-"]], FinalDecision::Majority { label: "A".into() }),
            transcript("y", &[&["-", "-", "-"]], FinalDecision::Abstain),
        ];
        let g = golds(&[("x", "A"), ("y", "B")]);
        let s = per_round_series(&ts, &g, &space(), TiePolicy::Abstain).unwrap();
        let table = RatingTable::new(vec![vec![2, 0, 0, 1], vec![0, 0, 0, 3]]).unwrap();
        assert_eq!(s[0].fleiss_kappa, Some(fleiss_kappa(&table).unwrap()));
        assert_eq!(s[0].instances, 2);
    }

    #[test]
    fn flows_classify_trajectories() {
        let ts = vec![
            transcript("x", &[&["A", "A", "A"]], FinalDecision::Consensus { label: "A".into() }),
            transcript(
                "y",
                &[&["A", "B", "C"], &["A", "B", "B"], &["B", "B", "B"]],
                FinalDecision::Consensus { label: "B".into() },
            ),
            transcript("z", &[&["A", "B", "C"]], FinalDecision::Failed { error: "boom".into() }),
        ];
        let g = golds(&[("x", "A"), ("y", "B"), ("z", "A")]);
        let flows = transition_flows(&ts, &g).unwrap();
        assert_eq!(flows.len(), 3);
        let a0 = &flows[0];
        assert_eq!(a0.instances, 2);
        assert_eq!(a0.cell_total(), 2);
        assert_eq!(a0.stages, 3);
        assert!(a0.cells.contains(&FlowCell {
            initial: Node::Correct,
            moves: vec![Move::NotReached, Move::NotReached],
            count: 1
        }));
        assert!(a0.cells.contains(&FlowCell {
            initial: Node::Wrong,
            moves: vec![Move::Kept, Move::Changed],
            count: 1
        }));
        assert_eq!(a0.changed(), 1);
        assert_eq!(flows[1].changed(), 0);
        assert_eq!(flows[2].changed(), 1);
        assert_eq!(a0.terminal.consensus_correct, 2);
        assert!(flows.iter().all(|f| f.terminal == a0.terminal));
        assert!(flows.iter().all(|f| f.conservation_violations().is_empty()));
    }
}
