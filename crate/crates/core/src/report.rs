//! Turns transcripts of one or more runs into report tables and files.
//!
//! Rows of the accuracy table are systems (an agent under a strategy, the
//! round-0 majority vote, or the discussion outcome); columns are datasets.
//! When reasoning agents are present, "best non-reasoning" rows are added in
//! two flavors: the best system chosen separately for each dataset, and the
//! single system with the best mean accuracy across datasets.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discussion::{majority_vote, TiePolicy, Vote};
use crate::domain::{LabelSpace, Outcome, Transcript};
use crate::metrics::{
    mcnemar, per_round_series, transition_flows, upper_bound, FlowTally, Golds, McNemarMethod,
    MetricsError, RoundStats, UpperBound,
};

/// Everything needed to score one run.
#[derive(Debug, Clone)]
pub struct RunInput {
    pub run: String,
    pub dataset: String,
    /// True when discussion rounds were allowed.
    pub discussion: bool,
    /// Procedure that produced round 0, e.g. `cot`.
    pub initial: String,
    /// Agent ids with whether each is a reasoning model.
    pub agents: Vec<(String, bool)>,
    pub space: LabelSpace,
    pub tie_policy: TiePolicy,
    pub golds: Golds,
    pub transcripts: Vec<Transcript>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SystemKind {
    Agent { reasoning: bool },
    Majority,
    Final,
}

#[derive(Debug, Clone)]
struct System {
    name: String,
    dataset: String,
    initial: String,
    kind: SystemKind,
    ids: Vec<String>,
    correct: Vec<bool>,
}

impl System {
    fn accuracy(&self) -> Option<f64> {
        if self.correct.is_empty() {
            None
        } else {
            Some(self.correct.iter().filter(|c| **c).count() as f64 / self.correct.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub system: String,
    /// Empty for ordinary rows; `per-dataset` or `overall` for best rows.
    pub selection: String,
    pub dataset: String,
    /// System the cell was taken from (differs from `system` for best rows).
    pub source: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceCell {
    pub comparison: String,
    pub selection: String,
    pub dataset: String,
    pub first: String,
    pub second: String,
    pub b: u64,
    pub c: u64,
    pub method: McNemarMethod,
    pub statistic: Option<f64>,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub dataset: String,
    pub instances: usize,
    pub failed: usize,
    /// Instances entering agreement and flow statistics (not failed).
    pub evaluated: usize,
    pub final_accuracy: f64,
    pub round0_majority_accuracy: Option<f64>,
    /// Final minus round-0 majority accuracy; a statistic, not a guarantee.
    pub final_minus_majority: Option<f64>,
    pub upper_bound: UpperBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub run: String,
    pub dataset: String,
    pub rounds: Vec<RoundStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEntry {
    pub run: String,
    pub dataset: String,
    pub agents: Vec<FlowTally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mcnemar: McNemarMethod,
    pub summaries: Vec<RunSummary>,
    pub accuracy: Vec<AccuracyCell>,
    pub significance: Vec<SignificanceCell>,
    pub series: Vec<SeriesEntry>,
    pub flows: Vec<FlowEntry>,
}

fn majority_correct(t: &Transcript, input: &RunInput, gold: &str) -> bool {
    let outcomes: Vec<Outcome> = t.initial().iter().map(|a| a.outcome.clone()).collect();
    match majority_vote(&outcomes, &input.space, input.tie_policy, &t.instance_id) {
        Vote::Label(l) => Outcome::Label(l).matches(gold),
        Vote::Abstain => false,
    }
}

fn systems_for(input: &RunInput) -> Result<Vec<System>, MetricsError> {
    let mut ids = Vec::with_capacity(input.transcripts.len());
    let mut golds = Vec::with_capacity(input.transcripts.len());
    for t in &input.transcripts {
        let g = input
            .golds
            .get(&t.instance_id)
            .ok_or_else(|| MetricsError::MissingGold(t.instance_id.clone()))?;
        ids.push(t.instance_id.clone());
        golds.push(g.as_str());
    }
    let system = |name: String, kind, correct| System {
        name,
        dataset: input.dataset.clone(),
        initial: input.initial.clone(),
        kind,
        ids: ids.clone(),
        correct,
    };
    let mut out = Vec::new();
    for (agent, reasoning) in &input.agents {
        let correct = input
            .transcripts
            .iter()
            .zip(&golds)
            .map(|(t, g)| t.annotation(0, agent).is_some_and(|a| a.outcome.matches(g)))
            .collect();
        out.push(system(
            format!("{agent} / {}", input.initial),
            SystemKind::Agent {
                reasoning: *reasoning,
            },
            correct,
        ));
    }
    if input.agents.len() > 1 {
        let correct = input
            .transcripts
            .iter()
            .zip(&golds)
            .map(|(t, g)| majority_correct(t, input, g))
            .collect();
        out.push(system(
            format!("majority vote / {}", input.initial),
            SystemKind::Majority,
            correct,
        ));
    }
    if input.discussion {
        let correct = input
            .transcripts
            .iter()
            .zip(&golds)
            .map(|(t, g)| t.final_decision.outcome().matches(g))
            .collect();
        out.push(system(input.run.clone(), SystemKind::Final, correct));
    }
    Ok(out)
}

fn significance(
    comparison: &str,
    selection: &str,
    first: &System,
    second: &System,
    method: McNemarMethod,
) -> Result<Option<SignificanceCell>, MetricsError> {
    // Paired tests need the same instances in the same order.
    if first.ids != second.ids {
        let a: HashSet<&String> = first.ids.iter().collect();
        let b: HashSet<&String> = second.ids.iter().collect();
        if a != b {
            return Ok(None);
        }
        let pos: HashMap<&String, usize> =
            second.ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
        let reordered: Vec<bool> = first.ids.iter().map(|id| second.correct[pos[id]]).collect();
        return significance(
            comparison,
            selection,
            first,
            &System {
                ids: first.ids.clone(),
                correct: reordered,
                ..second.clone()
            },
            method,
        );
    }
    let r = mcnemar(&first.correct, &second.correct, method)?;
    Ok(Some(SignificanceCell {
        comparison: comparison.to_string(),
        selection: selection.to_string(),
        dataset: first.dataset.clone(),
        first: first.name.clone(),
        second: second.name.clone(),
        b: r.b,
        c: r.c,
        method: r.method,
        statistic: r.statistic,
        p_value: r.p_value,
    }))
}

fn cell(system: &str, selection: &str, s: &System) -> AccuracyCell {
    AccuracyCell {
        system: system.to_string(),
        selection: selection.to_string(),
        dataset: s.dataset.clone(),
        source: s.name.clone(),
        correct: s.correct.iter().filter(|c| **c).count(),
        total: s.correct.len(),
        accuracy: s.accuracy(),
    }
}

/// Picks the first system with the highest score.
fn best_by<'a>(systems: &[&'a System], score: impl Fn(&System) -> f64) -> Option<&'a System> {
    let mut best: Option<(&System, f64)> = None;
    for s in systems {
        let v = score(s);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((s, v));
        }
    }
    best.map(|(s, _)| s)
}

pub fn build_report(inputs: &[RunInput], method: McNemarMethod) -> Result<MetricsReport, MetricsError> {
    let mut systems: Vec<System> = Vec::new();
    let mut summaries = Vec::new();
    let mut series = Vec::new();
    let mut flows = Vec::new();
    let mut significance_cells = Vec::new();

    for input in inputs {
        let mut own = systems_for(input)?;
        // Disambiguate rows that would collide with an earlier run.
        for s in &mut own {
            let base = s.name.clone();
            let mut k = 2;
            while systems.iter().any(|o| o.name == s.name && o.dataset == s.dataset) {
                s.name = format!("{base} #{k}");
                k += 1;
            }
        }
        let final_sys = own.iter().find(|s| s.kind == SystemKind::Final);
        let mv_sys = own.iter().find(|s| s.kind == SystemKind::Majority);
        if let (Some(f), Some(m)) = (final_sys, mv_sys) {
            let name = format!("{} vs {}", f.name, m.name);
            significance_cells.extend(significance(&name, "", f, m, method)?);
        }
        let failed = input
            .transcripts
            .iter()
            .filter(|t| t.final_decision.is_failed())
            .count();
        let final_accuracy = {
            let correct = input
                .transcripts
                .iter()
                .filter(|t| {
                    input
                        .golds
                        .get(&t.instance_id)
                        .is_some_and(|g| t.final_decision.outcome().matches(g))
                })
                .count();
            if input.transcripts.is_empty() {
                0.0
            } else {
                correct as f64 / input.transcripts.len() as f64
            }
        };
        let mv_accuracy = mv_sys.and_then(System::accuracy);
        summaries.push(RunSummary {
            run: input.run.clone(),
            dataset: input.dataset.clone(),
            instances: input.transcripts.len(),
            failed,
            evaluated: input.transcripts.len() - failed,
            final_accuracy,
            round0_majority_accuracy: mv_accuracy,
            final_minus_majority: mv_accuracy.map(|m| final_accuracy - m),
            upper_bound: upper_bound(&input.transcripts, &input.golds)?,
        });
        series.push(SeriesEntry {
            run: input.run.clone(),
            dataset: input.dataset.clone(),
            rounds: per_round_series(&input.transcripts, &input.golds, &input.space, input.tie_policy)?,
        });
        flows.push(FlowEntry {
            run: input.run.clone(),
            dataset: input.dataset.clone(),
            agents: transition_flows(&input.transcripts, &input.golds)?,
        });
        systems.extend(own);
    }

    let mut accuracy: Vec<AccuracyCell> = systems.iter().map(|s| cell(&s.name, "", s)).collect();

    let datasets = ordered_unique(systems.iter().map(|s| s.dataset.as_str()));
    let reasoning: Vec<&System> = systems
        .iter()
        .filter(|s| s.kind == SystemKind::Agent { reasoning: true })
        .collect();
    if !reasoning.is_empty() {
        let tags = ordered_unique(
            systems
                .iter()
                .filter(|s| s.kind == SystemKind::Agent { reasoning: false })
                .map(|s| s.initial.as_str()),
        );
        for tag in tags {
            let pool: Vec<&System> = systems
                .iter()
                .filter(|s| s.kind == SystemKind::Agent { reasoning: false } && s.initial == tag)
                .collect();
            let row = format!("best non-reasoning / {tag}");
            // Overall: the agent (without strategy suffix) with best mean accuracy.
            let agent_of = |s: &System| s.name.rsplit_once(" / ").map_or(s.name.clone(), |p| p.0.to_string());
            let names = ordered_unique(pool.iter().map(|s| s.name.as_str()));
            let mean = |name: &str| {
                let accs: Vec<f64> = pool
                    .iter()
                    .filter(|s| s.name == name)
                    .filter_map(|s| s.accuracy())
                    .collect();
                if accs.is_empty() {
                    f64::NEG_INFINITY
                } else {
                    accs.iter().sum::<f64>() / accs.len() as f64
                }
            };
            let overall_name = names
                .iter()
                .max_by(|a, b| mean(a).total_cmp(&mean(b)).then(std::cmp::Ordering::Greater))
                .cloned();
            for ds in &datasets {
                let here: Vec<&System> = pool.iter().copied().filter(|s| s.dataset == *ds).collect();
                let picks = [
                    ("per-dataset", best_by(&here, |s| s.accuracy().unwrap_or(f64::NEG_INFINITY))),
                    (
                        "overall",
                        here.iter().copied().find(|s| Some(&s.name) == overall_name.as_ref()),
                    ),
                ];
                for (selection, pick) in picks {
                    let Some(best) = pick else { continue };
                    accuracy.push(cell(&row, selection, best));
                    for r in reasoning.iter().filter(|r| r.dataset == *ds) {
                        let name = format!("{} vs {row}", agent_of(r));
                        significance_cells.extend(significance(&name, selection, r, best, method)?);
                    }
                }
            }
        }
    }

    Ok(MetricsReport {
        mcnemar: method,
        summaries,
        accuracy,
        significance: significance_cells,
        series,
        flows,
    })
}

fn ordered_unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = Vec::<String>::new();
    for i in items {
        if !seen.iter().any(|s| s == i) {
            seen.push(i.to_string());
        }
    }
    seen
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Percentage with one decimal, or `n=0` for an empty cell.
pub fn format_accuracy(cell: &AccuracyCell) -> String {
    match cell.accuracy {
        Some(a) => format!("{:.1}", a * 100.0),
        None => "n=0".into(),
    }
}

/// p-value rounded to three decimals.
pub fn format_p(p: f64) -> String {
    format!("{p:.3}")
}

fn pivot<T>(
    rows: &[T],
    key: impl Fn(&T) -> (String, String),
    dataset: impl Fn(&T) -> &str,
    value: impl Fn(&T) -> String,
    header: &str,
) -> String {
    let datasets = ordered_unique(rows.iter().map(&dataset));
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = key(r);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = String::new();
    out.push_str(header);
    for d in &datasets {
        out.push(',');
        out.push_str(&csv_field(d));
    }
    out.push('\n');
    for k in &keys {
        let _ = write!(out, "{},{}", csv_field(&k.0), csv_field(&k.1));
        for d in &datasets {
            out.push(',');
            if let Some(r) = rows.iter().find(|r| key(r) == *k && dataset(r) == d) {
                out.push_str(&value(r));
            }
        }
        out.push('\n');
    }
    out
}

pub fn accuracy_csv(report: &MetricsReport) -> String {
    pivot(
        &report.accuracy,
        |c| (c.system.clone(), c.selection.clone()),
        |c| &c.dataset,
        format_accuracy,
        "system,selection",
    )
}

pub fn significance_csv(report: &MetricsReport) -> String {
    pivot(
        &report.significance,
        |c| (c.comparison.clone(), c.selection.clone()),
        |c| &c.dataset,
        |c| format_p(c.p_value),
        "comparison,selection",
    )
}

pub fn summary_csv(report: &MetricsReport) -> String {
    let mut out = String::from(
        "run,dataset,instances,failed,evaluated,final_accuracy,round0_majority_accuracy,upper_bound\n",
    );
    for s in &report.summaries {
        let pct = |v: f64| format!("{:.1}", v * 100.0);
        let acc = if s.instances == 0 { "n=0".into() } else { pct(s.final_accuracy) };
        let ub = if s.instances == 0 { "n=0".into() } else { pct(s.upper_bound.accuracy) };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&s.run),
            csv_field(&s.dataset),
            s.instances,
            s.failed,
            s.evaluated,
            acc,
            s.round0_majority_accuracy.map(pct).unwrap_or_default(),
            ub
        );
    }
    out
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report values serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct UpperBoundEntry<'a> {
    run: &'a str,
    dataset: &'a str,
    recoverable: usize,
    total: usize,
    upper_bound_accuracy: f64,
    final_accuracy: f64,
}

/// Writes all report files into `dir`.
pub fn write_reports(report: &MetricsReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let ub: Vec<UpperBoundEntry> = report
        .summaries
        .iter()
        .map(|s| UpperBoundEntry {
            run: &s.run,
            dataset: &s.dataset,
            recoverable: s.upper_bound.recoverable,
            total: s.upper_bound.total,
            upper_bound_accuracy: s.upper_bound.accuracy,
            final_accuracy: s.final_accuracy,
        })
        .collect();
    let files = [
        ("accuracy.csv", accuracy_csv(report)),
        ("significance.csv", significance_csv(report)),
        ("summary.csv", summary_csv(report)),
        ("per_round.json", json(&report.series)),
        ("flows.json", json(&report.flows)),
        ("upper_bound.json", json(&ub)),
        ("metrics.json", json(report)),
    ];
    for (name, body) in files {
        std::fs::write(dir.join(name), body)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Annotation, FinalDecision};

    fn t(id: &str, labels: &[&str], decision: FinalDecision) -> Transcript {
        Transcript {
            instance_id: id.into(),
            rounds: vec![labels
                .iter()
                .enumerate()
                .map(|(i, l)| Annotation {
                    agent_id: format!("a{i}"),
                    round: 0,
                    outcome: Outcome::Label(l.to_string()),
                    reasoning: String::new(),
                    raw_response_ref: String::new(),
                })
                .collect()],
            final_decision: decision,
            rounds_executed: 1,
        }
    }

    fn input(dataset: &str, reasoning: bool, transcripts: Vec<Transcript>) -> RunInput {
        let golds = transcripts
            .iter()
            .map(|t| (t.instance_id.clone(), "A".to_string()))
            .collect();
        RunInput {
            run: "discussion".into(),
            dataset: dataset.into(),
            discussion: true,
            initial: "cot".into(),
            agents: vec![("a0".into(), reasoning), ("a1".into(), false), ("a2".into(), false)],
            space: LabelSpace::new(["A", "B"]).unwrap(),
            tie_policy: TiePolicy::Abstain,
            golds,
            transcripts,
        }
    }

    fn cons(l: &str) -> FinalDecision {
        FinalDecision::Consensus { label: l.into() }
    }

    #[test]
    fn accuracy_table_layout() {
        let ts = vec![
            t("x", &["A", "A", "A"], cons("A")),
            t("y", &["B", "A", "B"], FinalDecision::Majority { label: "B".into() }),
        ];
        let r = build_report(&[input("fomc", false, ts)], McNemarMethod::Auto).unwrap();
        let csv = accuracy_csv(&r);
        assert_eq!(
            csv,
            "system,selection,fomc\na0 / cot,,50.0\na1 / cot,,100.0\na2 / cot,,50.0\nmajority vote / cot,,50.0\ndiscussion,,50.0\n"
        );
        assert_eq!(r.significance.len(), 1);
        assert_eq!(r.significance[0].p_value, 1.0);
    }

    #[test]
    fn failed_only_store_reports_zero_counts() {
        let ts = vec![Transcript {
            instance_id: "x".into(),
            rounds: vec![],
            final_decision: FinalDecision::Failed { error: "timeout".into() },
            rounds_executed: 0,
        }];
        let r = build_report(&[input("fomc", false, ts)], McNemarMethod::Auto).unwrap();
        assert_eq!(r.summaries[0].evaluated, 0);
        assert_eq!(r.summaries[0].failed, 1);
        assert!(r.series[0].rounds.is_empty());
        assert!(summary_csv(&r).contains(",1,1,0,0.0,"));
    }

    #[test]
    fn best_rows_appear_with_reasoning_agents() {
        let ts = vec![
            t("x", &["A", "A", "B"], FinalDecision::Majority { label: "A".into() }),
            t("y", &["A", "B", "A"], FinalDecision::Majority { label: "A".into() }),
        ];
        let r = build_report(&[input("fomc", true, ts)], McNemarMethod::Exact).unwrap();
        let best: Vec<_> = r.accuracy.iter().filter(|c| c.system.starts_with("best")).collect();
        assert_eq!(best.len(), 2);
        assert_eq!(best[0].source, "a1 / cot");
        assert!(significance_csv(&r).contains("a0 vs best non-reasoning / cot,per-dataset,"));
    }

    #[test]
    fn p_formatting() {
        assert_eq!(format_p(0.0390625), "0.039");
        assert_eq!(format_p(1.0), "1.000");
    }
}
