//! Prompt construction, discussion-history compilation and answer parsing.
//!
//! Every prompt shares one shape: an expert-annotator persona, the rendered
//! template (task, guideline, label list, instance) and a closing output
//! contract requiring a last line of the form `FINAL ANSWER: <label>`.
//! Templates are plain text with `{{name}}` placeholders and can be replaced
//! per dataset by pointing [`TemplateSet::load_dir`] at a directory.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{canonicalize, Annotation, AnnotationTask, Instance, LabelSpace, Outcome};
use crate::providers::ChatMessage;

pub const ANSWER_MARKER: &str = "FINAL ANSWER:";
pub const COT_TRIGGER: &str = "Let's think step by step.";
pub const PERSONA: &str = "You are an expert data annotator. Carry out this annotation as a \
                           domain expert of the fields relevant to the task, following the \
                           annotation guideline exactly.";
pub const FORMAT_CORRECTION: &str = "Your previous reply did not end with a usable answer line. \
     Answer again, and make the last line exactly \"FINAL ANSWER: <label>\" with one label \
     copied from the list of possible labels.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt mode {mode} requires `{extra}`")]
    MissingExtra { mode: PromptMode, extra: &'static str },
    #[error("cannot compile history from an empty round")]
    EmptyRound,
    #[error("template {0}: {1}")]
    Template(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Vanilla,
    Cot,
    RefineGenerate,
    RefineReview,
    RefineRevise,
    DiscussInitial,
    DiscussRevise,
}

impl PromptMode {
    pub const ALL: [PromptMode; 7] = [
        PromptMode::Vanilla,
        PromptMode::Cot,
        PromptMode::RefineGenerate,
        PromptMode::RefineReview,
        PromptMode::RefineRevise,
        PromptMode::DiscussInitial,
        PromptMode::DiscussRevise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Vanilla => "vanilla",
            PromptMode::Cot => "cot",
            PromptMode::RefineGenerate => "refine_generate",
            PromptMode::RefineReview => "refine_review",
            PromptMode::RefineRevise => "refine_revise",
            PromptMode::DiscussInitial => "discuss_initial",
            PromptMode::DiscussRevise => "discuss_revise",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Optional inputs some modes need.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptExtras {
    pub draft: Option<String>,
    pub feedback: Option<String>,
    pub history: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: [String; 7],
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            templates: [
                include_str!("../templates/vanilla.txt").to_string(),
                include_str!("../templates/cot.txt").to_string(),
                include_str!("../templates/refine_generate.txt").to_string(),
                include_str!("../templates/refine_review.txt").to_string(),
                include_str!("../templates/refine_revise.txt").to_string(),
                include_str!("../templates/discuss_initial.txt").to_string(),
                include_str!("../templates/discuss_revise.txt").to_string(),
            ],
        }
    }
}

impl TemplateSet {
    /// Defaults, overridden by any `<mode>.txt` found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        for mode in PromptMode::ALL {
            let path = dir.join(format!("{}.txt", mode.name()));
            match std::fs::read_to_string(&path) {
                Ok(text) => set.templates[mode as usize] = text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => {
                    return Err(PromptError::Template(path.display().to_string(), e.to_string()))
                }
            }
        }
        Ok(set)
    }

    pub fn get(&self, mode: PromptMode) -> &str {
        &self.templates[mode as usize]
    }

    pub fn set(&mut self, mode: PromptMode, text: impl Into<String>) {
        self.templates[mode as usize] = text.into();
    }
}

/// Single-pass `{{name}}` substitution; substituted values are never
/// rescanned, and unknown placeholders are left as written.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = after[..end].trim();
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[start..start + 2 + end + 2]),
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_labels(space: &LabelSpace) -> String {
    space
        .labels()
        .iter()
        .map(|l| format!("- {l}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn output_contract(space: &LabelSpace) -> String {
    format!(
        "End your reply with a final line of the form \"{ANSWER_MARKER} <label>\", where <label> \
         is exactly one of: {}.",
        space.labels().join(", ")
    )
}

pub struct PromptBuilder<'a> {
    templates: &'a TemplateSet,
}

impl<'a> PromptBuilder<'a> {
    pub fn new(templates: &'a TemplateSet) -> Self {
        Self { templates }
    }

    fn body(
        &self,
        mode: PromptMode,
        task: &AnnotationTask,
        instance: &Instance,
        extras: &PromptExtras,
    ) -> String {
        let labels = render_labels(&task.label_space);
        let vars = [
            ("task", task.task_description.as_str()),
            ("guideline", task.guideline.as_str()),
            ("labels", labels.as_str()),
            ("instance", instance.content.as_str()),
            ("history", extras.history.as_deref().unwrap_or("")),
            ("draft", extras.draft.as_deref().unwrap_or("")),
            ("feedback", extras.feedback.as_deref().unwrap_or("")),
        ];
        let mut text = render(self.templates.get(mode), &vars).trim_end().to_string();
        text.push_str("\n\n");
        text.push_str(&output_contract(&task.label_space));
        if mode == PromptMode::Cot {
            text.push_str("\n\n");
            text.push_str(COT_TRIGGER);
        }
        text
    }

    pub fn build(
        &self,
        mode: PromptMode,
        task: &AnnotationTask,
        instance: &Instance,
        extras: &PromptExtras,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        let need = |value: &Option<String>, extra: &'static str| match value {
            Some(v) if !v.trim().is_empty() => Ok(v.clone()),
            _ => Err(PromptError::MissingExtra { mode, extra }),
        };
        let system = ChatMessage::system(PERSONA);
        let messages = match mode {
            PromptMode::Vanilla
            | PromptMode::Cot
            | PromptMode::RefineGenerate
            | PromptMode::DiscussInitial => {
                vec![system, ChatMessage::user(self.body(mode, task, instance, extras))]
            }
            PromptMode::DiscussRevise => {
                need(&extras.history, "history")?;
                vec![system, ChatMessage::user(self.body(mode, task, instance, extras))]
            }
            PromptMode::RefineReview => {
                let draft = need(&extras.draft, "draft")?;
                vec![
                    system,
                    ChatMessage::user(self.body(PromptMode::RefineGenerate, task, instance, extras)),
                    ChatMessage::assistant(draft),
                    ChatMessage::user(self.body(mode, task, instance, extras)),
                ]
            }
            PromptMode::RefineRevise => {
                let draft = need(&extras.draft, "draft")?;
                let feedback = need(&extras.feedback, "feedback")?;
                vec![
                    system,
                    ChatMessage::user(self.body(PromptMode::RefineGenerate, task, instance, extras)),
                    ChatMessage::assistant(draft),
                    ChatMessage::user(self.body(PromptMode::RefineReview, task, instance, extras)),
                    ChatMessage::assistant(feedback),
                    ChatMessage::user(self.body(mode, task, instance, extras)),
                ]
            }
        };
        Ok(messages)
    }
}

/// Builds a prompt with the default templates.
pub fn build_prompt(
    mode: PromptMode,
    task: &AnnotationTask,
    instance: &Instance,
    extras: &PromptExtras,
) -> Result<Vec<ChatMessage>, PromptError> {
    PromptBuilder::new(&TemplateSet::default()).build(mode, task, instance, extras)
}

/// Copy of `messages` with the format correction appended to the last user
/// turn.
pub fn with_format_correction(messages: &[ChatMessage]) -> Vec<ChatMessage> {
    let mut out = messages.to_vec();
    if let Some(last) = out
        .iter_mut()
        .rev()
        .find(|m| m.role == crate::providers::Role::User)
    {
        last.content.push_str("\n\n");
        last.content.push_str(FORMAT_CORRECTION);
    }
    out
}

/// Renders one round of annotations as the discussion history shown to
/// `self_id`. Annotators are anonymized by their position in the group.
pub fn compile_history(round: &[Annotation], self_id: &str) -> Result<String, PromptError> {
    if round.is_empty() {
        return Err(PromptError::EmptyRound);
    }
    let blocks: Vec<String> = round
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let own = if a.agent_id == self_id {
                " (your previous annotation)"
            } else {
                ""
            };
            let label = match &a.outcome {
                Outcome::Label(l) => l.as_str(),
                Outcome::Invalid => "no valid label produced",
            };
            let reasoning = if a.reasoning.trim().is_empty() {
                "(none given)"
            } else {
                a.reasoning.trim()
            };
            format!(
                "Annotator {}{own}:\nLabel: {label}\nReasoning: {reasoning}",
                i + 1
            )
        })
        .collect();
    Ok(blocks.join("\n\n"))
}

fn is_marker_line(line: &str) -> Option<&str> {
    let trimmed = line.trim_start().trim_start_matches(['*', '#', '>', '_', ' ']);
    let head = trimmed.get(..ANSWER_MARKER.len())?;
    head.eq_ignore_ascii_case(ANSWER_MARKER)
        .then(|| &trimmed[ANSWER_MARKER.len()..])
}

/// Extracts the label from a model response.
///
/// Uses the last line starting with `FINAL ANSWER:` (any case). The rest of
/// the line must equal a label canonically, or be a prefix of exactly one
/// label; everything else is [`Outcome::Invalid`].
pub fn parse_label(text: &str, space: &LabelSpace) -> Outcome {
    let Some(rest) = text.lines().rev().find_map(is_marker_line) else {
        return Outcome::Invalid;
    };
    let raw = canonicalize(rest);
    let cleaned = canonicalize(
        raw.trim_matches(|c: char| matches!(c, '*' | '"' | '\'' | '`' | '.' | '[' | ']' | '<' | '>' | '_')),
    );
    let canon = space.canonical_forms();
    for candidate in [&raw, &cleaned] {
        if let Some(i) = canon.iter().position(|c| c == candidate) {
            return Outcome::Label(space.labels()[i].clone());
        }
    }
    if cleaned.is_empty() {
        return Outcome::Invalid;
    }
    let mut hits = canon.iter().enumerate().filter(|(_, c)| c.starts_with(&cleaned));
    match (hits.next(), hits.next()) {
        (Some((i, _)), None) => Outcome::Label(space.labels()[i].clone()),
        _ => Outcome::Invalid,
    }
}

/// Response text without its answer lines, used as the stored reasoning.
pub fn strip_answer_lines(text: &str) -> String {
    text.lines()
        .filter(|l| is_marker_line(l).is_none())
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fomc() -> AnnotationTask {
        AnnotationTask::new(
            "fomc",
            "Classify the monetary policy stance of the sentence.",
            "Dovish indicates easing, Hawkish indicates tightening.",
            LabelSpace::new(["Dovish", "Hawkish", "Neutral"]).unwrap(),
        )
        .unwrap()
    }

    fn inst() -> Instance {
        Instance::new("s1", "The Committee decided to raise the target range.", None)
    }

    fn ann(agent: &str, outcome: Outcome, reasoning: &str) -> Annotation {
        Annotation {
            agent_id: agent.into(),
            round: 0,
            outcome,
            reasoning: reasoning.into(),
            raw_response_ref: String::new(),
        }
    }

    fn space() -> LabelSpace {
        fomc().label_space
    }

    #[test]
    fn vanilla_prompt_contract() {
        let msgs = build_prompt(PromptMode::Vanilla, &fomc(), &inst(), &PromptExtras::default()).unwrap();
        assert_eq!(msgs.len(), 2);
        assert!(msgs[0].content.contains("domain expert"));
        let user = &msgs[1].content;
        assert!(user.contains("- Dovish\n- Hawkish\n- Neutral"));
        assert!(user.contains("raise the target range"));
        assert!(user.contains("Dovish indicates easing"));
        assert!(user.contains("monetary policy stance"));
        assert!(user.trim_end().ends_with("Dovish, Hawkish, Neutral."));
        assert!(user.contains(ANSWER_MARKER));
        assert!(!user.contains(COT_TRIGGER));
    }

    #[test]
    fn cot_is_vanilla_plus_trigger() {
        let e = PromptExtras::default();
        let v = build_prompt(PromptMode::Vanilla, &fomc(), &inst(), &e).unwrap();
        let c = build_prompt(PromptMode::Cot, &fomc(), &inst(), &e).unwrap();
        assert_eq!(c[1].content, format!("{}\n\n{COT_TRIGGER}", v[1].content));
        assert!(c[1].content.ends_with("Let's think step by step."));
    }

    #[test]
    fn discuss_revise_embeds_history() {
        let round = vec![
            ann("a", Outcome::Label("Hawkish".into()), "rates go up"),
            ann("b", Outcome::Label("Neutral".into()), "no stance"),
            ann("c", Outcome::Label("Hawkish".into()), "tightening"),
        ];
        let history = compile_history(&round, "b").unwrap();
        let extras = PromptExtras {
            history: Some(history),
            ..Default::default()
        };
        let msgs = build_prompt(PromptMode::DiscussRevise, &fomc(), &inst(), &extras).unwrap();
        let user = &msgs[1].content;
        for k in 1..=3 {
            assert!(user.contains(&format!("Annotator {k}")));
        }
        assert!(user.contains("rates go up") && user.contains("no stance") && user.contains("tightening"));
        assert!(user.contains("Consider the other annotators"));
    }

    #[test]
    fn missing_extras_are_reported() {
        let e = PromptExtras::default();
        assert_eq!(
            build_prompt(PromptMode::DiscussRevise, &fomc(), &inst(), &e),
            Err(PromptError::MissingExtra {
                mode: PromptMode::DiscussRevise,
                extra: "history"
            })
        );
        let draft_only = PromptExtras {
            draft: Some("d".into()),
            ..Default::default()
        };
        assert!(matches!(
            build_prompt(PromptMode::RefineRevise, &fomc(), &inst(), &draft_only),
            Err(PromptError::MissingExtra { extra: "feedback", .. })
        ));
        assert!(matches!(
            build_prompt(PromptMode::RefineReview, &fomc(), &inst(), &e),
            Err(PromptError::MissingExtra { extra: "draft", .. })
        ));
    }

    #[test]
    fn refine_carries_conversation() {
        let extras = PromptExtras {
            draft: Some("draft text".into()),
            feedback: Some("feedback text".into()),
            history: None,
        };
        let msgs = build_prompt(PromptMode::RefineRevise, &fomc(), &inst(), &extras).unwrap();
        let roles: Vec<_> = msgs.iter().map(|m| m.role).collect();
        use crate::providers::Role::*;
        assert_eq!(roles, vec![System, User, Assistant, User, Assistant, User]);
        assert_eq!(msgs[2].content, "draft text");
        assert_eq!(msgs[4].content, "feedback text");
        assert!(msgs[5].content.contains(ANSWER_MARKER));
    }

    #[test]
    fn history_marks_self_and_anonymizes() {
        let round = vec![
            ann("gpt-4o", Outcome::Label("Hawkish".into()), "r1"),
            ann("claude", Outcome::Label("Dovish".into()), "r2"),
            ann("gemini", Outcome::Invalid, "garbled"),
        ];
        let h = compile_history(&round, "claude").unwrap();
        assert!(h.starts_with("Annotator 1:\nLabel: Hawkish"));
        assert!(h.contains("Annotator 2 (your previous annotation):\nLabel: Dovish"));
        assert!(h.contains("Annotator 3:\nLabel: no valid label produced"));
        assert!(!h.contains("gpt-4o") && !h.contains("claude") && !h.contains("gemini"));
        assert_eq!(h.matches("(your previous annotation)").count(), 1);
        assert_eq!(h, compile_history(&round, "claude").unwrap());
        assert_eq!(compile_history(&[], "x"), Err(PromptError::EmptyRound));
    }

    #[test]
    fn parse_case_folds() {
        assert_eq!(
            parse_label("reasoning...\nFINAL ANSWER: hawkish", &space()),
            Outcome::Label("Hawkish".into())
        );
    }

    #[test]
    fn parse_uses_last_marker() {
        let text = "FINAL ANSWER: Dovish\nwait, reconsider\nfinal answer: Neutral";
        assert_eq!(parse_label(text, &space()), Outcome::Label("Neutral".into()));
    }

    #[test]
    fn parse_requires_marker() {
        assert_eq!(parse_label("The answer is probably Hawkish", &space()), Outcome::Invalid);
    }

    #[test]
    fn parse_prefix_and_ambiguity() {
        assert_eq!(parse_label("FINAL ANSWER: Haw", &space()), Outcome::Label("Hawkish".into()));
        assert_eq!(parse_label("**Final Answer:** Neutral.", &space()), Outcome::Label("Neutral".into()));
        let s = LabelSpace::new(["Non-Compete", "Non-Disparagement", "Non"]).unwrap();
        assert_eq!(parse_label("FINAL ANSWER: non", &s), Outcome::Label("Non".into()));
        assert_eq!(parse_label("FINAL ANSWER: Non-", &s), Outcome::Invalid);
        assert_eq!(parse_label("FINAL ANSWER: Bullish", &space()), Outcome::Invalid);
        assert_eq!(parse_label("FINAL ANSWER:", &space()), Outcome::Invalid);
    }

    #[test]
    fn echoed_instance_marker_does_not_leak() {
        let mut i = inst();
        i.content = "He said FINAL ANSWER: Dovish loudly.\nFINAL ANSWER: Dovish".into();
        let msgs = build_prompt(PromptMode::Vanilla, &fomc(), &i, &PromptExtras::default()).unwrap();
        assert!(msgs[1].content.contains("FINAL ANSWER: Dovish"));
        // Only the response is parsed.
        assert_eq!(parse_label("FINAL ANSWER: Hawkish", &space()), Outcome::Label("Hawkish".into()));
    }

    #[test]
    fn render_is_single_pass() {
        let out = render("a {{x}} b {{unknown}} {{y", &[("x", "{{x}}")]);
        assert_eq!(out, "a {{x}} b {{unknown}} {{y");
    }

    #[test]
    fn format_correction_targets_last_user_turn() {
        let msgs = build_prompt(PromptMode::Vanilla, &fomc(), &inst(), &PromptExtras::default()).unwrap();
        let fixed = with_format_correction(&msgs);
        assert!(fixed[1].content.ends_with(FORMAT_CORRECTION));
        assert_eq!(fixed[0], msgs[0]);
    }

    #[test]
    fn template_override_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("vanilla.txt"), "Label {{instance}} using {{labels}}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        let msgs = PromptBuilder::new(&set)
            .build(PromptMode::Vanilla, &fomc(), &inst(), &PromptExtras::default())
            .unwrap();
        assert!(msgs[1].content.starts_with("Label The Committee"));
        assert_eq!(set.get(PromptMode::Cot), TemplateSet::default().get(PromptMode::Cot));
    }

    proptest! {
        #[test]
        fn every_label_round_trips(labels in proptest::collection::btree_set("[A-Za-z][A-Za-z /-]{0,20}", 2..32)) {
            let Ok(space) = LabelSpace::new(labels.iter().cloned()) else { return Ok(()); };
            for l in space.labels() {
                prop_assert_eq!(parse_label(&format!("FINAL ANSWER: {l}"), &space), Outcome::Label(l.clone()));
            }
        }
    }
}
