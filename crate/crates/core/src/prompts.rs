//! Prompt texts for symptom annotation, mood-course summarization and
//! explanation, plus the helpers the offline mock uses to read them back.

use crate::symptom::Criterion;

pub const ANNOTATION_PREFIX: &str = "Assuming you are a psychiatrist specializing in depression. Given ";
pub const ANNOTATION_QUESTION: &str =
    ", please determine if this message includes any of the following states of the author:";
pub const ANNOTATION_INSTRUCTION: &str = "If present, answer in the format of enclosed letters separated by commas, for example, (A, B, C). If none are present, respond with None.";

pub const MOOD_HEADER: &str = "As a consulting psychiatrist, please conduct a longitudinal mood course analysis based on the following temporal sequence of personal expressions. For each entry, evaluate affect, emotional valence, and severity of mood states. Synthesize these observations into a clinical summary of mood progression, noting any patterns of persistence, fluctuation, or changes over time:";

pub const EXPLAIN_HEADER: &str = "Assuming you are a psychiatrist specializing in depression.";
pub const EXPLAIN_MOOD_LEAD: &str = "Here is a user's mood course: ";
pub const EXPLAIN_EVIDENCE_LEAD: &str =
    "; below are posts from this user displaying symptoms of depression and the types of symptoms exhibited: ";
pub const EXPLAIN_VERDICT_LEAD: &str = "; this user has been determined by an automated depression detection system to be ";
pub const EXPLAIN_INSTRUCTION: &str = "Please consider the user's mood course and posts to generate an explanation for this judgment. Your explanation should be grounded in concrete evidence.";

/// The full criteria list, e.g. `A. Depressive mood B. Loss of interest/pleasure ...`.
pub fn criteria_list() -> String {
    let mut parts: Vec<String> = Criterion::ALL
        .iter()
        .map(|c| {
            let title = if *c == Criterion::A { "Depressive mood" } else { c.title() };
            format!("{}. {}", c.letter(), title)
        })
        .collect();
    if let Some(last) = parts.last_mut() {
        last.push('.');
    }
    parts.join(" ")
}

pub fn annotation_prompt(text: &str) -> String {
    format!(
        "{ANNOTATION_PREFIX}{text}{ANNOTATION_QUESTION}\n\n{}\n\n{ANNOTATION_INSTRUCTION}",
        criteria_list()
    )
}

/// Recovers the post text from an annotation prompt.
pub fn annotation_text(prompt: &str) -> Option<&str> {
    let rest = prompt.strip_prefix(ANNOTATION_PREFIX)?;
    let end = rest.rfind(ANNOTATION_QUESTION)?;
    Some(&rest[..end])
}

/// One `Time: t, Post: p` entry of a mood-course prompt.
pub fn mood_entry(timestamp: &str, text: &str) -> String {
    format!("Time: {timestamp}, Post: {text}")
}

pub fn mood_prompt(entries: &[String]) -> String {
    format!("{MOOD_HEADER}\n\n{}", entries.join(", "))
}

/// The entry section of a mood-course prompt.
pub fn mood_body(prompt: &str) -> Option<&str> {
    prompt.strip_prefix(MOOD_HEADER).map(str::trim_start)
}

pub fn verdict_word(depressed: bool) -> &'static str {
    if depressed {
        "depressed"
    } else {
        "normal"
    }
}

pub fn explanation_prompt(mood_course: &str, evidence: &str, depressed: bool) -> String {
    format!(
        "{EXPLAIN_HEADER}\n\n{EXPLAIN_MOOD_LEAD}{mood_course}{EXPLAIN_EVIDENCE_LEAD}{evidence}{EXPLAIN_VERDICT_LEAD}{}.\n\n{EXPLAIN_INSTRUCTION}",
        verdict_word(depressed)
    )
}

/// Parts of an explanation prompt: (mood course, evidence block, depressed?).
pub fn explanation_parts(prompt: &str) -> Option<(&str, &str, bool)> {
    let rest = prompt.strip_prefix(EXPLAIN_HEADER)?.trim_start();
    let rest = rest.strip_prefix(EXPLAIN_MOOD_LEAD)?;
    let ev = rest.rfind(EXPLAIN_EVIDENCE_LEAD)?;
    let mood = &rest[..ev];
    let rest = &rest[ev + EXPLAIN_EVIDENCE_LEAD.len()..];
    let vd = rest.rfind(EXPLAIN_VERDICT_LEAD)?;
    let evidence = &rest[..vd];
    let verdict = &rest[vd + EXPLAIN_VERDICT_LEAD.len()..];
    let depressed = if verdict.starts_with("depressed") {
        true
    } else if verdict.starts_with("normal") {
        false
    } else {
        return None;
    };
    Some((mood, evidence, depressed))
}
