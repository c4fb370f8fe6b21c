//! Per-user explanation reports: the classifier verdict, the annotated posts
//! that back it, the mood course and a generated explanation text.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::{format_timestamp, UserRecord};
use crate::error::{Error, Result};
use crate::gbt::{BoostedModel, IsotonicCalibrator};
use crate::prompts;
use crate::providers::{self, ChatProvider};
use crate::symptom::SymptomVector;

pub const EXCERPT_CHARS: usize = 280;
pub const UNAVAILABLE: &str = "UNAVAILABLE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Depressed,
    Normal,
}

impl Verdict {
    pub fn is_depressed(self) -> bool {
        self == Verdict::Depressed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub raw_score: f64,
    pub probability: f64,
    pub verdict: Verdict,
}

/// Scores one feature row; the verdict is `probability >= threshold`.
pub fn classify(model: &BoostedModel, cal: &IsotonicCalibrator, row: &[f64], threshold: f64) -> Result<Classification> {
    let raw_score = model.raw_score(row)?;
    let probability = cal.probability(raw_score);
    Ok(Classification {
        raw_score,
        probability,
        verdict: if probability >= threshold {
            Verdict::Depressed
        } else {
            Verdict::Normal
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub post_id: String,
    pub timestamp: String,
    pub excerpt: String,
    pub criteria: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub user_id: String,
    pub verdict: Verdict,
    pub probability: f64,
    pub raw_score: f64,
    pub symptom_evidence: Vec<Evidence>,
    pub mood_course: String,
    pub explanation: String,
}

impl ExplanationReport {
    pub fn explanation_available(&self) -> bool {
        self.explanation != UNAVAILABLE
    }
}

/// First `EXCERPT_CHARS` characters, with an ellipsis when cut.
pub fn excerpt(text: &str) -> String {
    let mut chars = text.chars();
    let head: String = chars.by_ref().take(EXCERPT_CHARS).collect();
    if chars.next().is_some() {
        format!("{head}…")
    } else {
        head
    }
}

/// Posts with a nonzero annotation, most recent first.
pub fn collect_evidence(user: &UserRecord, annotations: &HashMap<String, SymptomVector>) -> Vec<Evidence> {
    user.posts
        .iter()
        .rev()
        .filter_map(|p| {
            let v = annotations.get(&p.post_id)?;
            (!v.is_zero()).then(|| Evidence {
                post_id: p.post_id.clone(),
                timestamp: format_timestamp(&p.timestamp),
                excerpt: excerpt(&p.text),
                criteria: v.to_annotation(),
            })
        })
        .collect()
}

fn evidence_line(e: &Evidence) -> String {
    format!("[{}] {} Symptoms: {}", e.timestamp, e.excerpt, e.criteria)
}

/// Explanation prompt over `evidence`, dropping the oldest evidence lines if
/// the prompt would exceed `cap` characters.
pub fn build_explanation_prompt(mood_course: &str, evidence: &[Evidence], verdict: Verdict, cap: usize) -> String {
    let mut keep = evidence.len();
    loop {
        let lines: Vec<String> = evidence[..keep].iter().map(evidence_line).collect();
        let block = if lines.is_empty() {
            "none".to_string()
        } else {
            lines.join("; ")
        };
        let prompt = prompts::explanation_prompt(mood_course, &block, verdict.is_depressed());
        if keep == 0 || prompt.chars().count() <= cap {
            if keep < evidence.len() {
                warn!("explanation prompt keeps {keep} of {} evidence posts", evidence.len());
            }
            return prompt;
        }
        keep -= 1;
    }
}

/// Builds the report for one user. A provider failure leaves the verdict and
/// evidence in place and records the explanation as `UNAVAILABLE`.
pub fn explain_user(
    user: &UserRecord,
    annotations: &HashMap<String, SymptomVector>,
    mood_course: &str,
    classification: Classification,
    chat: &dyn ChatProvider,
) -> ExplanationReport {
    let evidence = collect_evidence(user, annotations);
    let prompt = build_explanation_prompt(mood_course, &evidence, classification.verdict, chat.context_chars());
    let explanation = match providers::complete(chat, &prompt) {
        Ok(text) if !text.trim().is_empty() => text.trim().to_string(),
        Ok(_) => {
            warn!("user {}: empty explanation from provider", user.user_id);
            UNAVAILABLE.to_string()
        }
        Err(e) => {
            warn!("user {}: explanation unavailable: {e}", user.user_id);
            UNAVAILABLE.to_string()
        }
    };
    ExplanationReport {
        user_id: user.user_id.clone(),
        verdict: classification.verdict,
        probability: classification.probability,
        raw_score: classification.raw_score,
        symptom_evidence: evidence,
        mood_course: mood_course.to_string(),
        explanation,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub user_id: String,
    pub file: String,
    pub verdict: Verdict,
    pub probability: f64,
    pub evidence_posts: usize,
    pub explanation_available: bool,
}

/// File name for a user's report; characters outside `[A-Za-z0-9._-]` are
/// replaced so ids can never escape the output directory.
pub fn report_file_name(user_id: &str) -> String {
    let safe: String = user_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    let safe = if safe.starts_with('.') { format!("_{safe}") } else { safe };
    format!("{safe}.json")
}

/// Writes `{dir}/{user}.json` per report and merges their entries into
/// `{dir}/index.json`, which stays sorted by user id.
pub fn write_explanations(dir: &Path, reports: &[ExplanationReport]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join("index.json");
    let mut index: BTreeMap<String, IndexEntry> = if index_path.exists() {
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let entries: Vec<IndexEntry> = serde_json::from_str(&text)?;
        entries.into_iter().map(|e| (e.user_id.clone(), e)).collect()
    } else {
        BTreeMap::new()
    };
    for r in reports {
        let file = report_file_name(&r.user_id);
        let clash = index
            .values()
            .find(|e| e.file == file && e.user_id != r.user_id)
            .map(|e| e.user_id.clone())
            .or_else(|| (file == "index.json").then(|| "the index".to_string()));
        if let Some(other) = clash {
            return Err(Error::Invalid(format!(
                "user {} maps to report file {file}, already used by {other}",
                r.user_id
            )));
        }
        let path = dir.join(&file);
        let json = serde_json::to_string_pretty(r)? + "\n";
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        index.insert(
            r.user_id.clone(),
            IndexEntry {
                user_id: r.user_id.clone(),
                file,
                verdict: r.verdict,
                probability: r.probability,
                evidence_posts: r.symptom_evidence.len(),
                explanation_available: r.explanation_available(),
            },
        );
    }
    let entries: Vec<&IndexEntry> = index.values().collect();
    fs::write(&index_path, serde_json::to_string_pretty(&entries)? + "\n").map_err(|e| Error::io(&index_path, e))?;
    Ok(index_path)
}

pub fn load_explanation(path: &Path) -> Result<ExplanationReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Label, Post};
    use crate::providers::{MockAnnotator, ProviderError};
    use crate::symptom::Criterion;
    use chrono::{Duration, TimeZone, Utc};

    fn user() -> UserRecord {
        let t = Utc.with_ymd_and_hms(2023, 3, 1, 9, 0, 0).unwrap();
        UserRecord::new(
            "u1",
            vec![
                Post::new("p1", "I can't sleep at all", t),
                Post::new("p2", "lovely walk in the park", t + Duration::days(1)),
                Post::new("p3", "I feel worthless and think about suicide", t + Duration::days(2)),
            ],
            Some(Label::Depressed),
        )
    }

    fn annotations() -> HashMap<String, SymptomVector> {
        HashMap::from([
            ("p1".to_string(), SymptomVector::from_criteria([Criterion::D])),
            ("p2".to_string(), SymptomVector::ZERO),
            ("p3".to_string(), SymptomVector::from_criteria([Criterion::G, Criterion::I])),
        ])
    }

    fn depressed() -> Classification {
        Classification {
            raw_score: 1.5,
            probability: 0.9,
            verdict: Verdict::Depressed,
        }
    }

    struct Failing;
    impl ChatProvider for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn complete(&self, _: &str) -> Result<String, ProviderError> {
            Err(ProviderError::Transport {
                attempts: 3,
                message: "down".into(),
            })
        }
    }

    #[test]
    fn evidence_is_nonzero_and_most_recent_first() {
        let ev = collect_evidence(&user(), &annotations());
        let ids: Vec<&str> = ev.iter().map(|e| e.post_id.as_str()).collect();
        assert_eq!(ids, ["p3", "p1"]);
        assert_eq!(ev[0].criteria, "(G, I)");
    }

    #[test]
    fn prompt_construction() {
        let ev = collect_evidence(&user(), &annotations());
        let mood = "MOOD-TEXT-XYZ";
        let p = build_explanation_prompt(mood, &ev, Verdict::Depressed, 24_000);
        assert_eq!(p.matches(mood).count(), 1);
        assert!(p.contains("to be depressed"));
        assert!(p.contains("Symptoms: (G, I)") && p.contains("Symptoms: (D)"));
        let p = build_explanation_prompt(mood, &ev, Verdict::Normal, 24_000);
        assert!(p.contains("to be normal"));
        let short = build_explanation_prompt(mood, &ev, Verdict::Normal, p.chars().count() - 5);
        assert!(short.contains("(G, I)") && !short.contains("Symptoms: (D)"));
    }

    #[test]
    fn mock_explanation_cites_every_letter() {
        let r = explain_user(&user(), &annotations(), "steady sadness", depressed(), &MockAnnotator);
        for letter in ["D", "G", "I"] {
            assert!(r.explanation.contains(&format!("{letter} (")), "{}", r.explanation);
        }
        for e in &r.symptom_evidence {
            let stored = annotations()[&e.post_id].to_annotation();
            assert_eq!(e.criteria, stored);
        }
    }

    #[test]
    fn no_evidence_uses_mood_only() {
        let r = explain_user(&user(), &HashMap::new(), "calm and stable", Classification { verdict: Verdict::Normal, ..depressed() }, &MockAnnotator);
        assert!(r.symptom_evidence.is_empty());
        assert!(r.explanation.contains("calm and stable"));
        assert!(r.explanation_available());
    }

    #[test]
    fn provider_failure_keeps_verdict() {
        let r = explain_user(&user(), &annotations(), "m", depressed(), &Failing);
        assert_eq!(r.explanation, UNAVAILABLE);
        assert_eq!(r.verdict, Verdict::Depressed);
        assert_eq!(r.symptom_evidence.len(), 2);
    }

    #[test]
    fn excerpt_cap() {
        assert_eq!(excerpt("short"), "short");
        let long = "é".repeat(300);
        let e = excerpt(&long);
        assert_eq!(e.chars().count(), EXCERPT_CHARS + 1);
        assert!(e.ends_with('…'));
    }

    #[test]
    fn files_round_trip() {
        let r = explain_user(&user(), &annotations(), "m", depressed(), &MockAnnotator);
        let dir = tempfile::tempdir().unwrap();
        let index = write_explanations(dir.path(), std::slice::from_ref(&r)).unwrap();
        assert_eq!(load_explanation(&dir.path().join("u1.json")).unwrap(), r);
        let idx: Vec<IndexEntry> = serde_json::from_str(&fs::read_to_string(index).unwrap()).unwrap();
        assert_eq!(idx[0].evidence_posts, 2);
        assert_eq!(report_file_name("../x"), "_.._x.json");
        let mut other = r.clone();
        other.user_id = "u0".into();
        write_explanations(dir.path(), &[other]).unwrap();
        let idx: Vec<IndexEntry> = serde_json::from_str(&fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
        let ids: Vec<&str> = idx.iter().map(|e| e.user_id.as_str()).collect();
        assert_eq!(ids, ["u0", "u1"]);
        let mut clash = r.clone();
        clash.user_id = "u/1".into();
        write_explanations(dir.path(), &[clash.clone()]).unwrap();
        clash.user_id = "u:1".into();
        assert!(write_explanations(dir.path(), &[clash]).is_err());
    }
}
