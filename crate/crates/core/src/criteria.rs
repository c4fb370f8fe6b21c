//! Diagnostic-criteria feature: template risk scoring, corpus-wide top-k%
//! selection, LLM annotation of the selected posts and per-user averaging.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Post, UserRecord};
use crate::embedding::{cosine, Embedding};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::prompts;
use crate::providers::{self, ChatProvider, Encoder, ProviderError, ProviderKind};
use crate::symptom::{Criterion, SymptomVector};

/// Default share of the corpus sent for annotation.
pub const DEFAULT_K_PERCENT: f64 = 20.0;

const REASK_SUFFIX: &str = "\n\nYour previous reply could not be parsed. Reply with only the enclosed letters separated by commas, for example, (A, B, C), or with None.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScore {
    pub post_id: String,
    pub score: f64,
}

/// Mean cosine between a post embedding and the nine symptom embeddings.
pub fn risk_from_embedding(post: &Embedding, symptoms: &[Embedding]) -> Result<f64> {
    if symptoms.len() != 9 {
        return Err(Error::Invalid(format!("expected 9 symptom embeddings, got {}", symptoms.len())));
    }
    let mut sum = 0.0;
    for s in symptoms {
        sum += cosine(post.values(), s.values())?;
    }
    Ok(sum / 9.0)
}

pub fn risk_score(post: &Post, symptoms: &[Embedding], encoder: &dyn Encoder) -> Result<RiskScore> {
    let h = providers::encode(encoder, &post.text)?;
    Ok(RiskScore {
        post_id: post.post_id.clone(),
        score: risk_from_embedding(&h, symptoms)?,
    })
}

/// Number of items kept at `percent` of `n`: `floor(percent * n / 100)`.
pub fn top_count(percent: f64, n: usize) -> usize {
    let p = percent.clamp(0.0, 100.0);
    ((p * n as f64) / 100.0).floor() as usize
}

/// Ids of the `count` highest-scoring items, ties broken by id ascending.
pub fn top_ids<'a, I>(items: I, count: usize) -> Vec<&'a str>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut v: Vec<(&str, f64)> = items.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.truncate(count);
    v.into_iter().map(|(id, _)| id).collect()
}

/// The `floor(k/100 * n)` riskiest posts of the whole corpus.
pub fn select_top_k(scores: &[RiskScore], k: f64) -> BTreeSet<String> {
    let n = top_count(k, scores.len());
    top_ids(scores.iter().map(|s| (s.post_id.as_str(), s.score)), n)
        .into_iter()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotationParseError {
    #[error("empty reply")]
    Empty,
    #[error("reply {0:?} is neither None nor a parenthesized letter list")]
    Shape(String),
    #[error("letter {0:?} is not a criterion A-I")]
    UnknownLetter(String),
    #[error("criterion {0} listed twice")]
    Duplicate(char),
}

/// Parses `None | '(' LETTER (',' LETTER)* ')'`, case-insensitively and
/// tolerant of surrounding whitespace.
pub fn parse_annotation(raw: &str) -> Result<SymptomVector, AnnotationParseError> {
    let s = raw.trim();
    if s.is_empty() {
        return Err(AnnotationParseError::Empty);
    }
    if s.eq_ignore_ascii_case("none") {
        return Ok(SymptomVector::ZERO);
    }
    let inner = s
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| AnnotationParseError::Shape(s.to_string()))?;
    let mut seen = Vec::with_capacity(9);
    for part in inner.split(',') {
        let p = part.trim();
        let mut chars = p.chars();
        let c = match (chars.next(), chars.next()) {
            (Some(c), None) => c,
            (None, _) => return Err(AnnotationParseError::Shape(s.to_string())),
            _ => return Err(AnnotationParseError::UnknownLetter(p.to_string())),
        };
        let crit = Criterion::from_letter(c).ok_or_else(|| AnnotationParseError::UnknownLetter(p.to_string()))?;
        if seen.contains(&crit) {
            return Err(AnnotationParseError::Duplicate(crit.letter()));
        }
        seen.push(crit);
    }
    Ok(SymptomVector::from_criteria(seen))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Llm,
    SkippedZero,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub post_id: String,
    pub raw: String,
    pub vector: SymptomVector,
    pub source: AnnotationSource,
}

impl AnnotationResult {
    pub fn skipped(post_id: &str) -> Self {
        AnnotationResult {
            post_id: post_id.to_string(),
            raw: String::new(),
            vector: SymptomVector::ZERO,
            source: AnnotationSource::SkippedZero,
        }
    }
}

/// One annotated post plus what it took to get there.
#[derive(Debug, Clone)]
pub struct Annotated {
    pub result: AnnotationResult,
    pub reasked: bool,
    pub parse_failed: bool,
}

/// Sends the annotation prompt for one post. An unparseable reply is asked
/// again once; a second failure records a zero vector.
pub fn annotate_post(post: &Post, chat: &dyn ChatProvider) -> Result<Annotated, ProviderError> {
    let source = match chat.kind() {
        ProviderKind::Local => AnnotationSource::Mock,
        ProviderKind::Remote => AnnotationSource::Llm,
    };
    let prompt = prompts::annotation_prompt(&post.text);
    let raw = providers::complete(chat, &prompt)?;
    let done = |raw: String, vector, reasked, parse_failed| Annotated {
        result: AnnotationResult {
            post_id: post.post_id.clone(),
            raw,
            vector,
            source,
        },
        reasked,
        parse_failed,
    };
    if let Ok(v) = parse_annotation(&raw) {
        return Ok(done(raw, v, false, false));
    }
    let retry = providers::complete(chat, &format!("{prompt}{REASK_SUFFIX}"))?;
    match parse_annotation(&retry) {
        Ok(v) => Ok(done(retry, v, true, false)),
        Err(e) => {
            log::warn!("post {}: unparseable annotation after re-ask ({e}); using zeros", post.post_id);
            Ok(done(retry, SymptomVector::ZERO, true, true))
        }
    }
}

/// Annotations for a whole corpus, in input order.
#[derive(Debug, Clone, Default)]
pub struct AnnotationBatch {
    pub results: Vec<AnnotationResult>,
    pub provider_calls: usize,
    pub reasks: usize,
    pub parse_warnings: usize,
}

impl AnnotationBatch {
    pub fn vectors(&self) -> HashMap<String, SymptomVector> {
        self.results.iter().map(|r| (r.post_id.clone(), r.vector)).collect()
    }
}

/// Annotates the selected posts (at most `chat.max_concurrency()` in flight)
/// and marks every other post as a skipped zero vector.
pub fn annotate_corpus(
    posts: &[&Post],
    selected: &BTreeSet<String>,
    chat: &dyn ChatProvider,
    exec: Execution,
) -> Result<AnnotationBatch> {
    let outcomes = exec.try_map_bounded(chat.max_concurrency(), posts, |p| {
        if selected.contains(&p.post_id) {
            annotate_post(p, chat).map(Some)
        } else {
            Ok(None)
        }
    })?;
    let mut batch = AnnotationBatch::default();
    for (p, o) in posts.iter().zip(outcomes) {
        match o {
            Some(a) => {
                batch.provider_calls += 1 + usize::from(a.reasked);
                batch.reasks += usize::from(a.reasked);
                batch.parse_warnings += usize::from(a.parse_failed);
                batch.results.push(a.result);
            }
            None => batch.results.push(AnnotationResult::skipped(&p.post_id)),
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaFeature {
    pub user_id: String,
    pub values: [f64; 9],
}

/// Entry-wise mean of the symptom vectors of all the user's posts.
pub fn criteria_feature(user: &UserRecord, annotations: &HashMap<String, SymptomVector>) -> Result<CriteriaFeature> {
    if user.posts.is_empty() {
        return Err(Error::Invalid(format!("user {} has no posts", user.user_id)));
    }
    let mut sums = [0u32; 9];
    for p in &user.posts {
        let v = annotations
            .get(&p.post_id)
            .ok_or_else(|| Error::Invalid(format!("post {} has no annotation", p.post_id)))?;
        for (s, f) in sums.iter_mut().zip(v.flags()) {
            *s += u32::from(f);
        }
    }
    let n = user.posts.len() as f64;
    Ok(CriteriaFeature {
        user_id: user.user_id.clone(),
        values: sums.map(|s| f64::from(s) / n),
    })
}
