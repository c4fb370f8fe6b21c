//! Mood-course representation: per-emotion top-m% filtering, LLM summary of
//! the user's emotional posts in time order, and the weighted fusion of the
//! summary embedding with the mean emotional-post embedding.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::criteria::{top_count, top_ids};
use crate::dataset::{format_timestamp, Post, UserRecord};
use crate::embedding::{cosine, mean_vector, Embedding};
use crate::error::{Error, Result};
use crate::prompts;
use crate::providers::{self, ChatProvider, Encoder, ProviderError};
use crate::templates::Emotion;

pub const DEFAULT_M_PERCENT: f64 = 20.0;
pub const DEFAULT_ALPHA: f64 = 0.4;
pub const DEFAULT_BETA: f64 = 0.6;
/// Summary stored for users without any emotional post.
pub const NO_EMOTIONAL_POSTS: &str = "NO_EMOTIONAL_POSTS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionScores {
    pub post_id: String,
    /// Cosine to each emotion template, in [`Emotion::ALL`] order.
    pub scores: [f64; 5],
}

pub fn emotion_scores_from_embedding(post_id: &str, h: &Embedding, emotions: &[Embedding]) -> Result<EmotionScores> {
    if emotions.len() != 5 {
        return Err(Error::Invalid(format!("expected 5 emotion embeddings, got {}", emotions.len())));
    }
    let mut scores = [0.0; 5];
    for (s, e) in scores.iter_mut().zip(emotions) {
        *s = cosine(h.values(), e.values())?;
    }
    Ok(EmotionScores {
        post_id: post_id.to_string(),
        scores,
    })
}

pub fn emotion_scores(post: &Post, emotions: &[Embedding], encoder: &dyn Encoder) -> Result<EmotionScores> {
    let h = providers::encode(encoder, &post.text)?;
    emotion_scores_from_embedding(&post.post_id, &h, emotions)
}

/// The per-emotion sets: for each emotion the `floor(m/100 * n)` posts most
/// similar to its template.
pub fn select_per_emotion(scores: &[EmotionScores], m: f64) -> [BTreeSet<String>; 5] {
    let n = top_count(m, scores.len());
    Emotion::ALL.map(|e| {
        top_ids(scores.iter().map(|s| (s.post_id.as_str(), s.scores[e.index()])), n)
            .into_iter()
            .map(str::to_string)
            .collect()
    })
}

/// Union of the per-emotion top-m% sets.
pub fn select_emotional(scores: &[EmotionScores], m: f64) -> BTreeSet<String> {
    select_per_emotion(scores, m).into_iter().flatten().collect()
}

/// The user's emotional posts, in time order.
pub fn emotional_posts<'a>(user: &'a UserRecord, emotional_ids: &BTreeSet<String>) -> Vec<&'a Post> {
    user.posts.iter().filter(|p| emotional_ids.contains(&p.post_id)).collect()
}

/// Builds the mood-course prompt. When it exceeds `cap` characters the
/// oldest entries are dropped first. Returns the prompt and how many posts
/// were dropped.
pub fn build_mood_prompt(posts: &[&Post], cap: usize) -> Result<(String, usize), ProviderError> {
    let entries: Vec<String> = posts
        .iter()
        .map(|p| prompts::mood_entry(&format_timestamp(&p.timestamp), &p.text))
        .collect();
    for start in 0..entries.len() {
        let prompt = prompts::mood_prompt(&entries[start..]);
        if prompt.chars().count() <= cap {
            return Ok((prompt, start));
        }
    }
    let chars = prompts::mood_prompt(&entries[entries.len().saturating_sub(1)..]).chars().count();
    Err(ProviderError::ContextOverflow { chars, cap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoodSummary {
    pub user_id: String,
    pub emotional_post_ids: Vec<String>,
    pub summary: String,
}

impl MoodSummary {
    pub fn is_sentinel(&self) -> bool {
        self.emotional_post_ids.is_empty()
    }
}

/// Asks the chat provider for the user's mood course. Users without
/// emotional posts get [`NO_EMOTIONAL_POSTS`] and no provider call.
pub fn summarize_mood_course(
    user: &UserRecord,
    emotional_ids: &BTreeSet<String>,
    chat: &dyn ChatProvider,
) -> Result<MoodSummary, ProviderError> {
    let posts = emotional_posts(user, emotional_ids);
    let ids: Vec<String> = posts.iter().map(|p| p.post_id.clone()).collect();
    if posts.is_empty() {
        return Ok(MoodSummary {
            user_id: user.user_id.clone(),
            emotional_post_ids: ids,
            summary: NO_EMOTIONAL_POSTS.to_string(),
        });
    }
    let (prompt, dropped) = build_mood_prompt(&posts, chat.context_chars())?;
    if dropped > 0 {
        log::warn!("user {}: mood prompt over budget, dropped {dropped} oldest posts", user.user_id);
    }
    Ok(MoodSummary {
        user_id: user.user_id.clone(),
        emotional_post_ids: ids,
        summary: providers::complete(chat, &prompt)?,
    })
}

/// `alpha * summary_embedding + beta * mean(emotional_embeddings)`.
/// Pure arithmetic half of [`mood_representation`].
pub fn combine_mood(summary_embedding: &[f64], emotional: &[&[f64]], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    let mean = mean_vector(emotional.iter().copied())
        .ok_or_else(|| Error::Invalid("no emotional posts to average".into()))?;
    if mean.len() != summary_embedding.len() {
        return Err(Error::DimensionMismatch {
            expected: summary_embedding.len(),
            actual: mean.len(),
        });
    }
    Ok(summary_embedding
        .iter()
        .zip(&mean)
        .map(|(h, m)| alpha * h + beta * m)
        .collect())
}

/// Mood-course representation. Zero vector (and no encoder call) when the
/// user has no emotional posts.
pub fn mood_representation(
    summary: &str,
    emotional: &[&Embedding],
    alpha: f64,
    beta: f64,
    encoder: &dyn Encoder,
) -> Result<Vec<f64>> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Invalid(format!("alpha and beta must be non-negative, got {alpha}, {beta}")));
    }
    if emotional.is_empty() {
        return Ok(vec![0.0; encoder.dim()]);
    }
    let h = providers::encode(encoder, summary)?;
    let rows: Vec<&[f64]> = emotional.iter().map(|e| e.values()).collect();
    combine_mood(h.values(), &rows, alpha, beta)
}

/// A user's full mood course.
#[derive(Debug, Clone, PartialEq)]
pub struct MoodCourse {
    pub user_id: String,
    pub emotional_posts: Vec<String>,
    pub summary_text: String,
    pub representation: Vec<f64>,
}
