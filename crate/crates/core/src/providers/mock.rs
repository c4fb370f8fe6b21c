//! Offline chat provider that answers the three pipeline prompts with
//! keyword rules.

use std::collections::BTreeSet;

use crate::criteria::parse_annotation;
use crate::prompts;
use crate::symptom::{Criterion, SymptomVector};
use crate::templates::Emotion;

use super::{tokenize, ChatProvider, ProviderError, ProviderKind};

/// Keyword phrases per criterion, taken from the symptom template wording.
pub const SYMPTOM_KEYWORDS: [(Criterion, &[&str]); 9] = [
    (
        Criterion::A,
        &[
            "depressed", "unhappy", "joyless", "gloomy", "melancholic", "sad", "heartbroken", "despair",
            "despondency", "sorrowful", "heavy hearted", "emptiness", "urge to cry", "inner pain",
        ],
    ),
    (
        Criterion::B,
        &[
            "lost interest", "indifferent", "unmotivated", "no interest", "uninteresting", "lack motivation",
            "lack enthusiasm", "reduced pleasure", "cannot experience happiness", "world is dull",
        ],
    ),
    (
        Criterion::C,
        &[
            "appetite", "weight loss", "weight gain", "weight increase", "nausea", "emaciation",
            "difficulty swallowing",
        ],
    ),
    (
        Criterion::D,
        &[
            "insomnia", "sleep", "sleeping pills", "hypersomnia", "oversleeping", "sleepiness", "falling asleep",
            "stay up late", "tossing and turning",
        ],
    ),
    (
        Criterion::E,
        &[
            "neurotic", "agitated", "emotionally unstable", "impatient", "restless", "mentally tense", "fidgety",
            "impulsive", "out of control", "irritable",
        ],
    ),
    (
        Criterion::F,
        &[
            "fatigued", "fatigue", "listless", "exhausted", "lacking in energy", "dispirited", "tired",
            "powerless", "weary", "drowsy", "lethargic",
        ],
    ),
    (
        Criterion::G,
        &[
            "self denial", "lack of confidence", "self doubt", "inferiority", "guilt", "guilty", "self blame",
            "belittle", "incompetent", "worthless", "failure", "my fault", "blame myself",
        ],
    ),
    (
        Criterion::H,
        &[
            "slow thinking", "concentrate", "concentrating", "memory decline", "distractibility", "indecision",
            "scattered attention", "lack of focus", "paying attention", "spaced out", "cognitive ability",
        ],
    ),
    (
        Criterion::I,
        &[
            "suicide", "suicidal", "death", "self harming", "self injury", "ending my life", "self mutilation",
            "cutting wrists", "overdosing",
        ],
    ),
];

/// Emotion keyword lists, from the emotion template wording.
pub const EMOTION_KEYWORDS: [(Emotion, &[&str]); 5] = [
    (
        Emotion::Anger,
        &[
            "angry", "mad", "agitated", "annoyed", "indignant", "irritable", "furious", "incensed", "enraged",
            "irritated", "vexed", "resentful", "rage", "shouting", "screaming", "outraged", "ranting", "fuming",
        ],
    ),
    (
        Emotion::Disgust,
        &[
            "detest", "loathe", "disgust", "disgusted", "abhor", "hate", "nauseated", "aversion", "despise",
            "scorn", "disdain", "repugnant", "revulsion", "dislike",
        ],
    ),
    (
        Emotion::Anxiety,
        &[
            "anxious", "uneasy", "worried", "nervous", "restless", "panicked", "fretful", "afraid", "apprehensive",
            "tense", "jittery", "fearful", "flustered", "frightened", "terrified", "on edge",
        ],
    ),
    (
        Emotion::Happiness,
        &[
            "happy", "joyful", "glad", "blissful", "merry", "satisfied", "delighted", "elated", "pleased",
            "laughing", "cheerful", "excited", "jubilant", "optimistic", "enthusiastic", "uplifted", "overjoyed",
            "smile",
        ],
    ),
    (
        Emotion::Sadness,
        &[
            "sad", "sorrowful", "melancholic", "pain", "pessimistic", "tearful", "grieving", "mournful",
            "depressed", "suicidal", "heartbroken", "devastated", "upset", "crying", "saddened", "dejected",
            "desolate", "gloomy", "weeping", "desperate",
        ],
    ),
];

/// Keyword list for one criterion.
pub fn symptom_keywords(c: Criterion) -> &'static [&'static str] {
    SYMPTOM_KEYWORDS[c.index()].1
}

/// Counts occurrences of `phrase` (space-separated tokens) in `tokens`.
fn count_phrase(tokens: &[String], phrase: &str) -> usize {
    let words: Vec<&str> = phrase.split(' ').collect();
    if words.len() > tokens.len() {
        return 0;
    }
    tokens
        .windows(words.len())
        .filter(|w| w.iter().zip(&words).all(|(t, p)| t == p))
        .count()
}

/// Criteria whose keywords appear in `text`.
pub fn detect_symptoms(text: &str) -> SymptomVector {
    let tokens = tokenize(text);
    SymptomVector::from_criteria(
        SYMPTOM_KEYWORDS
            .iter()
            .filter(|(_, kws)| kws.iter().any(|k| count_phrase(&tokens, k) > 0))
            .map(|(c, _)| *c),
    )
}

/// Emotions whose keywords appear in `text`, in fixed emotion order.
pub fn detect_emotions(text: &str) -> Vec<Emotion> {
    let tokens = tokenize(text);
    EMOTION_KEYWORDS
        .iter()
        .filter(|(_, kws)| kws.iter().any(|k| count_phrase(&tokens, k) > 0))
        .map(|(e, _)| *e)
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockAnnotator;

pub fn mock_annotator() -> MockAnnotator {
    MockAnnotator
}

impl MockAnnotator {
    fn annotate(&self, text: &str) -> String {
        detect_symptoms(text).to_annotation()
    }

    fn summarize(&self, body: &str) -> String {
        let tokens = tokenize(body);
        let entries = body.matches("Time: ").count();
        let mut counts: Vec<(Emotion, usize, Vec<&str>)> = EMOTION_KEYWORDS
            .iter()
            .map(|(e, kws)| {
                let mut hits = 0;
                let mut markers = Vec::new();
                for k in kws.iter() {
                    let n = count_phrase(&tokens, k);
                    if n > 0 {
                        hits += n;
                        markers.push(*k);
                    }
                }
                (*e, hits, markers)
            })
            .collect();
        let total: usize = counts.iter().map(|c| c.1).sum();
        if total == 0 {
            return format!(
                "Mood course summary over {entries} entries: no dominant emotion; affect appears neutral and stable across the period."
            );
        }
        // stable sort keeps the fixed emotion order among equal counts
        counts.sort_by_key(|c| std::cmp::Reverse(c.1));
        let dominant = counts[0].0;
        let observed: Vec<String> = counts
            .iter()
            .filter(|c| c.1 > 0)
            .map(|c| format!("{} ({})", c.0.name(), c.1))
            .collect();
        let markers: BTreeSet<&str> = counts.iter().flat_map(|c| c.2.iter().copied()).collect();
        format!(
            "Mood course summary over {entries} entries: dominant emotion {}; emotions observed: {}. Markers: {}.",
            dominant.name(),
            observed.join(", "),
            markers.into_iter().collect::<Vec<_>>().join(", ")
        )
    }

    fn explain(&self, mood: &str, evidence: &str, depressed: bool) -> String {
        let mut letters = BTreeSet::new();
        let mut posts = 0usize;
        for (i, _) in evidence.match_indices("Symptoms: ") {
            let rest = &evidence[i + "Symptoms: ".len()..];
            let end = rest.find(')').map(|e| e + 1).unwrap_or(rest.len());
            if let Ok(v) = parse_annotation(&rest[..end]) {
                posts += 1;
                letters.extend(v.criteria());
            }
        }
        let verdict = prompts::verdict_word(depressed);
        if letters.is_empty() {
            return format!(
                "The automated system judged this user {verdict}. No posts displayed annotated depression symptoms, so the judgment rests on the mood course: {}",
                mood.trim()
            );
        }
        let cited: Vec<String> = letters.iter().map(|c| format!("{} ({})", c.letter(), c.title())).collect();
        format!(
            "The automated system judged this user {verdict}. Evidence from {posts} post(s) shows criteria {}. Mood course: {}",
            cited.join(", "),
            mood.trim()
        )
    }
}

impl ChatProvider for MockAnnotator {
    fn name(&self) -> &str {
        "mock-annotator"
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        if let Some(text) = prompts::annotation_text(prompt) {
            return Ok(self.annotate(text));
        }
        if let Some(body) = prompts::mood_body(prompt) {
            return Ok(self.summarize(body));
        }
        if let Some((mood, evidence, depressed)) = prompts::explanation_parts(prompt) {
            return Ok(self.explain(mood, evidence, depressed));
        }
        Err(ProviderError::InvalidResponse("mock annotator: unrecognized prompt".into()))
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Local
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{annotation_prompt, mood_entry, mood_prompt};

    fn annotate(text: &str) -> String {
        MockAnnotator.complete(&annotation_prompt(text)).unwrap()
    }

    #[test]
    fn annotation_examples() {
        assert_eq!(annotate("I can't sleep and I think about suicide"), "(D, I)");
        assert_eq!(annotate("nice weather today"), "None");
        assert_eq!(annotate("Feeling WORTHLESS, exhausted and sad"), "(A, F, G)");
    }

    #[test]
    fn every_keyword_triggers_its_criterion() {
        for (c, kws) in SYMPTOM_KEYWORDS {
            for k in kws {
                let v = detect_symptoms(&format!("today {k} again"));
                assert!(v.get(c), "{k} should flag {c}");
            }
        }
    }

    #[test]
    fn output_matches_reply_grammar() {
        let re_ok = |s: &str| {
            s == "None"
                || (s.starts_with('(')
                    && s.ends_with(')')
                    && s[1..s.len() - 1].split(", ").all(|l| l.len() == 1 && ('A'..='I').contains(&l.chars().next().unwrap())))
        };
        for text in ["suicide and insomnia", "nothing", "tired guilty unmotivated nausea sad", "restless focus"] {
            let out = annotate(text);
            assert!(re_ok(&out), "{out}");
        }
    }

    #[test]
    fn mood_summary_names_dominant_emotion() {
        let p = mood_prompt(&[
            mood_entry("2023-01-01T00:00:00Z", "crying all night"),
            mood_entry("2023-01-02T00:00:00Z", "so tearful and upset, a bit nervous"),
        ]);
        let s = MockAnnotator.complete(&p).unwrap();
        assert!(s.contains("dominant emotion sadness"), "{s}");
        assert!(s.contains("anxiety (1)"));
        let neutral = MockAnnotator.complete(&mood_prompt(&[mood_entry("t", "lunch")])).unwrap();
        assert!(neutral.contains("no dominant emotion"));
    }

    #[test]
    fn unknown_prompt_is_an_error() {
        assert!(MockAnnotator.complete("hello").is_err());
    }
}
