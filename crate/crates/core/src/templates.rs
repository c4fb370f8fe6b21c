//! Symptom and emotion template registry.
//!
//! Templates ship as two plain-text files, `symptoms.txt` and `emotions.txt`.
//! Each block is a `[KEY] Title` header line followed by the template text;
//! `#` lines are comments. The shipped files are compiled in as the builtin
//! registry and can be replaced at runtime with [`TemplateRegistry::load_dir`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::providers::{self, Encoder};
use crate::symptom::Criterion;

pub const SYMPTOMS_FILE: &str = "symptoms.txt";
pub const EMOTIONS_FILE: &str = "emotions.txt";

const BUILTIN_SYMPTOMS: &str = include_str!("../../../templates/symptoms.txt");
const BUILTIN_EMOTIONS: &str = include_str!("../../../templates/emotions.txt");

/// SHA-256 of the shipped template files.
pub const SYMPTOMS_SHA256: &str = "558d69f273dd017415a65c62450905ae5e931e676b8c0a5d463ce86bbd4574bf";
pub const EMOTIONS_SHA256: &str = "5f057fac295c3d7e70d67f6d7d0c697de1648590f37609d6912d2fa29aa15f3a";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Anger,
    Disgust,
    Anxiety,
    Happiness,
    Sadness,
}

impl Emotion {
    pub const ALL: [Emotion; 5] = [
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Anxiety,
        Emotion::Happiness,
        Emotion::Sadness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Disgust => "disgust",
            Emotion::Anxiety => "anxiety",
            Emotion::Happiness => "happiness",
            Emotion::Sadness => "sadness",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymptomTemplate {
    pub criterion: Criterion,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionTemplate {
    pub emotion: Emotion,
    pub title: String,
    pub text: String,
}

/// Exactly nine symptom templates (A–I) and five emotion templates, each in
/// fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    symptoms: Vec<SymptomTemplate>,
    emotions: Vec<EmotionTemplate>,
}

struct Block {
    key: String,
    title: String,
    text: String,
}

fn parse_blocks(source: &str, what: &str) -> Result<Vec<Block>> {
    let mut blocks: Vec<Block> = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(rest) = t.strip_prefix('[') {
            let (key, title) = rest
                .split_once(']')
                .ok_or_else(|| Error::Invalid(format!("{what}: line {}: unterminated header", i + 1)))?;
            blocks.push(Block {
                key: key.trim().to_string(),
                title: title.trim().to_string(),
                text: String::new(),
            });
        } else {
            let b = blocks
                .last_mut()
                .ok_or_else(|| Error::Invalid(format!("{what}: line {}: text before first header", i + 1)))?;
            if !b.text.is_empty() {
                b.text.push(' ');
            }
            b.text.push_str(t);
        }
    }
    Ok(blocks)
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_SYMPTOMS, BUILTIN_EMOTIONS).expect("shipped templates parse")
    }

    /// Reads `symptoms.txt` and `emotions.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        Self::parse(&read(SYMPTOMS_FILE)?, &read(EMOTIONS_FILE)?)
    }

    pub fn parse(symptoms: &str, emotions: &str) -> Result<Self> {
        let sblocks = parse_blocks(symptoms, SYMPTOMS_FILE)?;
        if sblocks.len() != 9 {
            return Err(Error::Invalid(format!("expected 9 symptom templates, found {}", sblocks.len())));
        }
        let mut out = Vec::with_capacity(9);
        for (b, expected) in sblocks.into_iter().zip(Criterion::ALL) {
            let c = (b.key.len() == 1)
                .then(|| b.key.chars().next().and_then(Criterion::from_letter))
                .flatten();
            if c != Some(expected) {
                return Err(Error::Invalid(format!(
                    "symptom template [{}] out of order; expected [{}]",
                    b.key, expected
                )));
            }
            if b.text.is_empty() {
                return Err(Error::Invalid(format!("symptom template [{}] is empty", b.key)));
            }
            out.push(SymptomTemplate {
                criterion: expected,
                title: b.title,
                text: b.text,
            });
        }

        let eblocks = parse_blocks(emotions, EMOTIONS_FILE)?;
        if eblocks.len() != 5 {
            return Err(Error::Invalid(format!("expected 5 emotion templates, found {}", eblocks.len())));
        }
        let mut emo = Vec::with_capacity(5);
        for (b, expected) in eblocks.into_iter().zip(Emotion::ALL) {
            if Emotion::from_name(&b.key) != Some(expected) {
                return Err(Error::Invalid(format!(
                    "emotion template [{}] out of order; expected [{}]",
                    b.key, expected
                )));
            }
            if b.text.is_empty() {
                return Err(Error::Invalid(format!("emotion template [{}] is empty", b.key)));
            }
            emo.push(EmotionTemplate {
                emotion: expected,
                title: b.title,
                text: b.text,
            });
        }
        Ok(TemplateRegistry {
            symptoms: out,
            emotions: emo,
        })
    }

    pub fn symptoms(&self) -> &[SymptomTemplate] {
        &self.symptoms
    }

    pub fn emotions(&self) -> &[EmotionTemplate] {
        &self.emotions
    }

    pub fn symptom(&self, c: Criterion) -> &SymptomTemplate {
        &self.symptoms[c.index()]
    }

    pub fn emotion(&self, e: Emotion) -> &EmotionTemplate {
        &self.emotions[e.index()]
    }
}

/// Template embeddings under one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedTemplates {
    pub encoder: String,
    /// Indexed by [`Criterion::index`].
    pub symptoms: Vec<Embedding>,
    /// Indexed by [`Emotion::index`].
    pub emotions: Vec<Embedding>,
}

impl EmbeddedTemplates {
    pub fn symptom(&self, c: Criterion) -> &Embedding {
        &self.symptoms[c.index()]
    }

    pub fn emotion(&self, e: Emotion) -> &Embedding {
        &self.emotions[e.index()]
    }
}

/// Embeds all 14 templates. Wrap the encoder in a
/// [`providers::CachedEncoder`] to persist them across runs.
pub fn embed_templates(registry: &TemplateRegistry, encoder: &dyn Encoder, exec: Execution) -> Result<EmbeddedTemplates> {
    let texts: Vec<&str> = registry
        .symptoms
        .iter()
        .map(|t| t.text.as_str())
        .chain(registry.emotions.iter().map(|t| t.text.as_str()))
        .collect();
    let mut all = exec.try_map(&texts, |t| providers::encode(encoder, t))?;
    let emotions = all.split_off(9);
    Ok(EmbeddedTemplates {
        encoder: encoder.name().to_string(),
        symptoms: all,
        emotions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;
    use crate::providers::{deterministic_test_encoder, CachedEncoder, ResponseCache};
    use sha2::{Digest, Sha256};
    use std::sync::Arc;

    #[test]
    fn builtin_has_fixed_shape() {
        let r = TemplateRegistry::builtin();
        assert_eq!(r.symptoms().len(), 9);
        assert_eq!(r.emotions().len(), 5);
        assert!(r.symptom(Criterion::A).text.starts_with("I feel low, unhappy, joyless"));
        assert!(r.symptom(Criterion::I).text.ends_with("making plans for suicide."));
        assert!(r.emotion(Emotion::Anger).text.starts_with("I am angry, mad, agitated"));
        assert_eq!(r.emotion(Emotion::Sadness).title, "Sadness");
    }

    #[test]
    fn shipped_files_match_checksums() {
        let hash = |s: &str| hex::encode(Sha256::digest(s.as_bytes()));
        assert_eq!(hash(BUILTIN_SYMPTOMS), SYMPTOMS_SHA256);
        assert_eq!(hash(BUILTIN_EMOTIONS), EMOTIONS_SHA256);
    }

    #[test]
    fn rejects_wrong_count_and_order() {
        let e = BUILTIN_EMOTIONS;
        let missing = BUILTIN_SYMPTOMS.replace("[I] Thoughts of suicide", "");
        assert!(TemplateRegistry::parse(&missing, e).is_err());
        let swapped = BUILTIN_SYMPTOMS.replace("[A]", "[Q]");
        assert!(TemplateRegistry::parse(&swapped, e).is_err());
        assert!(TemplateRegistry::parse(BUILTIN_SYMPTOMS, "[anger] x\ntext").is_err());
    }

    #[test]
    fn embeds_fourteen_and_caches() {
        let raw = Arc::new(deterministic_test_encoder(128, 0));
        let enc = CachedEncoder::new(raw, Arc::new(ResponseCache::in_memory()));
        let r = TemplateRegistry::builtin();
        let first = embed_templates(&r, &enc, Execution::default()).unwrap();
        assert_eq!(first.symptoms.len() + first.emotions.len(), 14);
        assert!(first.symptoms.iter().chain(&first.emotions).all(|e| e.is_unit()));
        assert_eq!(enc.upstream_calls(), 14);
        let second = embed_templates(&r, &enc, Execution::Sequential).unwrap();
        assert_eq!(first, second);
        assert_eq!(enc.upstream_calls(), 14);
    }

    #[test]
    fn sadness_is_closer_to_depressed_mood_than_to_happiness() {
        let enc = deterministic_test_encoder(384, 0);
        let t = embed_templates(&TemplateRegistry::builtin(), &enc, Execution::Sequential).unwrap();
        let sad = t.emotion(Emotion::Sadness);
        let to_a = cosine_similarity(sad, t.symptom(Criterion::A)).unwrap();
        let to_happy = cosine_similarity(sad, t.emotion(Emotion::Happiness)).unwrap();
        assert!(to_a > to_happy, "{to_a} vs {to_happy}");
    }
}
