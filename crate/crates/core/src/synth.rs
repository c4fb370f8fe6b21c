//! Deterministic synthetic cohorts for offline end-to-end runs.
//!
//! Every user writes neutral posts and everyday emotional posts. Depressed
//! users additionally have a share of posts carrying two keywords of one
//! criterion, taken from the symptom template vocabulary, and their emotional
//! posts lean towards negative emotion words. A small background rate of
//! symptom posts applies to all users so that neither class is trivially
//! clean. Symptom posts reuse the neutral sentence frames, so the keywords
//! are the only lexical difference.

use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_dataset, Label, Post, UserRecord};
use crate::error::{Error, Result};
use crate::providers::SYMPTOM_KEYWORDS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub prevalence: f64,
    /// Mean posts per user; counts are uniform on `[mean/2, 3*mean/2]`.
    pub posts_per_user: usize,
    /// Probability that a depressed user's post carries a symptom keyword.
    pub symptom_injection_rate: f64,
    /// Probability that any user's post carries a symptom keyword.
    pub background_symptom_rate: f64,
    /// Probability that a post is an everyday emotional post.
    pub emotion_rate: f64,
    /// A depressed user's emotional post uses a negative emotion word with
    /// probability `min(1, mood_coupling * symptom_injection_rate)`, so an
    /// injection rate of zero leaves the cohort label-free.
    pub mood_coupling: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 2000,
            prevalence: 0.05,
            posts_per_user: 69,
            symptom_injection_rate: 0.3,
            background_symptom_rate: 0.02,
            emotion_rate: 0.3,
            mood_coupling: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_users < 2 || self.posts_per_user == 0 {
            return Err(Error::Config("n_users must be at least 2 and posts_per_user positive".into()));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!("prevalence must be in (0, 1), got {}", self.prevalence)));
        }
        if !unit(self.symptom_injection_rate) || !unit(self.background_symptom_rate) || !unit(self.emotion_rate) {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        if !(self.mood_coupling >= 0.0 && self.mood_coupling.is_finite()) {
            return Err(Error::Config("mood_coupling must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn negative_mood_rate(&self) -> f64 {
        (self.mood_coupling * self.symptom_injection_rate).min(1.0)
    }

    pub fn n_positive(&self) -> usize {
        ((self.n_users as f64 * self.prevalence).round() as usize).clamp(1, self.n_users - 1)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub n_users: usize,
    pub n_positive: usize,
    pub n_posts: usize,
    pub depressed_posts: usize,
    /// Posts of depressed users carrying an injected symptom keyword.
    pub injected_posts: usize,
    pub background_symptom_posts: usize,
    pub emotion_posts: usize,
}

impl SynthStats {
    pub fn injected_rate(&self) -> f64 {
        if self.depressed_posts == 0 {
            0.0
        } else {
            self.injected_posts as f64 / self.depressed_posts as f64
        }
    }

    pub fn mean_posts(&self) -> f64 {
        self.n_posts as f64 / self.n_users as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub records: Vec<UserRecord>,
    pub stats: SynthStats,
}

const PLACES: &[&str] = &[
    "library", "market", "station", "gym", "museum", "bakery", "beach", "office", "garden center",
    "hardware store", "cinema", "harbor", "post office", "bookshop", "swimming pool", "town hall",
];
const PEOPLE: &[&str] = &[
    "my sister", "a coworker", "my neighbor", "an old friend", "my cousin", "the team", "my brother",
    "two classmates", "my aunt", "the landlord",
];
const FOODS: &[&str] = &[
    "lentil soup", "pasta", "curry", "pancake", "salad", "bread", "noodle", "chili", "dumpling", "omelette",
    "risotto", "flatbread",
];
const THINGS: &[&str] = &[
    "bookshelf", "bike lamp", "kettle", "desk chair", "phone case", "backpack", "rug", "plant pot", "toaster",
    "umbrella", "keyboard", "bird feeder",
];
const TIMES: &[&str] = &[
    "this morning", "last night", "on saturday", "after work", "at lunch", "yesterday", "on sunday",
    "this afternoon", "before dinner",
];
const ACTIVITIES: &[&str] = &[
    "painting the fence", "a puzzle", "laundry", "a long run", "tidying the garage", "a board game",
    "a crossword", "repotting herbs", "sorting old photos", "fixing a bike chain",
];
const TOPICS: &[&str] = &[
    "astronomy", "gardening", "chess openings", "bird migration", "old maps", "jazz history", "bread baking",
    "local trains", "tide tables", "origami",
];
const EVENTS: &[&str] = &[
    "exam results", "match", "meeting", "news", "traffic jam", "phone bill", "concert", "wedding",
    "job interview", "deadline", "rent increase", "team draft",
];
/// Everyday emotion words; none of them is a symptom keyword.
const EMOTION_WORDS: &[&str] = &[
    "angry", "annoyed", "furious", "irritated", "fuming", "outraged", "disgusted", "nauseated", "loathe",
    "despise", "anxious", "worried", "nervous", "uneasy", "afraid", "happy", "glad", "delighted", "cheerful",
    "excited", "upset", "tearful", "devastated", "dejected", "weeping", "crying",
];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).copied().expect("word lists are non-empty")
}

fn neutral_post(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..10) {
        0 => format!("Went to the {} with {} {}", pick(rng, PLACES), pick(rng, PEOPLE), pick(rng, TIMES)),
        1 => format!("Trying a new {} recipe {}", pick(rng, FOODS), pick(rng, TIMES)),
        2 => format!("Anyone know a good {} for a small apartment", pick(rng, THINGS)),
        3 => format!("{} and I spent {} on {}", capitalize(pick(rng, PEOPLE)), pick(rng, TIMES), pick(rng, ACTIVITIES)),
        4 => format!("The {} was busy {} and the queue took ages", pick(rng, PLACES), pick(rng, TIMES)),
        5 => format!("Just finished {} and next up is {}", pick(rng, ACTIVITIES), pick(rng, ACTIVITIES)),
        6 => format!("Picked up a {} at the {}", pick(rng, THINGS), pick(rng, PLACES)),
        7 => format!("Reading about {} {}", pick(rng, TOPICS), pick(rng, TIMES)),
        8 => format!("The bus to the {} was late again {}", pick(rng, PLACES), pick(rng, TIMES)),
        _ => format!("Fixed the {} myself {}", pick(rng, THINGS), pick(rng, TIMES)),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Negative subset of [`EMOTION_WORDS`].
const NEGATIVE_EMOTION_WORDS: &[&str] = &[
    "anxious", "worried", "nervous", "uneasy", "afraid", "upset", "tearful", "devastated", "dejected", "weeping",
    "crying",
];

fn emotion_post(rng: &mut ChaCha8Rng, negative: bool) -> String {
    let word = pick(rng, if negative { NEGATIVE_EMOTION_WORDS } else { EMOTION_WORDS });
    let event = pick(rng, EVENTS);
    match rng.gen_range(0..3) {
        0 => format!("Feeling {word} about the {event}"),
        1 => format!("Honestly {word} after the {event} {}", pick(rng, TIMES)),
        _ => format!("{} I was {word} because of the {event}", capitalize(pick(rng, TIMES))),
    }
}

/// A neutral post with two keywords of one criterion appended.
fn symptom_post(rng: &mut ChaCha8Rng) -> String {
    let (_, keywords) = SYMPTOM_KEYWORDS[rng.gen_range(0..SYMPTOM_KEYWORDS.len())];
    let mut two = keywords.choose_multiple(rng, 2);
    let a = two.next().expect("keyword lists have at least two entries");
    let b = two.next().expect("keyword lists have at least two entries");
    format!("{}, {a}, {b}", neutral_post(rng))
}

fn base_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).single().expect("valid date")
}

/// Builds the cohort. Identical configs give identical cohorts.
pub fn generate(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_users;
    let n_pos = config.n_positive();
    let mut positive = vec![false; n];
    for i in sample(&mut rng, n, n_pos).iter() {
        positive[i] = true;
    }
    let span_secs = Duration::days(182).num_seconds();
    let negative_rate = config.negative_mood_rate();
    let lo = (config.posts_per_user / 2).max(1);
    let hi = (config.posts_per_user * 3 / 2).max(lo);

    let mut stats = SynthStats {
        n_users: n,
        n_positive: n_pos,
        ..SynthStats::default()
    };
    let mut records = Vec::with_capacity(n);
    for (u, &depressed) in positive.iter().enumerate() {
        let user_id = format!("u{u:05}");
        let count = rng.gen_range(lo..=hi);
        let mut drafts: Vec<(i64, String)> = Vec::with_capacity(count);
        for _ in 0..count {
            let (r_inject, r_background, r_emotion): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
            let offset = rng.gen_range(0..span_secs);
            let text = if depressed && r_inject < config.symptom_injection_rate {
                stats.injected_posts += 1;
                symptom_post(&mut rng)
            } else if r_background < config.background_symptom_rate {
                stats.background_symptom_posts += 1;
                symptom_post(&mut rng)
            } else if r_emotion < config.emotion_rate {
                stats.emotion_posts += 1;
                let negative = depressed && rng.gen_bool(negative_rate);
                emotion_post(&mut rng, negative)
            } else {
                neutral_post(&mut rng)
            };
            drafts.push((offset, text));
        }
        drafts.sort();
        let posts: Vec<Post> = drafts
            .into_iter()
            .enumerate()
            .map(|(i, (offset, text))| Post::new(format!("{user_id}-p{i:03}"), text, base_time() + Duration::seconds(offset)))
            .collect();
        stats.n_posts += posts.len();
        if depressed {
            stats.depressed_posts += posts.len();
        }
        records.push(UserRecord::new(user_id, posts, Some(Label::from_bool(depressed))));
    }
    Ok(SynthCohort { records, stats })
}

/// Generates and writes the cohort as dataset JSONL.
pub fn generate_to_file(config: &SynthConfig, path: &Path) -> Result<SynthStats> {
    let cohort = generate(config)?;
    write_dataset(path, &cohort.records)?;
    Ok(cohort.stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{detect_emotions, detect_symptoms};

    fn small(seed: u64, injection: f64) -> SynthConfig {
        SynthConfig {
            n_users: 200,
            symptom_injection_rate: injection,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn positives_follow_prevalence() {
        let cfg = SynthConfig {
            n_users: 2000,
            posts_per_user: 5,
            ..SynthConfig::default()
        };
        let c = generate(&cfg).unwrap();
        let pos = c.records.iter().filter(|r| r.label == Some(Label::Depressed)).count();
        assert_eq!(pos, 100);
        assert_eq!(c.stats.n_positive, 100);
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        generate_to_file(&small(3, 0.3), &a).unwrap();
        generate_to_file(&small(3, 0.3), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        generate_to_file(&small(4, 0.3), &b).unwrap();
        assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    fn negative_share(c: &SynthCohort, depressed: bool) -> f64 {
        let (mut neg, mut all) = (0usize, 0usize);
        for r in c.records.iter().filter(|r| r.label == Some(Label::from_bool(depressed))) {
            for p in &r.posts {
                let emo = detect_emotions(&p.text);
                if emo.is_empty() || !detect_symptoms(&p.text).is_zero() {
                    continue;
                }
                all += 1;
                neg += usize::from(NEGATIVE_EMOTION_WORDS.iter().any(|w| p.text.contains(w)));
            }
        }
        neg as f64 / all as f64
    }

    #[test]
    fn mood_skew_follows_injection_rate() {
        let base = EMOTION_WORDS.iter().filter(|w| NEGATIVE_EMOTION_WORDS.contains(w)).count() as f64
            / EMOTION_WORDS.len() as f64;
        let mut cfg = SynthConfig {
            prevalence: 0.5,
            n_users: 400,
            ..SynthConfig::default()
        };
        let c = generate(&cfg).unwrap();
        let want = 0.3 + 0.7 * base;
        assert!((negative_share(&c, true) - want).abs() < 0.02, "{}", negative_share(&c, true));
        assert!((negative_share(&c, false) - base).abs() < 0.02);

        cfg.symptom_injection_rate = 0.0;
        let c = generate(&cfg).unwrap();
        assert!((negative_share(&c, true) - base).abs() < 0.02);
        assert_eq!(c.stats.injected_posts, 0);
        assert!(NEGATIVE_EMOTION_WORDS.iter().all(|w| EMOTION_WORDS.contains(w)));
    }

    #[test]
    fn mean_posts_within_ten_percent() {
        for seed in 0..10 {
            let s = generate(&small(seed, 0.3)).unwrap().stats;
            assert!((s.mean_posts() - 69.0).abs() <= 6.9, "seed {seed}: {}", s.mean_posts());
        }
    }

    #[test]
    fn injection_rate_is_met() {
        for seed in 0..5 {
            let cfg = SynthConfig {
                n_users: 2000,
                seed,
                ..SynthConfig::default()
            };
            let c = generate(&cfg).unwrap();
            assert!((c.stats.injected_rate() - 0.3).abs() <= 0.02, "seed {seed}: {}", c.stats.injected_rate());
            // recount from the texts: every injected or background post has a
            // detectable symptom, nothing else does
            let flagged = c
                .records
                .iter()
                .flat_map(|r| &r.posts)
                .filter(|p| !detect_symptoms(&p.text).is_zero())
                .count();
            assert_eq!(flagged, c.stats.injected_posts + c.stats.background_symptom_posts);
        }
    }

    #[test]
    fn neutral_and_emotion_posts_are_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5000 {
            let n = neutral_post(&mut rng);
            assert!(detect_symptoms(&n).is_zero() && detect_emotions(&n).is_empty(), "{n}");
            let e = emotion_post(&mut rng, n.len().is_multiple_of(2));
            assert!(detect_symptoms(&e).is_zero(), "{e}");
            assert_eq!(detect_emotions(&e).len(), 1, "{e}");
        }
    }

    #[test]
    fn every_keyword_is_detected_in_a_symptom_post() {
        for (criterion, keywords) in SYMPTOM_KEYWORDS {
            for kw in keywords {
                let text = format!("Reading about origami this morning, {kw}");
                assert!(detect_symptoms(&text).get(criterion), "{text}");
            }
        }
    }

    #[test]
    fn timestamps_span_six_months_and_sort() {
        let c = generate(&small(9, 0.3)).unwrap();
        for r in &c.records {
            assert!(r.posts.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            let span = r.posts.last().unwrap().timestamp - r.posts[0].timestamp;
            assert!(span <= Duration::days(182));
        }
    }

    #[test]
    fn zero_injection_has_no_injected_posts() {
        let c = generate(&small(2, 0.0)).unwrap();
        assert_eq!(c.stats.injected_posts, 0);
        assert!(small(0, 1.5).validate().is_err());
        assert!(SynthConfig { prevalence: 1.0, ..SynthConfig::default() }.validate().is_err());
    }
}
