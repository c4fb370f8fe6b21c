//! Users, posts and the JSONL dataset container.
//!
//! One user object per line:
//!
//! ```text
//! {"user_id": "u1", "label": 1, "posts": [{"post_id": "p1", "text": "...", "timestamp": "2023-01-31T12:00:00Z"}]}
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default history window: the last six months, fixed at 183 days.
pub const DEFAULT_WINDOW_DAYS: i64 = 183;

/// Dataset schema versions understood by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schema {
    #[default]
    V1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Post {
    pub post_id: String,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

impl Post {
    pub fn new(post_id: impl Into<String>, text: impl Into<String>, timestamp: DateTime<Utc>) -> Self {
        Post {
            post_id: post_id.into(),
            text: text.into(),
            timestamp,
        }
    }
}

/// Binary class label. Serialized as `0` / `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Control,
    Depressed,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Depressed
        } else {
            Label::Control
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Depressed
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(Label::Control),
            1 => Ok(Label::Depressed),
            other => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

/// One user's labeled post history. Posts are kept sorted by
/// `(timestamp, post_id)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub posts: Vec<Post>,
    pub label: Option<Label>,
}

impl UserRecord {
    /// Builds a record, sorting posts into canonical order.
    pub fn new(user_id: impl Into<String>, mut posts: Vec<Post>, label: Option<Label>) -> Self {
        sort_posts(&mut posts);
        UserRecord {
            user_id: user_id.into(),
            posts,
            label,
        }
    }
}

fn sort_posts(posts: &mut [Post]) {
    posts.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.post_id.cmp(&b.post_id)));
}

#[derive(Serialize, Deserialize)]
struct RawPost {
    post_id: String,
    text: String,
    timestamp: String,
}

#[derive(Serialize, Deserialize)]
struct RawUser {
    user_id: String,
    #[serde(default)]
    label: Option<Label>,
    posts: Vec<RawPost>,
}

/// Result of [`load_dataset`], including counts of what was dropped.
#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub records: Vec<UserRecord>,
    /// Posts whose text was empty after trimming.
    pub dropped_empty_posts: usize,
    /// Users left without any post after empty posts were dropped.
    pub dropped_empty_users: usize,
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_timestamp(post_id: &str, value: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(value)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| Error::BadTimestamp {
            post_id: post_id.to_string(),
            value: value.to_string(),
        })
}

/// Loads a JSONL dataset. Blank lines are skipped.
pub fn load_dataset(path: &Path, schema: Schema) -> Result<LoadedDataset> {
    let Schema::V1 = schema;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = LoadedDataset::default();
    let mut seen: HashMap<String, usize> = HashMap::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawUser = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = seen.get(&raw.user_id) {
            return Err(Error::DuplicateUser {
                user_id: raw.user_id,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(raw.user_id.clone(), line_no);

        let mut posts = Vec::with_capacity(raw.posts.len());
        for p in raw.posts {
            let timestamp = parse_timestamp(&p.post_id, &p.timestamp)?;
            if p.text.trim().is_empty() {
                out.dropped_empty_posts += 1;
                continue;
            }
            posts.push(Post::new(p.post_id, p.text, timestamp));
        }
        if posts.is_empty() {
            out.dropped_empty_users += 1;
            continue;
        }
        out.records.push(UserRecord::new(raw.user_id, posts, raw.label));
    }
    if out.dropped_empty_posts > 0 {
        log::warn!(
            "{}: dropped {} empty posts ({} users left without posts)",
            path.display(),
            out.dropped_empty_posts,
            out.dropped_empty_users
        );
    }
    Ok(out)
}

/// Serializes one record as a single JSONL line (no trailing newline).
pub fn record_to_json(record: &UserRecord) -> Result<String> {
    let raw = RawUser {
        user_id: record.user_id.clone(),
        label: record.label,
        posts: record
            .posts
            .iter()
            .map(|p| RawPost {
                post_id: p.post_id.clone(),
                text: p.text.clone(),
                timestamp: format_timestamp(&p.timestamp),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&raw)?)
}

pub fn write_dataset(path: &Path, records: &[UserRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", record_to_json(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keeps the posts at or after `last timestamp - window`.
///
/// The most recent post always survives, so a non-empty history stays
/// non-empty.
pub fn truncate_history(record: &UserRecord, window: Duration) -> UserRecord {
    let Some(last) = record.posts.last() else {
        return record.clone();
    };
    let cutoff = last.timestamp - window;
    UserRecord {
        user_id: record.user_id.clone(),
        posts: record.posts.iter().filter(|p| p.timestamp >= cutoff).cloned().collect(),
        label: record.label,
    }
}

pub fn default_window() -> Duration {
    Duration::days(DEFAULT_WINDOW_DAYS)
}
