//! Stage runner from raw dataset to report, with a manifest for `--resume`.
//!
//! Every stage writes its artifacts under the output directory and appends a
//! record (artifact paths plus SHA-256) to `manifest.json`. On resume a stage
//! is reused only when the config and data digests match and its artifacts
//! are unchanged on disk; once one stage is recomputed, every later stage is
//! recomputed too. Provider responses are cached separately, so a stage that
//! died halfway repeats no completed provider calls.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::artifacts::{file_digest, read_json, read_jsonl, write_json, write_jsonl};
use crate::config::{ChatChoice, EncoderChoice, ExplainScope, PipelineConfig};
use crate::criteria::{self, AnnotationBatch, AnnotationResult};
use crate::dataset::{self, Label, Post, Schema, UserRecord};
use crate::digest::sha256_hex;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, MetricSummary, MetricsReport, Split};
use crate::exec::Execution;
use crate::explain::{self, ExplanationReport, Verdict};
use crate::features::{self, FeatureSet, UserFeatures};
use crate::gbt::{self, BoostedModel, IsotonicCalibrator};
use crate::mood::{self, MoodSummary};
use crate::providers::{
    self, CachedChat, CachedEncoder, ChatProvider, Encoder, HashingEncoder, HttpTransport, MockAnnotator,
    ProviderError, ProviderKind, RemoteChat, RemoteEncoder, ResponseCache, RetryPolicy, API_KEY_ENV,
};
use crate::templates::{embed_templates, EmbeddedTemplates, TemplateRegistry};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Truncate,
    Embed,
    Filter,
    Annotate,
    Mood,
    Featurize,
    Split,
    Train,
    Calibrate,
    Eval,
    Explain,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Ingest,
        Stage::Truncate,
        Stage::Embed,
        Stage::Filter,
        Stage::Annotate,
        Stage::Mood,
        Stage::Featurize,
        Stage::Split,
        Stage::Train,
        Stage::Calibrate,
        Stage::Eval,
        Stage::Explain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Truncate => "truncate",
            Stage::Embed => "embed",
            Stage::Filter => "filter",
            Stage::Annotate => "annotate",
            Stage::Mood => "mood",
            Stage::Featurize => "featurize",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Eval => "eval",
            Stage::Explain => "explain",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn in_stage<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.name(),
            source: Box::new(other),
        },
    })
}

// ---------------------------------------------------------------------------
// providers

/// Applies configured limits to a provider that has none of its own.
struct LimitedChat {
    inner: Arc<dyn ChatProvider>,
    max_concurrency: usize,
    context_chars: usize,
}

impl ChatProvider for LimitedChat {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        self.inner.complete(prompt)
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn context_chars(&self) -> usize {
        self.context_chars
    }

    fn kind(&self) -> ProviderKind {
        self.inner.kind()
    }
}

/// The encoder and chat provider a run talks to.
pub struct Providers {
    pub encoder: Arc<dyn Encoder>,
    pub chat: Arc<CachedChat>,
    pub cache: Arc<ResponseCache>,
    /// Bound on concurrent encoder requests; `None` for local encoders.
    pub encoder_limit: Option<usize>,
}

impl Providers {
    /// Builds providers as configured, with the response cache opened at
    /// [`PipelineConfig::cache_file`].
    pub fn from_config(cfg: &PipelineConfig) -> Result<Providers> {
        let cache = Arc::new(ResponseCache::open(&cfg.cache_file())?);
        Self::with_cache(cfg, cache)
    }

    /// Wraps `chat` in a [`CachedChat`] over `cache`.
    pub fn new(encoder: Arc<dyn Encoder>, chat: Arc<dyn ChatProvider>, cache: Arc<ResponseCache>) -> Providers {
        Providers {
            encoder,
            chat: Arc::new(CachedChat::new(chat, Arc::clone(&cache))),
            cache,
            encoder_limit: None,
        }
    }

    /// Same as [`Providers::from_config`] with a caller-supplied cache.
    pub fn with_cache(cfg: &PipelineConfig, cache: Arc<ResponseCache>) -> Result<Providers> {
        let api_key = std::env::var(API_KEY_ENV).ok();
        let retry = RetryPolicy {
            max_attempts: cfg.max_attempts,
            base_delay: Duration::from_millis(cfg.base_delay_ms),
            ..RetryPolicy::default()
        };
        let transport = || Arc::new(HttpTransport::new(Duration::from_secs(cfg.timeout_secs)));
        let (encoder, encoder_limit): (Arc<dyn Encoder>, _) = match cfg.encoder {
            EncoderChoice::Test => (Arc::new(HashingEncoder::new(cfg.encoder_dim, cfg.encoder_seed)), None),
            EncoderChoice::Remote => {
                let remote = RemoteEncoder::new(transport(), &cfg.encoder_url, &cfg.encoder_model, cfg.encoder_dim)
                    .with_api_key(api_key.clone())
                    .with_retry(retry);
                (
                    Arc::new(CachedEncoder::new(Arc::new(remote), Arc::clone(&cache))),
                    Some(cfg.max_concurrency),
                )
            }
        };
        let inner: Arc<dyn ChatProvider> = match cfg.chat {
            ChatChoice::Mock => Arc::new(LimitedChat {
                inner: Arc::new(MockAnnotator),
                max_concurrency: cfg.max_concurrency,
                context_chars: cfg.context_chars,
            }),
            ChatChoice::Remote => Arc::new(
                RemoteChat::new(transport(), &cfg.chat_url, &cfg.chat_model)
                    .with_api_key(api_key)
                    .with_retry(retry)
                    .with_limits(cfg.max_concurrency, cfg.context_chars),
            ),
        };
        let chat = Arc::new(CachedChat::new(inner, Arc::clone(&cache)));
        Ok(Providers {
            encoder,
            chat,
            cache,
            encoder_limit,
        })
    }

    fn encode_posts(&self, posts: &[&Post], exec: Execution) -> Result<Vec<Embedding>> {
        let enc = self.encoder.as_ref();
        let f = |p: &&Post| providers::encode(enc, &p.text);
        Ok(match self.encoder_limit {
            Some(limit) => exec.try_map_bounded(limit, posts, f)?,
            None => exec.try_map(posts, f)?,
        })
    }
}

fn load_templates(cfg: &PipelineConfig) -> Result<TemplateRegistry> {
    match &cfg.templates_dir {
        Some(dir) => TemplateRegistry::load_dir(dir),
        None => Ok(TemplateRegistry::builtin()),
    }
}

// ---------------------------------------------------------------------------
// stage computations, usable without touching disk

/// Risk and emotion scores of one post.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostScore {
    pub post_id: String,
    pub user_id: String,
    pub risk: f64,
    pub emotions: [f64; 5],
}

/// Posts picked for annotation and for the mood course.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub k_percent: f64,
    pub m_percent: f64,
    pub annotate: BTreeSet<String>,
    pub emotional: BTreeSet<String>,
}

fn check_unique_posts(records: &[UserRecord]) -> Result<()> {
    let mut seen: HashMap<&str, &str> = HashMap::new();
    for r in records {
        for p in &r.posts {
            if let Some(other) = seen.insert(&p.post_id, &r.user_id) {
                return Err(Error::Invalid(format!(
                    "post id {} appears for users {other} and {}",
                    p.post_id, r.user_id
                )));
            }
        }
    }
    Ok(())
}

fn all_posts(records: &[UserRecord]) -> Vec<&Post> {
    records.iter().flat_map(|r| r.posts.iter()).collect()
}

pub fn score_posts(
    records: &[UserRecord],
    providers: &Providers,
    templates: &EmbeddedTemplates,
    exec: Execution,
) -> Result<Vec<PostScore>> {
    check_unique_posts(records)?;
    let mut out = Vec::new();
    for r in records {
        let posts: Vec<&Post> = r.posts.iter().collect();
        let embs = providers.encode_posts(&posts, exec)?;
        for (p, h) in posts.iter().zip(&embs) {
            out.push(PostScore {
                post_id: p.post_id.clone(),
                user_id: r.user_id.clone(),
                risk: criteria::risk_from_embedding(h, &templates.symptoms)?,
                emotions: mood::emotion_scores_from_embedding(&p.post_id, h, &templates.emotions)?.scores,
            });
        }
    }
    Ok(out)
}

pub fn select_posts(scores: &[PostScore], k_percent: f64, m_percent: f64) -> Selection {
    let risk: Vec<criteria::RiskScore> = scores
        .iter()
        .map(|s| criteria::RiskScore {
            post_id: s.post_id.clone(),
            score: s.risk,
        })
        .collect();
    let emo: Vec<mood::EmotionScores> = scores
        .iter()
        .map(|s| mood::EmotionScores {
            post_id: s.post_id.clone(),
            scores: s.emotions,
        })
        .collect();
    Selection {
        k_percent,
        m_percent,
        annotate: criteria::select_top_k(&risk, k_percent),
        emotional: mood::select_emotional(&emo, m_percent),
    }
}

pub fn annotate_posts(
    records: &[UserRecord],
    selection: &Selection,
    chat: &dyn ChatProvider,
    exec: Execution,
) -> Result<AnnotationBatch> {
    criteria::annotate_corpus(&all_posts(records), &selection.annotate, chat, exec)
}

pub fn mood_courses(
    records: &[UserRecord],
    selection: &Selection,
    chat: &dyn ChatProvider,
    exec: Execution,
) -> Result<Vec<MoodSummary>> {
    Ok(exec.try_map_bounded(chat.max_concurrency(), records, |r| {
        mood::summarize_mood_course(r, &selection.emotional, chat)
    })?)
}

pub fn featurize(
    records: &[UserRecord],
    annotations: &HashMap<String, crate::symptom::SymptomVector>,
    moods: &[MoodSummary],
    providers: &Providers,
    alpha: f64,
    beta: f64,
    exec: Execution,
) -> Result<Vec<UserFeatures>> {
    let by_user: HashMap<&str, &MoodSummary> = moods.iter().map(|m| (m.user_id.as_str(), m)).collect();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let m = by_user
            .get(r.user_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("user {} has no mood course", r.user_id)))?;
        let posts: Vec<&Post> = r.posts.iter().collect();
        let embs = providers.encode_posts(&posts, exec)?;
        let refs: Vec<&Embedding> = embs.iter().collect();
        let f_ph = features::post_history_from_embeddings(&refs)?;
        let emotional: BTreeSet<&str> = m.emotional_post_ids.iter().map(String::as_str).collect();
        let emo_embs: Vec<&Embedding> = posts
            .iter()
            .zip(&embs)
            .filter(|(p, _)| emotional.contains(p.post_id.as_str()))
            .map(|(_, e)| e)
            .collect();
        let f_mc = mood::mood_representation(&m.summary, &emo_embs, alpha, beta, providers.encoder.as_ref())?;
        let f_dc = criteria::criteria_feature(r, annotations)?.values;
        out.push(UserFeatures::new(&r.user_id, r.label, f_ph, f_mc, f_dc)?);
    }
    Ok(out)
}

/// Counts from an in-memory feature build.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub users: usize,
    pub posts: usize,
    pub annotated_posts: usize,
    pub emotional_posts: usize,
    pub chat_calls: usize,
    pub reasks: usize,
    pub parse_warnings: usize,
}

/// Runs truncate through featurize in memory.
pub fn build_features(
    records: &[UserRecord],
    cfg: &PipelineConfig,
    providers: &Providers,
) -> Result<(Vec<UserFeatures>, FeatureStats)> {
    let exec = cfg.execution;
    let window = chrono::Duration::days(cfg.window_days);
    let truncated: Vec<UserRecord> = records.iter().map(|r| dataset::truncate_history(r, window)).collect();
    let templates = embed_templates(&load_templates(cfg)?, providers.encoder.as_ref(), exec)?;
    let scores = score_posts(&truncated, providers, &templates, exec)?;
    let selection = select_posts(&scores, cfg.k_percent, cfg.m_percent);
    let before = providers.chat.upstream_calls();
    let batch = annotate_posts(&truncated, &selection, providers.chat.as_ref(), exec)?;
    let moods = mood_courses(&truncated, &selection, providers.chat.as_ref(), exec)?;
    let feats = featurize(&truncated, &batch.vectors(), &moods, providers, cfg.alpha, cfg.beta, exec)?;
    let stats = FeatureStats {
        users: truncated.len(),
        posts: scores.len(),
        annotated_posts: selection.annotate.len(),
        emotional_posts: selection.emotional.len(),
        chat_calls: providers.chat.upstream_calls() - before,
        reasks: batch.reasks,
        parse_warnings: batch.parse_warnings,
    };
    Ok((feats, stats))
}

// ---------------------------------------------------------------------------
// training and evaluation

/// Seeds `seed, seed + 1, ...` for `runs` runs.
pub fn run_seeds(seed: u64, runs: usize) -> Vec<u64> {
    (0..runs as u64).map(|i| seed.wrapping_add(i)).collect()
}

pub fn split_features(features: &[UserFeatures], seed: u64) -> Result<Split> {
    let labeled: Vec<(&str, bool)> = features
        .iter()
        .filter_map(|f| f.label.map(|l| (f.user_id.as_str(), l.is_positive())))
        .collect();
    eval::split_labeled(&labeled, seed)
}

fn rows_for(
    by_id: &HashMap<&str, &UserFeatures>,
    ids: &[String],
    set: FeatureSet,
) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let mut rows = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for id in ids {
        let f = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Invalid(format!("split names unknown user {id}")))?;
        let label = f
            .label
            .ok_or_else(|| Error::Invalid(format!("split names unlabeled user {id}")))?;
        rows.push(set.row(f));
        labels.push(label.is_positive());
    }
    Ok((rows, labels))
}

/// Test-split prediction for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub user_id: String,
    pub label: Label,
    pub raw_score: f64,
    pub probability: f64,
    pub verdict: Verdict,
}

/// One train / calibrate / evaluate cycle.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub split: Split,
    pub model: BoostedModel,
    pub calibrator: IsotonicCalibrator,
    pub losses: Vec<f64>,
    pub metrics: MetricsReport,
    pub predictions: Vec<Prediction>,
}

pub fn train_model(features: &[UserFeatures], split: &Split, set: FeatureSet, cfg: &PipelineConfig) -> Result<(BoostedModel, Vec<f64>)> {
    let by_id: HashMap<&str, &UserFeatures> = features.iter().map(|f| (f.user_id.as_str(), f)).collect();
    let (rows, labels) = rows_for(&by_id, &split.train, set)?;
    let (model, report) = gbt::train(&rows, &labels, &cfg.gbt_params(split.seed))?;
    Ok((model, report.losses))
}

/// Isotonic fit on the validation part.
pub fn calibrate_model(
    features: &[UserFeatures],
    split: &Split,
    set: FeatureSet,
    model: &BoostedModel,
    exec: Execution,
) -> Result<IsotonicCalibrator> {
    let by_id: HashMap<&str, &UserFeatures> = features.iter().map(|f| (f.user_id.as_str(), f)).collect();
    let (rows, labels) = rows_for(&by_id, &split.validation, set)?;
    gbt::fit_isotonic(&model.raw_scores(&rows, exec)?, &labels)
}

/// Metrics on the test part: ranking metrics from raw scores, thresholded
/// metrics from calibrated probabilities.
pub fn evaluate_model(
    features: &[UserFeatures],
    split: &Split,
    set: FeatureSet,
    model: &BoostedModel,
    cal: &IsotonicCalibrator,
    threshold: f64,
    exec: Execution,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    evaluate_part(features, split, "test", set, model, cal, threshold, exec)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_part(
    features: &[UserFeatures],
    split: &Split,
    part: &str,
    set: FeatureSet,
    model: &BoostedModel,
    cal: &IsotonicCalibrator,
    threshold: f64,
    exec: Execution,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let ids = split
        .part(part)
        .ok_or_else(|| Error::Invalid(format!("unknown split part {part:?}")))?;
    let by_id: HashMap<&str, &UserFeatures> = features.iter().map(|f| (f.user_id.as_str(), f)).collect();
    let (rows, labels) = rows_for(&by_id, ids, set)?;
    let raw = model.raw_scores(&rows, exec)?;
    let probs: Vec<f64> = raw.iter().map(|&s| cal.probability(s)).collect();
    let metrics = eval::evaluate(&labels, &raw, &probs, threshold)?;
    let predictions = ids
        .iter()
        .zip(labels.iter().zip(raw.iter().zip(&probs)))
        .map(|(id, (&y, (&r, &p)))| Prediction {
            user_id: id.clone(),
            label: Label::from_bool(y),
            raw_score: r,
            probability: p,
            verdict: if p >= threshold { Verdict::Depressed } else { Verdict::Normal },
        })
        .collect();
    Ok((metrics, predictions))
}

pub fn train_eval_run(features: &[UserFeatures], set: FeatureSet, seed: u64, cfg: &PipelineConfig) -> Result<RunResult> {
    let split = split_features(features, seed)?;
    let (model, losses) = train_model(features, &split, set, cfg)?;
    let calibrator = calibrate_model(features, &split, set, &model, cfg.execution)?;
    let (metrics, predictions) = evaluate_model(features, &split, set, &model, &calibrator, cfg.threshold, cfg.execution)?;
    Ok(RunResult {
        split,
        model,
        calibrator,
        losses,
        metrics,
        predictions,
    })
}

/// `cfg.runs` runs with seeds `cfg.seed + i`, and their mean.
pub fn multi_seed(features: &[UserFeatures], set: FeatureSet, cfg: &PipelineConfig) -> Result<(Vec<RunResult>, MetricSummary)> {
    let runs = run_seeds(cfg.seed, cfg.runs)
        .into_iter()
        .map(|s| train_eval_run(features, set, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<MetricsReport> = runs.iter().map(|r| r.metrics.clone()).collect();
    let mean = eval::average_metrics(&metrics)?;
    Ok((runs, mean))
}

/// Mean metrics of every feature set over the same seeds and splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub feature_set: FeatureSet,
    pub runs: Vec<MetricsReport>,
    pub mean: MetricSummary,
}

pub fn ablation(features: &[UserFeatures], cfg: &PipelineConfig) -> Result<Vec<AblationRow>> {
    FeatureSet::ALL
        .into_iter()
        .map(|set| {
            let (runs, mean) = multi_seed(features, set, cfg)?;
            Ok(AblationRow {
                feature_set: set,
                runs: runs.into_iter().map(|r| r.metrics).collect(),
                mean,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Artifact path relative to the output directory, to its SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub data_digest: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage.name())
    }
}

pub fn load_manifest(out_dir: &Path) -> Result<Manifest> {
    read_json(&out_dir.join(MANIFEST_FILE))
}

fn artifacts_intact(out_dir: &Path, rec: &StageRecord) -> bool {
    rec.artifacts
        .iter()
        .all(|(rel, sha)| file_digest(&out_dir.join(rel)).is_ok_and(|d| &d == sha))
}

// ---------------------------------------------------------------------------
// file-based runner

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub resume: bool,
    /// Last stage to run.
    pub until: Stage,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            resume: false,
            until: Stage::Explain,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutcome {
    /// Stages executed this time, in order.
    pub executed: Vec<Stage>,
    /// Stages taken from an earlier run's artifacts.
    pub reused: Vec<Stage>,
    pub report: Option<EvalReport>,
    /// Requests that reached the chat provider (not served from cache).
    pub chat_calls: usize,
    pub manifest: Option<Manifest>,
}

#[derive(Default)]
struct State {
    records: Vec<UserRecord>,
    truncated: Vec<UserRecord>,
    scores: Vec<PostScore>,
    selection: Option<Selection>,
    annotations: Vec<AnnotationResult>,
    moods: Vec<MoodSummary>,
    features: Vec<UserFeatures>,
    splits: Vec<Split>,
    models: Vec<BoostedModel>,
    calibrators: Vec<IsotonicCalibrator>,
    report: Option<EvalReport>,
}

/// Where run `i` keeps its per-run files.
fn run_dir(i: usize, seed: u64) -> PathBuf {
    if i == 0 {
        PathBuf::new()
    } else {
        PathBuf::from("runs").join(format!("seed-{seed}"))
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
    providers: &'a Providers,
    data_digest: String,
    state: State,
}

type Produced = (Vec<PathBuf>, BTreeMap<String, u64>);

fn counts<const N: usize>(items: [(&str, usize); N]) -> BTreeMap<String, u64> {
    items.into_iter().map(|(k, v)| (k.to_string(), v as u64)).collect()
}

impl Runner<'_> {
    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn run_stage(&mut self, stage: Stage) -> Result<Produced> {
        let exec = self.cfg.execution;
        let cfg = self.cfg;
        match stage {
            Stage::Ingest => {
                let loaded = dataset::load_dataset(&cfg.data_path, Schema::V1)?;
                if loaded.records.is_empty() {
                    return Err(Error::Invalid(format!("{}: no users with posts", cfg.data_path.display())));
                }
                dataset::write_dataset(&self.path("dataset.jsonl"), &loaded.records)?;
                let c = counts([
                    ("users", loaded.records.len()),
                    ("dropped_empty_posts", loaded.dropped_empty_posts),
                    ("dropped_empty_users", loaded.dropped_empty_users),
                ]);
                self.state.records = loaded.records;
                Ok((vec!["dataset.jsonl".into()], c))
            }
            Stage::Truncate => {
                let window = chrono::Duration::days(cfg.window_days);
                let t: Vec<UserRecord> = self.state.records.iter().map(|r| dataset::truncate_history(r, window)).collect();
                dataset::write_dataset(&self.path("truncated.jsonl"), &t)?;
                let before: usize = self.state.records.iter().map(|r| r.posts.len()).sum();
                let after: usize = t.iter().map(|r| r.posts.len()).sum();
                self.state.truncated = t;
                Ok((vec!["truncated.jsonl".into()], counts([("posts", after), ("posts_removed", before - after)])))
            }
            Stage::Embed => {
                let templates = embed_templates(&load_templates(cfg)?, self.providers.encoder.as_ref(), exec)?;
                let scores = score_posts(&self.state.truncated, self.providers, &templates, exec)?;
                write_jsonl(&self.path("post_scores.jsonl"), &scores)?;
                let c = counts([("posts", scores.len())]);
                self.state.scores = scores;
                Ok((vec!["post_scores.jsonl".into()], c))
            }
            Stage::Filter => {
                let sel = select_posts(&self.state.scores, cfg.k_percent, cfg.m_percent);
                write_json(&self.path("selection.json"), &sel)?;
                let c = counts([("annotate", sel.annotate.len()), ("emotional", sel.emotional.len())]);
                self.state.selection = Some(sel);
                Ok((vec!["selection.json".into()], c))
            }
            Stage::Annotate => {
                let sel = self.state.selection.as_ref().expect("filter ran");
                let before = self.providers.chat.upstream_calls();
                let batch = annotate_posts(&self.state.truncated, sel, self.providers.chat.as_ref(), exec)?;
                write_jsonl(&self.path("annotations.jsonl"), &batch.results)?;
                let c = counts([
                    ("annotated", sel.annotate.len()),
                    ("reasks", batch.reasks),
                    ("parse_warnings", batch.parse_warnings),
                    ("upstream_calls", self.providers.chat.upstream_calls() - before),
                ]);
                self.state.annotations = batch.results;
                Ok((vec!["annotations.jsonl".into()], c))
            }
            Stage::Mood => {
                let sel = self.state.selection.as_ref().expect("filter ran");
                let before = self.providers.chat.upstream_calls();
                let moods = mood_courses(&self.state.truncated, sel, self.providers.chat.as_ref(), exec)?;
                write_jsonl(&self.path("mood_courses.jsonl"), &moods)?;
                let c = counts([
                    ("users", moods.len()),
                    ("without_emotional_posts", moods.iter().filter(|m| m.is_sentinel()).count()),
                    ("upstream_calls", self.providers.chat.upstream_calls() - before),
                ]);
                self.state.moods = moods;
                Ok((vec!["mood_courses.jsonl".into()], c))
            }
            Stage::Featurize => {
                let vectors = self.annotation_vectors();
                let feats = featurize(
                    &self.state.truncated,
                    &vectors,
                    &self.state.moods,
                    self.providers,
                    cfg.alpha,
                    cfg.beta,
                    exec,
                )?;
                write_jsonl(&self.path("features.jsonl"), &feats)?;
                let c = counts([("users", feats.len()), ("dim", feats.first().map_or(0, |f| f.fused.len()))]);
                self.state.features = feats;
                Ok((vec!["features.jsonl".into()], c))
            }
            Stage::Split => {
                let splits = run_seeds(cfg.seed, cfg.runs)
                    .into_iter()
                    .map(|s| split_features(&self.state.features, s))
                    .collect::<Result<Vec<_>>>()?;
                write_json(&self.path("split.json"), &splits)?;
                let s = &splits[0];
                let c = counts([
                    ("train", s.train.len()),
                    ("validation", s.validation.len()),
                    ("test", s.test.len()),
                ]);
                self.state.splits = splits;
                Ok((vec!["split.json".into()], c))
            }
            Stage::Train => {
                let mut files = Vec::new();
                let mut models = Vec::new();
                for (i, split) in self.state.splits.iter().enumerate() {
                    let (model, _) = train_model(&self.state.features, split, cfg.feature_set, cfg)?;
                    let rel = run_dir(i, split.seed).join("gbt.json");
                    write_json(&self.path(&rel), &model)?;
                    files.push(rel);
                    models.push(model);
                }
                let c = counts([("runs", models.len()), ("trees", models[0].trees.len())]);
                self.state.models = models;
                Ok((files, c))
            }
            Stage::Calibrate => {
                let mut files = Vec::new();
                let mut cals = Vec::new();
                for (i, (split, model)) in self.state.splits.iter().zip(&self.state.models).enumerate() {
                    let cal = calibrate_model(&self.state.features, split, cfg.feature_set, model, exec)?;
                    let rel = run_dir(i, split.seed).join("model.json");
                    gbt::save_model(model, &cal, &self.path(&rel))?;
                    files.push(rel);
                    cals.push(cal);
                }
                let c = counts([("steps", cals[0].values.len())]);
                self.state.calibrators = cals;
                Ok((files, c))
            }
            Stage::Eval => {
                let mut files = Vec::new();
                let mut runs = Vec::new();
                let mut model_digests = Vec::new();
                let mut labels = Vec::new();
                for (i, split) in self.state.splits.iter().enumerate() {
                    let (model, cal) = (&self.state.models[i], &self.state.calibrators[i]);
                    let (metrics, preds) =
                        evaluate_model(&self.state.features, split, cfg.feature_set, model, cal, cfg.threshold, exec)?;
                    let dir = run_dir(i, split.seed);
                    model_digests.push(file_digest(&self.path(dir.join("model.json")))?);
                    let rel = dir.join("predictions.jsonl");
                    write_jsonl(&self.path(&rel), &preds)?;
                    files.push(rel);
                    if i == 0 {
                        labels = preds.iter().map(|p| p.label.is_positive()).collect();
                    }
                    runs.push(metrics);
                }
                let model_digest = if model_digests.len() == 1 {
                    model_digests.remove(0)
                } else {
                    sha256_hex(model_digests.join("\n").as_bytes())
                };
                let report = EvalReport::new("test", &labels, &cfg.digest(), &self.data_digest, &model_digest, runs)?;
                eval::emit_report(&report, self.out)?;
                files.push("report.json".into());
                files.push("report.txt".into());
                let c = counts([("runs", report.runs.len()), ("test_users", report.n_users)]);
                self.state.report = Some(report);
                Ok((files, c))
            }
            Stage::Explain => {
                let dir = self.path("explanations");
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
                let users: BTreeSet<&str> = match cfg.explain {
                    ExplainScope::None => BTreeSet::new(),
                    ExplainScope::Test => self.state.splits[0].test.iter().map(String::as_str).collect(),
                    ExplainScope::All => self.state.features.iter().map(|f| f.user_id.as_str()).collect(),
                };
                let before = self.providers.chat.upstream_calls();
                let reports = self.explain_users(&users)?;
                let index = explain::write_explanations(&dir, &reports)?;
                let mut files: Vec<PathBuf> = reports
                    .iter()
                    .map(|r| Path::new("explanations").join(explain::report_file_name(&r.user_id)))
                    .collect();
                files.push(index.strip_prefix(self.out).unwrap_or(&index).to_path_buf());
                let c = counts([
                    ("users", reports.len()),
                    ("unavailable", reports.iter().filter(|r| !r.explanation_available()).count()),
                    ("upstream_calls", self.providers.chat.upstream_calls() - before),
                ]);
                Ok((files, c))
            }
        }
    }

    fn annotation_vectors(&self) -> HashMap<String, crate::symptom::SymptomVector> {
        self.state
            .annotations
            .iter()
            .map(|a| (a.post_id.clone(), a.vector))
            .collect()
    }

    fn explain_users(&self, users: &BTreeSet<&str>) -> Result<Vec<ExplanationReport>> {
        let cfg = self.cfg;
        let vectors = self.annotation_vectors();
        let moods: HashMap<&str, &MoodSummary> = self.state.moods.iter().map(|m| (m.user_id.as_str(), m)).collect();
        let feats: HashMap<&str, &UserFeatures> = self.state.features.iter().map(|f| (f.user_id.as_str(), f)).collect();
        let records: Vec<&UserRecord> = self
            .state
            .truncated
            .iter()
            .filter(|r| users.contains(r.user_id.as_str()))
            .collect();
        let (model, cal) = (&self.state.models[0], &self.state.calibrators[0]);
        let chat = self.providers.chat.as_ref();
        cfg.execution.try_map_bounded(chat.max_concurrency(), &records, |r| {
            let f = feats
                .get(r.user_id.as_str())
                .ok_or_else(|| Error::Invalid(format!("user {} has no features", r.user_id)))?;
            let m = moods
                .get(r.user_id.as_str())
                .ok_or_else(|| Error::Invalid(format!("user {} has no mood course", r.user_id)))?;
            let c = explain::classify(model, cal, &cfg.feature_set.row(f), cfg.threshold)?;
            Ok(explain::explain_user(r, &vectors, &m.summary, c, chat))
        })
    }

    /// Loads a reused stage's artifacts into memory.
    fn load_stage(&mut self, stage: Stage) -> Result<()> {
        let s = &mut self.state;
        match stage {
            Stage::Ingest => s.records = dataset::load_dataset(&self.out.join("dataset.jsonl"), Schema::V1)?.records,
            Stage::Truncate => s.truncated = dataset::load_dataset(&self.out.join("truncated.jsonl"), Schema::V1)?.records,
            Stage::Embed => s.scores = read_jsonl(&self.out.join("post_scores.jsonl"))?,
            Stage::Filter => s.selection = Some(read_json(&self.out.join("selection.json"))?),
            Stage::Annotate => s.annotations = read_jsonl(&self.out.join("annotations.jsonl"))?,
            Stage::Mood => s.moods = read_jsonl(&self.out.join("mood_courses.jsonl"))?,
            Stage::Featurize => s.features = read_jsonl(&self.out.join("features.jsonl"))?,
            Stage::Split => s.splits = read_json(&self.out.join("split.json"))?,
            Stage::Train => {
                s.models = s
                    .splits
                    .iter()
                    .enumerate()
                    .map(|(i, sp)| read_json(&self.out.join(run_dir(i, sp.seed)).join("gbt.json")))
                    .collect::<Result<_>>()?
            }
            Stage::Calibrate => {
                s.calibrators = s
                    .splits
                    .iter()
                    .enumerate()
                    .map(|(i, sp)| gbt::load_model(&self.out.join(run_dir(i, sp.seed)).join("model.json")).map(|m| m.1))
                    .collect::<Result<_>>()?
            }
            Stage::Eval => s.report = Some(eval::load_report(&self.out.join("report.json"))?),
            Stage::Explain => {}
        }
        Ok(())
    }
}

/// Runs the stages up to `opts.until`. The explain stage runs only when
/// `explain.users` is not `none`.
pub fn run_pipeline(cfg: &PipelineConfig, opts: RunOptions) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let providers = Providers::from_config(cfg)?;
    run_pipeline_with(cfg, opts, &providers)
}

/// [`run_pipeline`] with caller-built providers.
pub fn run_pipeline_with(cfg: &PipelineConfig, opts: RunOptions, providers: &Providers) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data_digest = in_stage(Stage::Ingest, file_digest(&cfg.data_path))?;
    let config_digest = cfg.digest();

    let previous = if opts.resume {
        match load_manifest(out) {
            Ok(m) if m.config_digest == config_digest && m.data_digest == data_digest => Some(m),
            Ok(_) => {
                log::info!("config or data changed since the last run; recomputing every stage");
                None
            }
            Err(_) => None,
        }
    } else {
        None
    };

    let mut runner = Runner {
        cfg,
        out,
        providers,
        data_digest: data_digest.clone(),
        state: State::default(),
    };
    let mut manifest = Manifest {
        config_digest,
        data_digest,
        stages: Vec::new(),
    };
    let mut outcome = PipelineOutcome::default();
    let calls_before = providers.chat.upstream_calls();
    let mut reusing = previous.is_some();

    for stage in Stage::ALL.into_iter().filter(|s| *s <= opts.until) {
        if stage == Stage::Explain && cfg.explain == ExplainScope::None {
            continue;
        }
        if reusing {
            if let Some(rec) = previous.as_ref().and_then(|m| m.stage(stage)).filter(|r| artifacts_intact(out, r)) {
                let rec = rec.clone();
                in_stage(stage, runner.load_stage(stage))?;
                log::info!("{stage}: reusing artifacts");
                manifest.stages.push(rec);
                outcome.reused.push(stage);
                continue;
            }
            reusing = false;
        }
        log::info!("{stage}: running");
        let (files, counts) = in_stage(stage, runner.run_stage(stage))?;
        let mut artifacts = BTreeMap::new();
        for rel in files {
            let sha = in_stage(stage, file_digest(&out.join(&rel)))?;
            artifacts.insert(rel.to_string_lossy().replace('\\', "/"), sha);
        }
        manifest.stages.push(StageRecord {
            stage: stage.name().to_string(),
            artifacts,
            counts,
        });
        in_stage(stage, write_json(&out.join(MANIFEST_FILE), &manifest))?;
        outcome.executed.push(stage);
    }
    if outcome.executed.is_empty() {
        write_json(&out.join(MANIFEST_FILE), &manifest)?;
    }

    outcome.report = runner.state.report.take();
    outcome.chat_calls = providers.chat.upstream_calls() - calls_before;
    outcome.manifest = Some(manifest);
    Ok(outcome)
}

/// Scores a saved model on one part (`train`, `validation` or `test`) of the
/// run-0 split in `out_dir`.
pub fn evaluate_saved(cfg: &PipelineConfig, model_path: &Path, part: &str) -> Result<MetricsReport> {
    let out = &cfg.out_dir;
    let features: Vec<UserFeatures> = read_jsonl(&out.join("features.jsonl"))?;
    let splits: Vec<Split> = read_json(&out.join("split.json"))?;
    let split = splits.first().ok_or_else(|| Error::Invalid("split.json holds no split".into()))?;
    let (model, cal) = gbt::load_model(model_path)?;
    let (metrics, _) = evaluate_part(
        &features,
        split,
        part,
        cfg.feature_set,
        &model,
        &cal,
        cfg.threshold,
        cfg.execution,
    )?;
    Ok(metrics)
}

/// Explains one user from a finished run's artifacts and adds the report to
/// `{out_dir}/explanations`.
pub fn explain_saved(cfg: &PipelineConfig, user_id: &str, providers: &Providers) -> Result<ExplanationReport> {
    let out = &cfg.out_dir;
    let record = dataset::load_dataset(&out.join("truncated.jsonl"), Schema::V1)?
        .records
        .into_iter()
        .find(|r| r.user_id == user_id)
        .ok_or_else(|| Error::Invalid(format!("unknown user {user_id}")))?;
    let annotations: Vec<AnnotationResult> = read_jsonl(&out.join("annotations.jsonl"))?;
    let vectors: HashMap<String, crate::symptom::SymptomVector> =
        annotations.into_iter().map(|a| (a.post_id, a.vector)).collect();
    let moods: Vec<MoodSummary> = read_jsonl(&out.join("mood_courses.jsonl"))?;
    let mood = moods
        .into_iter()
        .find(|m| m.user_id == user_id)
        .ok_or_else(|| Error::Invalid(format!("user {user_id} has no mood course")))?;
    let features: Vec<UserFeatures> = read_jsonl(&out.join("features.jsonl"))?;
    let f = features
        .iter()
        .find(|f| f.user_id == user_id)
        .ok_or_else(|| Error::Invalid(format!("user {user_id} has no features")))?;
    let (model, cal) = gbt::load_model(&out.join("model.json"))?;
    let c = explain::classify(&model, &cal, &cfg.feature_set.row(f), cfg.threshold)?;
    let report = explain::explain_user(&record, &vectors, &mood.summary, c, providers.chat.as_ref());
    explain::write_explanations(&out.join("explanations"), std::slice::from_ref(&report))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    fn small_cohort(dir: &Path) -> PipelineConfig {
        let data = dir.join("cohort.jsonl");
        let sc = SynthConfig {
            n_users: 120,
            prevalence: 0.25,
            posts_per_user: 12,
            ..SynthConfig::default()
        };
        synth::generate_to_file(&sc, &data).unwrap();
        PipelineConfig {
            data_path: data,
            out_dir: dir.join("out"),
            explain: ExplainScope::Test,
            gbt: gbt::GbtParams {
                n_trees: 30,
                min_leaf: 5,
                ..Default::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn full_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cohort(dir.path());
        let outcome = run_pipeline(&cfg, RunOptions::default()).unwrap();
        assert_eq!(outcome.executed, Stage::ALL.to_vec());
        let m = load_manifest(&cfg.out_dir).unwrap();
        assert_eq!(m.stages.len(), 12);
        for rec in &m.stages {
            assert!(artifacts_intact(&cfg.out_dir, rec), "{}", rec.stage);
        }
        let report = outcome.report.unwrap();
        assert_eq!(report.config_digest, cfg.digest());
        assert!(report.mean.auprc > 0.0);
        let features: Vec<UserFeatures> = read_jsonl(&cfg.out_dir.join("features.jsonl")).unwrap();
        assert_eq!(features.len(), 120);
        assert_eq!(features[0].fused.len(), cfg.encoder_dim + 9);
    }

    #[test]
    fn resume_reuses_everything_and_recomputes_after_a_change() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cohort(dir.path());
        cfg.explain = ExplainScope::None;
        let first = run_pipeline(&cfg, RunOptions::default()).unwrap();
        assert!(first.chat_calls > 0);

        let again = run_pipeline(&cfg, RunOptions { resume: true, ..Default::default() }).unwrap();
        assert!(again.executed.is_empty());
        assert_eq!(again.reused.len(), 11);
        assert_eq!(again.chat_calls, 0);
        assert_eq!(again.report, first.report);

        // a damaged artifact forces that stage and all later ones to rerun
        fs::write(cfg.out_dir.join("mood_courses.jsonl"), "").unwrap();
        let fixed = run_pipeline(&cfg, RunOptions { resume: true, ..Default::default() }).unwrap();
        assert_eq!(fixed.executed.first(), Some(&Stage::Mood));
        assert_eq!(fixed.chat_calls, 0, "mood prompts come from the cache");
        assert_eq!(fixed.report, first.report);
    }

    #[test]
    fn until_stops_early() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cohort(dir.path());
        let o = run_pipeline(&cfg, RunOptions { resume: true, until: Stage::Filter }).unwrap();
        assert_eq!(o.executed.last(), Some(&Stage::Filter));
        assert!(!cfg.out_dir.join("annotations.jsonl").exists());
        let sel: Selection = read_json(&cfg.out_dir.join("selection.json")).unwrap();
        let posts: Vec<PostScore> = read_jsonl(&cfg.out_dir.join("post_scores.jsonl")).unwrap();
        assert_eq!(sel.annotate.len(), criteria::top_count(20.0, posts.len()));
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cohort(dir.path());
        fs::write(&cfg.data_path, "{\"user_id\": 1}\n").unwrap();
        let e = run_pipeline(&cfg, RunOptions::default()).unwrap_err();
        assert!(e.to_string().starts_with("stage ingest failed"), "{e}");
        assert!(e.is_validation());
        cfg.data_path = dir.path().join("missing.jsonl");
        assert!(run_pipeline(&cfg, RunOptions::default()).is_err());
    }

    #[test]
    fn duplicate_post_ids_are_rejected() {
        let t = chrono::Utc::now();
        let recs = vec![
            UserRecord::new("a", vec![Post::new("p", "x", t)], None),
            UserRecord::new("b", vec![Post::new("p", "y", t)], None),
        ];
        assert!(check_unique_posts(&recs).is_err());
    }

    #[test]
    fn multi_seed_runs_use_consecutive_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cohort(dir.path());
        cfg.runs = 3;
        cfg.explain = ExplainScope::None;
        let o = run_pipeline(&cfg, RunOptions::default()).unwrap();
        let report = o.report.unwrap();
        assert_eq!(report.runs.len(), 3);
        for s in [8, 9] {
            assert!(cfg.out_dir.join(format!("runs/seed-{s}/model.json")).exists());
        }
        let mean = report.runs.iter().map(|r| r.auprc).sum::<f64>() / 3.0;
        assert!((report.mean.auprc - mean).abs() < 1e-12);
        assert!(report.to_table().contains("mean of 3"));
    }
}
