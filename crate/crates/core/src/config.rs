//! Flat `key = value` pipeline configuration.
//!
//! Lines starting with `#` and blank lines are ignored; unknown keys are
//! rejected. The digest covers every setting that can change results and
//! leaves out file locations, so the same experiment run from two
//! directories reports the same digest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::criteria::DEFAULT_K_PERCENT;
use crate::dataset::DEFAULT_WINDOW_DAYS;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_THRESHOLD;
use crate::exec::Execution;
use crate::features::FeatureSet;
use crate::gbt::GbtParams;
use crate::mood::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_M_PERCENT};
use crate::providers::{DEFAULT_CONTEXT_CHARS, DEFAULT_MAX_CONCURRENCY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderChoice {
    Test,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChatChoice {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExplainScope {
    None,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data_path: PathBuf,
    pub out_dir: PathBuf,
    /// Empty means `{out_dir}/cache.jsonl`.
    pub cache_path: Option<PathBuf>,
    /// Empty means the built-in templates.
    pub templates_dir: Option<PathBuf>,
    pub seed: u64,
    pub window_days: i64,
    pub encoder: EncoderChoice,
    pub encoder_dim: usize,
    pub encoder_seed: u64,
    pub encoder_url: String,
    pub encoder_model: String,
    pub chat: ChatChoice,
    pub chat_url: String,
    pub chat_model: String,
    pub max_concurrency: usize,
    pub context_chars: usize,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub timeout_secs: u64,
    pub k_percent: f64,
    pub m_percent: f64,
    pub alpha: f64,
    pub beta: f64,
    pub feature_set: FeatureSet,
    pub gbt: GbtParams,
    pub threshold: f64,
    pub runs: usize,
    pub explain: ExplainScope,
    pub execution: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_path: PathBuf::from("cohort.jsonl"),
            out_dir: PathBuf::from("out"),
            cache_path: None,
            templates_dir: None,
            seed: 7,
            window_days: DEFAULT_WINDOW_DAYS,
            encoder: EncoderChoice::Test,
            encoder_dim: 128,
            encoder_seed: 0,
            encoder_url: String::new(),
            encoder_model: String::new(),
            chat: ChatChoice::Mock,
            chat_url: String::new(),
            chat_model: String::new(),
            max_concurrency: DEFAULT_MAX_CONCURRENCY,
            context_chars: DEFAULT_CONTEXT_CHARS,
            max_attempts: 3,
            base_delay_ms: 1000,
            timeout_secs: 60,
            k_percent: DEFAULT_K_PERCENT,
            m_percent: DEFAULT_M_PERCENT,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            feature_set: FeatureSet::Full,
            gbt: GbtParams::default(),
            threshold: DEFAULT_THRESHOLD,
            runs: 1,
            explain: ExplainScope::None,
            execution: Execution::default(),
        }
    }
}

/// Keys that name file locations; excluded from the digest.
const PATH_KEYS: [&str; 4] = ["data.path", "out.dir", "cache.path", "templates.dir"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn feature_set_from(key: &str, value: &str) -> Result<FeatureSet> {
    FeatureSet::ALL
        .into_iter()
        .find(|f| f.name() == value)
        .ok_or_else(|| Error::Config(format!("{key}: unknown feature set {value:?}")))
}

impl PipelineConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data.path" => self.data_path = PathBuf::from(v),
            "out.dir" => self.out_dir = PathBuf::from(v),
            "cache.path" => self.cache_path = opt_path(v),
            "templates.dir" => self.templates_dir = opt_path(v),
            "seed" => self.seed = parse(key, v)?,
            "window.days" => self.window_days = parse(key, v)?,
            "provider.encoder" => {
                self.encoder = match v {
                    "test" => EncoderChoice::Test,
                    "remote" => EncoderChoice::Remote,
                    _ => return Err(Error::Config(format!("{key}: expected test or remote, got {v:?}"))),
                }
            }
            "provider.encoder.dim" => self.encoder_dim = parse(key, v)?,
            "provider.encoder.seed" => self.encoder_seed = parse(key, v)?,
            "provider.encoder.url" => self.encoder_url = v.to_string(),
            "provider.encoder.model" => self.encoder_model = v.to_string(),
            "provider.chat" => {
                self.chat = match v {
                    "mock" => ChatChoice::Mock,
                    "remote" => ChatChoice::Remote,
                    _ => return Err(Error::Config(format!("{key}: expected mock or remote, got {v:?}"))),
                }
            }
            "provider.chat.url" => self.chat_url = v.to_string(),
            "provider.chat.model" => self.chat_model = v.to_string(),
            "provider.max_concurrency" => self.max_concurrency = parse(key, v)?,
            "provider.context_chars" => self.context_chars = parse(key, v)?,
            "provider.max_attempts" => self.max_attempts = parse(key, v)?,
            "provider.base_delay_ms" => self.base_delay_ms = parse(key, v)?,
            "provider.timeout_secs" => self.timeout_secs = parse(key, v)?,
            "criteria.k" => self.k_percent = parse(key, v)?,
            "mood.m" => self.m_percent = parse(key, v)?,
            "mood.alpha" => self.alpha = parse(key, v)?,
            "mood.beta" => self.beta = parse(key, v)?,
            "features.set" => self.feature_set = feature_set_from(key, v)?,
            "gbt.n_trees" => self.gbt.n_trees = parse(key, v)?,
            "gbt.learning_rate" => self.gbt.learning_rate = parse(key, v)?,
            "gbt.max_depth" => self.gbt.max_depth = parse(key, v)?,
            "gbt.min_leaf" => self.gbt.min_leaf = parse(key, v)?,
            "gbt.subsample" => self.gbt.subsample = parse(key, v)?,
            "gbt.pos_weight" => self.gbt.pos_weight = parse(key, v)?,
            "eval.threshold" => self.threshold = parse(key, v)?,
            "eval.runs" => self.runs = parse(key, v)?,
            "explain.users" => {
                self.explain = match v {
                    "none" => ExplainScope::None,
                    "test" => ExplainScope::Test,
                    "all" => ExplainScope::All,
                    _ => return Err(Error::Config(format!("{key}: expected none, test or all, got {v:?}"))),
                }
            }
            "execution" => {
                self.execution = match v {
                    "parallel" => Execution::Parallel,
                    "sequential" => Execution::Sequential,
                    _ => return Err(Error::Config(format!("{key}: expected parallel or sequential, got {v:?}"))),
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` (or `key = value`).
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        if !pct(self.k_percent) || !pct(self.m_percent) {
            return Err(Error::Config("criteria.k and mood.m must lie in [0, 100]".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("mood.alpha and mood.beta must be non-negative".into()));
        }
        if self.encoder_dim < 8 {
            return Err(Error::Config("provider.encoder.dim must be at least 8".into()));
        }
        if self.max_concurrency == 0 || self.max_attempts == 0 || self.context_chars == 0 {
            return Err(Error::Config("provider limits must be positive".into()));
        }
        if self.runs == 0 || self.window_days <= 0 {
            return Err(Error::Config("eval.runs and window.days must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("eval.threshold must lie in [0, 1]".into()));
        }
        if self.encoder == EncoderChoice::Remote && (self.encoder_url.is_empty() || self.encoder_model.is_empty()) {
            return Err(Error::Config("remote encoder needs provider.encoder.url and provider.encoder.model".into()));
        }
        if self.chat == ChatChoice::Remote && (self.chat_url.is_empty() || self.chat_model.is_empty()) {
            return Err(Error::Config("remote chat needs provider.chat.url and provider.chat.model".into()));
        }
        Ok(())
    }

    pub fn cache_file(&self) -> PathBuf {
        self.cache_path.clone().unwrap_or_else(|| self.out_dir.join("cache.jsonl"))
    }

    /// Every setting as `(key, value)`, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let encoder = match self.encoder {
            EncoderChoice::Test => "test",
            EncoderChoice::Remote => "remote",
        };
        let chat = match self.chat {
            ChatChoice::Mock => "mock",
            ChatChoice::Remote => "remote",
        };
        let explain = match self.explain {
            ExplainScope::None => "none",
            ExplainScope::Test => "test",
            ExplainScope::All => "all",
        };
        let execution = match self.execution {
            Execution::Parallel => "parallel",
            Execution::Sequential => "sequential",
        };
        vec![
            ("data.path", self.data_path.display().to_string()),
            ("out.dir", self.out_dir.display().to_string()),
            ("cache.path", path_text(&self.cache_path)),
            ("templates.dir", path_text(&self.templates_dir)),
            ("seed", self.seed.to_string()),
            ("window.days", self.window_days.to_string()),
            ("provider.encoder", encoder.into()),
            ("provider.encoder.dim", self.encoder_dim.to_string()),
            ("provider.encoder.seed", self.encoder_seed.to_string()),
            ("provider.encoder.url", self.encoder_url.clone()),
            ("provider.encoder.model", self.encoder_model.clone()),
            ("provider.chat", chat.into()),
            ("provider.chat.url", self.chat_url.clone()),
            ("provider.chat.model", self.chat_model.clone()),
            ("provider.max_concurrency", self.max_concurrency.to_string()),
            ("provider.context_chars", self.context_chars.to_string()),
            ("provider.max_attempts", self.max_attempts.to_string()),
            ("provider.base_delay_ms", self.base_delay_ms.to_string()),
            ("provider.timeout_secs", self.timeout_secs.to_string()),
            ("criteria.k", self.k_percent.to_string()),
            ("mood.m", self.m_percent.to_string()),
            ("mood.alpha", self.alpha.to_string()),
            ("mood.beta", self.beta.to_string()),
            ("features.set", self.feature_set.name().into()),
            ("gbt.n_trees", self.gbt.n_trees.to_string()),
            ("gbt.learning_rate", self.gbt.learning_rate.to_string()),
            ("gbt.max_depth", self.gbt.max_depth.to_string()),
            ("gbt.min_leaf", self.gbt.min_leaf.to_string()),
            ("gbt.subsample", self.gbt.subsample.to_string()),
            ("gbt.pos_weight", self.gbt.pos_weight.to_string()),
            ("eval.threshold", self.threshold.to_string()),
            ("eval.runs", self.runs.to_string()),
            ("explain.users", explain.into()),
            ("execution", execution.into()),
        ]
    }

    /// Canonical config text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over the result-affecting settings. File locations and the
    /// execution mode (which never changes results) are left out.
    pub fn digest(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            if PATH_KEYS.contains(&k) || k == "execution" || k == "explain.users" {
                continue;
            }
            let _ = writeln!(s, "{k} = {v}");
        }
        sha256_hex(s.as_bytes())
    }

    /// Copy with `GbtParams::execution` and `subsample_seed` filled in for
    /// one run seed.
    pub fn gbt_params(&self, run_seed: u64) -> GbtParams {
        GbtParams {
            subsample_seed: run_seed,
            execution: self.execution,
            ..self.gbt.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = PipelineConfig::parse("# experiment\n\ncriteria.k = 10\nmood.alpha=0.5\n  gbt.n_trees = 50 \n").unwrap();
        assert_eq!(cfg.k_percent, 10.0);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.gbt.n_trees, 50);
        assert_eq!(cfg.beta, 0.6);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let e = PipelineConfig::parse("criteria.kk = 10").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("criteria.kk"), "{e}");
        assert!(PipelineConfig::parse("criteria.k = lots").is_err());
        assert!(PipelineConfig::parse("criteria.k = 120").is_err());
        assert!(PipelineConfig::parse("provider.chat = remote").is_err());
        assert!(PipelineConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = PipelineConfig::default();
        cfg.set("features.set", "history_only").unwrap();
        cfg.set("explain.users", "test").unwrap();
        cfg.set("cache.path", "/tmp/c.jsonl").unwrap();
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn digest_ignores_locations_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.set("out.dir", "/elsewhere").unwrap();
        b.set("execution", "sequential").unwrap();
        assert_eq!(a.digest(), b.digest());
        b.set("mood.m", "30").unwrap();
        assert_ne!(a.digest(), b.digest());
    }
}
