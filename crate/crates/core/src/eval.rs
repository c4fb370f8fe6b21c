//! Cohort splitting, classification metrics and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::UserRecord;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const SMALL_CLASS_WARNING: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn part(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Per-class `(train, validation)` sizes; the remainder goes to test.
pub fn split_sizes(n: usize) -> (usize, usize) {
    (n * 7 / 10, n / 10)
}

/// Stratified 7:1:2 split. Each class is sorted by user id and shuffled with
/// a ChaCha8 stream seeded by `seed`, so the result does not depend on the
/// input order.
pub fn split_cohort(records: &[UserRecord], seed: u64) -> Result<Split> {
    let labeled = records
        .iter()
        .map(|r| {
            r.label
                .map(|l| (r.user_id.as_str(), l.is_positive()))
                .ok_or_else(|| Error::Invalid(format!("user {} has no label and cannot be split", r.user_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    split_labeled(&labeled, seed)
}

/// [`split_cohort`] over `(user_id, positive)` pairs.
pub fn split_labeled(users: &[(&str, bool)], seed: u64) -> Result<Split> {
    let mut classes: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for (id, positive) in users {
        classes[usize::from(*positive)].push(id.to_string());
    }
    if classes.iter().any(Vec::is_empty) {
        return Err(Error::Invalid("cohort must contain both classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (label, ids) in classes.iter_mut().enumerate() {
        if ids.len() < SMALL_CLASS_WARNING {
            warn!("class {label} has only {} users; split proportions will be coarse", ids.len());
        }
        ids.sort();
        ids.shuffle(&mut rng);
        let (tr, va) = split_sizes(ids.len());
        split.train.extend_from_slice(&ids[..tr]);
        split.validation.extend_from_slice(&ids[tr..tr + va]);
        split.test.extend_from_slice(&ids[tr + va..]);
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn from_predictions(labels: &[bool], predictions: &[bool]) -> Result<Counts> {
        if labels.len() != predictions.len() {
            return Err(Error::Invalid(format!("{} labels for {} predictions", labels.len(), predictions.len())));
        }
        let mut c = Counts::default();
        for (&y, &p) in labels.iter().zip(predictions) {
            match (y, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when nothing was predicted positive; precision is then reported as 0.
    pub no_predicted_positives: bool,
}

pub fn prf_from_counts(c: &Counts) -> Prf {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        precision,
        recall,
        f1,
        no_predicted_positives: c.tp + c.fp == 0,
    }
}

pub fn precision_recall_f1(labels: &[bool], predictions: &[bool]) -> Result<Prf> {
    Ok(prf_from_counts(&Counts::from_predictions(labels, predictions)?))
}

/// Score-sorted blocks of tied items as `(positives, negatives)`, highest
/// score first.
fn tie_blocks(labels: &[bool], scores: &[f64]) -> Result<Vec<(u64, u64)>> {
    if labels.len() != scores.len() {
        return Err(Error::Invalid(format!("{} labels for {} scores", labels.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("score is NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<(u64, u64)> = Vec::new();
    let mut prev = None;
    for i in order {
        if prev != Some(scores[i]) {
            blocks.push((0, 0));
            prev = Some(scores[i]);
        }
        let b = blocks.last_mut().expect("pushed above");
        if labels[i] {
            b.0 += 1;
        } else {
            b.1 += 1;
        }
    }
    Ok(blocks)
}

/// Mann-Whitney AUROC: `P(s+ > s-) + 0.5 P(s+ = s-)`.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let blocks = tie_blocks(labels, scores)?;
    let pos: u64 = blocks.iter().map(|b| b.0).sum();
    let neg: u64 = blocks.iter().map(|b| b.1).sum();
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("AUROC needs both classes".into()));
    }
    // twice the Mann-Whitney count, kept integral
    let mut twice = 0u128;
    let mut neg_below = neg;
    for &(p, n) in &blocks {
        neg_below -= n;
        twice += u128::from(p) * u128::from(2 * neg_below + n);
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision: `sum_i (R_i - R_{i-1}) P_i` over descending score
/// thresholds, one threshold per block of tied scores.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let blocks = tie_blocks(labels, scores)?;
    let pos: u64 = blocks.iter().map(|b| b.0).sum();
    if pos == 0 {
        return Err(Error::Invalid("AUPRC needs at least one positive".into()));
    }
    let (mut tp, mut seen, mut ap) = (0u64, 0u64, 0.0);
    for &(p, n) in &blocks {
        tp += p;
        seen += p + n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub threshold: f64,
    pub counts: Counts,
    pub no_predicted_positives: bool,
}

/// Ranking metrics on `raw_scores`, thresholded metrics on
/// `probabilities >= threshold`.
pub fn evaluate(labels: &[bool], raw_scores: &[f64], probabilities: &[f64], threshold: f64) -> Result<MetricsReport> {
    let predictions: Vec<bool> = probabilities.iter().map(|&p| p >= threshold).collect();
    let counts = Counts::from_predictions(labels, &predictions)?;
    let prf = prf_from_counts(&counts);
    Ok(MetricsReport {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        auroc: auroc(labels, raw_scores)?,
        auprc: auprc(labels, raw_scores)?,
        threshold,
        counts,
        no_predicted_positives: prf.no_predicted_positives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
}

impl From<&MetricsReport> for MetricSummary {
    fn from(m: &MetricsReport) -> Self {
        MetricSummary {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auroc: m.auroc,
            auprc: m.auprc,
        }
    }
}

/// Published DORIS figures on SWDD, kept next to our numbers for context.
pub const REFERENCE_ROW: MetricSummary = MetricSummary {
    precision: 0.7606,
    recall: 0.7902,
    f1: 0.7750,
    auroc: 0.9722,
    auprc: 0.8147,
};

/// Arithmetic mean of each metric over repeated runs.
pub fn average_metrics(runs: &[MetricsReport]) -> Result<MetricSummary> {
    if runs.is_empty() {
        return Err(Error::Invalid("no runs to average".into()));
    }
    let n = runs.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| runs.iter().map(f).sum::<f64>() / n;
    Ok(MetricSummary {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        auroc: mean(|r| r.auroc),
        auprc: mean(|r| r.auprc),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_users: usize,
    pub n_positive: usize,
    pub config_digest: String,
    pub data_digest: String,
    pub model_digest: String,
    /// One entry per seed; a single-run report has exactly one.
    pub runs: Vec<MetricsReport>,
    pub mean: MetricSummary,
    pub reference: MetricSummary,
}

impl EvalReport {
    pub fn new(
        split: &str,
        labels: &[bool],
        config_digest: &str,
        data_digest: &str,
        model_digest: &str,
        runs: Vec<MetricsReport>,
    ) -> Result<Self> {
        Ok(EvalReport {
            split: split.to_string(),
            n_users: labels.len(),
            n_positive: labels.iter().filter(|&&y| y).count(),
            config_digest: config_digest.to_string(),
            data_digest: data_digest.to_string(),
            model_digest: model_digest.to_string(),
            mean: average_metrics(&runs)?,
            runs,
            reference: REFERENCE_ROW,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split: {} ({} users, {} positive)", self.split, self.n_users, self.n_positive);
        let _ = writeln!(s, "config digest: {}", self.config_digest);
        let _ = writeln!(s, "data digest:   {}", self.data_digest);
        let _ = writeln!(s, "model digest:  {}", self.model_digest);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<22} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "row", "precision", "recall", "f1", "auroc", "auprc"
        );
        let mut row = |name: &str, m: &MetricSummary| {
            let _ = writeln!(
                s,
                "{:<22} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                name, m.precision, m.recall, m.f1, m.auroc, m.auprc
            );
        };
        if self.runs.len() > 1 {
            for (i, r) in self.runs.iter().enumerate() {
                row(&format!("run {i}"), &MetricSummary::from(r));
            }
            row(&format!("mean of {}", self.runs.len()), &self.mean);
        } else {
            row("this run", &self.mean);
        }
        row("reference (SWDD)", &self.reference);
        s
    }
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report)? + "\n";
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let txt_path = dir.join("report.txt");
    fs::write(&txt_path, report.to_table()).map_err(|e| Error::io(&txt_path, e))
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}


#[cfg(test)]
mod tests {
    use super::oracles::*;
    use super::*;
    use crate::dataset::{Label, Post};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;
    use rand::Rng;

    fn cohort(n_pos: usize, n_neg: usize) -> Vec<UserRecord> {
        let t = Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap();
        (0..n_pos + n_neg)
            .map(|i| {
                UserRecord::new(
                    format!("u{i:05}"),
                    vec![Post::new(format!("p{i}"), "hello", t)],
                    Some(Label::from_bool(i < n_pos)),
                )
            })
            .collect()
    }

    #[test]
    fn split_proportions() {
        let recs = cohort(1000, 19_000);
        let s = split_cohort(&recs, 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (14_000, 2_000, 4_000));
        let is_pos = |id: &String| id[1..].parse::<usize>().unwrap() < 1000;
        assert_eq!(s.train.iter().filter(|i| is_pos(i)).count(), 700);
        assert_eq!(s.validation.iter().filter(|i| is_pos(i)).count(), 100);
        assert_eq!(s.test.iter().filter(|i| is_pos(i)).count(), 200);
        let mut all: Vec<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 20_000);
    }

    #[test]
    fn split_is_seeded_and_order_free() {
        let recs = cohort(30, 300);
        let a = split_cohort(&recs, 9).unwrap();
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(a, split_cohort(&rev, 9).unwrap());
        assert_ne!(a.train, split_cohort(&recs, 10).unwrap().train);
        assert!(split_cohort(&cohort(0, 5), 1).is_err());
        // tiny classes still split, with a warning
        let s = split_cohort(&cohort(3, 30), 1).unwrap();
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 33);
    }

    #[test]
    fn prf_examples() {
        let y = [true, false, true, false];
        let p = precision_recall_f1(&y, &y).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = precision_recall_f1(&y, &[false; 4]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        assert!(p.no_predicted_positives);
        let p = precision_recall_f1(&[true, false, true], &[true, true, false]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        assert!(precision_recall_f1(&y, &[true]).is_err());
    }

    #[test]
    fn auc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&y, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(auroc(&y, &[0.5; 4]).unwrap(), 0.5);
        assert!(auroc(&[true, true], &[0.1, 0.2]).is_err());
        let mut y = vec![false; 10];
        y[0] = true;
        let s: Vec<f64> = (0..10).map(|i| -f64::from(i)).collect();
        assert_eq!(auprc(&y, &s).unwrap(), 1.0);
        let s: Vec<f64> = (0..10).map(f64::from).collect();
        assert!((auprc(&y, &s).unwrap() - 0.1).abs() < 1e-15);
        assert!(auprc(&[false, false], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn auc_match_oracles_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(2..=100);
            let mut y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            y[0] = true;
            y[1] = false;
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..15))).collect();
            assert!((auroc(&y, &s).unwrap() - auroc_pairs(&y, &s)).abs() < 1e-12);
            assert!((auprc(&y, &s).unwrap() - auprc_thresholds(&y, &s)).abs() < 1e-12);
        }
    }

    #[test]
    fn report_round_trip_and_table() {
        let y = [true, false, true, false, false];
        let s = [0.9, 0.1, 0.4, 0.5, 0.2];
        let m = evaluate(&y, &s, &s, 0.5).unwrap();
        assert_eq!(m.counts, Counts { tp: 1, fp: 1, tn: 2, fn_: 1 });
        let r = EvalReport::new("test", &y, "c", "d", "m", vec![m.clone(), m]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&r, dir.path()).unwrap();
        assert_eq!(load_report(&dir.path().join("report.json")).unwrap(), r);
        let table = fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(table.contains("0.8147") && table.contains("mean of 2") && table.contains("auprc"));
        let first = fs::read(dir.path().join("report.json")).unwrap();
        emit_report(&r, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join("report.json")).unwrap());
    }

    #[test]
    fn constant_scorer_gives_prevalence() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut y: Vec<bool> = (0..2000).map(|_| rng.gen_bool(0.05)).collect();
            y[0] = true;
            let pi = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
            assert!((auprc(&y, &vec![0.3; y.len()]).unwrap() - pi).abs() < 0.02);
        }
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            pairs in prop::collection::vec((any::<bool>(), -50i32..50), 2..80),
        ) {
            let mut y: Vec<bool> = pairs.iter().map(|p| p.0).collect();
            y[0] = true;
            y[1] = false;
            let s: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
            let t: Vec<f64> = s.iter().map(|v| (v / 7.0).exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auroc(&y, &s).unwrap(), auroc(&y, &t).unwrap());
            prop_assert_eq!(auprc(&y, &s).unwrap(), auprc(&y, &t).unwrap());
            let a = auprc(&y, &s).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
