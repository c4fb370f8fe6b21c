use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monotone step function from raw score to probability.
///
/// `values[i]` applies on `[thresholds[i], thresholds[i + 1])`; scores below
/// the first threshold take the first value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicCalibrator {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl IsotonicCalibrator {
    pub fn probability(&self, score: f64) -> f64 {
        let i = self.thresholds.partition_point(|&t| t <= score);
        self.values[i.saturating_sub(1)].clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.len() != self.values.len() {
            return Err(Error::Model("calibrator needs matching, non-empty thresholds and values".into()));
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) || self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Model("calibrator thresholds must be finite and strictly ascending".into()));
        }
        if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) || self.values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Model("calibrator values must be non-decreasing within [0, 1]".into()));
        }
        Ok(())
    }
}

struct Block {
    start: f64,
    positives: u64,
    count: u64,
}

/// Pool-adjacent-violators over score-sorted labels, with tied scores pooled
/// into one block up front. Block means are compared by cross-multiplying
/// integer counts, so merging decisions are exact.
pub fn fit_isotonic(scores: &[f64], labels: &[bool]) -> Result<IsotonicCalibrator> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.len() < 2 {
        return Err(Error::Invalid("isotonic fit needs at least 2 points".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("isotonic fit got a non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut stack: Vec<Block> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let start = scores[order[i]];
        let mut block = Block {
            start,
            positives: 0,
            count: 0,
        };
        while i < order.len() && scores[order[i]] == start {
            block.positives += u64::from(labels[order[i]]);
            block.count += 1;
            i += 1;
        }
        while let Some(prev) = stack.last() {
            // prev mean >= block mean; equal means are pooled too so the step
            // function has no redundant knots
            if u128::from(prev.positives) * u128::from(block.count) >= u128::from(block.positives) * u128::from(prev.count) {
                let prev = stack.pop().expect("non-empty");
                block = Block {
                    start: prev.start,
                    positives: prev.positives + block.positives,
                    count: prev.count + block.count,
                };
            } else {
                break;
            }
        }
        stack.push(block);
    }

    Ok(IsotonicCalibrator {
        thresholds: stack.iter().map(|b| b.start).collect(),
        values: stack.iter().map(|b| b.positives as f64 / b.count as f64).collect(),
    })
}

/// Step-function lookup, clipped to `[0, 1]`.
pub fn calibrated_probability(cal: &IsotonicCalibrator, score: f64) -> f64 {
    cal.probability(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fitted(scores: &[f64], labels: &[bool]) -> Vec<f64> {
        let cal = fit_isotonic(scores, labels).unwrap();
        scores.iter().map(|&s| cal.probability(s)).collect()
    }

    #[test]
    fn small_examples() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(fitted(&s, &[false, false, true, true]), [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(fitted(&s, &[false, true, false, true]), [0.0, 0.5, 0.5, 1.0]);
        let cal = fit_isotonic(&s, &[true; 4]).unwrap();
        assert_eq!(cal.values, [1.0]);
        assert_eq!(cal.probability(-1e9), 1.0);
        assert!(fit_isotonic(&[1.0], &[true]).is_err());
        assert!(fit_isotonic(&[1.0, f64::NAN], &[true, false]).is_err());
    }

    #[test]
    fn lookup_boundaries() {
        let cal = fit_isotonic(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true]).unwrap();
        assert_eq!(cal.thresholds, [1.0, 3.0]);
        assert_eq!(cal.probability(0.0), 0.0);
        assert_eq!(cal.probability(2.999), 0.0);
        assert_eq!(cal.probability(3.0), 1.0);
        assert_eq!(cal.probability(100.0), 1.0);
        cal.validate().unwrap();
    }

    #[test]
    fn ties_are_pooled_first() {
        // both points at 1.0 share one value even though their labels differ
        let out = fitted(&[0.0, 1.0, 1.0, 2.0], &[false, true, false, true]);
        assert_eq!(out, [0.0, 0.5, 0.5, 1.0]);
    }

    /// Minimizes squared error over every contiguous partition of the
    /// tie-pooled groups whose block means are non-decreasing.
    fn oracle(scores: &[f64], labels: &[bool]) -> Vec<f64> {
        let mut pts: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut groups: Vec<(f64, u64, u64)> = Vec::new();
        for (s, y) in pts {
            match groups.last_mut() {
                Some(g) if g.0 == s => {
                    g.1 += u64::from(y);
                    g.2 += 1;
                }
                _ => groups.push((s, u64::from(y), 1)),
            }
        }
        let g = groups.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0u32..(1 << (g - 1)) {
            let mut means = Vec::new();
            let mut per_group = Vec::new();
            let mut sse = 0.0;
            let (mut p, mut c, mut members) = (0u64, 0u64, 0usize);
            for (k, grp) in groups.iter().enumerate() {
                p += grp.1;
                c += grp.2;
                members += 1;
                if k == g - 1 || mask & (1 << k) != 0 {
                    let m = p as f64 / c as f64;
                    means.push(m);
                    sse += (p * (c - p)) as f64 / c as f64;
                    per_group.extend(std::iter::repeat_n(m, members));
                    p = 0;
                    c = 0;
                    members = 0;
                }
            }
            if means.windows(2).any(|w| w[0] > w[1]) {
                continue;
            }
            if best.as_ref().is_none_or(|b| sse < b.0 - 1e-12) {
                best = Some((sse, per_group));
            }
        }
        let per_group = best.expect("the single-block partition is always monotone").1;
        scores
            .iter()
            .map(|s| per_group[groups.iter().position(|g| g.0 == *s).unwrap()])
            .collect()
    }

    #[test]
    fn matches_exhaustive_oracle() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..=12);
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8)) / 4.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            assert_eq!(fitted(&scores, &labels), oracle(&scores, &labels), "seed {seed}");
        }
    }

    #[test]
    fn monotone_and_mean_preserving() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = 500;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<bool> = scores.iter().map(|s| rng.gen_bool(1.0 / (1.0 + (-s).exp()))).collect();
            let cal = fit_isotonic(&scores, &labels).unwrap();
            cal.validate().unwrap();
            let mean_label = labels.iter().filter(|&&y| y).count() as f64 / n as f64;
            let mean_cal = scores.iter().map(|&s| calibrated_probability(&cal, s)).sum::<f64>() / n as f64;
            assert!((mean_label - mean_cal).abs() < 1e-9);
            let mut prev = 0.0;
            for k in 0..=4000 {
                let v = cal.probability(-4.0 + f64::from(k) * 0.002);
                assert!((0.0..=1.0).contains(&v) && v >= prev);
                prev = v;
            }
        }
    }
}
