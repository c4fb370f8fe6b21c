//! Gradient-boosted regression trees for binary classification under
//! logistic loss, with isotonic calibration of the raw scores.
//!
//! The ensemble starts from the log-odds of the training labels and adds
//! `learning_rate * tree_m(x)` per round. Each tree is grown on the negative
//! gradient `y - sigmoid(F)` by exact greedy search and its leaves take a
//! single Newton step `sum(r) / sum(p (1 - p))`.

mod isotonic;
mod model_file;
mod tree;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub use isotonic::{calibrated_probability, fit_isotonic, IsotonicCalibrator};
pub use model_file::{load_model, model_from_json, model_to_json, save_model, ModelFile, MODEL_VERSION};
pub use tree::{Node, RegressionTree};

use tree::{Targets, TreeBuilder, TreeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of rows drawn (without replacement) per tree.
    pub subsample: f64,
    pub subsample_seed: u64,
    /// Instance weight of positive rows.
    pub pos_weight: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_trees: 300,
            learning_rate: 0.1,
            max_depth: 6,
            min_leaf: 20,
            subsample: 1.0,
            subsample_seed: 0,
            pos_weight: 1.0,
            execution: Execution::default(),
        }
    }
}

impl GbtParams {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Invalid(format!("learning_rate must be in (0, 1], got {}", self.learning_rate)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Invalid(format!("subsample must be in (0, 1], got {}", self.subsample)));
        }
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return Err(Error::Invalid(format!("pos_weight must be positive, got {}", self.pos_weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub trees: Vec<RegressionTree>,
}

impl BoostedModel {
    /// `base_score + learning_rate * sum_m tree_m(x)`.
    pub fn raw_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                actual: x.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(self.base_score + self.learning_rate * sum)
    }

    pub fn raw_scores(&self, rows: &[Vec<f64>], exec: Execution) -> Result<Vec<f64>> {
        exec.try_map(rows, |r| self.raw_score(r))
    }

    /// Uncalibrated class readout: positive iff the raw score is above zero.
    pub fn predict_label(&self, x: &[f64]) -> Result<bool> {
        Ok(self.raw_score(x)? > 0.0)
    }

    /// Model truncated to its first `m` trees.
    pub fn truncated(&self, m: usize) -> BoostedModel {
        BoostedModel {
            trees: self.trees[..m.min(self.trees.len())].to_vec(),
            ..self.clone()
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-s F))` with `s = +1` for positives and `-1` for negatives.
pub fn logistic_loss(positive: bool, raw: f64) -> f64 {
    let z = if positive { -raw } else { raw };
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Weighted mean logistic loss.
pub fn mean_logistic_loss(labels: &[bool], raw: &[f64], weights: Option<&[f64]>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (&y, &f)) in labels.iter().zip(raw).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        num += w * logistic_loss(y, f);
        den += w;
    }
    num / den
}

/// Training trace: mean loss after the base score and after each tree.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Fits the boosted ensemble. Deterministic given `(rows, labels, params)`;
/// the sequential and parallel split searches produce identical models.
pub fn train(rows: &[Vec<f64>], labels: &[bool], params: &GbtParams) -> Result<(BoostedModel, TrainReport)> {
    params.validate()?;
    let n = rows.len();
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 training rows, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::Invalid(format!("{} labels for {n} rows", labels.len())));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::Invalid("training labels contain a single class".into()));
    }
    let p = rows[0].len();
    let mut columns = vec![Vec::with_capacity(n); p];
    for (i, r) in rows.iter().enumerate() {
        if r.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                actual: r.len(),
            });
        }
        if let Some(j) = r.iter().position(|v| v.is_nan()) {
            return Err(Error::Invalid(format!("NaN feature at row {i}, column {j}")));
        }
        for (c, v) in columns.iter_mut().zip(r) {
            c.push(*v);
        }
    }

    let weights: Vec<f64> = labels.iter().map(|&y| if y { params.pos_weight } else { 1.0 }).collect();
    let w_pos: f64 = weights.iter().zip(labels).filter(|(_, &y)| y).map(|(w, _)| w).sum();
    let w_neg: f64 = weights.iter().zip(labels).filter(|(_, &y)| !y).map(|(w, _)| w).sum();
    let base_score = (w_pos / w_neg).ln();

    let exec = params.execution;
    let feature_ids: Vec<usize> = (0..p).collect();
    let presorted: Vec<Vec<u32>> = exec.map(&feature_ids, |&f| {
        let col = &columns[f];
        let mut idx: Vec<u32> = (0..n as u32).collect();
        idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
        idx
    });

    let mut raw = vec![base_score; n];
    let mut residual = vec![0.0; n];
    let mut hessian = vec![0.0; n];
    let mut report = TrainReport {
        losses: vec![mean_logistic_loss(labels, &raw, Some(&weights))],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.subsample_seed);
    let bag_size = ((params.subsample * n as f64).floor() as usize).clamp(1, n);
    let mut in_bag = vec![true; n];
    let mut trees = Vec::with_capacity(params.n_trees);

    for _ in 0..params.n_trees {
        for i in 0..n {
            let prob = sigmoid(raw[i]);
            residual[i] = f64::from(u8::from(labels[i])) - prob;
            hessian[i] = prob * (1.0 - prob);
        }
        let sorted: Vec<Vec<u32>> = if bag_size < n {
            in_bag.iter_mut().for_each(|b| *b = false);
            for i in sample(&mut rng, n, bag_size).iter() {
                in_bag[i] = true;
            }
            presorted
                .iter()
                .map(|l| l.iter().copied().filter(|&r| in_bag[r as usize]).collect())
                .collect()
        } else {
            presorted.clone()
        };
        let sorted = if p == 0 { vec![(0..n as u32).filter(|&r| in_bag[r as usize]).collect()] } else { sorted };
        let tree = TreeBuilder::new(
            &columns,
            Targets {
                residual: &residual,
                hessian: &hessian,
                weight: &weights,
            },
            TreeParams {
                max_depth: params.max_depth,
                min_leaf: params.min_leaf,
            },
            exec,
        )
        .build(sorted);
        for (f, row) in raw.iter_mut().zip(rows) {
            *f += params.learning_rate * tree.predict(row);
        }
        report.losses.push(mean_logistic_loss(labels, &raw, Some(&weights)));
        trees.push(tree);
    }

    Ok((
        BoostedModel {
            base_score,
            learning_rate: params.learning_rate,
            n_features: p,
            trees,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn params(m: usize, depth: usize, lr: f64, min_leaf: usize) -> GbtParams {
        GbtParams {
            n_trees: m,
            learning_rate: lr,
            max_depth: depth,
            min_leaf,
            ..GbtParams::default()
        }
    }

    #[test]
    fn base_score_is_log_odds() {
        let rows = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let labels = [true, false, false, false];
        let (m, _) = train(&rows, &labels, &params(0, 1, 0.1, 1)).unwrap();
        assert!((m.base_score - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        assert_eq!(m.raw_score(&[42.0]).unwrap(), m.base_score);
    }

    #[test]
    fn stump_model_evaluation() {
        let m = BoostedModel {
            base_score: 0.0,
            learning_rate: 0.5,
            n_features: 1,
            trees: vec![RegressionTree::stump(0, 1.0, -1.0, 1.0)],
        };
        assert_eq!(m.raw_score(&[0.0]).unwrap(), -0.5);
        assert_eq!(m.raw_score(&[2.0]).unwrap(), 0.5);
        assert!(!m.predict_label(&[0.0]).unwrap());
        assert!(m.raw_score(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn separable_line_is_learned_by_stumps() {
        let rows: Vec<Vec<f64>> = (-10..=10).filter(|&i| i != 0).map(|i| vec![f64::from(i) / 10.0]).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r[0] > 0.0).collect();
        let (m, _) = train(&rows, &labels, &params(10, 1, 0.3, 1)).unwrap();
        let acc = rows
            .iter()
            .zip(&labels)
            .filter(|(r, &y)| m.predict_label(r).unwrap() == y)
            .count();
        assert_eq!(acc, rows.len());
    }

    #[test]
    fn rejects_bad_input() {
        let rows = vec![vec![0.0], vec![1.0]];
        assert!(train(&rows, &[true, true], &GbtParams::default()).is_err());
        assert!(train(&rows[..1], &[true], &GbtParams::default()).is_err());
        assert!(train(&[vec![f64::NAN], vec![1.0]], &[true, false], &GbtParams::default()).is_err());
        assert!(train(&[vec![0.0], vec![1.0, 2.0]], &[true, false], &GbtParams::default()).is_err());
        let bad = GbtParams { learning_rate: 0.0, ..GbtParams::default() };
        assert!(train(&rows, &[true, false], &bad).is_err());
    }

    fn noisy(n: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels = rows.iter().map(|r| r[0] + 0.5 * r[1] + rng.gen_range(-0.5..0.5) > 0.3).collect();
        (rows, labels)
    }

    #[test]
    fn loss_never_increases_at_small_learning_rate() {
        for seed in 0..4 {
            let (rows, labels) = noisy(300, 5, seed);
            let (_, report) = train(&rows, &labels, &params(60, 3, 0.1, 5)).unwrap();
            for w in report.losses.windows(2) {
                assert!(w[1] <= w[0] + 1e-15, "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn constant_features_are_never_split() {
        let (mut rows, labels) = noisy(200, 3, 7);
        rows.iter_mut().for_each(|r| r.push(5.0));
        let (m, _) = train(&rows, &labels, &params(30, 3, 0.1, 5)).unwrap();
        for t in &m.trees {
            for n in &t.nodes {
                if let Node::Split { feature, .. } = n {
                    assert_ne!(*feature, 3);
                }
            }
        }
        let mut probe = rows[0].clone();
        let before = m.raw_score(&probe).unwrap();
        probe[3] = -1e9;
        assert_eq!(m.raw_score(&probe).unwrap(), before);
    }

    #[test]
    fn parallel_and_sequential_models_are_identical() {
        let (rows, labels) = noisy(250, 8, 3);
        let mut p = params(25, 4, 0.1, 5);
        p.subsample = 0.8;
        p.subsample_seed = 11;
        p.execution = Execution::Sequential;
        let (a, _) = train(&rows, &labels, &p).unwrap();
        p.execution = Execution::Parallel;
        let (b, _) = train(&rows, &labels, &p).unwrap();
        assert_eq!(a, b);
        let cal = fit_isotonic(&a.raw_scores(&rows, Execution::Sequential).unwrap(), &labels).unwrap();
        assert_eq!(model_to_json(&a, &cal).unwrap(), model_to_json(&b, &cal).unwrap());
    }

    #[test]
    fn batch_scores_match_rows() {
        let (rows, labels) = noisy(120, 4, 5);
        let (m, _) = train(&rows, &labels, &params(20, 3, 0.1, 3)).unwrap();
        let batch = m.raw_scores(&rows, Execution::Parallel).unwrap();
        for (r, s) in rows.iter().zip(&batch) {
            assert_eq!(m.raw_score(r).unwrap().to_bits(), s.to_bits());
        }
    }

    #[test]
    fn trees_respect_depth_and_min_leaf() {
        let (rows, labels) = noisy(200, 4, 9);
        let (m, _) = train(&rows, &labels, &params(10, 2, 0.1, 15)).unwrap();
        for t in &m.trees {
            t.validate().unwrap();
            let mut counts = vec![0usize; t.nodes.len()];
            for r in &rows {
                let mut i = 0;
                while let Node::Split { feature, threshold, left, right } = &t.nodes[i] {
                    i = if r[*feature] <= *threshold { *left } else { *right };
                }
                counts[i] += 1;
            }
            for (i, n) in t.nodes.iter().enumerate() {
                if matches!(n, Node::Leaf { .. }) && t.nodes.len() > 1 {
                    assert!(counts[i] >= 15, "leaf {i} holds {}", counts[i]);
                }
            }
        }
    }

    #[test]
    fn loss_helpers() {
        assert!((logistic_loss(true, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(logistic_loss(true, 800.0) < 1e-300);
        assert!((logistic_loss(false, 800.0) - 800.0).abs() < 1e-9);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
