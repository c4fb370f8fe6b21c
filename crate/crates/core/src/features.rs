//! Post-history representation and feature fusion.
//!
//! The classifier input is `concat(F_mc + F_ph, F_dc)`: the two embedding-space
//! features are summed, the 9-dim criteria feature is appended. Nothing is
//! rescaled.

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, UserRecord};
use crate::embedding::{mean_vector, Embedding};
use crate::error::{Error, Result};
use crate::providers::{self, Encoder};

/// Mean of all post embeddings of one user, not re-normalized.
pub fn post_history_from_embeddings(embeddings: &[&Embedding]) -> Result<Vec<f64>> {
    mean_vector(embeddings.iter().map(|e| e.values())).ok_or_else(|| Error::Invalid("user has no posts".into()))
}

pub fn post_history_representation(user: &UserRecord, encoder: &dyn Encoder) -> Result<Vec<f64>> {
    let embs = user
        .posts
        .iter()
        .map(|p| providers::encode(encoder, &p.text))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Embedding> = embs.iter().collect();
    post_history_from_embeddings(&refs)
}

/// `concat(f_mc + f_ph, f_dc)`, length `d + 9`.
pub fn fuse(f_mc: &[f64], f_ph: &[f64], f_dc: &[f64; 9]) -> Result<Vec<f64>> {
    if f_mc.len() != f_ph.len() {
        return Err(Error::DimensionMismatch {
            expected: f_ph.len(),
            actual: f_mc.len(),
        });
    }
    let mut out = Vec::with_capacity(f_ph.len() + 9);
    out.extend(f_mc.iter().zip(f_ph).map(|(a, b)| a + b));
    out.extend_from_slice(f_dc);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserFeatures {
    pub user_id: String,
    pub label: Option<Label>,
    pub f_ph: Vec<f64>,
    pub f_mc: Vec<f64>,
    pub f_dc: [f64; 9],
    pub fused: Vec<f64>,
}

impl UserFeatures {
    pub fn new(user_id: &str, label: Option<Label>, f_ph: Vec<f64>, f_mc: Vec<f64>, f_dc: [f64; 9]) -> Result<Self> {
        let fused = fuse(&f_mc, &f_ph, &f_dc)?;
        if fused.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("user {user_id}: non-finite feature")));
        }
        Ok(UserFeatures {
            user_id: user_id.to_string(),
            label,
            f_ph,
            f_mc,
            f_dc,
            fused,
        })
    }

    pub fn dim(&self) -> usize {
        self.f_ph.len()
    }
}

/// Which feature blocks feed the classifier; everything but `Full` is an
/// ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Full,
    WithoutCriteria,
    WithoutMood,
    WithoutHistory,
    HistoryOnly,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 5] = [
        FeatureSet::Full,
        FeatureSet::WithoutCriteria,
        FeatureSet::WithoutMood,
        FeatureSet::WithoutHistory,
        FeatureSet::HistoryOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Full => "full",
            FeatureSet::WithoutCriteria => "without_criteria",
            FeatureSet::WithoutMood => "without_mood",
            FeatureSet::WithoutHistory => "without_history",
            FeatureSet::HistoryOnly => "history_only",
        }
    }

    /// Classifier input row for this feature set.
    pub fn row(self, f: &UserFeatures) -> Vec<f64> {
        let zeros = vec![0.0; f.dim()];
        let (mc, ph, dc): (&[f64], &[f64], Option<&[f64; 9]>) = match self {
            FeatureSet::Full => return f.fused.clone(),
            FeatureSet::WithoutCriteria => (&f.f_mc, &f.f_ph, None),
            FeatureSet::WithoutMood => (&zeros, &f.f_ph, Some(&f.f_dc)),
            FeatureSet::WithoutHistory => (&f.f_mc, &zeros, Some(&f.f_dc)),
            FeatureSet::HistoryOnly => (&zeros, &f.f_ph, None),
        };
        let mut row: Vec<f64> = mc.iter().zip(ph).map(|(a, b)| a + b).collect();
        if let Some(dc) = dc {
            row.extend_from_slice(dc);
        }
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn post_history_examples() {
        let a = e(&[0.6, 0.8]);
        assert_eq!(post_history_from_embeddings(&[&a]).unwrap(), a.values());
        let neg = e(&[-0.6, -0.8]);
        assert_eq!(post_history_from_embeddings(&[&a, &neg]).unwrap(), [0.0, 0.0]);
        assert!(post_history_from_embeddings(&[]).is_err());
    }

    #[test]
    fn fuse_examples() {
        let out = fuse(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0], &[0.0; 9]).unwrap();
        assert_eq!(out[..3], [1.0, 2.0, 3.0]);
        assert!(out[3..].iter().all(|v| *v == 0.0));
        let ph = [0.5, -0.25];
        let dc = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        let out = fuse(&[0.0, 0.0], &ph, &dc).unwrap();
        assert_eq!(out[..2], ph);
        assert_eq!(out[2..], dc);
        assert_eq!(fuse(&[0.0; 384], &[0.0; 384], &[0.0; 9]).unwrap().len(), 393);
        assert!(fuse(&[0.0; 3], &[0.0; 4], &[0.0; 9]).is_err());
    }

    #[test]
    fn ablation_rows() {
        let f = UserFeatures::new("u", None, vec![1.0, 2.0], vec![10.0, 20.0], [0.5; 9]).unwrap();
        assert_eq!(FeatureSet::Full.row(&f), f.fused);
        assert_eq!(FeatureSet::HistoryOnly.row(&f), [1.0, 2.0]);
        assert_eq!(FeatureSet::WithoutCriteria.row(&f), [11.0, 22.0]);
        assert_eq!(FeatureSet::WithoutMood.row(&f).len(), 11);
        assert_eq!(FeatureSet::WithoutHistory.row(&f)[..2], [10.0, 20.0]);
    }

    proptest! {
        #[test]
        fn fuse_is_linear(
            a in prop::collection::vec(-1.0f64..1.0, 5),
            b in prop::collection::vec(-1.0f64..1.0, 5),
            d in prop::array::uniform9(0.0f64..1.0),
            c in -3.0f64..3.0,
        ) {
            let base = fuse(&a, &b, &d).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * c).collect();
            let sd = d.map(|x| x * c);
            let scaled = fuse(&sa, &sb, &sd).unwrap();
            for (x, y) in base.iter().zip(&scaled) {
                prop_assert!((x * c - y).abs() < 1e-12);
            }
            prop_assert!(fuse(&[0.0; 5], &[0.0; 5], &[0.0; 9]).unwrap().iter().all(|v| *v == 0.0));
        }
    }
}
