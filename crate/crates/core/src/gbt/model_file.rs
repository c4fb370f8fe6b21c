use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoostedModel, IsotonicCalibrator, RegressionTree};
use crate::error::{Error, Result};

pub const MODEL_VERSION: &str = "1";

/// On-disk form of a trained model and its calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: String,
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub n_trees: usize,
    pub trees: Vec<RegressionTree>,
    pub calibrator: IsotonicCalibrator,
}

impl ModelFile {
    fn into_parts(self) -> Result<(BoostedModel, IsotonicCalibrator)> {
        if self.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "unsupported model version {:?}, expected {MODEL_VERSION:?}",
                self.version
            )));
        }
        if self.trees.len() != self.n_trees {
            return Err(Error::Model(format!("model declares {} trees but holds {}", self.n_trees, self.trees.len())));
        }
        if !self.base_score.is_finite() || !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Model("model has an invalid base score or learning rate".into()));
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.validate().map_err(|e| Error::Model(format!("tree {i}: {e}")))?;
            if t.max_feature().is_some_and(|f| f >= self.n_features) {
                return Err(Error::Model(format!("tree {i} splits on a feature beyond {}", self.n_features)));
            }
        }
        self.calibrator.validate()?;
        Ok((
            BoostedModel {
                base_score: self.base_score,
                learning_rate: self.learning_rate,
                n_features: self.n_features,
                trees: self.trees,
            },
            self.calibrator,
        ))
    }
}

pub fn model_to_json(model: &BoostedModel, cal: &IsotonicCalibrator) -> Result<String> {
    let file = ModelFile {
        version: MODEL_VERSION.to_string(),
        base_score: model.base_score,
        learning_rate: model.learning_rate,
        n_features: model.n_features,
        n_trees: model.trees.len(),
        trees: model.trees.clone(),
        calibrator: cal.clone(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn model_from_json(json: &str) -> Result<(BoostedModel, IsotonicCalibrator)> {
    let file: ModelFile = serde_json::from_str(json).map_err(|e| Error::Model(format!("bad model file: {e}")))?;
    file.into_parts()
}

pub fn save_model(model: &BoostedModel, cal: &IsotonicCalibrator, path: &Path) -> Result<()> {
    let json = model_to_json(model, cal)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(BoostedModel, IsotonicCalibrator)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}
