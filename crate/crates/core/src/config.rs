//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Also checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Random scale jitter, crop and flips on every training sample.
    pub augment: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            lr_floor: 1e-6,
            weight_decay: 0.05,
            steps: 500,
            batch_size: 4,
            checkpoint_interval: 0,
            augment: false,
        }
    }
}

/// Where training and evaluation images come from: a dataset directory if
/// `dir` is set, otherwise `count` synthetic scenes from `scene`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub count: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: None, count: 4, scene: SceneSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::data::load_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::save_json(path, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json { path: PathBuf::from("<config>"), source: e })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every problem with the configuration, gathered into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = match self.model.validate() {
            Err(Error::Validation(p)) => p,
            Err(e) => vec![e.to_string()],
            Ok(()) => vec![],
        };
        if let Err(e) = self.data.scene.validate() {
            match e {
                Error::Validation(p) => problems.extend(p),
                e => problems.push(e.to_string()),
            }
        }
        let scene = &self.data.scene;
        let per_image = scene.max_instances * if scene.multi_class { 2 } else { 1 };
        if self.data.dir.is_none() && per_image > self.model.num_queries {
            problems.push(format!(
                "synthetic scenes hold up to {per_image} instances but model.num_queries is {}",
                self.model.num_queries
            ));
        }
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            problems.push(format!("optim.lr must be positive, got {}", o.lr));
        }
        if !(o.lr_floor.is_finite() && o.lr_floor >= 0.0 && o.lr_floor <= o.lr) {
            problems.push(format!("optim.lr_floor must be in [0, lr], got {}", o.lr_floor));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            problems.push(format!("optim.weight_decay must be non-negative, got {}", o.weight_decay));
        }
        if o.batch_size == 0 {
            problems.push("optim.batch_size must be at least 1".into());
        }
        let w = &self.loss;
        if [w.cls, w.dice, w.bce, w.no_object].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            problems.push("loss weights must be finite and non-negative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 7, "model": {"use_se": false}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert!(!c.model.use_se);
        assert_eq!(c.model.dim, ModelConfig::default().dim);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 7}"#).is_err());
        assert!(RunConfig::from_json(r#"{"optim": {"learning_rate": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loss": {"cls": 1, "dice": 2, "bce": 5, "no_object": 0.1, "x": 0}}"#).is_err());
    }

    #[test]
    fn validation_lists_all_problems() {
        let mut c = RunConfig::default();
        c.optim.lr = -1.0;
        c.optim.batch_size = 0;
        c.loss.dice = f64::NAN;
        let Err(Error::Validation(p)) = c.validate() else { panic!() };
        assert_eq!(p.len(), 4, "{p:?}");
        assert!(p.iter().any(|m| m.contains("lr_floor")));
    }
}
