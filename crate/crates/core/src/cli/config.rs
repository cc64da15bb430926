use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Dataset, EvalConfig};
use crate::inference::TridentNMSConfig;
use crate::model::ModelConfig;
use crate::training::{LossWeights, Schedule};

/// Where a run reads and writes its files. Relative paths resolve against
/// the process working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    /// Training dataset JSON; images resolve relative to its directory.
    pub train_data: PathBuf,
    /// Evaluation dataset JSON.
    pub eval_data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for RunPaths {
    fn default() -> Self {
        Self {
            train_data: "data/train.json".into(),
            eval_data: "data/test.json".into(),
            checkpoints: "runs/checkpoints".into(),
            reports: "runs/reports".into(),
        }
    }
}

/// Everything a command needs, stored as one TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub nms: TridentNMSConfig,
    pub eval: EvalConfig,
    pub schedule: Schedule,
    pub paths: RunPaths,
}

/// File name of the resolved configuration written next to every output.
pub const RESOLVED_CONFIG: &str = "config.toml";

fn collect(problems: &mut Vec<String>, section: &str, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(m)) => problems.push(format!("[{section}] {m}")),
        Err(e) => problems.push(format!("[{section}] {e}")),
    }
}

impl RunConfig {
    /// Toy-sized run used by the quick-start and the tests.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Every problem in every section, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        collect(&mut problems, "model", self.model.validate());
        collect(&mut problems, "loss", self.loss.validate());
        collect(&mut problems, "nms", self.nms.validate());
        collect(&mut problems, "eval", self.eval.validate());
        collect(&mut problems, "schedule", self.schedule.validate());
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Checks that the model can consume `data`: class counts and image size.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let m = &self.model;
        let c = &data.categories;
        let mut problems = Vec::new();
        if c.objects.len() != m.num_object_classes {
            problems.push(format!(
                "dataset has {} object classes, model.num_object_classes = {}",
                c.objects.len(),
                m.num_object_classes
            ));
        }
        if c.relations.len() != m.num_relation_classes {
            problems.push(format!(
                "dataset has {} relation classes, model.num_relation_classes = {}",
                c.relations.len(),
                m.num_relation_classes
            ));
        }
        for im in &data.images {
            if (im.width, im.height) != (m.image_width, m.image_height) {
                problems.push(format!(
                    "image {} is {}x{}, model expects {}x{}",
                    im.id, im.width, im.height, m.image_width, m.image_height
                ));
                break;
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Field-by-field difference between two model configurations, empty when
/// they agree.
pub fn model_config_diff(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(expected).expect("config serialises");
    let b = serde_json::to_value(found).expect("config serialises");
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return Vec::new();
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: config {v}, checkpoint {}", b.get(k).unwrap_or(&serde_json::Value::Null)))
        .collect()
}
