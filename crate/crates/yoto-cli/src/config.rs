//! Declarative run files. One TOML file fully specifies a reproducible run;
//! command-line flags override file values. Unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use yoto_core::corpus::PatternSpec;
use yoto_core::eval::{LambdaChoice, TaskSpec};
use yoto_core::model::ModelConfig;
use yoto_core::train::TrainHyper;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub pretrain: Option<TrainHyper>,
    #[serde(default)]
    pub finetune: Option<TrainHyper>,
    #[serde(default)]
    pub lambda: Option<LambdaConf>,
    #[serde(default)]
    pub split: Option<SplitConf>,
    #[serde(default)]
    pub tasks: Vec<TaskConf>,
    #[serde(default)]
    pub include_joint: Option<bool>,
    #[serde(default)]
    pub signature_rate: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaConf {
    pub fixed: Option<f32>,
    pub grid: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConf {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConf {
    pub name: String,
    pub families: Vec<PatternSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading run config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing run config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn lambda_choice(&self) -> Result<LambdaChoice> {
        match &self.lambda {
            None => Ok(LambdaChoice::Grid(yoto_core::eval::default_lambda_grid())),
            Some(LambdaConf {
                fixed: Some(_),
                grid: Some(_),
            }) => bail!("lambda: set either `fixed` or `grid`, not both"),
            Some(LambdaConf {
                fixed: Some(l), ..
            }) => Ok(LambdaChoice::Fixed(*l)),
            Some(LambdaConf {
                grid: Some(g), ..
            }) => Ok(LambdaChoice::Grid(g.clone())),
            Some(_) => bail!("lambda: empty table; set `fixed` or `grid`"),
        }
    }

    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        if self.tasks.is_empty() {
            bail!("run config declares no [[tasks]]");
        }
        Ok(self
            .tasks
            .iter()
            .map(|t| TaskSpec {
                name: t.name.clone(),
                families: t.families.clone(),
            })
            .collect())
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        match &self.split {
            Some(s) => (s.train, s.val, s.test),
            None => (0.7, 0.15, 0.15),
        }
    }
}
