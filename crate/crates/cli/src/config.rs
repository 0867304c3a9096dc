//! Experiment configuration read from TOML, with every field optional.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use kmn_core::pipeline::{GenerateConfig, LoopConfig, Observer, ViewConfig};
use kmn_core::regressor::TrainConfig;
use kmn_core::{ParamSchema, Task, TaskDef};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub task: Option<String>,
    pub seed: Option<u64>,
    /// Schema file replacing the task's built-in schema.
    pub schema: Option<String>,
    pub generate: GenerateSection,
    pub view: ViewSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub n_data: usize,
    pub split_fraction: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            n_data: 4000,
            split_fraction: 0.8,
        }
    }
}

/// Unset fields fall back to the task's default view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSection {
    pub net_width: Option<usize>,
    pub net_height: Option<usize>,
    pub cloud_factor: Option<usize>,
    pub hfov_deg: Option<f64>,
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub distance: Option<f64>,
    pub elevation_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Defaults to the task's channel counts.
    pub channels: Option<[usize; 5]>,
    pub epochs: usize,
    pub retrain_epochs: usize,
    pub rounds: usize,
    pub n_aug: usize,
    pub stop_epsilon: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            channels: None,
            epochs: 150,
            retrain_epochs: 40,
            rounds: 3,
            n_aug: 800,
            stop_epsilon: 0.0,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            validation_fraction: t.validation_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_pred: usize,
    pub max_iter: usize,
    /// Best and worst test records written to the gallery.
    pub gallery: usize,
    pub icp_max_iter: usize,
    pub icp_tolerance: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let icp = kmn_core::icp::IcpConfig::default();
        EvalSection {
            n_pred: 5,
            max_iter: 5,
            gallery: 5,
            icp_max_iter: icp.max_iter,
            icp_tolerance: icp.tol,
        }
    }
}

impl Config {
    /// Reads a config file. A run manifest is accepted too: its `config`
    /// table is the resolved config of that run.
    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let table = match value.get("config") {
            Some(toml::Value::Table(t)) if value.contains_key("command") => t.clone(),
            _ => value,
        };
        table
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn task(&self) -> Result<TaskDef> {
        let Some(name) = &self.task else {
            bail!("no task given; pass --task or set `task` in the config");
        };
        let task: Task = name.parse()?;
        let def = task.definition();
        match &self.schema {
            Some(path) => Ok(def.with_schema(ParamSchema::load(path)?)?),
            None => Ok(def),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn view(&self, task: &TaskDef) -> ViewConfig {
        let d = ViewConfig::for_task(task);
        let v = &self.view;
        ViewConfig {
            net_width: v.net_width.unwrap_or(d.net_width),
            net_height: v.net_height.unwrap_or(d.net_height),
            cloud_factor: v.cloud_factor.unwrap_or(d.cloud_factor),
            hfov_deg: v.hfov_deg.unwrap_or(d.hfov_deg),
            near: v.near.unwrap_or(d.near),
            far: v.far.unwrap_or(d.far),
            distance: v.distance.unwrap_or(d.distance),
            elevation_deg: v.elevation_deg.unwrap_or(d.elevation_deg),
        }
    }

    pub fn observer(&self) -> Result<Observer> {
        let task = self.task()?;
        let view = self.view(&task);
        let camera = view.camera(&task)?;
        Ok(Observer::new(task, camera, view.cloud_factor)?)
    }

    pub fn generate(&self) -> GenerateConfig {
        GenerateConfig {
            split_fraction: self.generate.split_fraction,
            ..GenerateConfig::new(self.generate.n_data, self.seed())
        }
    }

    pub fn train_loop(&self, task: Task) -> LoopConfig {
        let t = &self.train;
        LoopConfig {
            channels: t.channels.unwrap_or(task.default_channels()),
            n_aug: t.n_aug,
            outer_rounds_max: t.rounds,
            stop_epsilon: t.stop_epsilon,
            train: TrainConfig {
                learning_rate: t.learning_rate,
                batch_size: t.batch_size,
                epochs: t.epochs,
                seed: self.seed(),
                validation_fraction: t.validation_fraction,
                ..TrainConfig::default()
            },
            retrain_epochs: t.retrain_epochs,
        }
    }

    pub fn to_toml(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: Config = toml::from_str("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.train.epochs, 150);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[train]\nepoch = 3\n").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c: Config = toml::from_str("task = \"door\"\nseed = 4\n[view]\nnear = 0.5\n[train]\nchannels = [1, 2, 3, 4, 5]\n").unwrap();
        let back: Config = c.to_toml().try_into().unwrap();
        assert_eq!(back, c);
        let obs = c.observer().unwrap();
        assert_eq!(obs.camera.near, 0.5);
        assert_eq!(c.train_loop(Task::Door).channels, [1, 2, 3, 4, 5]);
    }
}
