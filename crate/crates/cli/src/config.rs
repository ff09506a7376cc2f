//! Run configuration: every tunable under a dotted key.
//!
//! The config is a tree of serde sections. It is read and written as flat
//! `key = value` lines (`#` starts a comment); values are JSON scalars or
//! arrays, and strings may be written unquoted. A file whose first
//! non-blank character is `{` is read as a JSON object of overrides instead.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sgdrive::dataset::BalanceSpec;
use sgdrive::evaluation::{EvalConfig, RolloutEnv, TRAIN_CONDITION_SEEDS};
use sgdrive::expert::ExpertConfig;
use sgdrive::model::{Architecture, ModelDims};
use sgdrive::sim::actors::TrafficConfig;
use sgdrive::sim::sensor::{ChannelMode, SensorConfig};
use sgdrive::sim::town::TownConfig;
use sgdrive::sim::VehicleParams;
use sgdrive::training::TrainConfig;

use crate::error::{CliError, Result};

/// File name of the resolved config written next to every command's outputs.
pub const RESOLVED_CONFIG: &str = "config.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Town used for recording demonstrations.
    pub town_seed: u64,
    /// Held-out town used for evaluation.
    pub eval_town_seed: u64,
    pub dt: f64,
    pub town: TownConfig,
    pub vehicle: VehicleParams,
    pub sensor: SensorConfig,
    pub traffic: TrafficConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub episodes: usize,
    /// Ticks recorded per episode.
    pub episode_length: usize,
    /// Frames per observation stack.
    pub k: usize,
    /// Minimum planned route length, meters.
    pub route_length: f64,
    pub condition_seeds: Vec<u64>,
    pub stuck_timeout: usize,
    /// Record with scripted vehicles and pedestrians.
    pub actors: bool,
    /// Attempts per episode before collection gives up.
    pub max_attempts: usize,
    pub balance: BalanceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Architecture,
    pub channels: ChannelMode,
    pub dims: ModelDims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives collection, balancing, initialization and shuffling. The eval
    /// suite has its own seeds so every model meets the same paths.
    pub seed: u64,
    pub sim: SimSection,
    pub expert: ExpertConfig,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimSection {
                town_seed: 1,
                eval_town_seed: 2,
                dt: 0.2,
                town: TownConfig::default(),
                vehicle: VehicleParams::default(),
                sensor: SensorConfig::default(),
                traffic: TrafficConfig::default(),
            },
            expert: ExpertConfig::default(),
            data: DataSection {
                episodes: 50,
                episode_length: 500,
                k: 4,
                route_length: 700.0,
                condition_seeds: TRAIN_CONDITION_SEEDS.to_vec(),
                stuck_timeout: 150,
                actors: true,
                max_attempts: 5,
                balance: BalanceSpec::default(),
            },
            model: ModelSection {
                arch: Architecture::AngleInput,
                channels: ChannelMode::As,
                dims: ModelDims::default(),
            },
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies a config file on top of `self`.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies `key = value` lines, or a JSON object of overrides.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        if text.trim_start().starts_with('{') {
            let v: Value = serde_json::from_str(text)
                .map_err(|e| CliError::Config(format!("config JSON: {e}")))?;
            let mut flat = BTreeMap::new();
            flatten("", &v, &mut flat);
            for (k, v) in flat {
                self.set_value(&k, v)?;
            }
            return Ok(());
        }
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one dotted key from its text form.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let tree = self.to_tree();
        let current = lookup(&tree, key)?;
        let value = match current {
            Value::String(_) => Value::String(raw.trim_matches('"').to_string()),
            _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
        };
        self.set_value(key, value)
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        let mut tree = self.to_tree();
        lookup(&tree, key)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node.get_mut(part).expect("key checked above");
        }
        *node = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| CliError::Config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    fn to_tree(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Every key with its JSON value, in key order.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &self.to_tree(), &mut out);
        out
    }

    /// The resolved config as `key = value` lines; parsing it back with
    /// [`RunConfig::apply_text`] reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flatten() {
            match v {
                Value::String(t) => s.push_str(&format!("{k} = {t}\n")),
                other => s.push_str(&format!("{k} = {other}\n")),
            }
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.town.validate()?;
        self.expert.validate(self.sim.town.lane_width)?;
        self.data.balance.validate()?;
        self.model.dims.validate()?;
        self.train.validate()?;
        self.eval.validate(&self.data.condition_seeds)?;
        if self.data.k == 0 || self.data.condition_seeds.is_empty() || self.data.max_attempts == 0 {
            return Err(CliError::Config(
                "data.k, data.condition_seeds and data.max_attempts must be non-empty".into(),
            ));
        }
        if !(self.sim.dt > 0.0) {
            return Err(CliError::Config("sim.dt must be positive".into()));
        }
        Ok(())
    }

    /// Simulation constants shared by every rollout; actors follow `eval.actors`.
    pub fn rollout_env(&self) -> RolloutEnv {
        RolloutEnv {
            dt: self.sim.dt,
            vehicle: self.sim.vehicle,
            traffic: self.sim.traffic,
            sensor: self.sim.sensor,
        }
    }

    /// Traffic used while recording demonstrations.
    pub fn collect_traffic(&self) -> TrafficConfig {
        if self.data.actors {
            self.sim.traffic
        } else {
            TrafficConfig::none()
        }
    }

    pub fn balance_spec(&self) -> BalanceSpec {
        BalanceSpec {
            rng_seed: self.seed.wrapping_add(self.data.balance.rng_seed),
            ..self.data.balance
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.seed
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rng_seed: self.seed.wrapping_add(self.train.rng_seed),
            ..self.train
        }
    }
}

fn lookup<'a>(tree: &'a Value, key: &str) -> Result<&'a Value> {
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object()
            .and_then(|o| o.get(part))
            .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
    }
    if node.is_object() {
        return Err(CliError::Config(format!("`{key}` is a section, not a key")));
    }
    Ok(node)
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}
