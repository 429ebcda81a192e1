//! Experiment configuration: one TOML file plus `dotted.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::ToyDataConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::recognizer::RecognizerTrainConfig;
use crate::training::TrainConfig;

/// Where training and evaluation images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset manifest; the procedural toy set is used when absent.
    pub manifest: Option<PathBuf>,
    pub toy: ToyDataConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, toy: ToyDataConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Checkpoint loaded at start-up.
    pub model: Option<PathBuf>,
    /// Largest sweep grid, in cells.
    pub max_cells: usize,
    /// Sessions untouched for this long are dropped.
    pub session_idle_secs: u64,
    pub max_sessions: usize,
    /// Concurrent inference requests; further requests get 429.
    pub workers: usize,
    /// Crop uploads with the sprite face detector; uploads without a face get 422.
    pub align: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            model: None,
            max_cells: 64,
            session_idle_secs: 900,
            max_sessions: 256,
            workers: 4,
            align: false,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_cells == 0 || self.workers == 0 || self.max_sessions == 0 {
            return Err(Error::Config("service max_cells, workers and max_sessions must be positive".into()));
        }
        Ok(())
    }

    /// `CFANET_PORT` and `CFANET_MODEL` take precedence over the file.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(p) = std::env::var("CFANET_PORT") {
            self.port = p.parse().map_err(|_| Error::Config(format!("CFANET_PORT={p} is not a port")))?;
        }
        if let Ok(m) = std::env::var("CFANET_MODEL") {
            self.model = Some(PathBuf::from(m));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub recognizer: RecognizerTrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.recognizer.validate()?;
        self.train.validate()?;
        self.service.validate()?;
        Ok(())
    }

    /// Applies overrides such as `train.lr=0.001` or `eval.curve_seeds=[1,2]`.
    /// Keys must already exist; values are parsed as TOML, falling back to a
    /// bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut v, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pushes the experiment seed into every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }
}

fn parse_value(raw: &str) -> Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => serde_json::to_value(w.v).unwrap_or_else(|_| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}: {} is not a table", parts[..i].join("."))))?;
        // optional fields serialize as null but still exist
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    *cur = match (&*cur, value) {
        // integers given to float fields stay floats
        (Value::Number(n), Value::Number(m)) if n.is_f64() && !m.is_f64() => {
            serde_json::json!(m.as_f64().unwrap_or_default())
        }
        (_, v) => v,
    };
    Ok(())
}
