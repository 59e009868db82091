use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::encoder::ModelConfig;
use crate::harness::{Experiment, RetrievalParams, SyntheticTaskConfig, TrainConfig};
use crate::injection::InjectionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Root under which run directories are created.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out: PathBuf::from("runs") }
    }
}

/// Everything a command needs, loaded from one TOML file and then
/// overridden from the command line. The top-level `seed` is the only
/// source of randomness.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub injection: InjectionConfig,
    pub train: TrainConfig,
    pub task: SyntheticTaskConfig,
    pub retrieval: RetrievalParams,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(one_line(&e.to_string())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Dotted names of every settable field, e.g. `train.lr`.
    pub fn valid_keys() -> Vec<String> {
        let tree = toml::Table::try_from(RunConfig::default()).expect("run config serializes");
        let mut keys = Vec::new();
        collect_keys(&tree, "", &mut keys);
        keys
    }

    /// Applies `key=value` overrides. Values are read as TOML literals and
    /// fall back to plain strings, so `paths.out=runs/a` needs no quotes.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let valid = Self::valid_keys();
        let mut tree = toml::Table::try_from(&*self).expect("run config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
            let key = key.trim();
            if !valid.iter().any(|k| k == key) {
                return Err(CliError::Config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    valid.join(", ")
                )));
            }
            let value = parse_value(raw.trim());
            set_path(&mut tree, key, value);
        }
        *self = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(one_line(&e.to_string())))?;
        Ok(())
    }

    /// Copies the run seed into every component and checks all sections.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.task.seed = self.seed;
        self.experiment().validate()?;
        self.task.validate()?;
        let RetrievalParams { k1, b } = self.retrieval;
        if !(k1.is_finite() && k1 >= 0.0 && (0.0..=1.0).contains(&b)) {
            return Err(CliError::Config(
                "retrieval.k1 must be finite and nonnegative and retrieval.b must lie in [0, 1]".into(),
            ));
        }
        Ok(self)
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            model: self.model.clone(),
            injection: self.injection.clone(),
            train: self.train.clone(),
            retrieval: self.retrieval.clone(),
        }
    }

    /// Directory name that tells runs with different settings apart.
    pub fn run_name(&self) -> String {
        let inj = &self.injection;
        let layers = if inj.layers.is_empty() {
            "none".to_string()
        } else {
            inj.layers.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
        };
        format!(
            "{}_l{}_n{}_m{}_s{}",
            inj.mode, layers, inj.top_n, inj.sparse_m, self.seed
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.out.join(self.run_name())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn collect_keys(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => collect_keys(t, &key, out),
            _ => out.push(key),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let child = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(t) = child {
                set_path(t, rest, value);
            }
        }
        None => {
            table.insert(key.to_string(), value);
        }
    }
}
