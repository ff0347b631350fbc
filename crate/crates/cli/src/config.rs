//! Experiment configuration files.
//!
//! Sections are overlaid on library defaults so a config only has to name
//! what it changes. Unknown or mistyped keys are collected and reported
//! together.

use std::path::{Path, PathBuf};

use mfdiff_core::sampler::SamplerConfig;
use mfdiff_core::score_net::{FidelityMode, ScoreModelConfig};
use mfdiff_core::sde::SdeConfig;
use mfdiff_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Discrete,
    Continuous,
}

impl ModeName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeName::Discrete => "discrete",
            ModeName::Continuous => "continuous",
        }
    }

    pub fn of(mode: FidelityMode) -> Self {
        match mode {
            FidelityMode::Discrete { .. } => ModeName::Discrete,
            FidelityMode::Continuous => ModeName::Continuous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub pde: String,
    pub fidelities: Vec<usize>,
    pub counts: Vec<usize>,
    /// High-fidelity test examples.
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    #[serde(default)]
    pub test_seed: Option<u64>,
}

fn default_test_count() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset_dir: PathBuf,
    pub fidelity_mode: ModeName,
    /// Overrides applied to the default architecture for the dataset's grid.
    pub model: Map<String, Value>,
    pub sde: SdeConfig,
    pub train: TrainConfig,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Fidelity indices to train on; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_levels: Option<Vec<usize>>,
    pub sampler: SamplerConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dir: Option<PathBuf>,
    pub runs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method_tag: Option<String>,
}

const KEYS: &[&str] = &[
    "dataset_dir",
    "fidelity_mode",
    "model",
    "sde",
    "train",
    "seed",
    "out_dir",
    "train_levels",
    "sampler",
    "data",
    "test_dir",
    "runs",
    "method_tag",
];

/// Model keys fixed by the dataset and `fidelity_mode`.
const DERIVED_MODEL_KEYS: &[&str] = &["input_resolution", "param_dim", "fidelity_mode"];

fn overlay<T: Serialize + DeserializeOwned>(
    base: &T,
    user: Option<&Value>,
    section: &str,
    problems: &mut Vec<String>,
) -> Option<T> {
    let mut merged = serde_json::to_value(base).expect("defaults serialize");
    if let Some(user) = user {
        let Some(obj) = user.as_object() else {
            problems.push(format!("{section}: expected an object"));
            return None;
        };
        let target = merged.as_object_mut().expect("struct serializes to object");
        let mut ok = true;
        for (k, v) in obj {
            if target.contains_key(k) {
                target.insert(k.clone(), v.clone());
            } else {
                problems.push(format!("{section}.{k}: unknown key"));
                ok = false;
            }
        }
        if !ok {
            return None;
        }
    }
    match serde_json::from_value(merged) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("{section}: {e}"));
            None
        }
    }
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, problems: &mut Vec<String>) -> Option<T> {
    let v = obj.get(key)?;
    match serde_json::from_value(v.clone()) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("{key}: {e}"));
            None
        }
    }
}

impl ExperimentConfig {
    pub fn parse(value: &Value) -> Result<Self, Vec<String>> {
        let mut problems = Vec::new();
        let Some(obj) = value.as_object() else {
            return Err(vec!["<root>: expected a JSON object".into()]);
        };
        for k in obj.keys() {
            if !KEYS.contains(&k.as_str()) {
                problems.push(format!("{k}: unknown key"));
            }
        }
        for k in ["dataset_dir", "fidelity_mode"] {
            if !obj.contains_key(k) {
                problems.push(format!("{k}: missing"));
            }
        }
        let dataset_dir: Option<PathBuf> = field(obj, "dataset_dir", &mut problems);
        let fidelity_mode: Option<ModeName> = field(obj, "fidelity_mode", &mut problems);
        let seed: u64 = field(obj, "seed", &mut problems).unwrap_or(0);
        let model = match obj.get("model") {
            None => Some(Map::new()),
            Some(Value::Object(m)) => {
                for k in m.keys() {
                    if DERIVED_MODEL_KEYS.contains(&k.as_str()) {
                        problems.push(format!("model.{k}: set from the dataset, not the config"));
                    }
                }
                let probe = ScoreModelConfig::new(16, 1, FidelityMode::Continuous);
                overlay(&probe, Some(&Value::Object(m.clone())), "model", &mut problems).map(|_| m.clone())
            }
            Some(_) => {
                problems.push("model: expected an object".into());
                None
            }
        };
        let sde = overlay(&SdeConfig::default(), obj.get("sde"), "sde", &mut problems);
        let train_base = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let train = overlay(&train_base, obj.get("train"), "train", &mut problems);
        let sampler = overlay(&SamplerConfig::default(), obj.get("sampler"), "sampler", &mut problems);
        let out_dir = field(obj, "out_dir", &mut problems);
        let train_levels = field(obj, "train_levels", &mut problems);
        let data = field(obj, "data", &mut problems);
        let test_dir = field(obj, "test_dir", &mut problems);
        let runs = field(obj, "runs", &mut problems).unwrap_or(1);
        let method_tag = field(obj, "method_tag", &mut problems);
        if runs == 0 {
            problems.push("runs: must be >= 1".into());
        }
        if !problems.is_empty() {
            return Err(problems);
        }
        Ok(Self {
            dataset_dir: dataset_dir.unwrap(),
            fidelity_mode: fidelity_mode.unwrap(),
            model: model.unwrap(),
            sde: sde.unwrap(),
            train: train.unwrap(),
            seed,
            out_dir,
            train_levels,
            sampler: sampler.unwrap(),
            data,
            test_dir,
            runs,
            method_tag,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        Self::parse(&value).map_err(|p| {
            CliError::Usage(format!("invalid config {}; offending keys:\n  {}", path.display(), p.join("\n  ")))
        })
    }

    /// Default architecture for the dataset's grid with the config's overrides.
    pub fn model_config(&self, resolution: usize, param_dim: usize, mode: FidelityMode, sliced: bool) -> Result<ScoreModelConfig, CliError> {
        let base = ScoreModelConfig::new(resolution, param_dim, mode).with_slice_conditioning(sliced);
        let mut problems = Vec::new();
        overlay(&base, Some(&Value::Object(self.model.clone())), "model", &mut problems)
            .ok_or_else(|| CliError::Usage(problems.join("; ")))
    }

    /// Directory for outputs, `runs/<config stem>` when not configured.
    pub fn out_dir_for(&self, config_path: &Path) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| {
            let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
            PathBuf::from("runs").join(stem)
        })
    }
}
