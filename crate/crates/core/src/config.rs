//! Run configuration: one JSON document describing data, model, loss,
//! optimizer, schedule, seeds and output location.
//!
//! ```json
//! {
//!   "data": {"synthetic": {"seed": 0, "videos": {"train": 64}}},
//!   "model": {"experts": [{"name": "scene", "input_dim": 64}], "common_dim": 64,
//!             "text": {"word_dim": 32}},
//!   "training": {"steps": 500, "batch_size": 32},
//!   "seeds": [0, 1, 2],
//!   "output": "runs/demo"
//! }
//! ```
//!
//! Every section is optional except `data` and `model`. Relative paths
//! resolve against the config file's directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::config_hash;
use crate::dataio::manifest::Split;
use crate::dataio::synth::SyntheticSpec;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_KS;
use crate::model::ModelConfig;
use crate::optim::OptimizerSettings;
use crate::training::TrainSettings;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL manifest on disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Generated in memory instead of read from disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "default_train_split")]
    pub train_split: Split,
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
}

fn default_train_split() -> Split {
    Split::Train
}

fn default_eval_split() -> Split {
    Split::Test
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { ks: DEFAULT_KS.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainSettings,
    pub optim: OptimizerSettings,
    pub eval: EvalSettings,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

const SECTIONS: [&str; 8] = ["version", "data", "model", "training", "optim", "eval", "seeds", "output"];

fn section<T: DeserializeOwned>(obj: &serde_json::Map<String, Value>, key: &str, errors: &mut Vec<String>) -> Option<T> {
    let v = obj.get(key)?;
    match serde_json::from_value(v.clone()) {
        Ok(x) => Some(x),
        Err(e) => {
            errors.push(format!("{key}: {e}"));
            None
        }
    }
}

impl RunConfig {
    /// Parses and validates; the error lists every problem found.
    pub fn from_json(text: &str) -> std::result::Result<RunConfig, Vec<String>> {
        let value: Value = serde_json::from_str(text).map_err(|e| vec![format!("invalid JSON: {e}")])?;
        let Value::Object(obj) = value else {
            return Err(vec!["config must be a JSON object".to_string()]);
        };
        let mut errors = Vec::new();
        for k in obj.keys() {
            if !SECTIONS.contains(&k.as_str()) {
                errors.push(format!("unknown field `{k}`; expected one of {}", SECTIONS.join(", ")));
            }
        }
        for required in ["data", "model"] {
            if !obj.contains_key(required) {
                errors.push(format!("{required}: missing"));
            }
        }
        let version = section::<u32>(&obj, "version", &mut errors).unwrap_or(CONFIG_VERSION);
        let data = section::<DataConfig>(&obj, "data", &mut errors);
        let model = section::<ModelConfig>(&obj, "model", &mut errors);
        let training = section(&obj, "training", &mut errors).unwrap_or_default();
        let optim = section(&obj, "optim", &mut errors).unwrap_or_default();
        let eval = section(&obj, "eval", &mut errors).unwrap_or_default();
        let seeds = section(&obj, "seeds", &mut errors).unwrap_or_else(|| vec![0]);
        let output = section(&obj, "output", &mut errors).unwrap_or_else(|| PathBuf::from("run"));
        let (Some(data), Some(model)) = (data, model) else {
            return Err(errors);
        };
        let cfg = RunConfig {
            version,
            data,
            model,
            training,
            optim,
            eval,
            seeds,
            output,
        };
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    /// Reads `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_json(&text).map_err(|v| Error::Config(v.join("\n")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(base.join(m));
            }
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    /// Every semantic problem, across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.version != CONFIG_VERSION {
            v.push(format!("version: {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        match (&self.data.manifest, &self.data.synthetic) {
            (None, None) => v.push("data: one of `manifest` or `synthetic` is required".to_string()),
            (Some(_), Some(_)) => v.push("data: `manifest` and `synthetic` are mutually exclusive".to_string()),
            _ => {}
        }
        if self.data.train_split == self.data.eval_split && self.data.eval_split != Split::Train {
            v.push("data: train_split and eval_split must differ unless evaluating on train".to_string());
        }
        if let Some(spec) = &self.data.synthetic {
            v.extend(spec.violations().into_iter().map(|s| format!("data.synthetic.{s}")));
            for e in &self.model.experts {
                match spec.experts.iter().find(|x| x.name == e.name) {
                    None => v.push(format!("model.experts: `{}` is not generated by data.synthetic", e.name)),
                    Some(x) if x.dim != e.input_dim => v.push(format!(
                        "model.experts: `{}` has input_dim {} but data.synthetic generates {}",
                        e.name, e.input_dim, x.dim
                    )),
                    Some(_) => {}
                }
            }
            if spec.word_dim != self.model.text.word_dim {
                v.push(format!(
                    "model.text.word_dim: {} but data.synthetic.word_dim is {}",
                    self.model.text.word_dim, spec.word_dim
                ));
            }
        }
        v.extend(self.model.violations());
        v.extend(self.training.violations());
        v.extend(self.optim.violations());
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            v.push("eval.ks: need at least one K, all ≥ 1".to_string());
        }
        if self.seeds.is_empty() {
            v.push("seeds: at least one seed is required".to_string());
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            v.push("seeds: duplicates are not allowed".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("\n")))
        }
    }

    /// The config with every default filled in, as pretty JSON.
    pub fn resolved_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Hash of everything that shapes a training trajectory for `seed`
    /// (not the step budget, checkpoint cadence or output location).
    pub fn training_hash(&self, seed: u64) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            data: &'a DataConfig,
            model: &'a ModelConfig,
            batch_size: usize,
            margin: f64,
            optim: &'a OptimizerSettings,
            seed: u64,
        }
        config_hash(&Key {
            data: &self.data,
            model: &self.model,
            batch_size: self.training.batch_size,
            margin: self.training.margin,
            optim: &self.optim,
            seed,
        })
    }

    /// Output directory of one seed's run.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output.join(format!("seed_{seed}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "data": {"synthetic": {"experts": [{"name": "a", "dim": 4}], "word_dim": 3}},
        "model": {"experts": [{"name": "a", "input_dim": 4}], "common_dim": 8, "text": {"word_dim": 3}}
    }"#;

    #[test]
    fn defaults_are_filled_and_echoed() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.training, TrainSettings::default());
        let echoed = RunConfig::from_json(&cfg.resolved_json().unwrap()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn errors_are_listed_exhaustively() {
        let bad = r#"{
            "data": {"synthetic": {"experts": [{"name": "a", "dim": 4, "availability": 1.5}], "word_dim": 3}},
            "model": {"experts": [{"name": "a", "input_dim": 5}], "common_dim": 0, "text": {"word_dim": 3}},
            "optim": {"lookahead_k": 0},
            "seeds": [],
            "colour": "blue"
        }"#;
        let errs = RunConfig::from_json(bad).unwrap_err();
        for needle in ["colour", "availability", "input_dim 5", "common_dim", "lookahead_k", "seeds"] {
            assert!(errs.iter().any(|e| e.contains(needle)), "{needle} missing from {errs:#?}");
        }
    }

    #[test]
    fn schema_errors_in_several_sections_all_reported() {
        let bad = r#"{"data": {"manifest": 3}, "model": {"experts": "x"}, "training": {"stepz": 1}}"#;
        let errs = RunConfig::from_json(bad).unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:#?}");
    }

    #[test]
    fn hash_ignores_step_budget() {
        let a = RunConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.training.steps += 10;
        assert_eq!(a.training_hash(0).unwrap(), b.training_hash(0).unwrap());
        assert_ne!(a.training_hash(0).unwrap(), a.training_hash(1).unwrap());
        b.optim.learning_rate *= 2.0;
        assert_ne!(a.training_hash(0).unwrap(), b.training_hash(0).unwrap());
    }
}
