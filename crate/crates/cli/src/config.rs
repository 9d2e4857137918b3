//! Run configuration: one JSON document covering data generation, network
//! sizes and training, with command-line overrides applied on top.

use std::fs;
use std::path::Path;

use geopath::blocknet::BlockNetConfig;
use geopath::policynet::PolicyNetConfig;
use geopath::synthdata::GenSpec;
use geopath::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Recognition network sizes. Input width and class count come from the
/// data section.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognitionSizes {
    pub blocks: usize,
    pub hidden: usize,
}

impl Default for RecognitionSizes {
    fn default() -> Self {
        let d = BlockNetConfig::default();
        RecognitionSizes {
            blocks: d.blocks,
            hidden: d.hidden,
        }
    }
}

/// Policy network settings. Block count and image width are shared with
/// the recognition network and the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySettings {
    pub image_hidden: usize,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        let d = PolicyNetConfig::default();
        PolicySettings {
            image_hidden: d.image_hidden,
            alpha: d.alpha,
            epsilon: d.epsilon,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into `data.seed` and `train.seed` on resolve.
    pub seed: u64,
    pub data: GenSpec,
    pub recognition: RecognitionSizes,
    pub policy: PolicySettings,
    pub train: TrainConfig,
}

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub remove_mlp: bool,
    pub remove_u: bool,
    pub alpha: Option<f64>,
    pub theta_s: Option<f64>,
    pub theta_d: Option<f64>,
    pub lambda: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> CliResult<RunConfig> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            match unknown_field(&msg) {
                Some(key) => CliError::InvalidConfigKey {
                    key,
                    path: path.to_path_buf(),
                },
                None => CliError::InvalidConfig(format!("{}: {msg}", path.display())),
            }
        })
    }

    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::from_json(&text, path)
    }

    /// Applies `o`, propagates the master seed and validates every section.
    pub fn resolve(mut self, o: &Overrides) -> CliResult<RunConfig> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.train.remove_mlp |= o.remove_mlp;
        self.train.remove_u |= o.remove_u;
        if let Some(a) = o.alpha {
            self.policy.alpha = a;
        }
        if let Some(v) = o.theta_s {
            self.train.reward.theta_s = v;
        }
        if let Some(v) = o.theta_d {
            self.train.reward.theta_d = v;
        }
        if let Some(v) = o.lambda {
            self.train.reward.lambda = v;
        }
        self.data.validate()?;
        self.train.validate()?;
        self.recognition_config().validate()?;
        self.policy_config().validate()?;
        Ok(self)
    }

    pub fn recognition_config(&self) -> BlockNetConfig {
        BlockNetConfig {
            input_dim: self.data.feature_dim,
            hidden: self.recognition.hidden,
            blocks: self.recognition.blocks,
            classes: self.data.classes,
        }
    }

    pub fn policy_config(&self) -> PolicyNetConfig {
        PolicyNetConfig {
            blocks: self.recognition.blocks,
            image_dim: self.data.feature_dim,
            image_hidden: self.policy.image_hidden,
            alpha: self.policy.alpha,
            epsilon: self.policy.epsilon,
        }
    }
}

/// Extracts the key from serde's "unknown field `key`, expected ..." message.
fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}
