use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pose2mesh::data::TemplateSpec;
use pose2mesh::nn::ModelConfig;
use pose2mesh::train::{EvalConfig, TrainConfig};
use pose2mesh::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Config(format!("unknown profile {s:?} (desk|paper)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

/// Sizes of the generated splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 64,
            test_samples: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub template: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run depends on. `seed` drives data generation, weight
/// initialization and training; it overrides `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub template: TemplateSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (model, train) = match profile {
            Profile::Desk => (ModelConfig::desk(), TrainConfig::desk()),
            Profile::Paper => (ModelConfig::paper(), TrainConfig::paper()),
        };
        Self {
            profile,
            seed: 0,
            template: TemplateSpec::tube_man(),
            data: DataConfig::default(),
            model,
            train,
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// Profile defaults overlaid with a JSON document. The profile is taken from
    /// `profile` when given, else from the document's `profile` key.
    pub fn from_json(text: &str, profile: Option<Profile>) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text)?;
        if !overlay.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let profile = match (profile, overlay.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v.clone())?,
            (None, None) => Profile::Desk,
        };
        let mut base = serde_json::to_value(Self::profile(profile))?;
        merge(&mut base, overlay);
        base["profile"] = serde_json::to_value(profile)?;
        Ok(serde_json::from_value(base)?)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text, profile).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.error_synth.validate()?;
        if self.eval.taus.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("F-score thresholds must be positive".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Recursive object merge; anything that is not an object on both sides is replaced.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
