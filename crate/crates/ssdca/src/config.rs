//! Resolved run configuration: profile defaults, optional config-file
//! overlay, and command-line overrides, merged into one structure whose
//! serialized copy and hash land in every output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::model::{ModelConfig, Variant};
use crate::swin::SwinConfig;
use crate::train::{EvalProtocol, TrainConfig};
use crate::Result;

/// Environment variable naming the default dataset directory.
pub const DATA_ROOT_ENV: &str = "SSDCA_DATA_ROOT";

/// Built-in configuration baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Full-size geometry: 224-px Swin-Small, the published protocol.
    Paper,
    /// Desk-scale geometry: 64-px encoder, short epochs; the benchmark and
    /// test default.
    Toy,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "toy" => Ok(Profile::Toy),
            other => Err(Error::config(format!(
                "unknown profile `{other}` (expected paper or toy)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Toy => "toy",
        }
    }
}

/// The fully resolved settings for one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Profile the settings started from, recorded for provenance.
    pub profile: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    /// Dataset directory holding `manifest.jsonl` and `images/`.
    pub data_root: Option<PathBuf>,
    /// Output directory for artifacts.
    pub out: Option<PathBuf>,
    /// Strict determinism: sequential reductions, fixed streams. This build
    /// is always deterministic; the flag is recorded so artifacts state the
    /// mode they were produced under.
    pub strict: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_profile(Profile::Toy)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let encoder = match profile {
            Profile::Paper => SwinConfig::default(),
            Profile::Toy => SwinConfig::toy(),
        };
        let train = match profile {
            Profile::Paper => TrainConfig::default(),
            // Short fixed epochs keep a full 5-fold toy run inside a desk
            // budget while still reaching high training accuracy.
            Profile::Toy => TrainConfig { steps_per_epoch: Some(50), ..TrainConfig::default() },
        };
        RunConfig {
            profile: profile.as_str().to_string(),
            model: ModelConfig::new(encoder, Variant::Ssdca),
            train,
            eval: EvalProtocol::default(),
            data_root: None,
            out: None,
            strict: true,
        }
    }

    /// Builds the effective configuration: profile defaults, overlaid with
    /// the optional JSON config file, overlaid with CLI-level overrides.
    ///
    /// The file may itself name a `profile`; an explicit `cli_profile` wins.
    pub fn resolve(
        cli_profile: Option<&str>,
        config_path: Option<&Path>,
        overrides: &Overrides,
    ) -> Result<RunConfig> {
        let file_value: Option<serde_json::Value> = match config_path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                Some(serde_json::from_str(&text).map_err(|e| {
                    Error::config(format!("{}: invalid JSON: {e}", path.display()))
                })?)
            }
            None => None,
        };
        let file_profile = file_value
            .as_ref()
            .and_then(|v| v.get("profile"))
            .and_then(|p| p.as_str())
            .map(str::to_string);
        let profile = match (cli_profile, file_profile.as_deref()) {
            (Some(p), _) => Profile::parse(p)?,
            (None, Some(p)) => Profile::parse(p)?,
            (None, None) => Profile::Toy,
        };

        let mut merged = serde_json::to_value(RunConfig::for_profile(profile))
            .map_err(|e| Error::config(format!("serializing profile defaults: {e}")))?;
        if let Some(patch) = &file_value {
            deep_merge(&mut merged, patch);
        }
        // The profile label always reflects the resolved choice.
        merged["profile"] = serde_json::Value::String(profile.as_str().to_string());
        let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| {
            Error::config(format!(
                "{}: {e}",
                config_path.map(|p| p.display().to_string()).unwrap_or_else(|| "config".into())
            ))
        })?;

        overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        Profile::parse(&self.profile)?;
        self.model.encoder.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let blob = serde_json::to_string(self).expect("RunConfig serializes");
        let mut hasher = Sha256::new();
        hasher.update(blob.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    /// Writes `config.json` and `config.hash` into `dir` (created first).
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("serializing resolved config: {e}")))?;
        std::fs::write(dir.join("config.json"), text)?;
        std::fs::write(dir.join("config.hash"), format!("{}\n", self.hash()))?;
        Ok(())
    }

    /// The dataset directory: explicit config value, else the environment
    /// default, else an error telling the user both options.
    pub fn require_data_root(&self) -> Result<PathBuf> {
        if let Some(root) = &self.data_root {
            return Ok(root.clone());
        }
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                return Ok(PathBuf::from(root));
            }
        }
        Err(Error::config(format!(
            "no dataset directory: pass --data or set {DATA_ROOT_ENV}"
        )))
    }

    /// The output directory, which every artifact-producing command needs.
    pub fn require_out(&self) -> Result<PathBuf> {
        self.out
            .clone()
            .ok_or_else(|| Error::config("no output directory: pass --out"))
    }
}

/// Command-line level settings that supersede the profile and config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub data_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub strict: Option<bool>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(variant) = self.variant {
            cfg.model.variant = variant;
        }
        if let Some(root) = &self.data_root {
            cfg.data_root = Some(root.clone());
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(strict) = self.strict {
            cfg.strict = strict;
        }
    }
}

/// Recursive JSON-object merge: `patch` keys replace or descend into `base`.
fn deep_merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => deep_merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}
