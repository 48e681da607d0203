use std::path::{Path, PathBuf};

use hiergrpo::eval::EvalConfig;
use hiergrpo::grpo::GrpoConfig;
use hiergrpo::policy::{PolicyConfig, SamplingConfig};
use hiergrpo::reward::{RewardConfig, RewardVariant};
use hiergrpo::synthworld::{default_quotas, Quotas, WorldConfig};
use hiergrpo::taxonomy::AttributeMode;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsConfig {
    /// Total pair count when `quotas` is absent.
    pub total: usize,
    pub quotas: Option<Quotas>,
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self {
            total: 2900,
            quotas: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub run_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub pairs: PairsConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// Flags that replace named config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub reward_mode: Option<AttributeMode>,
    pub variant: Option<RewardVariant>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(l) = overrides.lambda {
            cfg.reward.lambda = l;
        }
        if let Some(m) = overrides.reward_mode {
            cfg.reward.mode = m;
        }
        if let Some(v) = overrides.variant {
            cfg.reward.variant = v;
        }
        cfg.world.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.world.validate().map_err(|e| bad(&e))?;
        self.reward.validate().map_err(|e| bad(&e))?;
        self.grpo.validate().map_err(|e| bad(&e))?;
        self.sampling.validate().map_err(|e| bad(&e))?;
        self.eval.validate().map_err(|e| bad(&e))?;
        let p = &self.policy;
        if p.hidden == 0
            || !(p.init_scale > 0.0 && p.init_scale.is_finite())
            || !(p.mask_penalty >= 0.0 && p.mask_penalty.is_finite())
        {
            return Err(CliError::Config(
                "policy needs hidden >= 1, init_scale > 0 and a finite mask_penalty >= 0".into(),
            ));
        }
        if self.pairs.quotas.is_none() && self.pairs.total == 0 {
            return Err(CliError::Config("pairs.total must be at least 1".into()));
        }
        Ok(())
    }

    pub fn quotas(&self) -> Quotas {
        self.pairs
            .quotas
            .clone()
            .unwrap_or_else(|| default_quotas(self.world.mode, self.pairs.total))
    }

    /// Digest of the settings a checkpoint's architecture and output format
    /// depend on.
    pub fn model_hash(&self) -> String {
        let v = json!({
            "mode": self.world.mode,
            "feature_dim": self.world.feature_dim,
            "reward_mode": self.reward.mode,
            "variant": self.reward.variant,
            "policy": self.policy,
        });
        hiergrpo::sha256_hex(v.to_string().as_bytes())
    }

    pub fn to_pretty_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        // The world seed is carried at the top level.
        v["world"].as_object_mut().map(|w| w.remove("seed"));
        serde_json::to_string_pretty(&v).expect("config serializes") + "\n"
    }
}
