//! The JSON run configuration and its merge with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use wildsplat::mask::ProviderKind;
use wildsplat::synth::SynthSpec;
use wildsplat::trainer::TrainConfig;

/// How the sparse point cloud for a synthetic scene is sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmSampling {
    /// Fraction of background Gaussians kept as points.
    pub fraction: f64,
    /// Standard deviation of the positional noise, in world units.
    pub noise: f64,
}

impl Default for SfmSampling {
    fn default() -> Self {
        SfmSampling { fraction: 0.5, noise: 0.02 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Directory written by `synth`, or any directory with the same layout.
    pub scene: Option<PathBuf>,
    /// Used when no scene directory is given.
    pub synth: SynthSpec,
    pub sfm: SfmSampling,
    pub out: Option<PathBuf>,
    pub bridge_url: Option<String>,
    pub dump: bool,
    pub train: TrainConfig,
}

impl CliConfig {
    /// Reads `path`, or returns the defaults when there is none.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config file {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate().context("invalid synth section")?;
        self.train.validate().context("invalid train section")?;
        if !(0.0..=1.0).contains(&self.sfm.fraction) || self.sfm.fraction == 0.0 {
            bail!("sfm.fraction must lie in (0, 1]");
        }
        if !(self.sfm.noise >= 0.0) {
            bail!("sfm.noise must be non-negative");
        }
        if self.train.provider == ProviderKind::Remote && self.bridge_url.is_none() {
            bail!("the remote mask provider needs --bridge-url");
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("no output directory (pass --out or set \"out\" in the config)")
    }
}
