use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::dci::DciConfig;
use crate::error::{config_err, Error, Result};
use crate::eval::{AttackConfig, InputOptConfig};
use crate::synthesis::SynthesisConfig;
use crate::zoo::{
    micro_gen, micro_vgg, ClassifierTrainConfig, GeneratorTrainConfig, MicroGenConfig, MicroVggConfig, ShapesConfig,
};

/// Settings of the command-line runs that belong to no single stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Deepest block the inverse is trained for.
    pub depth: usize,
    /// Training images held out for inversion monitoring.
    pub heldout: usize,
    /// Real validation images used by evaluations.
    pub n_images: usize,
    pub depths: Vec<usize>,
    pub interpolation_steps: usize,
    pub gan_samples: usize,
    pub grid_cols: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            depth: 4,
            heldout: 32,
            n_images: 64,
            depths: vec![1, 2, 3, 4],
            interpolation_steps: 8,
            gan_samples: 64,
            grid_cols: 8,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heldout == 0 || self.n_images == 0 || self.gan_samples == 0 || self.grid_cols == 0 {
            return Err(config_err!("run depth, heldout, n_images, gan_samples and grid_cols must be ≥ 1"));
        }
        if self.depths.is_empty() || self.depths[0] == 0 || self.depths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("sweep depths must be ≥ 1 and strictly increasing, got {:?}", self.depths));
        }
        if self.interpolation_steps < 2 {
            return Err(config_err!("interpolation needs at least 2 steps"));
        }
        Ok(())
    }
}

/// Every configurable stage, one section each. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// When set, replaces the seed of every section with one derived from it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub data: ShapesConfig,
    pub target: MicroVggConfig,
    pub classifier: ClassifierTrainConfig,
    pub generator_model: MicroGenConfig,
    pub generator: GeneratorTrainConfig,
    pub synthesis: SynthesisConfig,
    pub dci: DciConfig,
    pub attack: AttackConfig,
    pub input_opt: InputOptConfig,
    pub run: RunConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        micro_vgg(&self.target)?;
        self.classifier.validate()?;
        micro_gen(&self.generator_model)?;
        self.generator.validate()?;
        self.synthesis.validate()?;
        self.dci.validate()?;
        self.attack.validate()?;
        self.input_opt.validate()?;
        self.run.validate()?;
        if self.target.size != self.data.size || self.target.in_channels != self.data.channels {
            return Err(config_err!("target input does not match the dataset image shape"));
        }
        Ok(())
    }

    /// Applies the top-level seed to every section.
    pub fn resolved(&self) -> Config {
        let mut c = self.clone();
        if let Some(s) = self.seed {
            // TOML integers are signed 64-bit.
            let derive_seed = |s, tag, i| derive_seed(s, tag, i) >> 1;
            c.data.seed = derive_seed(s, "data", 0);
            c.classifier.seed = derive_seed(s, "classifier", 0);
            c.generator.seed = derive_seed(s, "generator", 0);
            c.synthesis.seed = derive_seed(s, "synthesis", 0);
            c.dci.seed = derive_seed(s, "dci", 0);
            c.attack.seed = derive_seed(s, "attack", 0);
            c.input_opt.seed = derive_seed(s, "input-opt", 0);
        }
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }
}

pub fn parse_config_str(text: &str) -> Result<Config> {
    let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
