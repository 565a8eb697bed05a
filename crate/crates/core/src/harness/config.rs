use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ObjectiveWeights, RegNorm, Variant};
use crate::models::{DiscriminatorKind, DiscriminatorSpec, GeneratorKind, GeneratorSpec};
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Synthetic,
    Sprites,
}

impl std::str::FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Benchmark::Synthetic),
            "sprites" => Ok(Benchmark::Sprites),
            _ => Err(Error::invalid(format!("unknown benchmark `{s}` (synthetic|sprites)"))),
        }
    }
}

/// Every knob of a training run. Serialized verbatim into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub benchmark: Benchmark,
    pub variant: Variant,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub reg_norm: RegNorm,
    pub msgan_cap: f64,
    /// Whether the center latent also takes part in the diversity matrix.
    pub center_in_diversity: bool,
    pub samples_per_condition: usize,
    pub conditions_per_batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub power_iters: usize,
    pub steps: u64,
    pub seed: u64,
    /// Training set file (synthetic CSV) or directory (sprites). When absent
    /// the set is generated from `data_seed` and `data_size`.
    pub data_path: Option<PathBuf>,
    pub data_seed: u64,
    pub data_size: usize,
    pub log_every: u64,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl TrainConfig {
    pub fn synthetic() -> Self {
        let w = ObjectiveWeights::default();
        let adam = AdamConfig::default();
        Self {
            benchmark: Benchmark::Synthetic,
            variant: w.variant,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            alpha: w.alpha,
            reg_norm: RegNorm::default(),
            msgan_cap: 50.0,
            center_in_diversity: true,
            samples_per_condition: 10,
            conditions_per_batch: 20,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            power_iters: 1,
            steps: 20_000,
            seed: 0,
            data_path: None,
            data_seed: 0,
            data_size: crate::synthetic::DEFAULT_M,
            log_every: 50,
            generator: GeneratorSpec::mlp_default(),
            discriminator: DiscriminatorSpec::mlp_default(),
        }
    }

    pub fn sprites() -> Self {
        Self {
            benchmark: Benchmark::Sprites,
            samples_per_condition: 6,
            conditions_per_batch: 4,
            steps: 1_000,
            data_size: 600,
            generator: GeneratorSpec::unet_default(),
            discriminator: DiscriminatorSpec::fpd_default(),
            ..Self::synthetic()
        }
    }

    pub fn preset(benchmark: Benchmark) -> Self {
        match benchmark {
            Benchmark::Synthetic => Self::synthetic(),
            Benchmark::Sprites => Self::sprites(),
        }
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            alpha: self.alpha,
            variant: self.variant,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.samples_per_condition < 2 {
            return Err(Error::invalid("samples_per_condition must be >= 2"));
        }
        if self.variant == Variant::Msgan && self.samples_per_condition < 2 {
            return Err(Error::invalid("msgan needs sample pairs"));
        }
        if !self.center_in_diversity && self.samples_per_condition < 3 {
            return Err(Error::invalid("excluding the center needs samples_per_condition >= 3"));
        }
        if self.conditions_per_batch == 0 || self.steps == 0 || self.log_every == 0 || self.data_size == 0 {
            return Err(Error::invalid("conditions_per_batch, steps, log_every and data_size must be >= 1"));
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(Error::invalid("optimizer settings out of range"));
        }
        if !(self.msgan_cap > 0.0) {
            return Err(Error::invalid("msgan_cap must be > 0"));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        match self.benchmark {
            Benchmark::Synthetic => {
                let ok = self.generator.kind == GeneratorKind::Mlp
                    && self.generator.condition_shape == [2]
                    && self.generator.output_dim == 2
                    && self.discriminator.kind == DiscriminatorKind::Mlp
                    && self.discriminator.input_shape == [4];
                if !ok {
                    return Err(Error::invalid("synthetic runs need mlp models over 2D conditions and outputs"));
                }
            }
            Benchmark::Sprites => {
                let shape = [crate::sprites::CHANNELS, crate::sprites::SIZE, crate::sprites::SIZE];
                let ok = self.generator.kind == GeneratorKind::Unet
                    && self.generator.condition_shape == shape
                    && self.discriminator.kind != DiscriminatorKind::Mlp
                    && self.discriminator.input_shape == shape;
                if !ok {
                    return Err(Error::invalid("sprite runs need a unet generator and an image discriminator at 3x32x32"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
