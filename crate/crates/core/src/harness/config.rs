use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::DiscConfig;
use crate::error::{param_err, Error, Result};
use crate::fet::FetKind;
use crate::losses::LossWeights;
use crate::model::{GeneratorConfig, Preset};

/// Named generator mutations used for ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    #[default]
    Full,
    NoFem,
    NoFtm,
    NoSimilarity,
    OutputMask,
    NoFetT,
    NoFetS,
    AllFetT,
    AllFetS,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        Self::Full,
        Self::NoFem,
        Self::NoFtm,
        Self::NoSimilarity,
        Self::OutputMask,
        Self::NoFetT,
        Self::NoFetS,
        Self::AllFetT,
        Self::AllFetS,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoFem => "no_fem",
            Self::NoFtm => "no_ftm",
            Self::NoSimilarity => "no_similarity",
            Self::OutputMask => "output_mask",
            Self::NoFetT => "no_fet_t",
            Self::NoFetS => "no_fet_s",
            Self::AllFetT => "all_fet_t",
            Self::AllFetS => "all_fet_s",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.id() == id)
            .ok_or_else(|| param_err!("unknown variant {id:?}; expected one of {}", Self::ids().join(", ")))
    }

    pub fn ids() -> Vec<&'static str> {
        Self::ALL.iter().map(|v| v.id()).collect()
    }

    pub fn apply(&self, base: &GeneratorConfig) -> GeneratorConfig {
        use FetKind::{Plain, Structure, Texture};
        let mut c = base.clone();
        match self {
            Self::Full => {}
            Self::NoFem => c.switches.erase = false,
            Self::NoFtm => c.switches.transfer = false,
            Self::NoSimilarity => c.switches.similarity = false,
            Self::OutputMask => c.hard_mask_threshold = Some(0.5),
            Self::NoFetT => {
                c.placement = [Plain, Plain, Plain, Structure, Structure];
                c.aggregate = Plain;
            }
            Self::NoFetS => c.placement = [Texture, Texture, Texture, Plain, Plain],
            Self::AllFetT => c.placement = [Texture; 5],
            Self::AllFetS => {
                c.placement = [Structure; 5];
                c.aggregate = Structure;
            }
        }
        c
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub g_lr: f64,
    pub d_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            g_lr: 1e-3,
            d_lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Where training triplets come from: a dataset directory, or the synthetic
/// generator when `dir` is unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub count: usize,
    pub n_texts: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            count: 8,
            n_texts: 2,
            seed: 1000,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub image_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Seed the data order from `seed`; otherwise from the OS.
    pub deterministic: bool,
    pub variant: AblationVariant,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub data: DataConfig,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Safetensors weights for the perceptual/style extractor.
    pub extractor: Option<PathBuf>,
    /// Overrides the preset's generator layout (the variant still applies).
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            preset: Preset::Toy,
            image_size: 64,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            deterministic: true,
            variant: AblationVariant::Full,
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            data: DataConfig::default(),
            checkpoint_every: 0,
            extractor: None,
            generator: None,
            discriminator: None,
        }
    }

    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            image_size: 256,
            batch_size: 6,
            steps: 100_000,
            ..Self::toy()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self::toy(),
            Preset::Full => Self::full(),
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let base = self
            .generator
            .clone()
            .unwrap_or_else(|| GeneratorConfig::for_preset(self.preset));
        self.variant.apply(&base)
    }

    pub fn disc_config(&self) -> DiscConfig {
        self.discriminator.clone().unwrap_or_else(|| match self.preset {
            Preset::Toy => DiscConfig::toy(),
            Preset::Full => DiscConfig::full(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(param_err!(
                "image size {} is not a positive multiple of 16",
                self.image_size
            ));
        }
        if self.batch_size == 0 {
            return Err(param_err!("batch size must be positive"));
        }
        let o = &self.optimizer;
        if !(o.g_lr > 0.0 && o.d_lr > 0.0) {
            return Err(param_err!("learning rates must be positive"));
        }
        if self.data.dir.is_none() && self.data.count == 0 {
            return Err(param_err!("synthetic data needs a positive count"));
        }
        self.weights.validate()?;
        self.generator_config().validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
