//! Named model recipes: architecture, head and projection initialisation.
//!
//! Every recipe built from the same seed shares its backbone initialisation
//! (stream 0) and, once trained with the same [`TrainConfig`], its data order.
//! Random projection rows come from stream 1.
//!
//! [`TrainConfig`]: crate::train::TrainConfig

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadSpec, ModelGraph};
use crate::tensor::SeededRng;
use crate::textinit::{init_projection, EmbeddingTable, InitMode};

pub const BACKBONE_STREAM: u64 = 0;
pub const PROJECTION_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    MlpS,
    CnnS,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::MlpS => "mlp-s",
            Arch::CnnS => "cnn-s",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-s" => Ok(Arch::MlpS),
            "cnn-s" => Ok(Arch::CnnS),
            other => Err(Error::Argument(format!("unknown architecture `{other}` (mlp-s, cnn-s)"))),
        }
    }
}

/// Head variant of a recipe. Split heads always carry an init mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "head")]
pub enum Variant {
    Baseline,
    Split { latent: usize, init: InitMode },
}

impl Variant {
    /// Short tag used in model ids: `baseline`, `random`, `single-prompt`, ...
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Split { init, .. } => init.name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Recipe {
    pub arch: Arch,
    pub variant: Variant,
}

impl Recipe {
    pub fn model_id(&self, seed: u64) -> String {
        format!("{}-{}-s{seed}", self.arch, self.variant.tag())
    }

    /// Builds the untrained model. Text-initialised variants need `table`.
    pub fn build(
        &self,
        input_shape: &[usize],
        classes: usize,
        table: Option<&EmbeddingTable>,
        seed: u64,
    ) -> Result<ModelGraph> {
        let head = match self.variant {
            Variant::Baseline => HeadSpec::Baseline,
            Variant::Split { latent, .. } => HeadSpec::Split { latent },
        };
        let mut rng = SeededRng::new(seed, BACKBONE_STREAM);
        let mut model = match self.arch {
            Arch::MlpS => ModelGraph::mlp_s(input_shape, classes, head, &mut rng)?,
            Arch::CnnS => ModelGraph::cnn_s(input_shape, classes, head, &mut rng)?,
        };
        if let Variant::Split { init, .. } = self.variant {
            let mut rng = SeededRng::new(seed, PROJECTION_STREAM);
            model = init_projection(&model, init, table, &mut rng)?;
        }
        model.meta.seed = seed;
        Ok(model)
    }
}
