use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamStore};
use crate::tensor::Tensor;

/// Everything that fixes the parameter layout of a model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// Learnable tokens per side.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Wrap encoder inputs in the system/user/assistant template.
    #[serde(default)]
    pub chat_wrap: bool,
}

fn default_k() -> usize {
    16
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            k: default_k(),
            chat_wrap: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        self.backbone.validate(&format!("{path}.backbone"))?;
        if self.k == 0 {
            return Err(Error::config(format!("{path}.k"), "must be at least 1"));
        }
        if self.k >= self.backbone.max_seq_len {
            return Err(Error::config(format!("{path}.k"), "must be smaller than max_seq_len"));
        }
        Ok(())
    }
}

/// Parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

const LT_STD: f32 = 0.02;

pub const QUERY_TOKENS: &str = "lt.query";
pub const DOC_TOKENS: &str = "lt.doc";
pub const PROJECTOR: [&str; 2] = ["proj.1", "proj.2"];

impl Model {
    /// Fresh model: backbone, per-side learnable tokens (N(0, 0.02)) and the
    /// two-layer projector.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate("model")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.backbone.init_params(&mut rng, &mut params);
        let d = config.backbone.d_model;
        params.insert(QUERY_TOKENS, normal_tensor(&mut rng, &[config.k, d], LT_STD));
        params.insert(DOC_TOKENS, normal_tensor(&mut rng, &[config.k, d], LT_STD));
        let std = 1.0 / (d as f32).sqrt();
        for name in PROJECTOR {
            params.insert(format!("{name}.w"), normal_tensor(&mut rng, &[d, d], std));
            params.insert(format!("{name}.b"), Tensor::zeros(&[d]));
        }
        Ok(Self { config, params })
    }

    pub fn d_model(&self) -> usize {
        self.config.backbone.d_model
    }
}
