//! The full encoder–decoder depth network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::decoder::{self, Decoder};
use crate::encoder::{self, Encoder};
use crate::error::{Error, Result};
use crate::nn::{Graph, Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GlpDepth {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    params: ParamStore,
}

/// Trainable scalars per part.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub encoder: usize,
    pub decoder: usize,
}

impl ParamCount {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        Self {
            encoder: encoder::count_params(cfg),
            decoder: decoder::count_params(cfg),
        }
    }

    pub fn total(&self) -> usize {
        self.encoder + self.decoder
    }
}

impl GlpDepth {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config, &mut rng);
        let decoder = Decoder::new(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            encoder,
            decoder,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> ParamCount {
        ParamCount {
            encoder: self.params.count("encoder."),
            decoder: self.params.count("decoder."),
        }
    }

    /// `[N, 3, H, W]` image to `[N, 1, H, W]` depth.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let s = g.tape.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim("glpdepth", &s, &[0, 3, 0, 0]));
        }
        self.config.check_input(s[2], s[3])?;
        let pyramid = self.encoder.forward(g, image)?;
        self.decoder.forward(g, &pyramid, (s[2], s[3]))
    }

    /// Eval-mode forward without gradient tracking.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, Mode::Eval, false);
        let x = g.input(images.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.tape.value(y).clone())
    }
}
