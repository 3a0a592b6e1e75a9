//! Lightweight decoder: 1×1 bottleneck, three ×2 upsample-and-fuse steps,
//! a final ×4 upsample and a sigmoid depth head.

use rand::Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Graph, ParamStore};

/// Selective feature fusion: predicts a two-channel sigmoid attention map
/// from the concatenated features and blends them with it.
#[derive(Clone, Debug)]
pub struct Sff {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub attn: Conv2d,
}

impl Sff {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.decoder_width;
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), 2 * c, c, 3, 1, 1, 1, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c, cfg.bn_eps, cfg.bn_momentum),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, 1, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c, cfg.bn_eps, cfg.bn_momentum),
            attn: Conv2d::new(store, &format!("{name}.attn"), c, 2, 3, 1, 1, 1, rng),
        }
    }

    /// The sigmoid attention map `[N, 2, H, W]`.
    pub fn attention(&self, g: &mut Graph, dec: Var, enc: Var) -> Result<Var> {
        let (ds, es) = (g.tape.shape(dec).to_vec(), g.tape.shape(enc).to_vec());
        if ds != es {
            return Err(Error::dim("sff", &ds, &es));
        }
        let x = g.tape.concat_channels(&[dec, enc])?;
        let x = self.conv1.forward(g, x)?;
        let x = self.bn1.forward(g, x)?;
        let x = g.tape.relu(x);
        let x = self.conv2.forward(g, x)?;
        let x = self.bn2.forward(g, x)?;
        let x = g.tape.relu(x);
        let x = self.attn.forward(g, x)?;
        Ok(g.tape.sigmoid(x))
    }

    /// `A₀ ⊙ dec + A₁ ⊙ enc`.
    pub fn forward(&self, g: &mut Graph, dec: Var, enc: Var) -> Result<Var> {
        let a = self.attention(g, dec, enc)?;
        blend(g, a, dec, enc)
    }
}

/// Blends two maps with the channels of a `[N, 2, H, W]` weight map.
pub fn blend(g: &mut Graph, a: Var, dec: Var, enc: Var) -> Result<Var> {
    let a0 = g.tape.slice(a, 1, 0, 1)?;
    let a1 = g.tape.slice(a, 1, 1, 1)?;
    let d = g.tape.mul(dec, a0)?;
    let e = g.tape.mul(enc, a1)?;
    g.tape.add(d, e)
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub bottleneck: Conv2d,
    /// 3×3 convs bringing the 1/16 and 1/8 skips to decoder width.
    pub skip_reduce: Vec<Conv2d>,
    /// Coarsest first: 1/16, 1/8, 1/4. Empty when fusion is disabled.
    pub fusions: Vec<Sff>,
    pub head1: Conv2d,
    pub head2: Conv2d,
    pub max_depth: f32,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let n = cfg.decoder_width;
        let [_, c2, c3, c4] = cfg.stage_channels;
        let bottleneck = Conv2d::new(store, "decoder.bottleneck", c4, n, 1, 1, 0, 1, rng);
        let skip_reduce = vec![
            Conv2d::new(store, "decoder.skip16", c3, n, 3, 1, 1, 1, rng),
            Conv2d::new(store, "decoder.skip8", c2, n, 3, 1, 1, 1, rng),
        ];
        let fusions = if cfg.with_sff {
            ["decoder.sff16", "decoder.sff8", "decoder.sff4"]
                .iter()
                .map(|name| Sff::new(store, name, cfg, rng))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            bottleneck,
            skip_reduce,
            fusions,
            head1: Conv2d::new(store, "decoder.head1", n, n, 3, 1, 1, 1, rng),
            head2: Conv2d::new(store, "decoder.head2", n, 1, 3, 1, 1, 1, rng),
            max_depth: cfg.max_depth,
        }
    }

    /// Fuses the upsampled decoder map with encoder skip `level`
    /// (0 = 1/16, 1 = 1/8, 2 = 1/4).
    pub fn fuse(&self, g: &mut Graph, level: usize, dec: Var, skip: Var) -> Result<Var> {
        let enc = match self.skip_reduce.get(level) {
            Some(conv) => conv.forward(g, skip)?,
            None => skip,
        };
        match self.fusions.get(level) {
            Some(sff) => sff.forward(g, dec, enc),
            None => g.tape.add(dec, enc),
        }
    }

    /// Depth `[N, 1, H, W]` in `(0, max_depth)` for an `H×W` input.
    pub fn forward(&self, g: &mut Graph, pyramid: &FeaturePyramid, out_hw: (usize, usize)) -> Result<Var> {
        if pyramid.levels.len() != 4 {
            return Err(Error::Contract(format!(
                "decoder needs 4 pyramid levels, got {}",
                pyramid.levels.len()
            )));
        }
        let mut x = self.bottleneck.forward(g, pyramid[3])?;
        for (level, &skip) in [pyramid[2], pyramid[1], pyramid[0]].iter().enumerate() {
            let s = g.tape.shape(skip).to_vec();
            x = g.tape.resize_bilinear(x, s[2], s[3])?;
            x = self.fuse(g, level, x, skip)?;
        }
        x = g.tape.resize_bilinear(x, out_hw.0, out_hw.1)?;
        x = self.head1.forward(g, x)?;
        x = g.tape.relu(x);
        x = self.head2.forward(g, x)?;
        x = g.tape.sigmoid(x);
        Ok(g.tape.scale(x, self.max_depth))
    }
}

/// Trainable scalar count of the decoder, computed from the config alone.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let n = cfg.decoder_width;
    let [_, c2, c3, c4] = cfg.stage_channels;
    let mut total = conv(c4, n, 1) + conv(c3, n, 3) + conv(c2, n, 3);
    if cfg.with_sff {
        let sff = conv(2 * n, n, 3) + 2 * n + conv(n, n, 3) + 2 * n + conv(n, 2, 3);
        total += 3 * sff;
    }
    total + conv(n, n, 3) + conv(n, 1, 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_width_decoder_is_about_two_thirds_of_a_million() {
        // bottleneck 512·64+64, skips 320·64·9+64 and 128·64·9+64,
        // three fusions of 73792+128+36928+128+1154, head 36928+577
        assert_eq!(count_params(&ModelConfig::full()), 664_903);
        let plain = ModelConfig {
            with_sff: false,
            ..ModelConfig::full()
        };
        assert_eq!(count_params(&plain), 328_513);
    }

    #[test]
    fn analytic_count_matches_built_decoder() {
        for cfg in [
            ModelConfig::toy(),
            ModelConfig {
                with_sff: false,
                ..ModelConfig::toy()
            },
        ] {
            let mut store = ParamStore::new();
            Decoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
            assert_eq!(store.count("decoder."), count_params(&cfg));
        }
    }

    #[test]
    fn fixed_weights_blend_exactly() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval, false);
        let dec = g.input(Tensor::from_fn(&[1, 3, 2, 2], |i| (i as f32 * 0.3).sin()));
        let enc = g.input(Tensor::from_fn(&[1, 3, 2, 2], |i| (i as f32 * 0.7).cos()));
        let a = g.input(Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 0.25 } else { 0.6 }));
        let out = blend(&mut g, a, dec, enc).unwrap();
        let (d, e) = (g.tape.value(dec).data(), g.tape.value(enc).data());
        let want: Vec<f32> = d.iter().zip(e).map(|(d, e)| d * 0.25 + e * 0.6).collect();
        assert_eq!(g.tape.value(out).data(), want.as_slice());
    }

    #[test]
    fn without_sff_the_output_contract_is_unchanged() {
        let image = Tensor::from_fn(&[2, 3, 64, 32], |i| ((i % 29) as f32) / 29.0);
        let with = crate::model::GlpDepth::new(ModelConfig::toy(), 3).unwrap();
        let plain = crate::model::GlpDepth::new(
            ModelConfig {
                with_sff: false,
                ..ModelConfig::toy()
            },
            3,
        )
        .unwrap();
        assert!(plain.param_count().decoder < with.param_count().decoder);
        for m in [&with, &plain] {
            let y = m.predict(&image).unwrap();
            assert_eq!(y.shape(), &[2, 1, 64, 32]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < m.config.max_depth));
        }
    }

    #[test]
    fn saturated_attention_selects_one_input() {
        let mut store = ParamStore::new();
        let cfg = ModelConfig::toy();
        let sff = Sff::new(&mut store, "sff", &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new(&store, Mode::Eval, false);
        let dec = g.input(Tensor::from_fn(&[1, 16, 4, 4], |i| (i as f32 * 0.3).sin()));
        let enc = g.input(Tensor::from_fn(&[1, 16, 4, 4], |i| (i as f32 * 0.7).cos()));
        let logits = g.input(Tensor::from_fn(&[1, 2, 4, 4], |i| if i < 16 { 20.0 } else { -20.0 }));
        let a = g.tape.sigmoid(logits);
        let out = blend(&mut g, a, dec, enc).unwrap();
        assert!(g.tape.value(out).max_abs_diff(g.tape.value(dec)) < 1e-6);
        // the module itself rejects mismatched shapes
        let small = g.input(Tensor::zeros(&[1, 16, 2, 2]));
        assert!(sff.forward(&mut g, dec, small).is_err());
    }
}
