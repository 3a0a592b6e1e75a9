//! Hierarchical transformer encoder: four stages at 1/4, 1/8, 1/16 and 1/32
//! of the input resolution.

use std::ops::Index;

use rand::Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Conv2d, Graph, LayerNorm, Linear, ParamStore};

/// (kernel, stride, pad) of the overlapping patch embedding of each stage.
pub fn embed_geometry(stage: usize) -> (usize, usize, usize) {
    if stage == 0 {
        (7, 4, 3)
    } else {
        (3, 2, 1)
    }
}

/// Encoder outputs, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl Index<usize> for FeaturePyramid {
    type Output = Var;
    fn index(&self, i: usize) -> &Var {
        &self.levels[i]
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    stride: usize,
}

impl PatchEmbed {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        stage: usize,
        in_c: usize,
        out_c: usize,
        eps: f32,
        rng: &mut R,
    ) -> Self {
        let (k, s, p) = embed_geometry(stage);
        Self {
            conv: Conv2d::new(store, &format!("{name}.proj"), in_c, out_c, k, s, p, 1, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), out_c, eps),
            stride: s,
        }
    }

    /// Returns layer-normalized tokens `[N, h·w, C]` and the grid size.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, usize, usize)> {
        let s = g.tape.shape(x);
        if s.len() != 4 || !s[2].is_multiple_of(self.stride) || !s[3].is_multiple_of(self.stride) {
            return Err(Error::Geometry(format!(
                "patch embedding with stride {} cannot tile input {s:?}",
                self.stride
            )));
        }
        let y = self.conv.forward(g, x)?;
        let (tokens, h, w) = map_to_tokens(g, y)?;
        Ok((self.norm.forward(g, tokens)?, h, w))
    }
}

/// Multi-head self-attention whose keys and values come from a map shrunk
/// by a stride-`ratio` convolution (sequence length `L / ratio²`).
#[derive(Clone, Debug)]
pub struct EfficientAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub reduce: Option<(Conv2d, LayerNorm)>,
    pub heads: usize,
    pub ratio: usize,
    dim: usize,
}

impl EfficientAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ratio: usize,
        eps: f32,
        rng: &mut R,
    ) -> Self {
        let reduce = (ratio > 1).then(|| {
            (
                Conv2d::new(store, &format!("{name}.sr"), dim, dim, ratio, ratio, 0, 1, rng),
                LayerNorm::new(store, &format!("{name}.sr_norm"), dim, eps),
            )
        });
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            reduce,
            heads,
            ratio,
            dim,
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        let r = g.tape.reshape(x, &[s[0], s[1], self.heads, self.dim / self.heads])?;
        g.tape.transpose(r, 1, 2)
    }

    pub fn forward(&self, g: &mut Graph, tokens: Var, h: usize, w: usize) -> Result<Var> {
        Ok(self.forward_with_weights(g, tokens, h, w)?.0)
    }

    /// Output tokens plus the attention weights `[N, heads, L, L/ratio²]`.
    pub fn forward_with_weights(&self, g: &mut Graph, tokens: Var, h: usize, w: usize) -> Result<(Var, Var)> {
        let s = g.tape.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != h * w || s[2] != self.dim {
            return Err(Error::Geometry(format!(
                "attention tokens {s:?} vs grid {h}x{w}, dim {}",
                self.dim
            )));
        }
        if !h.is_multiple_of(self.ratio) || !w.is_multiple_of(self.ratio) {
            return Err(Error::Geometry(format!(
                "grid {h}x{w} not divisible by reduction ratio {}",
                self.ratio
            )));
        }
        let (n, l, c) = (s[0], s[1], s[2]);
        let q = self.query.forward(g, tokens)?;
        let q = self.split_heads(g, q)?;

        let kv_src = match &self.reduce {
            Some((conv, norm)) => {
                let map = tokens_to_map(g, tokens, h, w)?;
                let small = conv.forward(g, map)?;
                let (t, _, _) = map_to_tokens(g, small)?;
                norm.forward(g, t)?
            }
            None => tokens,
        };
        let k = self.key.forward(g, kv_src)?;
        let k = self.split_heads(g, k)?;
        let k_t = g.tape.transpose(k, 2, 3)?;
        let v = self.value.forward(g, kv_src)?;
        let v = self.split_heads(g, v)?;

        let scores = g.tape.matmul(q, k_t)?;
        let scores = g.tape.scale(scores, 1.0 / ((c / self.heads) as f32).sqrt());
        let attn = g.tape.softmax(scores, 3)?;
        let ctx = g.tape.matmul(attn, v)?;
        let ctx = g.tape.transpose(ctx, 1, 2)?;
        let ctx = g.tape.reshape(ctx, &[n, l, c])?;
        Ok((self.proj.forward(g, ctx)?, attn))
    }
}

/// Linear → 3×3 depthwise conv → GELU → linear.
#[derive(Clone, Debug)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dwconv: Conv2d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, expansion: usize, rng: &mut R) -> Self {
        let hidden = dim * expansion;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            dwconv: Conv2d::new(store, &format!("{name}.dwconv"), hidden, hidden, 3, 1, 1, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, tokens: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.fc1.forward(g, tokens)?;
        let map = tokens_to_map(g, x, h, w)?;
        let map = self.dwconv.forward(g, map)?;
        let (x, _, _) = map_to_tokens(g, map)?;
        let x = g.tape.gelu(x);
        self.fc2.forward(g, x)
    }
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `x + MixFfn(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: EfficientAttention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl TransformerBlock {
    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        let n = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, n, h, w)?;
        let x = g.tape.add(x, a)?;
        let n = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, n, h, w)?;
        g.tape.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl Stage {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (mut t, h, w) = self.embed.forward(g, x)?;
        for b in &self.blocks {
            t = b.forward(g, t, h, w)?;
        }
        let t = self.norm.forward(g, t)?;
        tokens_to_map(g, t, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut in_c = 3;
        let stages = (0..4)
            .map(|i| {
                let c = cfg.stage_channels[i];
                let name = format!("encoder.stage{}", i + 1);
                let embed = PatchEmbed::new(store, &format!("{name}.embed"), i, in_c, c, cfg.ln_eps, rng);
                let blocks = (0..cfg.stage_depths[i])
                    .map(|b| {
                        let bn = format!("{name}.block{b}");
                        TransformerBlock {
                            norm1: LayerNorm::new(store, &format!("{bn}.norm1"), c, cfg.ln_eps),
                            attn: EfficientAttention::new(
                                store,
                                &format!("{bn}.attn"),
                                c,
                                cfg.stage_heads[i],
                                cfg.reduction_ratios[i],
                                cfg.ln_eps,
                                rng,
                            ),
                            norm2: LayerNorm::new(store, &format!("{bn}.norm2"), c, cfg.ln_eps),
                            ffn: MixFfn::new(store, &format!("{bn}.ffn"), c, cfg.mlp_expansion, rng),
                        }
                    })
                    .collect();
                let norm = LayerNorm::new(store, &format!("{name}.norm"), c, cfg.ln_eps);
                in_c = c;
                Stage { embed, blocks, norm }
            })
            .collect();
        Self { stages }
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<FeaturePyramid> {
        self.forward_stages(g, image, self.stages.len())
    }

    /// Runs only the first `count` stages.
    pub fn forward_stages(&self, g: &mut Graph, image: Var, count: usize) -> Result<FeaturePyramid> {
        let mut x = image;
        let mut levels = Vec::with_capacity(count);
        for stage in &self.stages[..count] {
            x = stage.forward(g, x)?;
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Trainable scalar count of the encoder, computed from the config alone.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let linear = |i: usize, o: usize| i * o + o;
    let conv = |i: usize, o: usize, k: usize, groups: usize| o * (i / groups) * k * k + o;
    let norm = |c: usize| 2 * c;
    let mut total = 0;
    let mut in_c = 3;
    for i in 0..4 {
        let c = cfg.stage_channels[i];
        let (k, _, _) = embed_geometry(i);
        total += conv(in_c, c, k, 1) + norm(c);
        let r = cfg.reduction_ratios[i];
        let hidden = c * cfg.mlp_expansion;
        let mut block = norm(c) + 4 * linear(c, c) + norm(c);
        if r > 1 {
            block += conv(c, c, r, 1) + norm(c);
        }
        block += linear(c, hidden) + conv(hidden, hidden, 3, hidden) + linear(hidden, c);
        total += cfg.stage_depths[i] * block + norm(c);
        in_c = c;
    }
    total
}
