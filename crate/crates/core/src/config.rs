//! Model and training hyperparameters, plus the `key = value` config file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every input edge must be a multiple of this (the 1/32 bottleneck).
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stage_channels: [usize; 4],
    pub reduction_ratios: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    pub decoder_width: usize,
    pub mlp_expansion: usize,
    /// meters
    pub max_depth: f32,
    pub ln_eps: f32,
    pub bn_eps: f32,
    pub bn_momentum: f32,
    /// Selective feature fusion on skips; when off, skips are summed.
    pub with_sff: bool,
}

impl Default for ModelConfig {
    /// Full-width network at desk-scale depth.
    fn default() -> Self {
        Self {
            stage_channels: [64, 128, 320, 512],
            reduction_ratios: [8, 4, 2, 1],
            stage_depths: [2, 2, 2, 2],
            stage_heads: [1, 2, 5, 8],
            decoder_width: 64,
            mlp_expansion: 4,
            max_depth: 10.0,
            ln_eps: 1e-6,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            with_sff: true,
        }
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self::default()
    }

    /// Full width with the MiT-b4 block counts.
    pub fn mit_b4() -> Self {
        Self {
            stage_depths: [3, 8, 27, 3],
            ..Self::default()
        }
    }

    pub fn toy() -> Self {
        Self {
            stage_channels: [16, 32, 48, 64],
            stage_heads: [1, 2, 4, 8],
            decoder_width: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels[0] != self.decoder_width {
            return Err(Error::Config(format!(
                "stage_channels[0] ({}) must equal decoder_width ({}) for the unreduced 1/4 skip",
                self.stage_channels[0], self.decoder_width
            )));
        }
        for i in 0..4 {
            let (c, h) = (self.stage_channels[i], self.stage_heads[i]);
            if c == 0 || h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: channels {c} not divisible by heads {h}",
                    i + 1
                )));
            }
            if self.reduction_ratios[i] == 0 {
                return Err(Error::Config(format!("stage {}: reduction ratio must be >= 1", i + 1)));
            }
            if self.stage_depths[i] == 0 {
                return Err(Error::Config(format!("stage {}: depth must be >= 1", i + 1)));
            }
        }
        if self.decoder_width == 0 || self.mlp_expansion == 0 {
            return Err(Error::Config("decoder_width and mlp_expansion must be positive".into()));
        }
        if !(self.max_depth > 0.0) {
            return Err(Error::Config("max_depth must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::Geometry(format!(
                "input {h}x{w} is not a multiple of {INPUT_MULTIPLE}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutDepthMode {
    None,
    /// Full-height strip.
    Vertical,
    /// Random rectangle.
    Original,
}

impl FromStr for CutDepthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "vertical" => Ok(Self::Vertical),
            "original" => Ok(Self::Original),
            _ => Err(Error::Config(format!("unknown cutdepth_mode '{s}'"))),
        }
    }
}

impl CutDepthMode {
    fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Vertical => "vertical",
            Self::Original => "original",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_low: f64,
    pub lr_high: f64,
    pub poly_power: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// 0 means "use the sample size"
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub cutdepth_prob: f64,
    pub cutdepth_p: f64,
    pub cutdepth_mode: CutDepthMode,
    pub silog_lambda: f32,
    pub val_fraction: f64,
    pub min_depth: f32,
    /// Evaluation resizes odd-sized inputs up (true) or down to a multiple of 32.
    pub eval_resize_up: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 12,
            lr_low: 3e-5,
            lr_high: 1e-4,
            poly_power: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            crop_h: 0,
            crop_w: 0,
            flip_prob: 0.5,
            jitter_prob: 0.5,
            cutdepth_prob: 0.25,
            cutdepth_p: 0.75,
            cutdepth_mode: CutDepthMode::Vertical,
            silog_lambda: 0.5,
            val_fraction: 0.1,
            min_depth: 1e-3,
            eval_resize_up: true,
        }
    }
}

impl TrainConfig {
    /// Small-budget schedule; the peak is raised so 15 short epochs converge.
    pub fn toy() -> Self {
        Self {
            epochs: 15,
            batch_size: 4,
            lr_high: 2e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr_low < self.lr_high) || self.lr_low < 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= lr_low < lr_high, got {} and {}",
                self.lr_low, self.lr_high
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("cutdepth_prob", self.cutdepth_prob),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.cutdepth_p > 0.0 && self.cutdepth_p <= 1.0) {
            return Err(Error::Config("cutdepth_p must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Contents of a config file: model and training sections share one namespace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: '{v}'")))
}

fn parse_quad(key: &str, v: &str) -> Result<[usize; 4]> {
    let items: Vec<&str> = v
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(str::trim)
        .collect();
    if items.len() != 4 {
        return Err(Error::Config(format!("{key} needs 4 comma-separated values")));
    }
    let mut out = [0usize; 4];
    for (o, s) in out.iter_mut().zip(items) {
        *o = parse_num(key, s)?;
    }
    Ok(out)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean for {key}: '{v}'"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "stage_channels" => m.stage_channels = parse_quad(key, v)?,
            "reduction_ratios" => m.reduction_ratios = parse_quad(key, v)?,
            "stage_depths" => m.stage_depths = parse_quad(key, v)?,
            "stage_heads" => m.stage_heads = parse_quad(key, v)?,
            "decoder_width" => m.decoder_width = parse_num(key, v)?,
            "mlp_expansion" => m.mlp_expansion = parse_num(key, v)?,
            "max_depth" => m.max_depth = parse_num(key, v)?,
            "ln_eps" => m.ln_eps = parse_num(key, v)?,
            "bn_eps" => m.bn_eps = parse_num(key, v)?,
            "bn_momentum" => m.bn_momentum = parse_num(key, v)?,
            "with_sff" => m.with_sff = parse_bool(key, v)?,
            "epochs" => t.epochs = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "lr_low" => t.lr_low = parse_num(key, v)?,
            "lr_high" => t.lr_high = parse_num(key, v)?,
            "poly_power" => t.poly_power = parse_num(key, v)?,
            "adam_beta1" => t.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => t.adam_beta2 = parse_num(key, v)?,
            "adam_eps" => t.adam_eps = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "crop_h" => t.crop_h = parse_num(key, v)?,
            "crop_w" => t.crop_w = parse_num(key, v)?,
            "flip_prob" => t.flip_prob = parse_num(key, v)?,
            "jitter_prob" => t.jitter_prob = parse_num(key, v)?,
            "cutdepth_prob" => t.cutdepth_prob = parse_num(key, v)?,
            "cutdepth_p" => t.cutdepth_p = parse_num(key, v)?,
            "cutdepth_mode" => t.cutdepth_mode = v.trim().parse()?,
            "silog_lambda" => t.silog_lambda = parse_num(key, v)?,
            "val_fraction" => t.val_fraction = parse_num(key, v)?,
            "min_depth" => t.min_depth = parse_num(key, v)?,
            "eval_resize" => {
                t.eval_resize_up = match v.trim() {
                    "up" => true,
                    "down" => false,
                    _ => return Err(Error::Config(format!("eval_resize must be up|down, got '{v}'"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let quad = |q: [usize; 4]| format!("{},{},{},{}", q[0], q[1], q[2], q[3]);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("stage_channels", quad(m.stage_channels));
        kv("reduction_ratios", quad(m.reduction_ratios));
        kv("stage_depths", quad(m.stage_depths));
        kv("stage_heads", quad(m.stage_heads));
        kv("decoder_width", m.decoder_width.to_string());
        kv("mlp_expansion", m.mlp_expansion.to_string());
        kv("max_depth", m.max_depth.to_string());
        kv("ln_eps", m.ln_eps.to_string());
        kv("bn_eps", m.bn_eps.to_string());
        kv("bn_momentum", m.bn_momentum.to_string());
        kv("with_sff", m.with_sff.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr_low", t.lr_low.to_string());
        kv("lr_high", t.lr_high.to_string());
        kv("poly_power", t.poly_power.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("seed", t.seed.to_string());
        kv("crop_h", t.crop_h.to_string());
        kv("crop_w", t.crop_w.to_string());
        kv("flip_prob", t.flip_prob.to_string());
        kv("jitter_prob", t.jitter_prob.to_string());
        kv("cutdepth_prob", t.cutdepth_prob.to_string());
        kv("cutdepth_p", t.cutdepth_p.to_string());
        kv("cutdepth_mode", t.cutdepth_mode.as_str().to_string());
        kv("silog_lambda", t.silog_lambda.to_string());
        kv("val_fraction", t.val_fraction.to_string());
        kv("min_depth", t.min_depth.to_string());
        kv("eval_resize", if t.eval_resize_up { "up" } else { "down" }.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        ModelConfig::mit_b4().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_roundtrips_through_text() {
        let mut cfg = RunConfig {
            model: ModelConfig::toy(),
            ..RunConfig::default()
        };
        cfg.train.cutdepth_mode = CutDepthMode::Original;
        cfg.train.seed = 11;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("decoder_width = 64\nlearning_rate = 3\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn comments_and_brackets() {
        let cfg = RunConfig::parse(
            "# toy\nstage_channels = [16, 32, 48, 64]  # widths\ndecoder_width = 16\nstage_heads = 1,2,4,8\n",
        )
        .unwrap();
        assert_eq!(cfg.model.stage_channels, [16, 32, 48, 64]);
    }

    #[test]
    fn skip_width_must_match_decoder() {
        let mut m = ModelConfig::full();
        m.decoder_width = 32;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::full();
        m.stage_heads[2] = 3;
        assert!(m.validate().is_err());
    }

    #[test]
    fn input_ladder_check() {
        let m = ModelConfig::toy();
        assert!(m.check_input(64, 96).is_ok());
        assert!(matches!(m.check_input(64, 80), Err(Error::Geometry(_))));
    }
}
