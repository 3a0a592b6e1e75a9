//! Training-time augmentation: flips and crops, photometric jitter, and
//! CutDepth (pasting ground-truth depth into part of the image).

use rand::Rng;

use crate::config::{CutDepthMode, ModelConfig, TrainConfig};
use crate::data::DepthSample;
use crate::error::{Error, Result};

/// Pasted region, in pixels: columns `[l, l+w)`, rows `[u, u+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutRegion {
    pub l: usize,
    pub u: usize,
    pub w: usize,
    pub h: usize,
}

/// Full-height strip: `l = ⌊αW⌋`, `w = max(⌊(W − αW)·β·p⌋, 1)`.
pub fn vertical_region(width: usize, height: usize, alpha: f64, beta: f64, p: f64) -> CutRegion {
    let wf = width as f64;
    let l = ((alpha * wf).floor() as usize).min(width - 1);
    let w = (((wf - alpha * wf) * beta * p).floor() as usize).max(1).min(width - l);
    CutRegion { l, u: 0, w, h: height }
}

/// Free rectangle: the same construction applied to both axes.
pub fn original_region(width: usize, height: usize, alpha: (f64, f64), beta: (f64, f64), p: f64) -> CutRegion {
    let cols = vertical_region(width, height, alpha.0, beta.0, p);
    let rows = vertical_region(height, width, alpha.1, beta.1, p);
    CutRegion {
        l: cols.l,
        u: rows.l,
        w: cols.w,
        h: rows.w,
    }
}

/// Replaces the image inside `region` with `depth / max_depth` on all three
/// channels. Depth and everything outside the region are untouched.
pub fn paste_depth(sample: &DepthSample, region: CutRegion, max_depth: f32) -> DepthSample {
    let mut out = sample.clone();
    let w = sample.width;
    for y in region.u..region.u + region.h {
        for x in region.l..region.l + region.w {
            let v = (sample.depth[y * w + x] / max_depth).clamp(0.0, 1.0);
            out.rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(v);
        }
    }
    out
}

pub fn vertical_cutdepth(
    sample: &DepthSample,
    alpha: f64,
    beta: f64,
    p: f64,
    max_depth: f32,
) -> (DepthSample, CutRegion) {
    let r = vertical_region(sample.width, sample.height, alpha, beta, p);
    (paste_depth(sample, r, max_depth), r)
}

// ------------------------------------------------------------ photometric

/// One draw of every jitter magnitude. All zeros is the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jitter {
    /// Additive, in `[-0.2, 0.2]`.
    pub brightness: f32,
    /// Multiplicative gain minus one, in `[-0.2, 0.2]`.
    pub contrast: f32,
    /// Gamma exponent is `(100 + gamma) / 100`, `gamma ∈ [-20, 20]`.
    pub gamma: f32,
    /// Degrees.
    pub hue: f32,
    /// In 1/255 units.
    pub saturation: f32,
    /// In 1/255 units.
    pub value: f32,
}

impl Jitter {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            brightness: rng.gen_range(-0.2..=0.2),
            contrast: rng.gen_range(-0.2..=0.2),
            gamma: rng.gen_range(-20.0..=20.0),
            hue: rng.gen_range(-20.0..=20.0),
            saturation: rng.gen_range(-30.0..=30.0),
            value: rng.gen_range(-20.0..=20.0),
        }
    }

    pub fn apply(&self, sample: &DepthSample) -> DepthSample {
        let mut out = sample.clone();
        if self.brightness != 0.0 || self.contrast != 0.0 {
            let gain = 1.0 + self.contrast;
            for v in &mut out.rgb {
                *v = (*v * gain + self.brightness).clamp(0.0, 1.0);
            }
        }
        if self.gamma != 0.0 {
            let e = (100.0 + self.gamma) / 100.0;
            for v in &mut out.rgb {
                *v = v.powf(e).clamp(0.0, 1.0);
            }
        }
        if self.hue != 0.0 || self.saturation != 0.0 || self.value != 0.0 {
            for px in out.rgb.chunks_exact_mut(3) {
                let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                let h = (h + self.hue).rem_euclid(360.0);
                let s = (s + self.saturation / 255.0).clamp(0.0, 1.0);
                let v = (v + self.value / 255.0).clamp(0.0, 1.0);
                let (r, g, b) = hsv_to_rgb(h, s, v);
                px[0] = r.clamp(0.0, 1.0);
                px[1] = g.clamp(0.0, 1.0);
                px[2] = b.clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return (0.0, 0.0, max);
    }
    let h = if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max > 0.0 { d / max } else { 0.0 };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    if s == 0.0 {
        return (v, v, v);
    }
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

pub fn photometric_jitter<R: Rng + ?Sized>(sample: &DepthSample, rng: &mut R) -> DepthSample {
    Jitter::sample(rng).apply(sample)
}

// --------------------------------------------------------------- geometric

pub fn flip_horizontal(sample: &DepthSample) -> DepthSample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    for y in 0..h {
        for x in 0..w {
            let (src, dst) = (y * w + (w - 1 - x), y * w + x);
            out.depth[dst] = sample.depth[src];
            out.valid[dst] = sample.valid[src];
            out.rgb[dst * 3..dst * 3 + 3].copy_from_slice(&sample.rgb[src * 3..src * 3 + 3]);
        }
    }
    out
}

pub fn crop(sample: &DepthSample, top: usize, left: usize, h: usize, w: usize) -> Result<DepthSample> {
    if h == 0 || w == 0 || top + h > sample.height || left + w > sample.width {
        return Err(Error::Geometry(format!(
            "crop {h}x{w} at ({top}, {left}) outside {}x{} sample",
            sample.height, sample.width
        )));
    }
    let mut rgb = Vec::with_capacity(h * w * 3);
    let mut depth = Vec::with_capacity(h * w);
    for y in top..top + h {
        let row = y * sample.width;
        rgb.extend_from_slice(&sample.rgb[(row + left) * 3..(row + left + w) * 3]);
        depth.extend_from_slice(&sample.depth[row + left..row + left + w]);
    }
    let mut out = DepthSample::new(h, w, rgb, depth)?;
    for y in 0..h {
        let row = (top + y) * sample.width + left;
        out.valid[y * w..(y + 1) * w].copy_from_slice(&sample.valid[row..row + w]);
    }
    Ok(out)
}

/// Flip with probability `flip_prob`, then a uniformly placed crop.
pub fn geometric<R: Rng + ?Sized>(
    sample: &DepthSample,
    rng: &mut R,
    crop_h: usize,
    crop_w: usize,
    flip_prob: f64,
) -> Result<DepthSample> {
    if crop_h > sample.height || crop_w > sample.width {
        return Err(Error::Geometry(format!(
            "crop {crop_h}x{crop_w} larger than {}x{} sample",
            sample.height, sample.width
        )));
    }
    let flipped = if rng.gen::<f64>() < flip_prob {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    let top = rng.gen_range(0..=sample.height - crop_h);
    let left = rng.gen_range(0..=sample.width - crop_w);
    crop(&flipped, top, left, crop_h, crop_w)
}

// ---------------------------------------------------------------- pipeline

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// 0 keeps the full sample size.
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub cutdepth_prob: f64,
    pub cutdepth_p: f64,
    pub mode: CutDepthMode,
    pub max_depth: f32,
}

impl AugmentConfig {
    pub fn from_configs(train: &TrainConfig, model: &ModelConfig) -> Self {
        Self {
            crop_h: train.crop_h,
            crop_w: train.crop_w,
            flip_prob: train.flip_prob,
            jitter_prob: train.jitter_prob,
            cutdepth_prob: train.cutdepth_prob,
            cutdepth_p: train.cutdepth_p,
            mode: train.cutdepth_mode,
            max_depth: model.max_depth,
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::from_configs(&TrainConfig::default(), &ModelConfig::default())
    }
}

/// The uniform draws deciding which optional stages run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageDraws {
    pub jitter: f64,
    pub cutdepth: f64,
}

/// What the pipeline did, for inspection.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Applied {
    pub jitter: Option<Jitter>,
    pub cut: Option<CutRegion>,
}

pub fn augment_with<R: Rng + ?Sized>(
    sample: &DepthSample,
    draws: StageDraws,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(DepthSample, Applied)> {
    let ch = if cfg.crop_h == 0 { sample.height } else { cfg.crop_h };
    let cw = if cfg.crop_w == 0 { sample.width } else { cfg.crop_w };
    let mut out = geometric(sample, rng, ch, cw, cfg.flip_prob)?;
    let mut applied = Applied::default();
    if draws.jitter < cfg.jitter_prob {
        let j = Jitter::sample(rng);
        out = j.apply(&out);
        applied.jitter = Some(j);
    }
    if draws.cutdepth < cfg.cutdepth_prob && cfg.mode != CutDepthMode::None {
        let region = match cfg.mode {
            CutDepthMode::Vertical => vertical_region(out.width, out.height, rng.gen(), rng.gen(), cfg.cutdepth_p),
            _ => original_region(
                out.width,
                out.height,
                (rng.gen(), rng.gen()),
                (rng.gen(), rng.gen()),
                cfg.cutdepth_p,
            ),
        };
        out = paste_depth(&out, region, cfg.max_depth);
        applied.cut = Some(region);
    }
    Ok((out, applied))
}

/// Geometric always; jitter and CutDepth each behind their probability.
pub fn augment_pipeline<R: Rng + ?Sized>(
    sample: &DepthSample,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<DepthSample> {
    let draws = StageDraws {
        jitter: rng.gen(),
        cutdepth: rng.gen(),
    };
    augment_with(sample, draws, rng, cfg).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize, seed: u64) -> DepthSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let depth = (0..h * w).map(|_| rng.gen_range(0.5..9.5)).collect();
        DepthSample::new(h, w, rgb, depth).unwrap()
    }

    #[test]
    fn hand_evaluated_strip() {
        assert_eq!(
            vertical_region(100, 80, 0.5, 1.0, 0.75),
            CutRegion {
                l: 50,
                u: 0,
                w: 37,
                h: 80
            }
        );
        assert_eq!(vertical_region(100, 80, 0.3, 0.0, 0.75).w, 1);
    }

    #[test]
    fn near_full_strip_leaves_the_rest_alone() {
        let s = sample(8, 10, 1);
        let (out, r) = vertical_cutdepth(&s, 0.0, 0.999_999, 1.0, 10.0);
        assert_eq!((r.l, r.w), (0, 9));
        for y in 0..8 {
            let i = y * 10 + 9;
            assert_eq!(out.rgb[i * 3..i * 3 + 3], s.rgb[i * 3..i * 3 + 3]);
            let j = y * 10 + 4;
            assert_eq!(out.rgb[j * 3], s.depth[j] / 10.0);
        }
        assert_eq!(out.depth, s.depth);
    }

    #[test]
    fn zero_jitter_is_identity_and_gray_ignores_hue() {
        let s = sample(4, 4, 2);
        assert_eq!(Jitter::default().apply(&s), s);
        let gray = DepthSample::new(1, 2, vec![0.3, 0.3, 0.3, 0.8, 0.8, 0.8], vec![1.0; 2]).unwrap();
        let j = Jitter {
            hue: 17.0,
            ..Jitter::default()
        };
        assert_eq!(j.apply(&gray), gray);
    }

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in &[(0.9f32, 0.2, 0.1), (0.1, 0.7, 0.3), (0.2, 0.3, 0.95), (0.5, 0.5, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn flips_and_crops() {
        let s = sample(3, 5, 3);
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        let f = flip_horizontal(&s);
        for y in 0..3 {
            for j in 0..5 {
                assert_eq!(f.depth[y * 5 + j], s.depth[y * 5 + 4 - j]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = geometric(&s, &mut rng, 3, 5, 0.5).unwrap();
        assert!(full == s || full == f);
        assert!(matches!(geometric(&s, &mut rng, 4, 5, 0.5), Err(Error::Geometry(_))));
        let c = crop(&s, 1, 2, 2, 3).unwrap();
        assert_eq!(c.depth[0], s.depth[7]);
        assert_eq!(c.rgb[3..6], s.rgb[8 * 3..9 * 3]);
    }

    #[test]
    fn forced_draws_select_stages() {
        let s = sample(8, 8, 4);
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let low = StageDraws {
            jitter: 0.0,
            cutdepth: 0.0,
        };
        let (_, a) = augment_with(&s, low, &mut rng, &cfg).unwrap();
        assert!(a.jitter.is_some() && a.cut.is_some());
        let high = StageDraws {
            jitter: 0.99,
            cutdepth: 0.99,
        };
        let (out, a) = augment_with(&s, high, &mut rng, &cfg).unwrap();
        assert_eq!(a, Applied::default());
        assert_eq!(out, s);
    }

    #[test]
    fn pipeline_is_deterministic_and_keeps_depth() {
        let s = sample(16, 16, 6);
        let cfg = AugmentConfig {
            crop_h: 8,
            crop_w: 12,
            ..AugmentConfig::default()
        };
        for seed in 0..50 {
            let a = augment_pipeline(&s, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
            let b = augment_pipeline(&s, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
            assert_eq!(a, b);
            // depth only moves through flip and crop
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let _: (f64, f64) = (rng.gen(), rng.gen());
            let g = geometric(&s, &mut rng, 8, 12, cfg.flip_prob).unwrap();
            assert_eq!(a.depth, g.depth);
            assert!(a.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    proptest! {
        #[test]
        fn strip_is_full_height_and_in_bounds(
            w in 1usize..400, h in 1usize..400,
            alpha in 0.0f64..1.0, beta in 0.0f64..1.0, p in 0.001f64..=1.0,
        ) {
            let r = vertical_region(w, h, alpha, beta, p);
            prop_assert_eq!(r.u, 0);
            prop_assert_eq!(r.h, h);
            prop_assert!(r.w >= 1 && r.l + r.w <= w);
        }

        #[test]
        fn pixels_outside_the_strip_are_untouched(
            alpha in 0.0f64..1.0, beta in 0.0f64..1.0, seed in 0u64..1000,
        ) {
            let s = sample(6, 9, seed);
            let (out, r) = vertical_cutdepth(&s, alpha, beta, 0.75, 10.0);
            for y in 0..6 {
                for x in 0..9 {
                    let i = y * 9 + x;
                    if x < r.l || x >= r.l + r.w {
                        prop_assert_eq!(&out.rgb[i * 3..i * 3 + 3], &s.rgb[i * 3..i * 3 + 3]);
                    }
                }
            }
            prop_assert_eq!(&out.depth, &s.depth);
        }

        #[test]
        fn jitter_stays_in_range(seed in 0u64..500) {
            let s = sample(4, 4, seed);
            let out = photometric_jitter(&s, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(out.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(out.depth, s.depth);
        }
    }
}
