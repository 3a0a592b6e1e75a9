//! Image corruptions at five severities, and the robustness sweep that
//! evaluates a model under each of them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::augment::{hsv_to_rgb, rgb_to_hsv};
use crate::data::DepthSample;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, EvalConfig, MetricsReport};
use crate::model::GlpDepth;
use crate::train::evaluate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    SpeckleNoise,
    GaussianBlur,
    DefocusBlur,
    MotionBlur,
    GlassBlur,
    Brightness,
    Contrast,
    Saturate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 11] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::SpeckleNoise,
        Self::GaussianBlur,
        Self::DefocusBlur,
        Self::MotionBlur,
        Self::GlassBlur,
        Self::Brightness,
        Self::Contrast,
        Self::Saturate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::SpeckleNoise => "speckle_noise",
            Self::GaussianBlur => "gaussian_blur",
            Self::DefocusBlur => "defocus_blur",
            Self::MotionBlur => "motion_blur",
            Self::GlassBlur => "glass_blur",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Saturate => "saturate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind '{s}'")))
    }
}

/// Resolved parameters of one corruption. Lengths are in pixels, intensity
/// offsets on the `[0, 1]` scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Params {
    GaussianNoise {
        sigma: f64,
    },
    /// Poisson photon count at full intensity; infinite is noiseless.
    ShotNoise {
        photons: f64,
    },
    ImpulseNoise {
        amount: f64,
    },
    SpeckleNoise {
        sigma: f64,
    },
    GaussianBlur {
        sigma: f64,
    },
    DefocusBlur {
        radius: f64,
    },
    MotionBlur {
        length: usize,
    },
    GlassBlur {
        sigma: f64,
        delta: usize,
        iterations: usize,
    },
    Brightness {
        shift: f32,
    },
    Contrast {
        factor: f32,
    },
    Saturate {
        scale: f32,
        shift: f32,
    },
}

impl Params {
    /// Severity table lookup. Severity 0 yields the identity parameters.
    pub fn for_severity(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(Error::Config(format!("severity {severity} outside 1..=5")));
        }
        let s = severity as usize;
        let pick = |t: [f64; 5], zero: f64| if s == 0 { zero } else { t[s - 1] };
        Ok(match kind {
            CorruptionKind::GaussianNoise => Self::GaussianNoise {
                sigma: pick([0.04, 0.06, 0.08, 0.09, 0.10], 0.0),
            },
            CorruptionKind::ShotNoise => Self::ShotNoise {
                photons: pick([500.0, 250.0, 100.0, 75.0, 50.0], f64::INFINITY),
            },
            CorruptionKind::ImpulseNoise => Self::ImpulseNoise {
                amount: pick([0.01, 0.02, 0.03, 0.05, 0.07], 0.0),
            },
            CorruptionKind::SpeckleNoise => Self::SpeckleNoise {
                sigma: pick([0.06, 0.10, 0.12, 0.16, 0.20], 0.0),
            },
            CorruptionKind::GaussianBlur => Self::GaussianBlur {
                sigma: pick([0.4, 0.6, 0.7, 0.8, 1.0], 0.0),
            },
            CorruptionKind::DefocusBlur => Self::DefocusBlur {
                radius: pick([1.0, 1.5, 2.0, 2.5, 3.0], 0.0),
            },
            CorruptionKind::MotionBlur => Self::MotionBlur {
                length: pick([3.0, 5.0, 7.0, 9.0, 11.0], 1.0) as usize,
            },
            CorruptionKind::GlassBlur => {
                let t = [(0.05, 1, 1), (0.25, 1, 1), (0.4, 1, 1), (0.25, 1, 2), (0.4, 1, 2)];
                let (sigma, delta, iterations) = if s == 0 { (0.0, 0, 0) } else { t[s - 1] };
                Self::GlassBlur {
                    sigma,
                    delta,
                    iterations,
                }
            }
            CorruptionKind::Brightness => Self::Brightness {
                shift: pick([0.1, 0.2, 0.3, 0.4, 0.5], 0.0) as f32,
            },
            CorruptionKind::Contrast => Self::Contrast {
                factor: pick([0.75, 0.5, 0.4, 0.3, 0.15], 1.0) as f32,
            },
            CorruptionKind::Saturate => {
                let t = [(0.3, 0.0), (0.1, 0.0), (2.0, 0.0), (5.0, 0.1), (20.0, 0.2)];
                let (scale, shift) = if s == 0 { (1.0, 0.0) } else { t[s - 1] };
                Self::Saturate { scale, shift }
            }
        })
    }

    pub fn is_identity(&self) -> bool {
        match *self {
            Self::GaussianNoise { sigma } | Self::SpeckleNoise { sigma } | Self::GaussianBlur { sigma } => sigma == 0.0,
            Self::ShotNoise { photons } => photons.is_infinite(),
            Self::ImpulseNoise { amount } => amount == 0.0,
            Self::DefocusBlur { radius } => radius < 1.0,
            Self::MotionBlur { length } => length <= 1,
            Self::GlassBlur { sigma, iterations, .. } => sigma == 0.0 && iterations == 0,
            Self::Brightness { shift } => shift == 0.0,
            Self::Contrast { factor } => factor == 1.0,
            Self::Saturate { scale, shift } => scale == 1.0 && shift == 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity, seed })
    }
}

/// Corrupts a row-major `H×W×3` image in `[0, 1]`.
pub fn corrupt(rgb: &[f32], height: usize, width: usize, spec: &CorruptionSpec) -> Result<Vec<f32>> {
    let params = Params::for_severity(spec.kind, spec.severity)?;
    apply(rgb, height, width, &params, spec.seed)
}

pub fn corrupt_sample(sample: &DepthSample, spec: &CorruptionSpec) -> Result<DepthSample> {
    let mut out = sample.clone();
    out.rgb = corrupt(&sample.rgb, sample.height, sample.width, spec)?;
    Ok(out)
}

pub fn apply(rgb: &[f32], height: usize, width: usize, params: &Params, seed: u64) -> Result<Vec<f32>> {
    if rgb.len() != height * width * 3 {
        return Err(Error::dim("corrupt", &[rgb.len()], &[height, width, 3]));
    }
    if params.is_identity() {
        return Ok(rgb.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Image { h: height, w: width };
    let out = match *params {
        Params::GaussianNoise { sigma } => {
            let n = Normal::new(0.0, sigma).expect("finite sigma");
            rgb.iter().map(|&v| (v as f64 + n.sample(&mut rng)) as f32).collect()
        }
        Params::ShotNoise { photons } => rgb
            .iter()
            .map(|&v| {
                let lambda = v as f64 * photons;
                if lambda > 0.0 {
                    let k: f64 = Poisson::new(lambda).expect("positive rate").sample(&mut rng);
                    (k / photons) as f32
                } else {
                    0.0
                }
            })
            .collect(),
        Params::ImpulseNoise { amount } => rgb
            .iter()
            .map(|&v| {
                if rng.gen::<f64>() < amount {
                    if rng.gen::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        Params::SpeckleNoise { sigma } => {
            let n = Normal::new(0.0, sigma).expect("finite sigma");
            rgb.iter()
                .map(|&v| (v as f64 * (1.0 + n.sample(&mut rng))) as f32)
                .collect()
        }
        Params::GaussianBlur { sigma } => img.convolve(rgb, &Kernel::gaussian(sigma)),
        Params::DefocusBlur { radius } => img.convolve(rgb, &Kernel::disk(radius)),
        Params::MotionBlur { length } => {
            let angle = rng.gen_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4);
            img.convolve(rgb, &Kernel::line(length, angle))
        }
        Params::GlassBlur {
            sigma,
            delta,
            iterations,
        } => {
            let k = Kernel::gaussian(sigma);
            let mut x = img.convolve(rgb, &k);
            let d = delta as isize;
            for _ in 0..iterations {
                for y in (d..height as isize - d).rev() {
                    for xx in (d..width as isize - d).rev() {
                        let dy = rng.gen_range(-d..=d);
                        let dx = rng.gen_range(-d..=d);
                        let a = (y as usize * width + xx as usize) * 3;
                        let b = ((y + dy) as usize * width + (xx + dx) as usize) * 3;
                        for c in 0..3 {
                            x.swap(a + c, b + c);
                        }
                    }
                }
            }
            img.convolve(&x, &k)
        }
        Params::Brightness { shift } => rgb.iter().map(|&v| v + shift).collect(),
        Params::Contrast { factor } => {
            let mut mean = [0.0f64; 3];
            for px in rgb.chunks_exact(3) {
                for c in 0..3 {
                    mean[c] += px[c] as f64;
                }
            }
            let m = mean.map(|s| (s / (height * width) as f64) as f32);
            rgb.chunks_exact(3)
                .flat_map(|px| [0, 1, 2].map(|c| (px[c] - m[c]) * factor + m[c]))
                .collect()
        }
        Params::Saturate { scale, shift } => rgb
            .chunks_exact(3)
            .flat_map(|px| {
                let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                let (r, g, b) = hsv_to_rgb(h, (s * scale + shift).clamp(0.0, 1.0), v);
                [r, g, b]
            })
            .collect(),
    };
    Ok(out.into_iter().map(|v: f32| v.clamp(0.0, 1.0)).collect())
}

/// Normalized 2-D weights centred on `(radius, radius)`.
struct Kernel {
    radius: usize,
    weights: Vec<f64>,
}

impl Kernel {
    fn from_fn(radius: usize, f: impl Fn(isize, isize) -> f64) -> Self {
        let size = 2 * radius + 1;
        let r = radius as isize;
        let mut weights: Vec<f64> = (0..size * size)
            .map(|i| f((i / size) as isize - r, (i % size) as isize - r))
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { radius, weights }
    }

    fn gaussian(sigma: f64) -> Self {
        let radius = (3.0 * sigma).ceil().max(1.0) as usize;
        Self::from_fn(radius, |dy, dx| {
            (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()
        })
    }

    fn disk(radius: f64) -> Self {
        let r = radius.ceil() as usize;
        Self::from_fn(r, |dy, dx| {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                1.0
            } else {
                0.0
            }
        })
    }

    fn line(length: usize, angle: f64) -> Self {
        let half = (length - 1) as f64 / 2.0;
        let (s, c) = angle.sin_cos();
        let pts: Vec<(isize, isize)> = (0..length)
            .map(|i| {
                let t = i as f64 - half;
                ((t * s).round() as isize, (t * c).round() as isize)
            })
            .collect();
        Self::from_fn(half.ceil() as usize, |dy, dx| {
            pts.iter().filter(|&&p| p == (dy, dx)).count() as f64
        })
    }
}

struct Image {
    h: usize,
    w: usize,
}

impl Image {
    /// Convolution with edge clamping.
    fn convolve(&self, rgb: &[f32], k: &Kernel) -> Vec<f32> {
        let (h, w) = (self.h as isize, self.w as isize);
        let r = k.radius as isize;
        let size = 2 * k.radius + 1;
        let mut out = vec![0.0f32; rgb.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for (i, &wt) in k.weights.iter().enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    let sy = (y + (i / size) as isize - r).clamp(0, h - 1);
                    let sx = (x + (i % size) as isize - r).clamp(0, w - 1);
                    let src = (sy * w + sx) as usize * 3;
                    for c in 0..3 {
                        acc[c] += wt * rgb[src + c] as f64;
                    }
                }
                let dst = (y * w + x) as usize * 3;
                for c in 0..3 {
                    out[dst + c] = acc[c] as f32;
                }
            }
        }
        out
    }
}

// -------------------------------------------------------------- robustness

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub kind: CorruptionKind,
    /// `None` for the per-kind average over the swept severities.
    pub severity: Option<u8>,
    pub report: MetricsReport,
}

/// Evaluates `model` on corrupted copies of `samples` (ground truth kept
/// clean). Rows per kind: one per severity, then the severity average.
/// Image `i` is corrupted with seed `seed + i`.
pub fn robustness_sweep(
    model: &GlpDepth,
    samples: &[DepthSample],
    kinds: &[CorruptionKind],
    severities: &[u8],
    eval: &EvalConfig,
    resize_up: bool,
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        let mut per_severity = Vec::new();
        for &severity in severities {
            let corrupted = samples
                .iter()
                .enumerate()
                .map(|(i, s)| corrupt_sample(s, &CorruptionSpec::new(kind, severity, seed.wrapping_add(i as u64))?))
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate(model, &corrupted, eval, resize_up)?;
            per_severity.push(report);
            rows.push(RobustnessRow {
                kind,
                severity: Some(severity),
                report,
            });
        }
        rows.push(RobustnessRow {
            kind,
            severity: None,
            report: aggregate(&per_severity)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..h * w * 3).map(|_| rng.gen_range(0.1..0.9)).collect()
    }

    #[test]
    fn names_roundtrip() {
        for k in CorruptionKind::ALL {
            assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
        }
        assert!(matches!("jpeg".parse::<CorruptionKind>(), Err(Error::Config(_))));
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 0, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6, 0).is_err());
    }

    #[test]
    fn severity_zero_is_bit_exact_identity() {
        let x = image(8, 8, 1);
        for k in CorruptionKind::ALL {
            let p = Params::for_severity(k, 0).unwrap();
            assert!(p.is_identity(), "{k}");
            assert_eq!(apply(&x, 8, 8, &p, 3).unwrap(), x, "{k}");
            assert!(!Params::for_severity(k, 1).unwrap().is_identity(), "{k}");
        }
    }

    #[test]
    fn outputs_are_clamped_shaped_and_deterministic() {
        let x = image(12, 10, 2);
        for k in CorruptionKind::ALL {
            for s in 1..=5 {
                let spec = CorruptionSpec::new(k, s, 99).unwrap();
                let a = corrupt(&x, 12, 10, &spec).unwrap();
                assert_eq!(a.len(), x.len());
                assert!(a.iter().all(|v| (0.0..=1.0).contains(v)), "{k} {s}");
                assert_eq!(a, corrupt(&x, 12, 10, &spec).unwrap(), "{k} {s}");
            }
        }
    }

    #[test]
    fn brightness_adds_a_constant() {
        let x = image(4, 4, 3);
        let y = corrupt(
            &x,
            4,
            4,
            &CorruptionSpec::new(CorruptionKind::Brightness, 2, 0).unwrap(),
        )
        .unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(*b, (a + 0.2).clamp(0.0, 1.0));
        }
    }

    #[test]
    fn blurs_preserve_constant_images() {
        let x = vec![0.25f32; 6 * 6 * 3];
        for k in [
            CorruptionKind::GaussianBlur,
            CorruptionKind::DefocusBlur,
            CorruptionKind::MotionBlur,
        ] {
            let y = corrupt(&x, 6, 6, &CorruptionSpec::new(k, 5, 0).unwrap()).unwrap();
            assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-6), "{k}");
        }
    }

    #[test]
    fn motion_kernel_has_the_requested_taps() {
        let k = Kernel::line(5, 0.0);
        assert_eq!(k.radius, 2);
        let row: Vec<f64> = k.weights[2 * 5..3 * 5].to_vec();
        assert!(row.iter().all(|&w| (w - 0.2).abs() < 1e-12));
    }
}
