//! Depth error metrics and the scale-invariant log loss.

use std::fmt::Write as _;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar value of the scale-invariant log loss (see [`Tape::silog`]).
pub fn silog_loss(pred: &[f32], gt: &[f32], valid: &[bool], lambda: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(&[pred.len()], pred.to_vec())?);
    let l = tape.silog(p, gt, valid, lambda)?;
    tape.value(l).item()
}

/// Pixel rectangle: columns `[l, l+w)`, rows `[u, u+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub l: usize,
    pub u: usize,
    pub w: usize,
    pub h: usize,
}

impl std::str::FromStr for Crop {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("crop must be l,u,w,h: '{s}'")))?;
        match v[..] {
            [l, u, w, h] => Ok(Self { l, u, w, h }),
            _ => Err(Error::Config(format!("crop must be l,u,w,h: '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub min_depth: f32,
    pub max_depth: f32,
    pub crop: Option<Crop>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_depth: 1e-3,
            max_depth: 10.0,
            crop: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub n_pixels: usize,
}

/// `%g`-style formatting with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

impl MetricsReport {
    /// Column order of the main results table, then the two extra columns.
    pub fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
            ("abs_rel", self.abs_rel),
            ("rmse", self.rmse),
            ("log10", self.log10),
            ("sq_rel", self.sq_rel),
            ("rmse_log", self.rmse_log),
        ]
    }

    /// One `name=value` line per metric.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={}", sig6(v));
        }
        let _ = writeln!(s, "n_pixels={}", self.n_pixels);
        s
    }

    /// Tab-separated `name=value` pairs on a single line.
    pub fn summary(&self) -> String {
        let mut parts: Vec<String> = self.fields().iter().map(|(k, v)| format!("{k}={}", sig6(*v))).collect();
        parts.push(format!("n_pixels={}", self.n_pixels));
        parts.join("\t")
    }
}

/// Metrics of one `height × width` prediction against ground truth.
/// Predictions are clamped to `[min_depth, max_depth]`; pixels with gt
/// outside `(min_depth, max_depth]` or outside the crop are skipped.
pub fn compute_metrics(
    pred: &[f32],
    gt: &[f32],
    height: usize,
    width: usize,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if pred.len() != gt.len() || pred.len() != height * width {
        return Err(Error::dim("compute_metrics", &[pred.len()], &[gt.len(), height, width]));
    }
    let crop = cfg.crop.unwrap_or(Crop {
        l: 0,
        u: 0,
        w: width,
        h: height,
    });
    if crop.l + crop.w > width || crop.u + crop.h > height {
        return Err(Error::Geometry(format!("crop {crop:?} outside {height}x{width}")));
    }
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut log10) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    let mut n = 0usize;
    for y in crop.u..crop.u + crop.h {
        for x in crop.l..crop.l + crop.w {
            let i = y * width + x;
            let g = gt[i] as f64;
            if !(gt[i] > cfg.min_depth && gt[i] <= cfg.max_depth) {
                continue;
            }
            let p = pred[i].clamp(cfg.min_depth, cfg.max_depth) as f64;
            let ratio = (g / p).max(p / g);
            if ratio < 1.25 {
                d1 += 1;
            }
            if ratio < 1.25 * 1.25 {
                d2 += 1;
            }
            if ratio < 1.25 * 1.25 * 1.25 {
                d3 += 1;
            }
            let diff = g - p;
            abs_rel += diff.abs() / g;
            sq_rel += diff * diff / g;
            sq += diff * diff;
            let dl = g.ln() - p.ln();
            sq_log += dl * dl;
            log10 += (g.log10() - p.log10()).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Contract("no valid pixels to evaluate".into()));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        log10: log10 / nf,
        n_pixels: n,
    })
}

/// Unweighted per-image mean; `n_pixels` is the total.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Contract("aggregate of zero reports".into()));
    }
    let k = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    Ok(MetricsReport {
        delta1: mean(|r| r.delta1),
        delta2: mean(|r| r.delta2),
        delta3: mean(|r| r.delta3),
        abs_rel: mean(|r| r.abs_rel),
        sq_rel: mean(|r| r.sq_rel),
        rmse: mean(|r| r.rmse),
        rmse_log: mean(|r| r.rmse_log),
        log10: mean(|r| r.log10),
        n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
    })
}
