//! Samples, file formats, the synthetic scene generator and checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod pnm;
pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples from a `synth:…` spec or a manifest path, each with a file stem:
/// `synth00000`… for generated data, the RGB file stem for a manifest.
pub fn load_named(source: &str) -> Result<Vec<(String, DepthSample)>> {
    if source.starts_with("synth:") {
        let (seed, n, h, w) = synth::parse_spec(source)?;
        let samples = synth::synth_dataset(seed, n, h, w)?;
        return Ok(samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| (format!("synth{i:05}"), s))
            .collect());
    }
    let m = manifest::Manifest::load(Path::new(source))?;
    let stems = m.entries.iter().map(|(rgb, _)| {
        rgb.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Ok(stems.zip(m.load_samples()?).collect())
}

pub fn load_source(source: &str) -> Result<Vec<DepthSample>> {
    Ok(load_named(source)?.into_iter().map(|(_, s)| s).collect())
}

/// One RGB-D pair. `rgb` is row-major `H×W×3` in `[0, 1]`, `depth` is
/// `H×W` meters, `valid` marks pixels with `depth > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthSample {
    pub fn new(height: usize, width: usize, rgb: Vec<f32>, depth: Vec<f32>) -> Result<Self> {
        if rgb.len() != height * width * 3 || depth.len() != height * width {
            return Err(Error::dim(
                "depth_sample",
                &[height, width, rgb.len()],
                &[height, width, depth.len()],
            ));
        }
        let valid = depth.iter().map(|&d| d > 0.0).collect();
        Ok(Self {
            height,
            width,
            rgb,
            depth,
            valid,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// `[3, H, W]` planar copy of the image.
    pub fn rgb_planar(&self) -> Vec<f32> {
        let n = self.pixels();
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }

    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.height, self.width], self.rgb_planar()).expect("sizes checked at construction")
    }
}

/// A stacked minibatch: images `[N, 3, H, W]` plus flattened targets in
/// the same `n, y, x` order as the network output.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl Batch {
    pub fn stack(samples: &[DepthSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
        let mut depth = Vec::with_capacity(samples.len() * h * w);
        let mut valid = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if (s.height, s.width) != (h, w) {
                return Err(Error::dim("batch", &[h, w], &[s.height, s.width]));
            }
            images.extend(s.rgb_planar());
            depth.extend_from_slice(&s.depth);
            valid.extend_from_slice(&s.valid);
        }
        Ok(Self {
            images: Tensor::new(&[samples.len(), 3, h, w], images)?,
            depth,
            valid,
        })
    }
}
