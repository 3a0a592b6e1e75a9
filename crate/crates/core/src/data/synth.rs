//! Synthetic RGB-D scenes: tilted planes over a background plane,
//! z-buffered, attenuated by haze (surfaces fade toward a bright airlight
//! with distance) and textured with a pattern whose on-screen period
//! shrinks as `1/depth`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::INPUT_MULTIPLE;
use crate::data::DepthSample;
use crate::error::{Error, Result};

pub const MIN_DEPTH: f32 = 0.5;
pub const MAX_DEPTH: f32 = 9.5;

/// Per-meter extinction of the transmission `t = exp(-k·d)`.
const ATTENUATION: f64 = 0.12;
const AIRLIGHT: f64 = 0.9;
const ALBEDO_SCALE: f64 = 0.5;
const TEXTURE: f64 = 0.015;
/// On-screen texture period at 1 m, as a fraction of the image width.
const TEXTURE_PERIOD: f64 = 0.3;
const TEXTURE_CONTRAST: f64 = 0.4;

/// `d(x, y) = d0 + gx·(x − cx) + gy·(y − cy)` on normalized coordinates,
/// visible inside an axis-aligned ellipse (or everywhere for the background).
#[derive(Clone, Debug)]
pub struct Plane {
    pub d0: f64,
    pub gx: f64,
    pub gy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Ellipse radii; `None` covers the whole image.
    pub radii: Option<(f64, f64)>,
    /// Sums to 3 so that mean brightness depends on depth alone.
    pub albedo: [f64; 3],
}

impl Plane {
    pub fn covers(&self, x: f64, y: f64) -> bool {
        match self.radii {
            None => true,
            Some((rx, ry)) => ((x - self.cx) / rx).powi(2) + ((y - self.cy) / ry).powi(2) <= 1.0,
        }
    }

    pub fn depth_at(&self, x: f64, y: f64) -> f64 {
        self.d0 + self.gx * (x - self.cx) + self.gy * (y - self.cy)
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    /// `planes[0]` is the background.
    pub planes: Vec<Plane>,
}

fn albedo<R: Rng>(rng: &mut R) -> [f64; 3] {
    let e: [f64; 3] = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ];
    let mean = (e[0] + e[1] + e[2]) / 3.0;
    [0, 1, 2].map(|c| 1.0 + 0.3 * (e[c] - mean))
}

impl Scene {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        // gradients are bounded so every plane stays within (0.5, 9.5)
        let mut planes = vec![Plane {
            d0: rng.gen_range(6.5..8.0),
            gx: rng.gen_range(-0.4..0.4),
            gy: rng.gen_range(-0.8..-0.2),
            cx: 0.5,
            cy: 0.5,
            radii: None,
            albedo: albedo(rng),
        }];
        for _ in 0..rng.gen_range(3..=6) {
            planes.push(Plane {
                d0: rng.gen_range(1.5..6.0),
                gx: rng.gen_range(-0.4..0.4),
                gy: rng.gen_range(-0.4..0.4),
                cx: rng.gen_range(0.0..1.0),
                cy: rng.gen_range(0.0..1.0),
                radii: Some((rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4))),
                albedo: albedo(rng),
            });
        }
        Self { planes }
    }

    /// Index of the nearest covering plane and its depth.
    pub fn hit(&self, x: f64, y: f64) -> (usize, f64) {
        let mut best = (0, self.planes[0].depth_at(x, y));
        for (i, p) in self.planes.iter().enumerate().skip(1) {
            if p.covers(x, y) {
                let d = p.depth_at(x, y);
                if d < best.1 {
                    best = (i, d);
                }
            }
        }
        best
    }

    pub fn render<R: Rng>(&self, height: usize, width: usize, rng: &mut R) -> DepthSample {
        let mut rgb = Vec::with_capacity(height * width * 3);
        let mut depth = Vec::with_capacity(height * width);
        for py in 0..height {
            for px in 0..width {
                let (x, y) = pixel_center(px, width, py, height);
                let (i, d) = self.hit(x, y);
                let t = (-ATTENUATION * d).exp();
                // perspective: the pattern is fixed on the surface, so it
                // repeats faster the farther away the surface is
                let k = std::f64::consts::TAU * d / TEXTURE_PERIOD;
                let aspect = height as f64 / width as f64;
                let pattern = 1.0 + TEXTURE_CONTRAST * (k * x).sin() * (k * y * aspect).sin();
                for c in 0..3 {
                    let noise = rng.gen_range(-TEXTURE..TEXTURE);
                    let surface = ALBEDO_SCALE * self.planes[i].albedo[c] * pattern;
                    let v = (surface * t + AIRLIGHT * (1.0 - t) + noise).clamp(0.0, 1.0);
                    rgb.push(v as f32);
                }
                depth.push(d as f32);
            }
        }
        DepthSample::new(height, width, rgb, depth).expect("sizes match by construction")
    }
}

pub fn pixel_center(px: usize, width: usize, py: usize, height: usize) -> (f64, f64) {
    ((px as f64 + 0.5) / width as f64, (py as f64 + 0.5) / height as f64)
}

/// `n` scenes of `height × width`, deterministic in `seed`.
pub fn synth_dataset(seed: u64, n: usize, height: usize, width: usize) -> Result<Vec<DepthSample>> {
    if height == 0 || width == 0 || !height.is_multiple_of(INPUT_MULTIPLE) || !width.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Geometry(format!(
            "synthetic size {height}x{width} is not a multiple of {INPUT_MULTIPLE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| Scene::random(&mut rng).render(height, width, &mut rng))
        .collect())
}

/// Parses `synth:seed=7,n=256,H=64,W=64` (keys optional, positional
/// `synth:7,256,64,64` also accepted).
pub fn parse_spec(spec: &str) -> Result<(u64, usize, usize, usize)> {
    let body = spec
        .strip_prefix("synth:")
        .ok_or_else(|| Error::Config(format!("not a synth spec: '{spec}'")))?;
    let parts: Vec<&str> = body.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!("synth spec needs seed,n,H,W: '{spec}'")));
    }
    let mut vals = [0u64; 4];
    for (i, (part, key)) in parts.iter().zip(["seed", "n", "H", "W"]).enumerate() {
        let v = match part.split_once('=') {
            Some((k, v)) if k.trim() == key => v,
            Some(_) => return Err(Error::Config(format!("synth spec field {} must be {key}", i + 1))),
            None => part,
        };
        vals[i] = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad {key} in synth spec: '{v}'")))?;
    }
    Ok((vals[0], vals[1] as usize, vals[2] as usize, vals[3] as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = synth_dataset(3, 4, 32, 64).unwrap();
        let b = synth_dataset(3, 4, 32, 64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(4, 4, 32, 64).unwrap());
        for s in &a {
            assert!(s.depth.iter().all(|&d| d > MIN_DEPTH && d < MAX_DEPTH));
            assert!(s.rgb.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.valid.iter().all(|&v| v));
        }
        assert!(synth_dataset(0, 1, 48, 64).is_err());
    }

    #[test]
    fn visible_surface_is_the_nearest_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let scene = Scene::random(&mut rng);
            let s = scene.render(32, 32, &mut rng);
            for py in 0..32 {
                for px in 0..32 {
                    let (x, y) = pixel_center(px, 32, py, 32);
                    let nearest = scene
                        .planes
                        .iter()
                        .filter(|p| p.covers(x, y))
                        .map(|p| p.depth_at(x, y))
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!(s.depth[py * 32 + px], nearest as f32);
                }
            }
        }
    }

    #[test]
    fn spec_strings() {
        assert_eq!(parse_spec("synth:seed=7,n=256,H=64,W=96").unwrap(), (7, 256, 64, 96));
        assert_eq!(parse_spec("synth:1,2,32,32").unwrap(), (1, 2, 32, 32));
        assert!(parse_spec("synth:n=7,seed=256,H=64,W=96").is_err());
        assert!(parse_spec("data.tsv").is_err());
    }
}
