//! Synthetic triplets with exactly known ground truth: a smooth textured
//! background darkened inside a random polygon.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Triplet;
use crate::error::{Error, Result};
use crate::mask::ShadowMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticShadowSpec {
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    /// Range of the multiplicative darkening factor.
    pub attenuation: [f64; 2],
    /// Largest per-channel deviation of the darkening, mimicking a color cast.
    pub tint: f64,
    /// Allowed polygon area as a fraction of the image.
    pub area: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticShadowSpec {
    fn default() -> Self {
        SyntheticShadowSpec {
            height: 64,
            width: 64,
            samples: 4,
            attenuation: [0.3, 0.7],
            tint: 0.1,
            area: [0.05, 0.6],
            seed: 0,
        }
    }
}

impl SyntheticShadowSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.attenuation;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "attenuation range must lie in (0, 1], got {:?}",
                self.attenuation
            )));
        }
        if !(0.0..1.0).contains(&self.tint) || (1.0 - lo) * (1.0 + self.tint) >= 1.0 {
            return Err(Error::Config(format!(
                "tint {} is too strong for attenuation {lo}",
                self.tint
            )));
        }
        let [alo, ahi] = self.area;
        if !(alo > 0.0 && alo <= ahi && ahi < 1.0) {
            return Err(Error::Config(format!("bad area range {:?}", self.area)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("images must be at least 8×8".into()));
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let base: f64 = rng.random_range(0.4..0.85);
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(0.02..0.08),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let v = waves
                    .iter()
                    .map(|[amp, fy, fx, ph]| amp * (fy * y as f64 + fx * x as f64 + ph).sin())
                    .sum::<f64>();
                data[(c * h + y) * w + x] = quantize(base + v);
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("dimensions")
}

fn inside(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// Rasterizes random star-shaped polygons until one covers an allowed area.
fn polygon_mask(rng: &mut ChaCha8Rng, spec: &SyntheticShadowSpec) -> Result<ShadowMask> {
    let (h, w) = (spec.height, spec.width);
    let total = (h * w) as f64;
    for _ in 0..1000 {
        let n = rng.random_range(5..10);
        let cx = rng.random_range(0.2..0.8) * w as f64;
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let scale = rng.random_range(0.15..0.6) * h.min(w) as f64;
        let offset = rng.random_range(0.0..std::f64::consts::TAU);
        let poly: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let a = offset + std::f64::consts::TAU * i as f64 / n as f64;
                let r = scale * rng.random_range(0.5..1.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let mut m = ShadowMask::filled(h, w, false);
        for y in 0..h {
            for x in 0..w {
                if inside(&poly, x as f64 + 0.5, y as f64 + 0.5) {
                    m.set(y, x, true);
                }
            }
        }
        let frac = m.shadow_count() as f64 / total;
        if frac >= spec.area[0] && frac <= spec.area[1] {
            return Ok(m);
        }
    }
    Err(Error::Config(format!(
        "no polygon with area in {:?} after 1000 draws",
        spec.area
    )))
}

/// Sample `index` of the set; independent of how many others are drawn.
pub fn sample(spec: &SyntheticShadowSpec, index: usize) -> Result<Triplet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let gt = background(&mut rng, h, w);
    let mask = polygon_mask(&mut rng, spec)?;
    let [lo, hi] = spec.attenuation;
    let a = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let factors: Vec<f64> = (0..3)
        .map(|_| {
            let tint = if spec.tint > 0.0 {
                rng.random_range(-spec.tint..spec.tint)
            } else {
                0.0
            };
            1.0 - (1.0 - a) * (1.0 + tint)
        })
        .collect();
    let plane = h * w;
    let mut shadow = gt.clone();
    for (p, &m) in mask.values().iter().enumerate() {
        if m == 1 {
            for (c, f) in factors.iter().enumerate() {
                let v = &mut shadow.data_mut()[c * plane + p];
                *v = quantize(*v * f);
            }
        }
    }
    Triplet::new(format!("{index:04}"), shadow, gt, mask)
}

pub fn generate(spec: &SyntheticShadowSpec) -> Result<Vec<Triplet>> {
    (0..spec.samples).map(|i| sample(spec, i)).collect()
}

/// Writes the set in the standard dataset layout under `root`.
pub fn write_dataset(spec: &SyntheticShadowSpec, root: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let set = generate(spec)?;
    for t in &set {
        t.save(root.as_ref())?;
    }
    Ok(set)
}
