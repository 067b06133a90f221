use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Binary per-pixel region map: 1 = shadow, 0 = non-shadow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl ShadowMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(dim_err!(
                "mask {height}×{width} needs {} values, got {}",
                height * width,
                values.len()
            ));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("mask value {v} is not binary")));
        }
        Ok(ShadowMask {
            height,
            width,
            values,
        })
    }

    /// Accepts only exact 0.0 / 1.0 entries.
    pub fn from_f64(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let vals = values
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(0u8),
                v if v == 1.0 => Ok(1u8),
                v => Err(Error::Contract(format!("mask value {v} is not binary"))),
            })
            .collect::<Result<Vec<_>>>()?;
        ShadowMask::new(height, width, vals)
    }

    pub fn filled(height: usize, width: usize, shadow: bool) -> Self {
        ShadowMask {
            height,
            width,
            values: vec![shadow as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, shadow: bool) {
        self.values[y * self.width + x] = shadow as u8;
    }

    pub fn shadow_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Row-major flattening as 0.0 / 1.0.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Shrinks the mask by `factor`; a cell is shadow if any source pixel is.
    pub fn downsample(&self, factor: usize) -> Result<ShadowMask> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(dim_err!(
                "mask {}×{} is not divisible by {factor}",
                self.height,
                self.width
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = ShadowMask::filled(h, w, false);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out.set(y / factor, x / factor, true);
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> ShadowMask {
        let mut out = self.clone();
        for y in 0..self.height {
            out.values[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ShadowMask> {
        if top + height > self.height || left + width > self.width {
            return Err(dim_err!("crop exceeds {}×{} mask", self.height, self.width));
        }
        let mut values = Vec::with_capacity(height * width);
        for y in top..top + height {
            values.extend_from_slice(&self.values[y * self.width + left..y * self.width + left + width]);
        }
        Ok(ShadowMask {
            height,
            width,
            values,
        })
    }
}

/// Free-function form of [`ShadowMask::downsample`].
pub fn downsample_mask(mask: &ShadowMask, factor: usize) -> Result<ShadowMask> {
    mask.downsample(factor)
}
