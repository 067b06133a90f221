use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::color::rgb_to_lab;
use crate::error::{dim_err, Result};
use crate::mask::ShadowMask;
use crate::tensor::Tensor;

/// A metric value that may be infinite, serialized as `"inf"` in that case.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Metric(pub f64);

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str(if self.0 > 0.0 { "inf" } else { "-inf" })
        } else {
            match f.precision() {
                Some(p) => write!(f, "{:.*}", p, self.0),
                None => write!(f, "{}", self.0),
            }
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Metric(v)),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(Metric(f64::INFINITY)),
                "-inf" => Ok(Metric(f64::NEG_INFINITY)),
                "nan" => Ok(Metric(f64::NAN)),
                _ => Err(serde::de::Error::custom(format!("bad metric value {t:?}"))),
            },
        }
    }
}

/// Mean absolute LAB error per region. An empty region has no value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub shadow_mae: Option<f64>,
    pub nonshadow_mae: Option<f64>,
    pub all_mae: f64,
    pub shadow_pixels: usize,
    pub nonshadow_pixels: usize,
}

fn image_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(dim_err!("{what}: expected a 3×H×W image, got {:?}", s)),
    }
}

/// Region-wise MAE of `pred` against `gt` in CIELAB.
///
/// Each region averages `|Δ|` over its pixels and all three channels.
/// `all_mae` is the pixel-count-weighted combination of the two regions,
/// which is the mean over every pixel of the image.
pub fn region_mae(pred: &Tensor, gt: &Tensor, mask: &ShadowMask) -> Result<RegionMetrics> {
    let (h, w) = image_dims(pred, "region_mae")?;
    if gt.shape() != pred.shape() || (mask.height(), mask.width()) != (h, w) {
        return Err(dim_err!(
            "region_mae: pred {:?}, gt {:?}, mask {}×{}",
            pred.shape(),
            gt.shape(),
            mask.height(),
            mask.width()
        ));
    }
    let (p, g) = (rgb_to_lab(pred)?, rgb_to_lab(gt)?);
    let plane = h * w;
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (px, &m) in mask.values().iter().enumerate() {
        let r = m as usize;
        counts[r] += 1;
        for c in 0..3 {
            let i = c * plane + px;
            sums[r] += (p.data()[i] - g.data()[i]).abs();
        }
    }
    let mae = |r: usize| (counts[r] > 0).then(|| sums[r] / (3 * counts[r]) as f64);
    let (nonshadow_mae, shadow_mae) = (mae(0), mae(1));
    let weighted = counts[1] as f64 * shadow_mae.unwrap_or(0.0)
        + counts[0] as f64 * nonshadow_mae.unwrap_or(0.0);
    let all_mae = if plane == 0 { 0.0 } else { weighted / plane as f64 };
    Ok(RegionMetrics {
        shadow_mae,
        nonshadow_mae,
        all_mae,
        shadow_pixels: counts[1],
        nonshadow_pixels: counts[0],
    })
}

/// Peak-1 PSNR over all RGB values; identical images give `+∞`.
pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<Metric> {
    if pred.shape() != gt.shape() || pred.numel() == 0 {
        return Err(dim_err!("psnr: {:?} vs {:?}", pred.shape(), gt.shape()));
    }
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.numel() as f64;
    Ok(Metric(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-region Gaussian filter of one plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5) over the
/// valid region, averaged over the three channels.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w) = image_dims(pred, "ssim")?;
    if gt.shape() != pred.shape() {
        return Err(dim_err!("ssim: {:?} vs {:?}", pred.shape(), gt.shape()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"));
    }
    let k = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let x = &pred.data()[c * plane..(c + 1) * plane];
        let y = &gt.data()[c * plane..(c + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let (mx, my) = (filter(x, h, w, &k), filter(y, h, w, &k));
        let (sxx, syy, sxy) = (filter(&xx, h, w, &k), filter(&yy, h, w, &k), filter(&xy, h, w, &k));
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::lab_to_rgb;

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(vec![3, h, w], |i| 0.2 + 0.6 * ((i as f64) * 0.13).sin().abs())
    }

    fn half_mask(h: usize, w: usize) -> ShadowMask {
        let mut m = ShadowMask::filled(h, w, false);
        for y in 0..h / 2 {
            for x in 0..w {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn identical_images() {
        let a = image(12, 12);
        let m = half_mask(12, 12);
        let r = region_mae(&a, &a, &m).unwrap();
        assert_eq!((r.shadow_mae, r.nonshadow_mae, r.all_mae), (Some(0.0), Some(0.0), 0.0));
        assert_eq!(psnr(&a, &a).unwrap().0, f64::INFINITY);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn lightness_shift_on_shadow_region() {
        let gt = image(8, 8);
        let m = half_mask(8, 8);
        let delta = 4.0;
        let mut lab = rgb_to_lab(&gt).unwrap();
        for (i, &v) in m.values().iter().enumerate() {
            if v == 1 {
                lab.data_mut()[i] += delta;
            }
        }
        let pred = lab_to_rgb(&lab).unwrap();
        let r = region_mae(&pred, &gt, &m).unwrap();
        assert!((r.shadow_mae.unwrap() - delta / 3.0).abs() < 1e-9);
        assert!(r.nonshadow_mae.unwrap() < 1e-9);
    }

    #[test]
    fn empty_shadow_region() {
        let a = image(4, 4);
        let b = Tensor::from_fn(vec![3, 4, 4], |i| a.data()[i] * 0.5);
        let r = region_mae(&a, &b, &ShadowMask::filled(4, 4, false)).unwrap();
        assert_eq!(r.shadow_mae, None);
        assert_eq!(r.shadow_pixels, 0);
        assert_eq!(Some(r.all_mae), r.nonshadow_mae);
    }

    #[test]
    fn psnr_constant_offset() {
        let gt = Tensor::from_fn(vec![3, 5, 5], |i| 0.8 * ((i as f64) * 0.3).cos().abs());
        let pred = Tensor::from_fn(vec![3, 5, 5], |i| gt.data()[i] + 0.1);
        assert!((psnr(&pred, &gt).unwrap().0 - 20.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_drops_for_inverted_structure() {
        let a = image(16, 16);
        let b = Tensor::from_fn(vec![3, 16, 16], |i| 1.0 - a.data()[i]);
        assert!(ssim(&a, &b).unwrap() < 1.0);
        assert!(ssim(&image(8, 8), &image(8, 8)).is_err());
    }

    #[test]
    fn metric_serializes_infinity() {
        let s = serde_json::to_string(&Metric(f64::INFINITY)).unwrap();
        assert_eq!(s, "\"inf\"");
        let back: Metric = serde_json::from_str(&s).unwrap();
        assert_eq!(back.0, f64::INFINITY);
        let v: Metric = serde_json::from_str("20.5").unwrap();
        assert_eq!(v.0, 20.5);
    }
}
