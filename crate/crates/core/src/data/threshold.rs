use crate::error::{dim_err, Error, Result};
use crate::mask::ShadowMask;
use crate::tensor::Tensor;

/// Histogram resolution used by [`otsu_threshold`].
pub const OTSU_LEVELS: usize = 256;

/// Intensity drop, on the 8-bit scale, above which a video pixel is shadow.
pub const VIDEO_THRESHOLD: u32 = 40;

fn level(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

fn plane_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [1, h, w] | [h, w] => Ok((h, w)),
        ref s => Err(dim_err!("{what}: expected a single-channel image, got {:?}", s)),
    }
}

/// `value > threshold` marks shadow; a value equal to the threshold does not.
pub fn binarize_mask(gray: &Tensor, threshold: f64) -> Result<ShadowMask> {
    let (h, w) = plane_dims(gray, "binarize_mask")?;
    let values = gray.data().iter().map(|&v| (v > threshold) as u8).collect();
    ShadowMask::new(h, w, values)
}

/// Between-class variance score for splitting the histogram after level `t`.
///
/// Computed as `(n1·s0 − n0·s1)² / (n0·n1)` from integer counts and level
/// sums, which is proportional to `w0·w1·(μ0 − μ1)²`.
/// Between-class variance up to the constant factor `1/N²`, kept as the
/// exact fraction `num / den`.
#[derive(Clone, Copy)]
struct OtsuScore {
    num: u128,
    den: u128,
}

impl OtsuScore {
    fn new(n0: u64, s0: u64, n1: u64, s1: u64) -> Self {
        if n0 == 0 || n1 == 0 {
            return OtsuScore { num: 0, den: 1 };
        }
        let d = ((n1 as i128) * (s0 as i128) - (n0 as i128) * (s1 as i128)).unsigned_abs();
        OtsuScore {
            num: d * d,
            den: n0 as u128 * n1 as u128,
        }
    }

    fn exceeds(&self, other: &OtsuScore) -> bool {
        match (self.num.checked_mul(other.den), other.num.checked_mul(self.den)) {
            (Some(a), Some(b)) => a > b,
            _ => self.num as f64 / self.den as f64 > other.num as f64 / other.den as f64,
        }
    }
}

/// Otsu's threshold over a 256-bin histogram of values in `[0, 1]`.
///
/// Levels `0..=t` form the lower class, where `t` maximizes the between-class
/// variance (ties resolve to the lowest `t`). The returned value
/// `(t + 0.5) / 255` sits between level `t` and `t + 1`, so
/// [`binarize_mask`] reproduces the split exactly. When only one level is
/// occupied there is nothing to split; the mean value is returned and a
/// warning is logged.
pub fn otsu_threshold(diff: &Tensor) -> Result<f64> {
    if diff.numel() == 0 {
        return Err(Error::Contract("otsu_threshold on an empty image".into()));
    }
    let mut hist = [0u64; OTSU_LEVELS];
    for &v in diff.data() {
        hist[level(v)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        let mean = diff.data().iter().sum::<f64>() / diff.numel() as f64;
        log::warn!("otsu_threshold: degenerate histogram, returning the constant {mean}");
        return Ok(mean);
    }
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(l, &c)| l as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best = (0usize, OtsuScore { num: 0, den: 1 });
    for (t, &c) in hist.iter().enumerate().take(OTSU_LEVELS - 1) {
        n0 += c;
        s0 += t as u64 * c;
        let score = OtsuScore::new(n0, s0, n - n0, s - s0);
        if t == 0 || score.exceeds(&best.1) {
            best = (t, score);
        }
    }
    Ok((best.0 as f64 + 0.5) / 255.0)
}

fn channel_sums(image: &Tensor, what: &str) -> Result<(usize, usize, Vec<u32>)> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        ref s => return Err(dim_err!("{what}: expected 1×H×W or 3×H×W, got {:?}", s)),
    };
    let plane = h * w;
    let d = image.data();
    let sums = (0..plane)
        .map(|p| (0..c).map(|ch| level(d[ch * plane + p]) as u32).sum::<u32>() * (3 / c as u32))
        .collect();
    Ok((h, w, sums))
}

/// Shadow wherever `reference` is brighter than `frame` by more than 40 on
/// the 8-bit scale, with intensity the unweighted channel mean.
///
/// Inputs are `[0, 1]` images; values are quantized to 8 bits first so the
/// comparison is exact integer arithmetic.
pub fn video_region_split(frame: &Tensor, reference: &Tensor) -> Result<ShadowMask> {
    if frame.shape() != reference.shape() {
        return Err(dim_err!(
            "video_region_split: {:?} vs {:?}",
            frame.shape(),
            reference.shape()
        ));
    }
    let (h, w, f) = channel_sums(frame, "video_region_split")?;
    let (_, _, r) = channel_sums(reference, "video_region_split")?;
    let values = f
        .iter()
        .zip(&r)
        .map(|(&f, &r)| (r as i64 - f as i64 > 3 * VIDEO_THRESHOLD as i64) as u8)
        .collect();
    ShadowMask::new(h, w, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_examples() {
        let hi = Tensor::full(vec![1, 2, 3], 0.9);
        assert_eq!(binarize_mask(&hi, 0.5).unwrap().shadow_count(), 6);
        let lo = Tensor::full(vec![2, 3], 0.1);
        assert_eq!(binarize_mask(&lo, 0.5).unwrap().shadow_count(), 0);
        let eq = Tensor::full(vec![1, 2, 3], 0.5);
        assert_eq!(binarize_mask(&eq, 0.5).unwrap().shadow_count(), 0);
    }

    #[test]
    fn otsu_bimodal() {
        let t = Tensor::from_fn(vec![1, 4, 4], |i| if i % 2 == 0 { 0.1 } else { 0.9 });
        let th = otsu_threshold(&t).unwrap();
        assert!(th > 0.1 && th < 0.9, "{th}");
        assert_eq!(binarize_mask(&t, th).unwrap().shadow_count(), 8);
    }

    #[test]
    fn otsu_constant_returns_value() {
        let t = Tensor::full(vec![1, 3, 3], 0.3);
        assert!((otsu_threshold(&t).unwrap() - 0.3).abs() < 1e-15);
        assert!(otsu_threshold(&Tensor::zeros(vec![1, 0, 0])).is_err());
    }

    #[test]
    fn video_split_examples() {
        let reference = Tensor::full(vec![3, 2, 2], 200.0 / 255.0);
        assert_eq!(video_region_split(&reference, &reference).unwrap().shadow_count(), 0);
        let dark50 = Tensor::full(vec![3, 2, 2], 150.0 / 255.0);
        assert_eq!(video_region_split(&dark50, &reference).unwrap().shadow_count(), 4);
        let dark40 = Tensor::full(vec![3, 2, 2], 160.0 / 255.0);
        assert_eq!(video_region_split(&dark40, &reference).unwrap().shadow_count(), 0);
        assert!(video_region_split(&Tensor::zeros(vec![3, 2, 3]), &reference).is_err());
    }
}
