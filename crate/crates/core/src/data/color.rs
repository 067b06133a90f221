//! sRGB ↔ CIELAB under the D65 white point.

use std::sync::OnceLock;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const DELTA: f64 = 6.0 / 29.0;

fn xyz_to_rgb() -> &'static [[f64; 3]; 3] {
    static INV: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    INV.get_or_init(|| invert3(&RGB_TO_XYZ))
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r: usize, c: usize| {
        let (r0, r1) = ((r + 1) % 3, (r + 2) % 3);
        let (c0, c1) = ((c + 1) % 3, (c + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    let det: f64 = (0..3).map(|c| m[0][c] * cof(0, c)).sum();
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = cof(c, r) / det;
        }
    }
    out
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(u: f64) -> f64 {
    if u > DELTA {
        u.powi(3)
    } else {
        3.0 * DELTA * DELTA * (u - 4.0 / 29.0)
    }
}

pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut f = [0.0; 3];
    for (i, fi) in f.iter_mut().enumerate() {
        let xyz: f64 = (0..3).map(|j| RGB_TO_XYZ[i][j] * lin[j]).sum();
        *fi = lab_f(xyz / WHITE[i]);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    let xyz: Vec<f64> = (0..3).map(|i| lab_f_inv(f[i]) * WHITE[i]).collect();
    let m = xyz_to_rgb();
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = linear_to_srgb((0..3).map(|j| m[i][j] * xyz[j]).sum());
    }
    out
}

fn map_pixels(image: &Tensor, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Tensor> {
    let plane = match *image.shape() {
        [3, h, w] => h * w,
        ref s => return Err(dim_err!("expected a 3×H×W image, got {:?}", s)),
    };
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..plane {
        let v = f([d[p], d[plane + p], d[2 * plane + p]]);
        for c in 0..3 {
            out[c * plane + p] = v[c];
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Converts a `3×H×W` sRGB image in `[0, 1]` to `L, a, b` planes.
pub fn rgb_to_lab(image: &Tensor) -> Result<Tensor> {
    map_pixels(image, rgb_to_lab_pixel)
}

pub fn lab_to_rgb(image: &Tensor) -> Result<Tensor> {
    map_pixels(image, lab_to_rgb_pixel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        let w = rgb_to_lab_pixel([1.0, 1.0, 1.0]);
        assert!((w[0] - 100.0).abs() < 1e-4, "{w:?}");
        assert!(w[1].abs() < 0.01 && w[2].abs() < 0.01);
        assert_eq!(rgb_to_lab_pixel([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn mid_gray_matches_scalar_formula() {
        // Independent scalar route: for a neutral gray Y equals the linear value.
        let y: f64 = ((0.5 + 0.055) / 1.055f64).powf(2.4);
        let expect_l = 116.0 * y.cbrt() - 16.0;
        let g = rgb_to_lab_pixel([0.5, 0.5, 0.5]);
        assert!((g[0] - expect_l).abs() < 1e-4, "{g:?} vs {expect_l}");
        assert!((g[0] - 53.389).abs() < 1e-2);
        assert!(g[1].abs() < 0.01 && g[2].abs() < 0.01);
    }

    #[test]
    fn inverse_matrix() {
        let inv = xyz_to_rgb();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| RGB_TO_XYZ[i][k] * inv[k][j]).sum();
                assert!((v - (i == j) as u8 as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_on_a_grid() {
        let steps = [0.0, 0.01, 0.04, 0.2, 0.5, 0.77, 1.0];
        for &r in &steps {
            for &g in &steps {
                for &b in &steps {
                    let back = lab_to_rgb_pixel(rgb_to_lab_pixel([r, g, b]));
                    for (x, y) in back.iter().zip([r, g, b]) {
                        assert!((x - y).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
