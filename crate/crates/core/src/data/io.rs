use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{dim_err, Error, Result};
use crate::mask::ShadowMask;
use crate::tensor::Tensor;

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, result: image::ImageResult<()>) -> Result<()> {
    result.map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Decodes an 8-bit PNG into a `3×H×W` tensor in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let rgb = read_png(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let plane = h * w;
    let data = (0..3 * plane)
        .map(|i| {
            let (c, p) = (i / plane, i % plane);
            raw[p * 3 + c] as f64 / 255.0
        })
        .collect();
    Tensor::new(vec![3, h, w], data)
}

/// Single-channel decode, `1×H×W` in `[0, 1]`.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let g = read_png(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let data = g.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Writes a `3×H×W` tensor as an RGB PNG; values are clamped to `[0, 1]`.
pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(dim_err!("save_image: expected 3×H×W, got {:?}", s)),
    };
    let plane = h * w;
    let d = image.data();
    let mut raw = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            raw.push(to_byte(d[c * plane + p]));
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    write_png(path, img.save_with_format(path, ImageFormat::Png))
}

/// Writes a `1×H×W` (or `H×W`) tensor as a grayscale PNG.
pub fn save_gray(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        ref s => return Err(dim_err!("save_gray: expected 1×H×W, got {:?}", s)),
    };
    let raw = image.data().iter().map(|&v| to_byte(v)).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    write_png(path, img.save_with_format(path, ImageFormat::Png))
}

pub fn mask_to_gray(mask: &ShadowMask) -> Tensor {
    Tensor::new(vec![1, mask.height(), mask.width()], mask.to_f64()).expect("mask dimensions")
}

/// Reads a mask image; pixels brighter than mid-gray are shadow.
pub fn load_mask(path: impl AsRef<Path>) -> Result<ShadowMask> {
    gray_to_mask(&load_gray(path)?)
}

pub fn gray_to_mask(gray: &Tensor) -> Result<ShadowMask> {
    super::binarize_mask(gray, 0.5)
}

/// Shadow pixels are written as 255, the rest as 0.
pub fn save_mask(path: impl AsRef<Path>, mask: &ShadowMask) -> Result<()> {
    save_gray(path, &mask_to_gray(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("white.png");
        save_image(&p, &Tensor::full(vec![3, 4, 5], 1.0)).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.shape(), &[3, 4, 5]);
        assert!(t.data().iter().all(|&v| v == 1.0));

        save_image(&p, &Tensor::zeros(vec![3, 4, 5])).unwrap();
        assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = Tensor::from_fn(vec![3, 6, 7], |i| ((i as f64) * 0.731).sin().abs());
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mut m = ShadowMask::filled(3, 4, false);
        m.set(1, 2, true);
        m.set(0, 0, true);
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_image("/definitely/not/here.png").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.png"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
    }
}
