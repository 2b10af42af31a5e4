//! 8-bit PNG images as `1×C×H×W` tensors in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads a PNG as `channels` (1 or 3) planes, `v / 255`.
pub fn load_png(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes = match channels {
        3 => img.into_rgb8().into_raw(),
        1 => img.into_luma8().into_raw(),
        c => return Err(image_err(path, format!("{c}-channel images are not supported"))),
    };
    let shape = Shape4::new(1, channels, h, w)?;
    Ok(Tensor::from_fn(shape, |_, c, y, x| {
        bytes[(y * w + x) * channels + c] as f32 / 255.0
    }))
}

/// Clips to `[0, 1]` and rounds to 8 bits.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first image of the batch as an 8-bit PNG.
pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    let (w, h) = (s.w as u32, s.h as u32);
    let img = match s.c {
        3 => {
            let mut raw = Vec::with_capacity(3 * s.h * s.w);
            for i in 0..s.h * s.w {
                for c in 0..3 {
                    raw.push(quantize(t.at(0, c, i / s.w, i % s.w)));
                }
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer size"))
        }
        1 => {
            let raw = (0..s.h * s.w).map(|i| quantize(t.at(0, 0, i / s.w, i % s.w))).collect();
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("buffer size"))
        }
        c => return Err(image_err(path, format!("cannot write a {c}-channel image"))),
    };
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e.to_string()))
}

/// `*.png` files of a directory in name order.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
