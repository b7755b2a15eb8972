//! PNG decode/encode to and from (3,H,W) tensors with values in [0,1].

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_image(path: &Path) -> Result<Tensor> {
    load_image_resized(path, None)
}

pub fn load_image_resized(path: &Path, size: Option<u32>) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let img = match size {
        Some(s) => img.resize_exact(s, s, image::imageops::FilterType::Triangle),
        None => img,
    };
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Clamp to [0,1] and quantize to 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("expected (3,H,W) image tensor, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let d = t.data();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let px = |c: usize| (d[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    Ok(img)
}

pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let img = tensor_to_rgb(t)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// Stack single-image tensors (C,H,W) into a batch (N,C,H,W).
pub fn stack_batch(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Input("cannot stack an empty batch".into()));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::Shape(format!(
                "batch images must share a shape: {:?} vs {:?}",
                shape,
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Ok(Tensor::from_vec(&full, data))
}

/// Slice one image (C,H,W) back out of a batch (N,C,H,W).
pub fn unstack_one(batch: &Tensor, i: usize) -> Tensor {
    let (n, c, h, w) = batch.expect_nchw("unstack_one").expect("nchw");
    assert!(i < n);
    let plane = c * h * w;
    Tensor::from_vec(&[c, h, w], batch.data()[i * plane..(i + 1) * plane].to_vec())
}

/// Upscale a single-channel map to (h, w) with bilinear interpolation.
pub fn bilinear_upscale(map: &[f64], mh: usize, mw: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(map.len(), mh * mw);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            // align-corners-free mapping
            let fy = ((y as f64 + 0.5) * mh as f64 / h as f64 - 0.5).clamp(0.0, mh as f64 - 1.0);
            let fx = ((x as f64 + 0.5) * mw as f64 / w as f64 - 0.5).clamp(0.0, mw as f64 - 1.0);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(mh - 1), (x0 + 1).min(mw - 1));
            let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
            let v00 = map[y0 * mw + x0];
            let v01 = map[y0 * mw + x1];
            let v10 = map[y1 * mw + x0];
            let v11 = map[y1 * mw + x1];
            out[y * w + x] = v00 * (1.0 - dy) * (1.0 - dx)
                + v01 * (1.0 - dy) * dx
                + v10 * dy * (1.0 - dx)
                + v11 * dy * dx;
        }
    }
    out
}

pub fn dynamic_to_tensor(img: &DynamicImage) -> Tensor {
    rgb_to_tensor(&img.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        // values on the 1/255 grid survive the round trip exactly
        let data: Vec<f64> = (0..3 * 4 * 4).map(|i| (i % 256) as f64 / 255.0).collect();
        let t = Tensor::from_vec(&[3, 4, 4], data);
        save_image(&path, &t).unwrap();
        let back = load_image(&path).unwrap();
        assert!(t.max_abs_diff(&back) < 1e-12);
    }

    #[test]
    fn stack_and_unstack() {
        let a = Tensor::full(&[3, 2, 2], 0.25);
        let b = Tensor::full(&[3, 2, 2], 0.75);
        let batch = stack_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 2, 2]);
        assert_eq!(unstack_one(&batch, 0), a);
        assert_eq!(unstack_one(&batch, 1), b);
    }

    #[test]
    fn bilinear_preserves_constant_maps() {
        let up = bilinear_upscale(&[0.5, 0.5, 0.5, 0.5], 2, 2, 8, 8);
        assert!(up.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}
