//! 8-bit PNG reading and writing for `3 x H x W` float images in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use stylefield_tensor::Tensor;

use crate::error::{Error, Result};

pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            other => Error::Image { path: path.to_path_buf(), source: other },
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

pub fn to_rgb8(image: &Tensor<f64>) -> Result<RgbImage> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::dimension(format!("expected a 3 x H x W image, got {:?}", image.shape())));
    };
    let d = image.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for c in 0..3 {
            buf.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, buf).expect("buffer size"))
}

pub fn save_png(path: impl AsRef<Path>, image: &Tensor<f64>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    to_rgb8(image)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Rows `y0..y0+size_y` and columns `x0..x0+size_x` of a `3 x H x W` image.
pub fn crop(image: &Tensor<f64>, x0: usize, y0: usize, size_x: usize, size_y: usize) -> Result<Tensor<f64>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::dimension(format!("expected a 3 x H x W image, got {:?}", image.shape())));
    };
    if x0 + size_x > w || y0 + size_y > h {
        return Err(Error::contract(format!(
            "crop {size_x}x{size_y} at ({x0}, {y0}) exceeds {w}x{h} image"
        )));
    }
    let d = image.data();
    Ok(Tensor::from_fn(vec![3, size_y, size_x], |i| {
        let (c, r, col) = (i / (size_x * size_y), (i / size_x) % size_y, i % size_x);
        d[c * h * w + (y0 + r) * w + x0 + col]
    }))
}

/// Per-channel mean of a `3 x H x W` image.
pub fn mean_color(image: &Tensor<f64>) -> [f64; 3] {
    let n = (image.len() / 3).max(1);
    let d = image.data();
    [0, 1, 2].map(|c| d[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(vec![3, 5, 7], |i| (i % 256) as f64 / 255.0);
        let path = dir.path().join("a/b.png");
        save_png(&path, &img).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
        let missing = load_png(dir.path().join("none.png")).unwrap_err();
        assert!(missing.to_string().contains("none.png"));
    }

    #[test]
    fn crop_picks_the_rectangle() {
        let img = Tensor::from_fn(vec![3, 4, 4], |i| i as f64);
        let c = crop(&img, 1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[9.0, 10.0, 13.0, 14.0, 25.0, 26.0, 29.0, 30.0, 41.0, 42.0, 45.0, 46.0]);
        assert!(crop(&img, 3, 0, 2, 2).is_err());
    }
}
