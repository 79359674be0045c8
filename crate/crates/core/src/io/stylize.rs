//! Deterministic per-pixel "styles" standing in for generated stylized
//! views, so fine-tuning can be exercised offline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use stylefield_tensor::Tensor;

use super::image::save_png;
use super::manifest::{Dataset, Manifest};
use crate::error::{Error, Result};

/// Hue in degrees, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let hue = if d <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let sat = if max > 0.0 { d / max } else { 0.0 };
    (hue, sat, max)
}

pub fn hsv_to_rgb(hue: f64, sat: f64, value: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = value * sat;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let m = value - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StyleTransform {
    /// Rotate the HSV hue by the given degrees.
    HueRotate(f64),
    /// Quantize every channel to `2^k` evenly spaced levels.
    Posterize(u32),
    /// `v -> v^gamma` per channel.
    ToneCurve(f64),
    /// Blend every pixel towards a color: `(1 - s) v + s c`.
    Tint([f64; 3], f64),
}

impl StyleTransform {
    pub fn apply_pixel(&self, rgb: [f64; 3]) -> [f64; 3] {
        match *self {
            Self::HueRotate(deg) => {
                let (h, s, v) = rgb_to_hsv(rgb);
                hsv_to_rgb(h + deg, s, v)
            }
            Self::Posterize(k) => {
                let steps = ((1u64 << k) - 1).max(1) as f64;
                rgb.map(|v| (v.clamp(0.0, 1.0) * steps).round() / steps)
            }
            Self::ToneCurve(gamma) => rgb.map(|v| v.clamp(0.0, 1.0).powf(gamma)),
            Self::Tint(c, s) => [0, 1, 2].map(|i| (1.0 - s) * rgb[i] + s * c[i]),
        }
    }

    pub fn apply(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        let &[3, h, w] = image.shape() else {
            return Err(Error::dimension(format!("expected a 3 x H x W image, got {:?}", image.shape())));
        };
        let n = h * w;
        let d = image.data();
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            let px = self.apply_pixel([d[p], d[n + p], d[2 * n + p]]);
            for c in 0..3 {
                out[c * n + p] = px[c];
            }
        }
        Ok(Tensor::new(vec![3, h, w], out)?)
    }
}

/// `hue:DEG`, `posterize:K`, `tone:GAMMA` or `tint:R,G,B,STRENGTH`.
impl FromStr for StyleTransform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::contract(format!("cannot parse style transform {s:?}"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = arg
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        match (kind, nums.as_slice()) {
            ("hue", &[deg]) => Ok(Self::HueRotate(deg)),
            ("posterize", &[k]) if k >= 1.0 && k.fract() == 0.0 && k <= 16.0 => Ok(Self::Posterize(k as u32)),
            ("tone", &[g]) if g > 0.0 => Ok(Self::ToneCurve(g)),
            ("tint", &[r, g, b, st]) if (0.0..=1.0).contains(&st) => Ok(Self::Tint([r, g, b], st)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for StyleTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::HueRotate(d) => write!(f, "hue:{d}"),
            Self::Posterize(k) => write!(f, "posterize:{k}"),
            Self::ToneCurve(g) => write!(f, "tone:{g}"),
            Self::Tint(c, s) => write!(f, "tint:{},{},{},{s}", c[0], c[1], c[2]),
        }
    }
}

/// Applies `transform` to every view and writes the result, with the same
/// frames and poses, to `out`.
pub fn stylize_dataset(dataset: &Dataset, transform: StyleTransform, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    let mut manifest = dataset.manifest.clone();
    manifest.stylized_dir = None;
    for (frame, view) in manifest.frames.iter().zip(&dataset.views) {
        save_png(out.join(&frame.file_path), &transform.apply(&view.image)?)?;
    }
    manifest.write(out)?;
    Ok(manifest)
}
