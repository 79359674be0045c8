//! Evaluation metrics: text-image directional similarity, PSNR and a
//! depth-reprojection consistency error between two views.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use stylefield_tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::stylize::rgb_to_hsv;
use crate::io::Scene;
use crate::nerf::camera::{norm, sub};
use crate::nerf::{render_view, Camera, RadianceField, RenderedView, SampleOptions};

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>().sqrt(), b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if !(na > 1e-12 && nb > 1e-12) {
        return Err(Error::Degenerate("zero-norm difference vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn difference(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dimension(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    Ok(b.iter().zip(a).map(|(y, x)| y - x).collect())
}

/// Cosine between the image-embedding change and the text-embedding change
/// of a stylization.
pub fn clip_tids(src_image: &[f64], style_image: &[f64], src_text: &[f64], style_text: &[f64]) -> Result<f64> {
    let di = difference(src_image, style_image)?;
    let dt = difference(src_text, style_text)?;
    if di.len() != dt.len() {
        return Err(Error::dimension(format!(
            "image embeddings have {} dims, text embeddings {}",
            di.len(),
            dt.len()
        )));
    }
    cosine(&di, &dt)
}

/// Image and text encoder pair with a shared embedding space.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &Tensor<f64>) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Deterministic stand-in encoder.
///
/// An image maps to its per-channel means over the whole frame and over each
/// quadrant (15 values). Text maps to a registered vector, or to a Gaussian
/// vector seeded by the SHA-256 of the string.
#[derive(Clone, Debug, Default)]
pub struct SyntheticEmbedder {
    texts: Vec<(String, Vec<f64>)>,
}

impl SyntheticEmbedder {
    pub const DIM: usize = 15;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_text(mut self, text: &str, embedding: Vec<f64>) -> Result<Self> {
        if embedding.len() != Self::DIM {
            return Err(Error::dimension(format!("text embedding needs {} dims", Self::DIM)));
        }
        self.texts.push((text.to_string(), embedding));
        Ok(self)
    }

    /// Embedding direction of a uniform color change `delta`.
    pub fn color_direction(delta: [f64; 3]) -> Vec<f64> {
        (0..5).flat_map(|_| delta).collect()
    }
}

impl EmbeddingProvider for SyntheticEmbedder {
    fn dim(&self) -> usize {
        Self::DIM
    }

    fn embed_image(&self, image: &Tensor<f64>) -> Result<Vec<f64>> {
        let &[3, h, w] = image.shape() else {
            return Err(Error::dimension(format!("expected a 3 x H x W image, got {:?}", image.shape())));
        };
        if h < 2 || w < 2 {
            return Err(Error::dimension("image must be at least 2x2"));
        }
        let d = image.data();
        let mean = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| -> [f64; 3] {
            let n = (rows.len() * cols.len()) as f64;
            [0, 1, 2].map(|c| {
                let mut s = 0.0;
                for r in rows.clone() {
                    s += d[c * h * w + r * w + cols.start..c * h * w + r * w + cols.end].iter().sum::<f64>();
                }
                s / n
            })
        };
        let (hh, hw) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(Self::DIM);
        out.extend(mean(0..h, 0..w));
        for (rows, cols) in [(0..hh, 0..hw), (0..hh, hw..w), (hh..h, 0..hw), (hh..h, hw..w)] {
            out.extend(mean(rows, cols));
        }
        Ok(out)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        if let Some((_, v)) = self.texts.iter().find(|(t, _)| t == text) {
            return Ok(v.clone());
        }
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..Self::DIM).map(|_| StandardNormal.sample(&mut rng)).collect())
    }
}

/// CLIP-TIDS of a stylized image against its source under `provider`.
pub fn clip_tids_images(
    provider: &dyn EmbeddingProvider,
    source: &Tensor<f64>,
    stylized: &Tensor<f64>,
    source_text: &str,
    style_text: &str,
) -> Result<f64> {
    clip_tids(
        &provider.embed_image(source)?,
        &provider.embed_image(stylized)?,
        &provider.embed_text(source_text)?,
        &provider.embed_text(style_text)?,
    )
}

/// Directional consistency: mean cosine between the stylization change
/// `E(stylized_i) - E(source_i)` of temporally adjacent frames.
pub fn clip_dc(provider: &dyn EmbeddingProvider, source: &[Tensor<f64>], stylized: &[Tensor<f64>]) -> Result<f64> {
    if source.len() != stylized.len() {
        return Err(Error::dimension(format!(
            "{} source frames but {} stylized frames",
            source.len(),
            stylized.len()
        )));
    }
    if source.len() < 2 {
        return Err(Error::contract("directional consistency needs at least two frames"));
    }
    let deltas = source
        .iter()
        .zip(stylized)
        .map(|(s, t)| difference(&provider.embed_image(s)?, &provider.embed_image(t)?))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for pair in deltas.windows(2) {
        total += cosine(&pair[0], &pair[1])?;
    }
    Ok(total / (deltas.len() - 1) as f64)
}

/// Reported when the two images are identical.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!("images {:?} and {:?} differ in shape", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::dimension("empty images"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Circular mean hue in degrees over pixels with saturation and value of at
/// least `min_saturation`; `None` when no pixel qualifies.
pub fn mean_hue(image: &Tensor<f64>, min_saturation: f64) -> Result<Option<f64>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::dimension(format!("expected a 3 x H x W image, got {:?}", image.shape())));
    };
    let n = h * w;
    let d = image.data();
    let (mut x, mut y, mut count) = (0.0, 0.0, 0usize);
    for p in 0..n {
        let (hue, sat, value) = rgb_to_hsv([d[p], d[n + p], d[2 * n + p]]);
        if sat >= min_saturation && value >= min_saturation {
            let a = hue.to_radians();
            x += a.cos();
            y += a.sin();
            count += 1;
        }
    }
    if count == 0 || x.hypot(y) < 1e-9 * count as f64 {
        return Ok(None);
    }
    Ok(Some(y.atan2(x).to_degrees().rem_euclid(360.0)))
}

/// Signed smallest rotation taking hue `from` to hue `to`, in `(-180, 180]`.
pub fn hue_difference(from: f64, to: f64) -> f64 {
    let d = (to - from).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Anything that renders color and ray-distance depth for a camera.
pub trait ViewRenderer {
    fn render_view(&self, camera: &Camera) -> Result<RenderedView>;
}

/// A radiance field with its sampling settings.
pub struct FieldRenderer<'a> {
    pub field: &'a RadianceField<f32>,
    pub options: SampleOptions,
    pub background: [f64; 3],
}

impl ViewRenderer for FieldRenderer<'_> {
    fn render_view(&self, camera: &Camera) -> Result<RenderedView> {
        render_view(self.field, camera, &self.options, self.background)
    }
}

/// Analytic ray tracing; background pixels get zero accumulation.
impl ViewRenderer for Scene {
    fn render_view(&self, camera: &Camera) -> Result<RenderedView> {
        let (rgb, hits) = self.render(camera);
        Ok(RenderedView {
            rgb,
            depth: hits.iter().map(|h| h.unwrap_or(0.0)).collect(),
            accumulation: hits.iter().map(|h| if h.is_some() { 1.0 } else { 0.0 }).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpError {
    /// Mean squared color difference over valid pixels; `None` when no
    /// pixel is valid.
    pub mse: Option<f64>,
    pub valid_fraction: f64,
    pub valid_pixels: usize,
}

/// Occlusion threshold used when none is given: 1% of the scene scale.
pub fn default_tau(scene_scale: f64) -> f64 {
    0.01 * scene_scale
}

/// Pixels with less accumulated opacity count as background.
const OPAQUE: f64 = 0.5;
/// Sampling positions this close to the frame edge are snapped inside.
const EDGE_SLACK: f64 = 1e-6;

/// Bilinear lookup at continuous pixel coordinates `(x, y)` measured from
/// pixel centres, or `None` outside the frame.
fn bilinear(values: impl Fn(usize) -> f64, w: usize, h: usize, x: f64, y: f64) -> Option<f64> {
    let clampish = |v: f64, hi: usize| {
        if v < -EDGE_SLACK || v > (hi - 1) as f64 + EDGE_SLACK {
            None
        } else {
            Some(v.clamp(0.0, (hi - 1) as f64))
        }
    };
    let (x, y) = (clampish(x, w)?, clampish(y, h)?);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |c: usize, r: usize| values(r * w + c);
    Some(
        (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0))
            + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1)),
    )
}

/// Renders both views, lifts every opaque pixel of `a` to 3-D with its
/// depth, reprojects it into `b`, and compares colors where `b` sees the
/// same surface (ray distances agree within `tau`).
pub fn depth_warp_error(renderer: &dyn ViewRenderer, camera_a: &Camera, camera_b: &Camera, tau: f64) -> Result<WarpError> {
    let ra = renderer.render_view(camera_a)?;
    let rb = renderer.render_view(camera_b)?;
    let (wa, ha) = (camera_a.width(), camera_a.height());
    let (wb, hb) = (camera_b.width(), camera_b.height());
    let (na, nb) = (wa * ha, wb * hb);
    let ob = camera_b.origin();
    let mut valid = 0usize;
    let mut total = 0.0;
    for row in 0..ha {
        for col in 0..wa {
            let p = row * wa + col;
            if ra.accumulation[p] < OPAQUE {
                continue;
            }
            let point = camera_a.pixel_ray(col, row)?.at(ra.depth[p]);
            let Some((u, v, _)) = camera_b.project(point) else {
                continue;
            };
            let (x, y) = (u - 0.5, v - 0.5);
            let Some(acc) = bilinear(|i| rb.accumulation[i], wb, hb, x, y) else {
                continue;
            };
            if acc < OPAQUE {
                continue;
            }
            let depth_b = bilinear(|i| rb.depth[i], wb, hb, x, y).expect("inside");
            if (depth_b - norm(sub(point, ob))).abs() > tau {
                continue;
            }
            let mut err = 0.0;
            for c in 0..3 {
                let cb = bilinear(|i| rb.rgb.data()[c * nb + i], wb, hb, x, y).expect("inside");
                err += (ra.rgb.data()[c * na + p] - cb).powi(2);
            }
            total += err / 3.0;
            valid += 1;
        }
    }
    Ok(WarpError {
        mse: (valid > 0).then(|| total / valid as f64),
        valid_fraction: valid as f64 / na as f64,
        valid_pixels: valid,
    })
}

/// One line of a metrics report: `metric<TAB>scene<TAB>value<TAB>config_hash`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub metric: String,
    pub scene: String,
    pub value: f64,
    pub config_hash: String,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.metric, self.scene, self.value, self.config_hash)
    }
}

impl FromStr for MetricRecord {
    type Err = Error;
    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        let [metric, scene, value, hash] = fields[..] else {
            return Err(Error::contract(format!("metric record needs 4 tab-separated fields: {line:?}")));
        };
        Ok(Self {
            metric: metric.to_string(),
            scene: scene.to_string(),
            value: value
                .parse()
                .map_err(|_| Error::contract(format!("bad metric value {value:?}")))?,
            config_hash: hash.to_string(),
        })
    }
}

pub fn format_records(records: &[MetricRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

pub fn parse_records(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_reference_values() {
        let a = Tensor::full(vec![3, 2, 2], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let zeros = Tensor::zeros(vec![3, 2, 2]);
        let ones = Tensor::ones(vec![3, 2, 2]);
        assert!(psnr(&zeros, &ones).unwrap().abs() < 1e-12);
        assert!(psnr(&zeros, &Tensor::zeros(vec![3, 2, 3])).is_err());
    }

    #[test]
    fn degenerate_difference_is_an_error() {
        let e = clip_tids(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0], &[1.0, 0.0]);
        assert!(matches!(e, Err(Error::Degenerate(_))));
        assert!(clip_tids(&[0.0], &[1.0], &[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn records_round_trip() {
        let r = MetricRecord {
            metric: "psnr".into(),
            scene: "h_000".into(),
            value: 27.123456789,
            config_hash: "0123456789abcdef".into(),
        };
        let text = format_records(&[r.clone(), r.clone()]);
        assert_eq!(parse_records(&text).unwrap(), vec![r.clone(), r]);
        assert!("psnr\tx\t1.0".parse::<MetricRecord>().is_err());
    }

    #[test]
    fn hue_statistics() {
        let img = Tensor::from_fn(vec![3, 1, 2], |i| [1.0, 1.0, 0.0, 0.0, 0.0, 1.0][i]);
        // red and magenta average to a hue of 330 across the wrap
        let h = mean_hue(&img, 0.1).unwrap().unwrap();
        assert!((h - 330.0).abs() < 1e-9, "{h}");
        assert!(mean_hue(&Tensor::full(vec![3, 2, 2], 0.5), 0.1).unwrap().is_none());
        assert_eq!(hue_difference(350.0, 10.0), 20.0);
        assert_eq!(hue_difference(10.0, 350.0), -20.0);
    }

    #[test]
    fn synthetic_embedding_is_deterministic() {
        let e = SyntheticEmbedder::new();
        assert_eq!(e.embed_text("ink wash").unwrap(), e.embed_text("ink wash").unwrap());
        assert_ne!(e.embed_text("ink wash").unwrap(), e.embed_text("oil").unwrap());
        let img = Tensor::from_fn(vec![3, 4, 4], |i| (i % 5) as f64 / 4.0);
        assert_eq!(e.embed_image(&img).unwrap().len(), SyntheticEmbedder::DIM);
    }
}
