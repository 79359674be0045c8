//! Ray sampling and differentiable volume rendering.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stylefield_tensor::{Element, Function, Tape, Tensor, Var};

use super::camera::{Camera, Ray, Vec3};
use super::field::RadianceField;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
    pub stratified: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            near: 0.1,
            far: 10.0,
            samples: 64,
            stratified: true,
        }
    }
}

impl SampleOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::contract(format!(
                "need 0 < near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        if self.samples < 2 {
            return Err(Error::contract("at least two samples per ray are required"));
        }
        Ok(())
    }
}

/// Sample positions of a batch of rays, ray-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub rays: usize,
    pub per_ray: usize,
    pub near: f64,
    pub far: f64,
    /// Distances along each ray, strictly increasing per ray.
    pub t: Vec<f64>,
    /// `t_{k+1} - t_k`, with `far` closing the last interval.
    pub delta: Vec<f64>,
}

impl RaySamples {
    /// One sample per uniform bin: jittered when `stratified`, at the bin
    /// centre otherwise.
    pub fn draw(rays: usize, opts: &SampleOptions, rng: &mut impl Rng) -> Result<Self> {
        opts.validate()?;
        let k = opts.samples;
        let bin = (opts.far - opts.near) / k as f64;
        let mut t = Vec::with_capacity(rays * k);
        for _ in 0..rays {
            for i in 0..k {
                let u = if opts.stratified { rng.random::<f64>() } else { 0.5 };
                t.push(opts.near + (i as f64 + u) * bin);
            }
        }
        Ok(Self::from_t(rays, k, opts.near, opts.far, t))
    }

    /// Wraps explicit sample distances; each ray's list must increase and
    /// stay below `far`.
    pub fn from_t(rays: usize, per_ray: usize, near: f64, far: f64, t: Vec<f64>) -> Self {
        let mut delta = Vec::with_capacity(t.len());
        for ray in t.chunks(per_ray) {
            for k in 0..per_ray {
                let next = if k + 1 < per_ray { ray[k + 1] } else { far };
                delta.push(next - ray[k]);
            }
        }
        Self { rays, per_ray, near, far, t, delta }
    }

    fn tensor<T: Element>(&self, values: impl Iterator<Item = f64>) -> Tensor<T> {
        let data = values.map(T::from_f64_lossy).collect();
        Tensor::new(vec![self.rays, self.per_ray], data).expect("sample shape")
    }

    pub fn delta_tensor<T: Element>(&self) -> Tensor<T> {
        self.tensor(self.delta.iter().copied())
    }

    /// Interval midpoints and widths in `[0, 1]` ray coordinates, as used by
    /// the distortion penalty.
    pub fn normalized_intervals<T: Element>(&self) -> (Tensor<T>, Tensor<T>) {
        let span = self.far - self.near;
        let mids = self
            .t
            .iter()
            .zip(&self.delta)
            .map(|(t, d)| (t + 0.5 * d - self.near) / span);
        let widths = self.delta.iter().map(|d| d / span);
        (self.tensor(mids), self.tensor(widths))
    }
}

fn rows<T: Element>(op: &str, x: &Tensor<T>) -> Result<(usize, usize)> {
    match *x.shape() {
        [r, k] => Ok((r, k)),
        _ => Err(Error::dimension(format!("{op} expects a rays x samples matrix, got {:?}", x.shape()))),
    }
}

/// `w_k = T_k (1 - exp(-sigma_k delta_k))` with
/// `T_k = exp(-sum_{j<k} sigma_j delta_j)`, per row.
pub fn volume_weights<'t, T: Element>(sigma: Var<'t, T>, delta: &Tensor<T>) -> Result<Var<'t, T>> {
    let s = sigma.value();
    let (r, k) = rows("volume_weights", &s)?;
    if delta.shape() != s.shape() {
        return Err(Error::dimension(format!(
            "sigma {:?} vs delta {:?}",
            s.shape(),
            delta.shape()
        )));
    }
    let mut w = vec![T::zero(); r * k];
    for ray in 0..r {
        let mut acc = T::zero();
        for i in ray * k..(ray + 1) * k {
            let od = s.data()[i] * delta.data()[i];
            w[i] = (-acc).exp() * (T::one() - (-od).exp());
            acc = acc + od;
        }
    }
    let out = Tensor::new(vec![r, k], w)?;
    Ok(sigma.tape().record(VolumeWeights { delta: delta.clone() }, &[sigma], out))
}

struct VolumeWeights<T> {
    delta: Tensor<T>,
}

impl<T: Element> Function<T> for VolumeWeights<T> {
    fn name(&self) -> &'static str {
        "volume_weights"
    }

    // dL/dsigma_j = delta_j (T_{j+1} g_j - sum_{k>j} w_k g_k)
    fn backward(&self, inputs: &[&Tensor<T>], w: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = inputs[0];
        let (r, k) = (s.shape()[0], s.shape()[1]);
        let (sd, dd, wd, gd) = (s.data(), self.delta.data(), w.data(), g.data());
        let mut out = vec![T::zero(); r * k];
        let mut trans_next = vec![T::zero(); k];
        for ray in 0..r {
            let base = ray * k;
            let mut acc = T::zero();
            for j in 0..k {
                acc = acc + sd[base + j] * dd[base + j];
                trans_next[j] = (-acc).exp();
            }
            let mut tail = T::zero();
            for j in (0..k).rev() {
                let i = base + j;
                out[i] = dd[i] * (trans_next[j] * gd[i] - tail);
                tail = tail + wd[i] * gd[i];
            }
        }
        vec![Some(Tensor::new(vec![r, k], out).expect("shape"))]
    }
}

/// `C = sum_k w_k c_k + (1 - sum_k w_k) background`, with `rgb` laid out as
/// `rays x (samples * 3)`.
pub fn composite<'t, T: Element>(weights: Var<'t, T>, rgb: Var<'t, T>, background: [f64; 3]) -> Result<Var<'t, T>> {
    let (w, c) = (weights.value(), rgb.value());
    let (r, k) = rows("composite", &w)?;
    if c.shape() != [r, 3 * k] {
        return Err(Error::dimension(format!(
            "composite: weights {:?} need colors [{r}, {}], got {:?}",
            w.shape(),
            3 * k,
            c.shape()
        )));
    }
    let bg = background.map(T::from_f64_lossy);
    let mut out = vec![T::zero(); r * 3];
    for ray in 0..r {
        let mut acc = T::zero();
        let mut col = [T::zero(); 3];
        for j in 0..k {
            let wj = w.data()[ray * k + j];
            acc = acc + wj;
            for ch in 0..3 {
                col[ch] = col[ch] + wj * c.data()[ray * 3 * k + 3 * j + ch];
            }
        }
        for ch in 0..3 {
            out[ray * 3 + ch] = col[ch] + (T::one() - acc) * bg[ch];
        }
    }
    let out = Tensor::new(vec![r, 3], out)?;
    Ok(weights.tape().record(Composite { bg }, &[weights, rgb], out))
}

struct Composite<T> {
    bg: [T; 3],
}

impl<T: Element> Function<T> for Composite<T> {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (w, c) = (inputs[0], inputs[1]);
        let (r, k) = (w.shape()[0], w.shape()[1]);
        let gw = needs[0].then(|| {
            let mut out = vec![T::zero(); r * k];
            for ray in 0..r {
                let gr = &g.data()[ray * 3..ray * 3 + 3];
                for j in 0..k {
                    let cj = &c.data()[ray * 3 * k + 3 * j..ray * 3 * k + 3 * j + 3];
                    out[ray * k + j] = (0..3).fold(T::zero(), |a, ch| a + gr[ch] * (cj[ch] - self.bg[ch]));
                }
            }
            Tensor::new(vec![r, k], out).expect("shape")
        });
        let gc = needs[1].then(|| {
            let mut out = vec![T::zero(); r * 3 * k];
            for ray in 0..r {
                for j in 0..k {
                    let wj = w.data()[ray * k + j];
                    for ch in 0..3 {
                        out[ray * 3 * k + 3 * j + ch] = wj * g.data()[ray * 3 + ch];
                    }
                }
            }
            Tensor::new(vec![r, 3 * k], out).expect("shape")
        });
        vec![gw, gc]
    }
}

/// Mean over rays of `sum_{i,j} w_i w_j |m_i - m_j| + (1/3) sum_i w_i^2 d_i`
/// on normalized interval midpoints `m` and widths `d`.
pub fn distortion<'t, T: Element>(weights: Var<'t, T>, mids: &Tensor<T>, widths: &Tensor<T>) -> Result<Var<'t, T>> {
    let w = weights.value();
    let (r, k) = rows("distortion", &w)?;
    if mids.shape() != w.shape() || widths.shape() != w.shape() {
        return Err(Error::dimension("distortion: weights, midpoints and widths must share a shape"));
    }
    let third = T::from_f64_lossy(1.0 / 3.0);
    let mut total = T::zero();
    for ray in 0..r {
        let range = ray * k..(ray + 1) * k;
        let (wr, mr, dr) = (&w.data()[range.clone()], &mids.data()[range.clone()], &widths.data()[range]);
        let pair = pairwise_pull(wr, mr);
        for j in 0..k {
            total = total + wr[j] * pair[j] + third * wr[j] * wr[j] * dr[j];
        }
    }
    let value = total / T::from_usize(r.max(1)).expect("ray count");
    let out = Tensor::scalar(value);
    let op = Distortion {
        mids: mids.clone(),
        widths: widths.clone(),
    };
    Ok(weights.tape().record(op, &[weights], out))
}

/// `sum_j w_j |m_i - m_j|` for every `i`, in O(K) using that midpoints
/// increase along the ray.
fn pairwise_pull<T: Element>(w: &[T], m: &[T]) -> Vec<T> {
    let k = w.len();
    let total_w: T = w.iter().copied().sum();
    let total_wm: T = w.iter().zip(m).map(|(&a, &b)| a * b).sum();
    let mut out = Vec::with_capacity(k);
    let (mut below_w, mut below_wm) = (T::zero(), T::zero());
    for i in 0..k {
        let above_w = total_w - below_w - w[i];
        let above_wm = total_wm - below_wm - w[i] * m[i];
        out.push(m[i] * below_w - below_wm + above_wm - m[i] * above_w);
        below_w = below_w + w[i];
        below_wm = below_wm + w[i] * m[i];
    }
    out
}

struct Distortion<T> {
    mids: Tensor<T>,
    widths: Tensor<T>,
}

impl<T: Element> Function<T> for Distortion<T> {
    fn name(&self) -> &'static str {
        "distortion"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let w = inputs[0];
        let (r, k) = (w.shape()[0], w.shape()[1]);
        let scale = g.item() / T::from_usize(r.max(1)).expect("ray count");
        let two = T::from_f64_lossy(2.0);
        let two_thirds = T::from_f64_lossy(2.0 / 3.0);
        let mut out = Vec::with_capacity(r * k);
        for ray in 0..r {
            let range = ray * k..(ray + 1) * k;
            let (wr, mr, dr) = (&w.data()[range.clone()], &self.mids.data()[range.clone()], &self.widths.data()[range]);
            let pair = pairwise_pull(wr, mr);
            for j in 0..k {
                out.push(scale * (two * pair[j] + two_thirds * wr[j] * dr[j]));
            }
        }
        vec![Some(Tensor::new(vec![r, k], out).expect("shape"))]
    }
}

/// Differentiable render of a ray batch.
pub struct RenderOutput<'t, T: Element> {
    /// `rays x 3`
    pub color: Var<'t, T>,
    /// `rays x samples`
    pub weights: Var<'t, T>,
    pub samples: RaySamples,
}

impl<'t, T: Element> RenderOutput<'t, T> {
    /// Sum of weights per ray.
    pub fn accumulation(&self) -> Vec<f64> {
        let w = self.weights.value();
        w.data()
            .chunks(self.samples.per_ray)
            .map(|row| row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum())
            .collect()
    }

    /// `sum_k w_k t_k / max(sum_k w_k, eps)` per ray.
    pub fn depth(&self) -> Vec<f64> {
        let w = self.weights.value();
        w.data()
            .chunks(self.samples.per_ray)
            .zip(self.samples.t.chunks(self.samples.per_ray))
            .map(|(wr, tr)| {
                let (mut num, mut den) = (0.0, 0.0);
                for (wv, t) in wr.iter().zip(tr) {
                    let wv = wv.to_f64().unwrap_or(f64::NAN);
                    num += wv * t;
                    den += wv;
                }
                num / den.max(1e-10)
            })
            .collect()
    }

    /// Distortion penalty of this render.
    pub fn distortion(&self) -> Result<Var<'t, T>> {
        let (m, d) = self.samples.normalized_intervals();
        distortion(self.weights, &m, &d)
    }
}

/// Renders `rays` through the bound field `vars`.
pub fn render_rays<'t, T: Element>(
    field: &RadianceField<T>,
    vars: &[Var<'t, T>],
    rays: &[Ray],
    opts: &SampleOptions,
    background: [f64; 3],
    rng: &mut impl Rng,
) -> Result<RenderOutput<'t, T>> {
    if rays.is_empty() {
        return Err(Error::contract("no rays to render"));
    }
    let samples = RaySamples::draw(rays.len(), opts, rng)?;
    let k = samples.per_ray;
    let mut points: Vec<Vec3> = Vec::with_capacity(rays.len() * k);
    let mut dirs: Vec<Vec3> = Vec::with_capacity(rays.len() * k);
    for (ray, ts) in rays.iter().zip(samples.t.chunks(k)) {
        for &t in ts {
            points.push(ray.at(t));
            dirs.push(ray.dir);
        }
    }
    let (rgb, sigma) = field.forward(vars, &points, &dirs)?;
    let sigma = sigma.reshape(vec![rays.len(), k])?;
    let rgb = rgb.reshape(vec![rays.len(), 3 * k])?;
    let weights = volume_weights(sigma, &samples.delta_tensor())?;
    let color = composite(weights, rgb, background)?;
    Ok(RenderOutput { color, weights, samples })
}

/// Single-ray convenience wrapper around [`render_rays`].
pub fn render_ray<'t, T: Element>(
    field: &RadianceField<T>,
    vars: &[Var<'t, T>],
    ray: Ray,
    opts: &SampleOptions,
    background: [f64; 3],
    rng: &mut impl Rng,
) -> Result<RenderOutput<'t, T>> {
    render_rays(field, vars, &[ray], opts, background, rng)
}

/// Color, depth and accumulated opacity of a full frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    /// `3 x H x W` in `[0, 1]`.
    pub rgb: Tensor<f64>,
    /// Row-major per-pixel expected distance along the ray.
    pub depth: Vec<f64>,
    pub accumulation: Vec<f64>,
}

const RENDER_CHUNK: usize = 2048;

/// Renders rays without recording gradients; deterministic when
/// `opts.stratified` is false.
pub fn render_batch<T: Element>(
    field: &RadianceField<T>,
    rays: &[Ray],
    opts: &SampleOptions,
    background: [f64; 3],
    rng: &mut impl Rng,
) -> Result<(Vec<[f64; 3]>, Vec<f64>, Vec<f64>)> {
    let _fp = stylefield_tensor::fpenv::FlushDenormals::new();
    let mut colors = Vec::with_capacity(rays.len());
    let mut depth = Vec::with_capacity(rays.len());
    let mut acc = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(RENDER_CHUNK) {
        let tape = Tape::new();
        let vars = field.bind(&tape, false);
        let out = render_rays(field, &vars, chunk, opts, background, rng)?;
        let c = out.color.value();
        colors.extend(c.data().chunks(3).map(|p| {
            [0, 1, 2].map(|i| p[i].to_f64().unwrap_or(f64::NAN))
        }));
        depth.extend(out.depth());
        acc.extend(out.accumulation());
    }
    Ok((colors, depth, acc))
}

/// Full-frame render of `camera` with deterministic (bin-centre) sampling.
pub fn render_view<T: Element>(
    field: &RadianceField<T>,
    camera: &Camera,
    opts: &SampleOptions,
    background: [f64; 3],
) -> Result<RenderedView> {
    let opts = SampleOptions { stratified: false, ..*opts };
    let rays = camera.all_rays();
    // bin-centre sampling never draws from the generator
    let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let (colors, depth, accumulation) = render_batch(field, &rays, &opts, background, &mut unused)?;
    let (h, w) = (camera.height(), camera.width());
    let rgb = Tensor::from_fn(vec![3, h, w], |i| colors[i % (h * w)][i / (h * w)]);
    Ok(RenderedView { rgb, depth, accumulation })
}
