//! Feature-distribution style losses.
//!
//! The sliced Wasserstein loss projects every feature vector of a layer onto
//! random unit directions, sorts the projected scalars of the render and of
//! the target, and averages the squared differences of the sorted lists.
//! Sorting makes the one-dimensional transport exact, so the loss compares
//! whole feature distributions rather than just their second moments as the
//! Gram baseline does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stylefield_tensor::{Element, Tensor, Var};

use crate::error::{Error, Result};
use crate::vgg::{FeatureMaps, VggStack};

/// Default number of random directions per layer and step.
pub const DEFAULT_PROJECTIONS: usize = 64;

/// Per-layer `P x N_l` matrices of unit-norm directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet<T> {
    pub layers: Vec<Tensor<T>>,
    pub seed: Option<u64>,
}

impl<T: Element> ProjectionSet<T> {
    pub fn seeded(dims: &[usize], count: usize, seed: u64) -> Result<Self> {
        let mut set = sample_projections(dims, count, &mut ChaCha8Rng::seed_from_u64(seed))?;
        set.seed = Some(seed);
        Ok(set)
    }
}

/// Draws `count` isotropic directions per layer as normalized Gaussian
/// vectors.
pub fn sample_projections<T: Element>(
    dims: &[usize],
    count: usize,
    rng: &mut impl Rng,
) -> Result<ProjectionSet<T>> {
    if count == 0 {
        return Err(Error::contract("at least one projection per layer is required"));
    }
    let mut layers = Vec::with_capacity(dims.len());
    for (l, &n) in dims.iter().enumerate() {
        if n == 0 {
            return Err(Error::dimension(format!("layer {l} has zero feature channels")));
        }
        let mut data = Vec::with_capacity(count * n);
        for _ in 0..count {
            let row: Vec<f64> = loop {
                let row: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                if row.iter().map(|v| v * v).sum::<f64>() > 1e-24 {
                    break row;
                }
            };
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| T::from_f64_lossy(v / norm)));
        }
        layers.push(Tensor::new(vec![count, n], data)?);
    }
    Ok(ProjectionSet { layers, seed: None })
}

/// Squared 1-D Wasserstein-2 distance between two equally sized empirical
/// distributions: `mean((sort(p) - sort(q))^2)`.
pub fn sw1d<'t, T: Element>(p: Var<'t, T>, q: Var<'t, T>) -> Result<Var<'t, T>> {
    let (ps, qs) = (p.shape(), q.shape());
    if ps.len() != 1 || qs.len() != 1 {
        return Err(Error::dimension(format!("sw1d expects 1-D inputs, got {ps:?} and {qs:?}")));
    }
    if ps[0] == 0 {
        return Err(Error::contract("sw1d of empty inputs"));
    }
    if ps != qs {
        return Err(Error::dimension(format!("sw1d length mismatch: {} vs {}", ps[0], qs[0])));
    }
    let (sp, _) = p.sort()?;
    let (sq, _) = q.sort()?;
    Ok(sp.sub(&sq)?.square().mean())
}

/// Random subset of `of` distinct column indices, of size `keep`, in
/// ascending order.
fn subsample(of: usize, keep: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, of, keep).into_vec();
    idx.sort_unstable();
    idx
}

fn gather_cols<T: Element>(t: &Tensor<T>, keep: &[usize]) -> Result<Tensor<T>> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(rows * keep.len());
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        data.extend(keep.iter().map(|&c| row[c]));
    }
    Ok(Tensor::new(vec![rows, keep.len()], data)?)
}

/// Sliced Wasserstein distance between the render features `features`
/// (`N x M`) and detached `target` features (`N x M'`) along the rows of
/// `directions` (`P x N`).
///
/// When `M != M'` the larger side is subsampled uniformly without
/// replacement (using `rng`) down to the smaller count.
pub fn swd_layer<'t, T: Element>(
    features: Var<'t, T>,
    target: &Tensor<T>,
    directions: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    let fs = features.shape();
    let (&[n, m], &[nt, mt], &[_, nd]) = (&fs[..], target.shape(), directions.shape()) else {
        return Err(Error::dimension(format!(
            "swd_layer expects 2-D tensors, got {fs:?}, {:?}, {:?}",
            target.shape(),
            directions.shape()
        )));
    };
    if n != nt || n != nd {
        return Err(Error::dimension(format!(
            "swd_layer channel mismatch: render {n}, target {nt}, directions {nd}"
        )));
    }
    if m == 0 || mt == 0 {
        return Err(Error::contract("swd_layer on an empty feature map"));
    }
    let tape = features.tape();
    let mut features = features;
    let mut target_proj = directions.matmul(target)?;
    if mt > m {
        target_proj = gather_cols(&target_proj, &subsample(mt, m, rng))?;
    } else if m > mt {
        features = features.select_cols(&subsample(m, mt, rng))?;
    }
    let render_sorted = tape.constant(directions.clone()).matmul(&features)?.sort_rows()?;
    let target_sorted = tape.constant(target_proj).sort_rows()?;
    Ok(render_sorted.sub(&target_sorted)?.square().mean())
}

/// Precomputed, detached feature maps of a style image.
#[derive(Clone, Debug)]
pub struct StyleTarget<T> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Element> StyleTarget<T> {
    pub fn from_image(stack: &VggStack<T>, image: &Tensor<T>, normalize: bool) -> Result<Self> {
        Ok(Self {
            layers: stack.extract_values(image, normalize)?,
        })
    }
}

fn layer_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    rng
}

/// `sum_l sum_k weight_k * SWD(features_l, target_k,l)` with one shared
/// projection set.
///
/// `subsample_seed` drives one subsampling stream per layer, restarted for
/// every target, so a target's term does not depend on which other targets
/// are present or on their order.
pub fn weighted_swd<'t, T: Element>(
    features: &FeatureMaps<'t, T>,
    targets: &[(&StyleTarget<T>, T)],
    projections: &ProjectionSet<T>,
    subsample_seed: u64,
) -> Result<Var<'t, T>> {
    let count = features.layers.len();
    if projections.layers.len() != count {
        return Err(Error::dimension(format!(
            "{} feature layers but {} projection layers",
            count,
            projections.layers.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::contract("no style targets"));
    }
    let mut total: Option<Var<'t, T>> = None;
    for (l, (&f, dirs)) in features.layers.iter().zip(&projections.layers).enumerate() {
        let mut layer_term: Option<Var<'t, T>> = None;
        for (k, (target, weight)) in targets.iter().enumerate() {
            let t = target.layers.get(l).ok_or_else(|| {
                Error::dimension(format!("style target {k} has no layer {l}"))
            })?;
            let term = swd_layer(f, t, dirs, &mut layer_rng(subsample_seed, l))?.scale(*weight);
            layer_term = Some(match layer_term {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let layer_term = layer_term.expect("non-empty targets");
        total = Some(match total {
            Some(acc) => acc.add(&layer_term)?,
            None => layer_term,
        });
    }
    total.ok_or_else(|| Error::contract("feature stack exports no taps"))
}

/// Options shared by the style losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleOptions {
    pub projections: usize,
    pub normalize: bool,
}

impl Default for StyleOptions {
    fn default() -> Self {
        Self {
            projections: DEFAULT_PROJECTIONS,
            normalize: true,
        }
    }
}

/// Sum over the stack's taps of the sliced Wasserstein distance between the
/// render's and the target's features, with fresh directions from `rng`.
pub fn style_loss<'t, T: Element>(
    render: Var<'t, T>,
    target: &StyleTarget<T>,
    stack: &VggStack<T>,
    options: StyleOptions,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    blended_targets(render, &[(target, T::one())], stack, options, rng)
}

/// Two-style blend `sum_l [t * SWD(p1, p) + (1 - t) * SWD(p2, p)]`, sharing
/// each layer's directions between both terms.
pub fn blended_style_loss<'t, T: Element>(
    render: Var<'t, T>,
    first: &StyleTarget<T>,
    second: &StyleTarget<T>,
    t: f64,
    stack: &VggStack<T>,
    options: StyleOptions,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("blend weight {t} outside [0, 1]")));
    }
    let t = T::from_f64_lossy(t);
    blended_targets(render, &[(first, t), (second, T::one() - t)], stack, options, rng)
}

fn blended_targets<'t, T: Element>(
    render: Var<'t, T>,
    targets: &[(&StyleTarget<T>, T)],
    stack: &VggStack<T>,
    options: StyleOptions,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    let features = stack.extract(render, options.normalize)?;
    let projections = sample_projections(&features.channels(), options.projections, rng)?;
    let subsample_seed: u64 = rng.random();
    weighted_swd(&features, targets, &projections, subsample_seed)
}

/// `F F^T / M` for a feature map `F` of shape `N x M`.
pub fn gram_matrix<'t, T: Element>(features: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = features.shape();
    let [_, m] = shape[..] else {
        return Err(Error::dimension(format!("gram_matrix expects N x M, got {shape:?}")));
    };
    let g = features.matmul(&features.transpose()?)?;
    Ok(g.scale(T::from_f64_lossy(1.0 / m as f64)))
}

/// `sum_l ||G_l - G^_l||_F^2 / N_l^2` over already extracted features.
pub fn gram_loss_features<'t, T: Element>(
    features: &[Var<'t, T>],
    targets: &[Tensor<T>],
) -> Result<Var<'t, T>> {
    if features.len() != targets.len() || features.is_empty() {
        return Err(Error::dimension(format!(
            "{} render layers vs {} target layers",
            features.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var<'t, T>> = None;
    for (&f, t) in features.iter().zip(targets) {
        let n = f.shape()[0];
        if t.shape().first() != Some(&n) {
            return Err(Error::dimension(format!(
                "gram channel mismatch: {:?} vs {:?}",
                f.shape(),
                t.shape()
            )));
        }
        let tape = f.tape();
        let g = gram_matrix(f)?;
        let target_gram = gram_matrix(tape.constant(t.clone()))?;
        let term = g
            .sub(&target_gram)?
            .square()
            .sum()
            .scale(T::from_f64_lossy(1.0 / (n * n) as f64));
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Gram-matrix style loss between a render and a detached target image.
pub fn gram_loss<'t, T: Element>(
    render: Var<'t, T>,
    target: &StyleTarget<T>,
    stack: &VggStack<T>,
    normalize: bool,
) -> Result<Var<'t, T>> {
    let features = stack.extract(render, normalize)?;
    gram_loss_features(&features.layers, &target.layers)
}
