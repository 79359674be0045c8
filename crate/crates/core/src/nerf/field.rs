//! Coordinate MLP mapping `(x, d)` to `(rgb, sigma)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stylefield_tensor::{Element, Tape, Tensor, Var};

use super::camera::Vec3;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub pos_frequencies: usize,
    pub dir_frequencies: usize,
    /// Positions are divided by this before encoding, so the lowest
    /// frequency does not wrap inside `[-scene_bound, scene_bound]^3`.
    pub scene_bound: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden_width: 128,
            hidden_layers: 4,
            pos_frequencies: 10,
            dir_frequencies: 4,
            scene_bound: 4.0,
        }
    }
}

impl FieldConfig {
    pub fn pos_dims(&self) -> usize {
        6 * self.pos_frequencies
    }

    pub fn dir_dims(&self) -> usize {
        6 * self.dir_frequencies
    }

    fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.hidden_layers == 0 || self.pos_frequencies == 0 {
            return Err(Error::contract("field needs at least one hidden layer, unit and frequency"));
        }
        if !(self.scene_bound > 0.0 && self.scene_bound.is_finite()) {
            return Err(Error::contract("scene_bound must be positive"));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.hidden_width;
        let mut out = Vec::new();
        let mut fan_in = self.pos_dims();
        for i in 0..self.hidden_layers {
            out.push((format!("trunk.{i}.weight"), vec![fan_in, w]));
            out.push((format!("trunk.{i}.bias"), vec![w]));
            fan_in = w;
        }
        out.push(("sigma.weight".into(), vec![w, 1]));
        out.push(("sigma.bias".into(), vec![1]));
        out.push(("color.weight".into(), vec![w + self.dir_dims(), 3]));
        out.push(("color.bias".into(), vec![3]));
        out
    }
}

/// `[sin(2^i pi x_c), cos(2^i pi x_c)]` for every coordinate `c` and
/// `i < frequencies`, written in that order per row.
pub fn encode<T: Element>(points: &[Vec3], frequencies: usize, scale: f64) -> Tensor<T> {
    let width = 6 * frequencies;
    let mut data = Vec::with_capacity(points.len() * width);
    for p in points {
        for &c in p {
            let (mut s, mut co) = (std::f64::consts::PI * c / scale).sin_cos();
            for _ in 0..frequencies {
                data.push(T::from_f64_lossy(s));
                data.push(T::from_f64_lossy(co));
                // double-angle step to the next octave
                (s, co) = (2.0 * s * co, (co - s) * (co + s));
            }
        }
    }
    Tensor::new(vec![points.len(), width], data).expect("encoding shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField<T> {
    config: FieldConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Element> RadianceField<T> {
    /// Uniform `+-1/sqrt(fan_in)` initialization of every weight and bias.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout();
        let mut fan_in = config.pos_dims();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in layout {
            if shape.len() == 2 {
                fan_in = shape[0];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)));
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    /// Rebuilds a field from named tensors, checking them against the layout.
    pub fn from_named(config: FieldConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in layout {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::contract(format!("missing field parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dimension(format!(
                    "field parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::contract(format!("unexpected field parameter {extra}")));
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> RadianceField<U> {
        RadianceField {
            config: self.config,
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    /// Evaluates the field at `points` viewed along `dirs` (one per point).
    /// Returns `rgb [n x 3]` and `sigma [n x 1]`.
    pub fn forward<'t>(
        &self,
        vars: &[Var<'t, T>],
        points: &[Vec3],
        dirs: &[Vec3],
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if points.len() != dirs.len() {
            return Err(Error::dimension(format!(
                "{} points but {} directions",
                points.len(),
                dirs.len()
            )));
        }
        if points.iter().chain(dirs).flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite field input"));
        }
        let Some(first) = vars.first() else {
            return Err(Error::contract("field is not bound to a tape"));
        };
        let tape = first.tape();
        let pos = tape.constant(encode(points, self.config.pos_frequencies, self.config.scene_bound));
        let dir = tape.constant(encode(dirs, self.config.dir_frequencies, 1.0));
        self.forward_encoded(vars, pos, dir)
    }

    /// Like [`RadianceField::forward`] on already encoded inputs.
    pub fn forward_encoded<'t>(
        &self,
        vars: &[Var<'t, T>],
        pos: Var<'t, T>,
        dir: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let layers = self.config.hidden_layers;
        if vars.len() != 2 * layers + 4 {
            return Err(Error::contract(format!(
                "expected {} bound parameters, got {}",
                2 * layers + 4,
                vars.len()
            )));
        }
        let mut h = pos;
        for i in 0..layers {
            h = h.linear_relu(&vars[2 * i], &vars[2 * i + 1])?;
        }
        let sigma = h.linear(&vars[2 * layers], &vars[2 * layers + 1])?.softplus();
        let rgb = h
            .concat_cols(&dir)?
            .linear(&vars[2 * layers + 2], &vars[2 * layers + 3])?
            .sigmoid();
        Ok((rgb, sigma))
    }
}
