//! Pre-training on posed photographs and style fine-tuning on patches.
//!
//! Every step draws its randomness from a generator keyed by
//! `(config.seed, iteration)`, so a run resumed from a checkpoint replays the
//! same batches as an uninterrupted one.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stylefield_tensor::fpenv::FlushDenormals;
use stylefield_tensor::{Adam, AdamState, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::io::image::crop;
use crate::io::{Dataset, PoseSet, View};
use crate::nerf::{render_rays, Camera, FieldConfig, RadianceField, Ray, SampleOptions};
use crate::style::{sample_projections, weighted_swd, StyleTarget, DEFAULT_PROJECTIONS};
use crate::tensor_io;
use crate::vgg::VggStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// What a rendered patch is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// The same pixel rectangle of the stylized view.
    AlignedCrop,
    /// The feature distribution of the whole stylized view.
    FullImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rgb: 1.0, style: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub iterations: u64,
    /// Random rays per pre-training step.
    pub rays_per_step: usize,
    /// Patches per fine-tuning step; their losses are summed.
    pub patches_per_step: usize,
    pub patch_size: usize,
    pub samples_per_ray: usize,
    pub stratified: bool,
    /// Learning rate decays exponentially from `lr` to `lr_final`.
    pub lr: f64,
    pub lr_final: f64,
    pub lambda_dist: f64,
    pub weights: LossWeights,
    pub projections: usize,
    pub normalize_features: bool,
    pub target_mode: TargetMode,
    /// Weight `t` of the first style when blending with a second one.
    pub blend: Option<f64>,
    pub seed: u64,
    pub field: FieldConfig,
    /// VGGW file for the feature stack; a seeded random stack otherwise.
    pub vgg_weights: Option<PathBuf>,
    pub vgg_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            iterations: 5000,
            rays_per_step: 256,
            patches_per_step: 1,
            patch_size: 64,
            samples_per_ray: 32,
            stratified: true,
            lr: 1e-3,
            lr_final: 1e-4,
            lambda_dist: 0.002,
            weights: LossWeights::default(),
            projections: DEFAULT_PROJECTIONS,
            normalize_features: true,
            target_mode: TargetMode::AlignedCrop,
            blend: None,
            seed: 0,
            field: FieldConfig::default(),
            vgg_weights: None,
            vgg_seed: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            iterations: 2000,
            lr: 1e-3,
            lr_final: 1e-4,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 {
            return Err(Error::contract(format!("patch_size {} is below 8", self.patch_size)));
        }
        if !(self.lambda_dist >= 0.0 && self.lambda_dist.is_finite()) {
            return Err(Error::contract(format!("lambda_dist {} must be a finite value >= 0", self.lambda_dist)));
        }
        if let Some(t) = self.blend {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::contract(format!("blend weight {t} outside [0, 1]")));
            }
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return Err(Error::contract("learning rates must be positive"));
        }
        if self.rays_per_step == 0 || self.patches_per_step == 0 || self.samples_per_ray == 0 {
            return Err(Error::contract("rays, patches and samples per step must be positive"));
        }
        if self.projections == 0 {
            return Err(Error::contract("at least one projection is required"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn learning_rate(&self, iteration: u64) -> f64 {
        if self.iterations == 0 {
            return self.lr;
        }
        let frac = (iteration as f64 / self.iterations as f64).min(1.0);
        self.lr * (self.lr_final / self.lr).powf(frac)
    }

    pub fn feature_stack(&self) -> Result<VggStack<f32>> {
        match &self.vgg_weights {
            Some(path) => VggStack::load_weights(path),
            None => Ok(VggStack::random(self.vgg_seed, 1.0)),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }
}

/// Scene-level render settings carried from the source dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl RenderSettings {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self {
            near: dataset.manifest.near(),
            far: dataset.manifest.far(),
            background: dataset.manifest.background(),
        }
    }

    pub fn sample_options(&self, samples: usize, stratified: bool) -> SampleOptions {
        SampleOptions { near: self.near, far: self.far, samples, stratified }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete optimization state.
///
/// File layout (little-endian): magic `SFCK`, version `u32`, config hash
/// string, iteration `u64`, Adam step `u64`, config JSON string, render
/// settings JSON string, tensor count `u32`, then named tensor records: the
/// field parameters followed by `adam.m.<name>` and `adam.v.<name>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub render: RenderSettings,
    pub iteration: u64,
    pub field: RadianceField<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        tensor_io::write_u32(w, CHECKPOINT_VERSION)?;
        tensor_io::write_string(w, &self.config_hash())?;
        tensor_io::write_u64(w, self.iteration)?;
        tensor_io::write_u64(w, self.adam.step)?;
        tensor_io::write_string(w, &json(&self.config))?;
        tensor_io::write_string(w, &json(&self.render))?;
        let names = self.field.names();
        tensor_io::write_u32(w, (names.len() * 3) as u32)?;
        for (name, t) in self.field.named() {
            tensor_io::write_tensor(w, name, t)?;
        }
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (name, t) in names.iter().zip(moments) {
                tensor_io::write_tensor(w, &format!("{prefix}{name}"), t)?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(&mut BufReader::new(file), path)
    }

    /// Parses checkpoint bytes; `origin` only labels errors.
    pub fn read(r: &mut impl Read, origin: &Path) -> Result<Self> {
        let io = |e| Error::io(origin, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, format!("bad magic {magic:?}, expected \"SFCK\"")));
        }
        let version = tensor_io::read_u32(r).map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let hash = tensor_io::read_string(r).map_err(io)?;
        let iteration = tensor_io::read_u64(r).map_err(io)?;
        let adam_step = tensor_io::read_u64(r).map_err(io)?;
        let config: TrainConfig = serde_json::from_str(&tensor_io::read_string(r).map_err(io)?)
            .map_err(|e| Error::format(origin, format!("config: {e}")))?;
        let render: RenderSettings = serde_json::from_str(&tensor_io::read_string(r).map_err(io)?)
            .map_err(|e| Error::format(origin, format!("render settings: {e}")))?;
        if config.hash() != hash {
            return Err(Error::format(
                origin,
                format!("config hash {hash} does not match stored config ({})", config.hash()),
            ));
        }
        let count = tensor_io::read_u32(r).map_err(io)? as usize;
        let mut params = Vec::new();
        let mut m = std::collections::HashMap::new();
        let mut v = std::collections::HashMap::new();
        for _ in 0..count {
            let (name, t) = tensor_io::read_tensor(r).map_err(io)?;
            if let Some(n) = name.strip_prefix("adam.m.") {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                v.insert(n.to_string(), t);
            } else {
                params.push((name, t));
            }
        }
        let field = RadianceField::from_named(config.field, params).map_err(|e| Error::format(origin, e.to_string()))?;
        let take = |map: &mut std::collections::HashMap<String, Tensor<f32>>, kind: &str| {
            field
                .names()
                .iter()
                .zip(field.params())
                .map(|(n, p)| {
                    let t = map
                        .remove(n)
                        .ok_or_else(|| Error::format(origin, format!("missing adam.{kind}.{n}")))?;
                    if t.shape() != p.shape() {
                        return Err(Error::format(origin, format!("adam.{kind}.{n} has the wrong shape")));
                    }
                    Ok(t)
                })
                .collect::<Result<Vec<_>>>()
        };
        let adam = AdamState {
            step: adam_step,
            m: take(&mut m, "m")?,
            v: take(&mut v, "v")?,
        };
        Ok(Self { config, render, iteration, field, adam })
    }
}

fn json(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("serializable")
}

/// Loss components of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss: f64,
    /// RGB mean squared error (pre-training) or style loss (fine-tuning).
    pub data: f64,
    pub distortion: f64,
}

/// Generator for step `iteration`: one ChaCha stream per step.
pub fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// A pixel rectangle and its rays.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub rays: Vec<Ray>,
}

/// Uniform top-left corner of a `size x size` window inside a frame.
pub fn sample_corner(width: usize, height: usize, size: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if size == 0 || size > width || size > height {
        return Err(Error::contract(format!("{size}x{size} patch does not fit a {width}x{height} frame")));
    }
    Ok((rng.random_range(0..=width - size), rng.random_range(0..=height - size)))
}

pub fn sample_patch(camera: &Camera, size: usize, rng: &mut impl Rng) -> Result<Patch> {
    let (x0, y0) = sample_corner(camera.width(), camera.height(), size, rng)?;
    Ok(Patch { x0, y0, size, rays: camera.patch_rays(x0, y0, size, size)? })
}

fn collect_grads(vars: &[Var<'_, f32>], field: &RadianceField<f32>) -> Vec<Tensor<f32>> {
    vars.iter()
        .zip(field.params())
        .map(|(v, p)| v.grad().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect()
}

fn check_finite(record: &StepRecord, grads: &[Tensor<f32>], dump: impl FnOnce() -> String) -> Result<()> {
    if record.loss.is_finite() && grads.iter().all(Tensor::all_finite) {
        return Ok(());
    }
    Err(Error::NonFinite {
        iteration: record.iteration,
        dump: format!(
            "loss {} (data {}, distortion {})\n{}",
            record.loss,
            record.data,
            record.distortion,
            dump()
        ),
    })
}

fn apply(state: &mut Checkpoint, grads: &[Tensor<f32>]) -> Result<()> {
    let adam = Adam::with_lr(state.config.learning_rate(state.iteration));
    adam.step(state.field.params_mut(), grads, &mut state.adam)?;
    state.iteration += 1;
    Ok(())
}

/// Loss and gradients of one step.
pub struct StepEval {
    pub record: StepRecord,
    pub grads: Vec<Tensor<f32>>,
}

/// Pre-training loop: RGB mean squared error plus weighted distortion.
pub struct Pretrainer<'a> {
    views: &'a [View],
    state: Checkpoint,
}

impl<'a> Pretrainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        let field = RadianceField::new(config.field, config.seed)?;
        let adam = AdamState::new(field.params());
        let state = Checkpoint {
            render: RenderSettings::from_dataset(dataset),
            config,
            iteration: 0,
            field,
            adam,
        };
        Self::resume(dataset, state)
    }

    /// Continues from a pre-training checkpoint.
    pub fn resume(dataset: &'a Dataset, state: Checkpoint) -> Result<Self> {
        state.config.validate()?;
        if state.config.phase != Phase::Pretrain {
            return Err(Error::contract("checkpoint is not from a pre-training run"));
        }
        if dataset.views.is_empty() {
            return Err(Error::contract("cannot pre-train on an empty dataset"));
        }
        if dataset.views.len() == 1 {
            log::warn!("pre-training on a single view; the field will overfit it");
        }
        Ok(Self { views: &dataset.views, state })
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    /// Evaluates the step at the current iteration without updating.
    pub fn evaluate(&self) -> Result<StepEval> {
        let _fp = FlushDenormals::new();
        let cfg = &self.state.config;
        let iteration = self.state.iteration;
        let mut rng = step_rng(cfg.seed, iteration);
        let mut picks = Vec::with_capacity(cfg.rays_per_step);
        let mut rays = Vec::with_capacity(cfg.rays_per_step);
        let mut target = Vec::with_capacity(cfg.rays_per_step * 3);
        for _ in 0..cfg.rays_per_step {
            let v = rng.random_range(0..self.views.len());
            let view = &self.views[v];
            let (col, row) = (rng.random_range(0..view.camera.width()), rng.random_range(0..view.camera.height()));
            rays.push(view.camera.pixel_ray(col, row)?);
            let n = view.camera.width() * view.camera.height();
            let p = row * view.camera.width() + col;
            for c in 0..3 {
                target.push(view.image.data()[c * n + p] as f32);
            }
            picks.push((v, col, row));
        }
        let opts = self.state.render.sample_options(cfg.samples_per_ray, cfg.stratified);
        let tape = Tape::new();
        let vars = self.state.field.bind(&tape, true);
        let out = render_rays(&self.state.field, &vars, &rays, &opts, self.state.render.background, &mut rng)?;
        let target = tape.constant(Tensor::new(vec![rays.len(), 3], target)?);
        let mse = out.color.sub(&target)?.square().mean();
        let dist = out.distortion()?;
        let loss = mse
            .scale(cfg.weights.rgb as f32)
            .add(&dist.scale(cfg.lambda_dist as f32))?;
        let record = StepRecord {
            iteration,
            loss: loss.item() as f64,
            data: mse.item() as f64,
            distortion: dist.item() as f64,
        };
        tape.backward(loss)?;
        let grads = collect_grads(&vars, &self.state.field);
        check_finite(&record, &grads, || {
            let mut s = String::from("batch (view, col, row):\n");
            for (v, c, r) in picks.iter().take(32) {
                let _ = writeln!(s, "  {} {c} {r}", self.views[*v].id);
            }
            s
        })?;
        Ok(StepEval { record, grads })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let eval = self.evaluate()?;
        apply(&mut self.state, &eval.grads)?;
        Ok(eval.record)
    }

    /// Steps until `config.iterations`, calling `observe` after every step.
    pub fn run(&mut self, mut observe: impl FnMut(&StepRecord, &Checkpoint) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut trace = Vec::new();
        while self.state.iteration < self.state.config.iterations {
            let record = self.step()?;
            observe(&record, &self.state)?;
            trace.push(record);
        }
        Ok(trace)
    }
}

pub fn pretrain(dataset: &Dataset, config: TrainConfig) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut trainer = Pretrainer::new(dataset, config)?;
    let trace = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.into_checkpoint(), trace))
}

enum Targets {
    /// Per-view stylized images, cropped every step.
    Aligned(Vec<Tensor<f64>>),
    Full(Vec<StyleTarget<f32>>),
}

/// Stylized images in pose order, plus an optional second set for blending.
pub struct StyleSets<'a> {
    pub first: Vec<&'a Tensor<f64>>,
    pub second: Option<Vec<&'a Tensor<f64>>>,
}

/// Fine-tuning loop: style loss on rendered patches plus weighted
/// distortion. It only sees poses and stylized targets, never source pixels.
pub struct Finetuner<'a> {
    poses: &'a PoseSet,
    first: Targets,
    second: Option<Targets>,
    stack: VggStack<f32>,
    state: Checkpoint,
}

impl<'a> Finetuner<'a> {
    /// Starts fine-tuning from `checkpoint`. A pre-training checkpoint gets
    /// a fresh optimizer state and iteration counter; a fine-tuning one is
    /// resumed. The field architecture always comes from the checkpoint.
    pub fn new(checkpoint: Checkpoint, poses: &'a PoseSet, styles: StyleSets<'_>, mut config: TrainConfig) -> Result<Self> {
        config.phase = Phase::Finetune;
        config.field = *checkpoint.field.config();
        config.validate()?;
        if poses.ids.is_empty() {
            return Err(Error::contract("cannot fine-tune without poses"));
        }
        match (config.blend, &styles.second) {
            (Some(_), None) => return Err(Error::contract("blend weight given without a second style set")),
            (None, Some(_)) => return Err(Error::contract("second style set given without a blend weight")),
            _ => {}
        }
        let stack = config.feature_stack()?;
        let prepare = |set: &[&Tensor<f64>], label: &str| -> Result<Targets> {
            if set.len() != poses.ids.len() {
                return Err(Error::contract(format!(
                    "{label} style set has {} views for {} poses",
                    set.len(),
                    poses.ids.len()
                )));
            }
            for ((img, cam), id) in set.iter().zip(&poses.cameras).zip(&poses.ids) {
                if img.shape() != [3, cam.height(), cam.width()] {
                    return Err(Error::contract(format!(
                        "{label} style image for view {id} is {:?}, camera is {}x{}",
                        img.shape(),
                        cam.width(),
                        cam.height()
                    )));
                }
            }
            Ok(match config.target_mode {
                TargetMode::AlignedCrop => Targets::Aligned(set.iter().map(|t| (*t).clone()).collect()),
                TargetMode::FullImage => Targets::Full(
                    set.iter()
                        .map(|t| StyleTarget::from_image(&stack, &t.cast(), config.normalize_features))
                        .collect::<Result<_>>()?,
                ),
            })
        };
        let first = prepare(&styles.first, "first")?;
        let second = styles.second.as_deref().map(|s| prepare(s, "second")).transpose()?;
        let state = match checkpoint.config.phase {
            Phase::Pretrain => Checkpoint {
                adam: AdamState::new(checkpoint.field.params()),
                iteration: 0,
                config,
                ..checkpoint
            },
            Phase::Finetune => {
                if checkpoint.config != config {
                    log::warn!(
                        "resuming fine-tuning with config {} over checkpoint config {}",
                        config.hash(),
                        checkpoint.config_hash()
                    );
                }
                Checkpoint { config, ..checkpoint }
            }
        };
        Ok(Self { poses, first, second, stack, state })
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn feature_stack(&self) -> &VggStack<f32> {
        &self.stack
    }

    fn target(&self, targets: &Targets, view: usize, patch: &Patch) -> Result<StyleTarget<f32>> {
        Ok(match targets {
            Targets::Aligned(images) => {
                let c = crop(&images[view], patch.x0, patch.y0, patch.size, patch.size)?;
                StyleTarget::from_image(&self.stack, &c.cast(), self.state.config.normalize_features)?
            }
            Targets::Full(t) => t[view].clone(),
        })
    }

    pub fn evaluate(&self) -> Result<StepEval> {
        let _fp = FlushDenormals::new();
        let cfg = &self.state.config;
        let iteration = self.state.iteration;
        let mut rng = step_rng(cfg.seed, iteration);
        let opts = self.state.render.sample_options(cfg.samples_per_ray, cfg.stratified);
        let tape = Tape::new();
        let vars = self.state.field.bind(&tape, true);
        let mut style_total: Option<Var<'_, f32>> = None;
        let mut dist_total: Option<Var<'_, f32>> = None;
        let mut picks = Vec::new();
        for _ in 0..cfg.patches_per_step {
            let view = rng.random_range(0..self.poses.ids.len());
            let patch = sample_patch(&self.poses.cameras[view], cfg.patch_size, &mut rng)?;
            picks.push((view, patch.x0, patch.y0));
            let out = render_rays(&self.state.field, &vars, &patch.rays, &opts, self.state.render.background, &mut rng)?;
            let s = patch.size;
            let image = out.color.transpose()?.reshape(vec![3, s, s])?;
            let features = self.stack.extract(image, cfg.normalize_features)?;
            let projections = sample_projections(&features.channels(), cfg.projections, &mut rng)?;
            let subsample_seed: u64 = rng.random();
            let first = self.target(&self.first, view, &patch)?;
            let second = self.second.as_ref().map(|t| self.target(t, view, &patch)).transpose()?;
            let mut weighted = Vec::with_capacity(2);
            match (&second, cfg.blend) {
                (Some(second), Some(t)) => {
                    weighted.push((&first, t as f32));
                    weighted.push((second, 1.0 - t as f32));
                }
                _ => weighted.push((&first, 1.0)),
            }
            let style = weighted_swd(&features, &weighted, &projections, subsample_seed)?;
            let dist = out.distortion()?;
            style_total = Some(match style_total {
                Some(acc) => acc.add(&style)?,
                None => style,
            });
            dist_total = Some(match dist_total {
                Some(acc) => acc.add(&dist)?,
                None => dist,
            });
        }
        let (style, dist) = (style_total.expect("one patch"), dist_total.expect("one patch"));
        let loss = style
            .scale(cfg.weights.style as f32)
            .add(&dist.scale(cfg.lambda_dist as f32))?;
        let record = StepRecord {
            iteration,
            loss: loss.item() as f64,
            data: style.item() as f64,
            distortion: dist.item() as f64,
        };
        tape.backward(loss)?;
        let grads = collect_grads(&vars, &self.state.field);
        check_finite(&record, &grads, || {
            let mut s = String::from("patches (view, x0, y0):\n");
            for (v, x, y) in &picks {
                let _ = writeln!(s, "  {} {x} {y}", self.poses.ids[*v]);
            }
            s
        })?;
        Ok(StepEval { record, grads })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let eval = self.evaluate()?;
        apply(&mut self.state, &eval.grads)?;
        Ok(eval.record)
    }

    pub fn run(&mut self, mut observe: impl FnMut(&StepRecord, &Checkpoint) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut trace = Vec::new();
        while self.state.iteration < self.state.config.iterations {
            let record = self.step()?;
            observe(&record, &self.state)?;
            trace.push(record);
        }
        Ok(trace)
    }
}

pub fn finetune(
    checkpoint: Checkpoint,
    poses: &PoseSet,
    styles: StyleSets<'_>,
    config: TrainConfig,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut trainer = Finetuner::new(checkpoint, poses, styles, config)?;
    let trace = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.into_checkpoint(), trace))
}

/// Observer that saves the state to `path` every `every` iterations and at
/// the last one.
pub fn save_every(path: PathBuf, every: u64) -> impl FnMut(&StepRecord, &Checkpoint) -> Result<()> {
    move |_, state| {
        let last = state.iteration >= state.config.iterations;
        if last || (every > 0 && state.iteration % every == 0) {
            state.save(&path)?;
        }
        Ok(())
    }
}

/// Mean over views of the full-frame style loss of the field's render
/// against each stylized view, with projections fixed by `seed`.
pub fn mean_style_loss(
    field: &RadianceField<f32>,
    render: &RenderSettings,
    poses: &PoseSet,
    styled: &[&Tensor<f64>],
    stack: &VggStack<f32>,
    samples: usize,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if styled.len() != poses.cameras.len() || styled.is_empty() {
        return Err(Error::contract("style set does not match the poses"));
    }
    let opts = render.sample_options(samples, false);
    let mut total = 0.0;
    for (i, (cam, img)) in poses.cameras.iter().zip(styled).enumerate() {
        let view = crate::nerf::render_view(field, cam, &opts, render.background)?;
        let target = StyleTarget::from_image(stack, &img.cast(), true)?;
        let tape = Tape::new();
        let features = stack.extract(tape.constant(view.rgb.cast()), true)?;
        let mut rng = step_rng(seed, i as u64);
        let dirs = sample_projections(&features.channels(), projections, &mut rng)?;
        total += weighted_swd(&features, &[(&target, 1.0)], &dirs, rng.random())?.item() as f64;
    }
    Ok(total / styled.len() as f64)
}
