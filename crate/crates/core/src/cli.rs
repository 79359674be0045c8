//! Command-line surface. `run` returns the process exit code: 0 on success,
//! 2 for usage errors, 1 for runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use stylefield_tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::image::save_png;
use crate::io::{generate_scene, stylize_dataset, Dataset, Manifest, PoseSet, SceneKind, SceneSpec, StyleTransform};
use crate::metrics::{
    clip_dc, clip_tids_images, default_tau, depth_warp_error, format_records, psnr, FieldRenderer, MetricRecord,
    SyntheticEmbedder,
};
use crate::nerf::camera::{normalize, sub};
use crate::nerf::{render_view, Camera};
use crate::trainer::{self, Checkpoint, Finetuner, Pretrainer, StepRecord, StyleSets, TargetMode, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.sfck";
pub const RECORD_FILE: &str = "run.json";
pub const TRACE_FILE: &str = "trace.tsv";

#[derive(Parser, Debug)]
#[command(name = "stylefield", version, about = "Radiance-field stylization with sliced Wasserstein feature matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ray-trace a synthetic scene into train/ and holdout/ datasets.
    GenScene {
        #[arg(long, default_value = "sphere")]
        kind: SceneKind,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a per-pixel reference style (hue:DEG, posterize:K, tone:G,
    /// tint:R,G,B,S) to every view of a dataset.
    Stylize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        transform: StyleTransform,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a field to posed source images.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rays: Option<usize>,
        #[command(flatten)]
        common: TrainFlags,
    },
    /// Fine-tune a checkpoint against a stylized view set.
    Finetune(FinetuneArgs),
    /// Fine-tune towards a blend of two style sets (`--t` weights the first).
    Blend(FinetuneArgs),
    /// Render every pose of a manifest to PNG.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write metric records for a checkpoint on a posed image set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Source-image set; enables CLIP-TIDS of the renders against it.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, default_value = "photo")]
        source_text: String,
        #[arg(long, default_value = "stylized")]
        style_text: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Render an orbit through the poses of a manifest as numbered frames.
    ExportVideoFrames {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
}

/// Flags shared by both training phases; unset flags keep the config file's
/// (or the phase default's) value.
#[derive(Args, Debug)]
struct TrainFlags {
    /// JSON training config used as the base.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    #[arg(long)]
    lambda_dist: Option<f64>,
    /// Save a checkpoint every N iterations (and always at the end).
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    /// Log a progress line every N iterations.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    blend_style: Option<PathBuf>,
    #[arg(long)]
    t: Option<f64>,
    /// Source manifest whose poses the style sets must cover; defaults to
    /// the first style set's own poses. Only poses are read.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long)]
    projections: Option<usize>,
    /// Compare patches with whole stylized views instead of aligned crops.
    #[arg(long)]
    full_image: bool,
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
    #[command(flatten)]
    common: TrainFlags,
}

/// Reproducibility record written next to every output.
#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: Option<u64>,
    config_hash: Option<String>,
    version: &'static str,
    target: &'static str,
}

fn write_record(dir: &Path, command: &str, args: &[OsString], config: Option<&TrainConfig>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let record = RunRecord {
        command,
        args: args.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        seed: config.map(|c| c.seed),
        config_hash: config.map(TrainConfig::hash),
        version: env!("CARGO_PKG_VERSION"),
        target: std::env::consts::ARCH,
    };
    let path = dir.join(RECORD_FILE);
    let text = serde_json::to_string_pretty(&record).map_err(|source| Error::Json { path: path.clone(), source })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn apply_flags(config: &mut TrainConfig, flags: &TrainFlags) {
    if let Some(v) = flags.iters {
        config.iterations = v;
    }
    if let Some(v) = flags.seed {
        config.seed = v;
    }
    if let Some(v) = flags.samples {
        config.samples_per_ray = v;
    }
    if let Some(v) = flags.lr {
        config.lr = v;
    }
    if let Some(v) = flags.lr_final {
        config.lr_final = v;
    }
    if let Some(v) = flags.lambda_dist {
        config.lambda_dist = v;
    }
}

fn base_config(flags: &TrainFlags, default: TrainConfig) -> Result<TrainConfig> {
    match &flags.config {
        Some(path) => TrainConfig::read(path),
        None => Ok(default),
    }
}

fn write_trace(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut text = String::from("iteration\tloss\tdata\tdistortion\n");
    for r in trace {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", r.iteration, r.loss, r.data, r.distortion));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn progress(flags: &TrainFlags, out: &Path) -> impl FnMut(&StepRecord, &Checkpoint) -> Result<()> {
    let mut save = trainer::save_every(out.join(CHECKPOINT_FILE), flags.checkpoint_every);
    let every = flags.log_every.max(1);
    let start = Instant::now();
    move |record, state| {
        if (record.iteration + 1) % every == 0 {
            log::info!(
                "iter {:>6}  loss {:.6}  data {:.6}  dist {:.6}  {:.1}s",
                record.iteration + 1,
                record.loss,
                record.data,
                record.distortion,
                start.elapsed().as_secs_f64()
            );
        }
        save(record, state)
    }
}

fn execute(cli: Cli, args: &[OsString]) -> Result<()> {
    match cli.command {
        Command::GenScene { kind, views, resolution, seed, out } => {
            let g = generate_scene(&SceneSpec { kind, views, resolution, seed }, &out)?;
            write_record(&out, "gen-scene", args, None)?;
            println!("wrote {} and {}", g.train.display(), g.holdout.display());
            Ok(())
        }
        Command::Stylize { data, transform, out } => {
            let ds = Dataset::load(&data)?;
            stylize_dataset(&ds, transform, &out)?;
            write_record(&out, "stylize", args, None)?;
            println!("wrote {} stylized views to {}", ds.views.len(), out.display());
            Ok(())
        }
        Command::Pretrain { data, out, rays, common } => {
            let ds = Dataset::load(&data)?;
            let mut config = base_config(&common, TrainConfig::pretrain())?;
            if common.config.is_none() {
                config.field.scene_bound = ds.manifest.scene_bound();
            }
            apply_flags(&mut config, &common);
            if let Some(r) = rays {
                config.rays_per_step = r;
            }
            write_record(&out, "pretrain", args, Some(&config))?;
            let mut trainer = Pretrainer::new(&ds, config)?;
            let trace = trainer.run(progress(&common, &out))?;
            write_trace(&out.join(TRACE_FILE), &trace)?;
            let state = trainer.into_checkpoint();
            state.save(out.join(CHECKPOINT_FILE))?;
            match trace.last() {
                Some(last) => println!("final loss {:.6} after {} iterations", last.loss, state.iteration),
                None => println!("no iterations to run"),
            }
            Ok(())
        }
        Command::Finetune(a) => finetune(a, false, args),
        Command::Blend(a) => finetune(a, true, args),
        Command::Render { ckpt, poses, out, samples } => {
            let state = Checkpoint::load(checkpoint_path(&ckpt))?;
            let manifest = Manifest::read(&poses)?;
            let poses = PoseSet::from_manifest(&manifest)?;
            let opts = state.render.sample_options(samples.unwrap_or(state.config.samples_per_ray), false);
            for (id, cam) in poses.ids.iter().zip(&poses.cameras) {
                let view = render_view(&state.field, cam, &opts, state.render.background)?;
                save_png(out.join(format!("{id}.png")), &view.rgb)?;
            }
            write_record(&out, "render", args, Some(&state.config))?;
            println!("rendered {} views to {}", poses.ids.len(), out.display());
            Ok(())
        }
        Command::Eval { ckpt, data, source, source_text, style_text, out, samples } => {
            let state = Checkpoint::load(checkpoint_path(&ckpt))?;
            let ds = Dataset::load(&data)?;
            let source = source.map(Dataset::load).transpose()?;
            let records = evaluate(&state, &ds, source.as_ref(), &source_text, &style_text, samples)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&out, format_records(&records)).map_err(|e| Error::io(&out, e))?;
            print!("{}", format_records(&records));
            Ok(())
        }
        Command::ExportVideoFrames { ckpt, poses, frames, out, samples } => {
            let state = Checkpoint::load(checkpoint_path(&ckpt))?;
            let manifest = Manifest::read(&poses)?;
            let cameras = orbit(&manifest.cameras()?, frames)?;
            let opts = state.render.sample_options(samples.unwrap_or(state.config.samples_per_ray), false);
            for (i, cam) in cameras.iter().enumerate() {
                let view = render_view(&state.field, cam, &opts, state.render.background)?;
                save_png(out.join(format!("frame_{i:05}.png")), &view.rgb)?;
            }
            write_record(&out, "export-video-frames", args, Some(&state.config))?;
            println!("wrote {} frames to {}", cameras.len(), out.display());
            Ok(())
        }
    }
}

fn finetune(a: FinetuneArgs, blend: bool, args: &[OsString]) -> Result<()> {
    let command = if blend { "blend" } else { "finetune" };
    if blend && (a.blend_style.is_none() || a.t.is_none()) {
        return Err(Error::contract("blend needs --blend-style and --t"));
    }
    let state = Checkpoint::load(checkpoint_path(&a.ckpt))?;
    let first = Dataset::load(&a.style)?;
    let second = a.blend_style.as_ref().map(Dataset::load).transpose()?;
    let poses = match &a.data {
        Some(data) => PoseSet::from_manifest(&Manifest::read(data)?)?,
        None => first.poses(),
    };
    let mut config = base_config(&a.common, TrainConfig::finetune())?;
    apply_flags(&mut config, &a.common);
    if let Some(v) = a.patch_size {
        config.patch_size = v;
    }
    if let Some(v) = a.patches {
        config.patches_per_step = v;
    }
    if let Some(v) = a.projections {
        config.projections = v;
    }
    if a.full_image {
        config.target_mode = TargetMode::FullImage;
    }
    if a.vgg_weights.is_some() {
        config.vgg_weights = a.vgg_weights.clone();
    }
    config.blend = a.t;
    let styles = StyleSets {
        first: poses.pair(&first)?,
        second: second.as_ref().map(|s| poses.pair(s)).transpose()?,
    };
    let mut trainer = Finetuner::new(state, &poses, styles, config)?;
    write_record(&a.out, command, args, Some(&trainer.state().config))?;
    let trace = trainer.run(progress(&a.common, &a.out))?;
    write_trace(&a.out.join(TRACE_FILE), &trace)?;
    let state = trainer.into_checkpoint();
    state.save(a.out.join(CHECKPOINT_FILE))?;
    match trace.last() {
        Some(last) => println!("final loss {:.6} after {} iterations", last.loss, state.iteration),
        None => println!("no iterations to run"),
    }
    Ok(())
}

/// PSNR per view, depth-warp error between consecutive views and, given
/// the source images, CLIP-TIDS of each render under the synthetic encoder.
fn evaluate(
    state: &Checkpoint,
    ds: &Dataset,
    source: Option<&Dataset>,
    source_text: &str,
    style_text: &str,
    samples: Option<usize>,
) -> Result<Vec<MetricRecord>> {
    let hash = state.config_hash();
    let opts = state.render.sample_options(samples.unwrap_or(state.config.samples_per_ray), false);
    let record = |metric: &str, scene: &str, value: f64| MetricRecord {
        metric: metric.into(),
        scene: scene.into(),
        value,
        config_hash: hash.clone(),
    };
    let source_images = source.map(|s| ds.poses().pair(s)).transpose()?;
    let embedder = SyntheticEmbedder::new();
    let mut records = Vec::new();
    let mut renders = Vec::with_capacity(ds.views.len());
    for (i, view) in ds.views.iter().enumerate() {
        let render = render_view(&state.field, &view.camera, &opts, state.render.background)?;
        records.push(record("psnr", &view.id, psnr(&render.rgb, &view.image)?));
        if let Some(src) = &source_images {
            match clip_tids_images(&embedder, src[i], &render.rgb, source_text, style_text) {
                Ok(v) => records.push(record("clip_tids", &view.id, v)),
                Err(Error::Degenerate(msg)) => log::warn!("clip_tids for {}: {msg}", view.id),
                Err(e) => return Err(e),
            }
        }
        renders.push(render.rgb);
    }
    if let Some(src) = source_images.filter(|s| s.len() >= 2) {
        let src: Vec<Tensor<f64>> = src.into_iter().cloned().collect();
        match clip_dc(&embedder, &src, &renders) {
            Ok(v) => records.push(record("clip_dc", "all", v)),
            Err(Error::Degenerate(msg)) => log::warn!("clip_dc: {msg}"),
            Err(e) => return Err(e),
        }
    }
    let renderer = FieldRenderer { field: &state.field, options: opts, background: state.render.background };
    let tau = default_tau(state.render.far);
    for pair in ds.views.windows(2) {
        let w = depth_warp_error(&renderer, &pair[0].camera, &pair[1].camera, tau)?;
        let scene = format!("{}->{}", pair[0].id, pair[1].id);
        records.push(record("warp_valid_fraction", &scene, w.valid_fraction));
        if let Some(mse) = w.mse {
            records.push(record("warp_mse", &scene, mse));
        }
    }
    Ok(records)
}

/// Least-squares point closest to every camera's optical axis.
fn look_at_point(cameras: &[Camera]) -> Result<[f64; 3]> {
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for c in cameras {
        let m = &c.c2w;
        let d = normalize([-m[0][2], -m[1][2], -m[2][2]]);
        let o = c.origin();
        for i in 0..3 {
            for j in 0..3 {
                let p = if i == j { 1.0 } else { 0.0 } - d[i] * d[j];
                a[i][j] += p;
                b[i] += p * o[j];
            }
        }
    }
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&a);
    if d.abs() < 1e-9 {
        return Err(Error::contract("camera axes are parallel; no common look-at point"));
    }
    // Cramer's rule
    Ok([0, 1, 2].map(|k| {
        let mut m = a;
        for (row, rhs) in m.iter_mut().zip(b) {
            row[k] = rhs;
        }
        det(&m) / d
    }))
}

/// Cameras on a horizontal circle around the poses' common look-at point,
/// at their mean horizontal distance and mean height.
fn orbit(cameras: &[Camera], frames: usize) -> Result<Vec<Camera>> {
    let Some(first) = cameras.first() else {
        return Err(Error::contract("manifest has no poses to orbit"));
    };
    if frames == 0 {
        return Err(Error::contract("at least one frame is required"));
    }
    let target = if cameras.len() >= 2 {
        look_at_point(cameras)?
    } else {
        first.ray_at(first.intrinsics.cx, first.intrinsics.cy).at(1.0)
    };
    let n = cameras.len() as f64;
    let horizontal = |c: &Camera| {
        let o = sub(c.origin(), target);
        (o[0] * o[0] + o[2] * o[2]).sqrt()
    };
    let radius = cameras.iter().map(horizontal).sum::<f64>() / n;
    let height = cameras.iter().map(|c| c.origin()[1]).sum::<f64>() / n;
    if radius < 1e-9 {
        return Err(Error::contract("poses do not surround a common point"));
    }
    let start = {
        let o = sub(first.origin(), target);
        o[2].atan2(o[0])
    };
    (0..frames)
        .map(|i| {
            let a = start + 2.0 * std::f64::consts::PI * i as f64 / frames as f64;
            let eye = [target[0] + radius * a.cos(), height, target[2] + radius * a.sin()];
            Camera::look_at(first.intrinsics, eye, target, [0.0, 1.0, 0.0])
        })
        .collect()
}
