#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::Path;

use rand::Rng;
use stylefield::io::{generate_scene, Dataset, PoseSet, SceneKind, SceneSpec};
use stylefield::nerf::{render_view, FieldConfig};
use stylefield::tensor::Tensor;
use stylefield::trainer::{
    sample_corner, sample_patch, step_rng, Checkpoint, Finetuner, Pretrainer, StyleSets, TrainConfig,
};
use stylefield::Error;

fn tiny_field() -> FieldConfig {
    FieldConfig {
        hidden_width: 32,
        hidden_layers: 2,
        pos_frequencies: 4,
        dir_frequencies: 2,
        scene_bound: 4.0,
    }
}

fn scene(dir: &Path, resolution: usize) -> Dataset {
    let spec = SceneSpec { kind: SceneKind::Sphere, views: 4, resolution, seed: 5 };
    Dataset::load(generate_scene(&spec, dir).unwrap().train).unwrap()
}

fn pretrain_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        rays_per_step: 64,
        samples_per_ray: 16,
        field: tiny_field(),
        ..TrainConfig::pretrain()
    }
}

fn finetune_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        patch_size: 8,
        samples_per_ray: 16,
        projections: 8,
        ..TrainConfig::finetune()
    }
}

fn pretrained(ds: &Dataset, iterations: u64) -> Checkpoint {
    stylefield::trainer::pretrain(ds, pretrain_config(iterations)).unwrap().0
}

fn renders(ckpt: &Checkpoint, poses: &PoseSet, samples: usize) -> Vec<Tensor<f64>> {
    let opts = ckpt.render.sample_options(samples, false);
    poses
        .cameras
        .iter()
        .map(|c| render_view(&ckpt.field, c, &opts, ckpt.render.background).unwrap().rgb)
        .collect()
}

fn tints(poses: &PoseSet, color: [f64; 3]) -> Vec<Tensor<f64>> {
    poses
        .cameras
        .iter()
        .map(|c| Tensor::from_fn(vec![3, c.height(), c.width()], |i| color[i / (c.height() * c.width())]))
        .collect()
}

fn param_rms_change(a: &Checkpoint, b: &Checkpoint) -> f64 {
    let (mut sq, mut n) = (0.0, 0usize);
    for (p, q) in a.field.params().iter().zip(b.field.params()) {
        for (x, y) in p.data().iter().zip(q.data()) {
            sq += (*x as f64 - *y as f64).powi(2);
            n += 1;
        }
    }
    (sq / n as f64).sqrt()
}

#[test]
fn gray_images_are_fit() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = scene(dir.path(), 16);
    for v in &mut ds.views {
        v.image = Tensor::full(v.image.shape().to_vec(), 0.5);
    }
    let (_, trace) = stylefield::trainer::pretrain(&ds, pretrain_config(2000)).unwrap();
    let tail: f64 = trace[1900..].iter().map(|r| r.data).sum::<f64>() / 100.0;
    assert!(tail < 1e-3, "final rgb mse {tail}");
}

#[test]
fn single_view_trains() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = scene(dir.path(), 16);
    ds.views.truncate(1);
    let (ckpt, trace) = stylefield::trainer::pretrain(&ds, pretrain_config(50)).unwrap();
    assert_eq!(trace.len(), 50);
    assert_eq!(ckpt.iteration, 50);
    assert!(trace[49].data < trace[0].data);
}

#[test]
fn empty_dataset_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = scene(dir.path(), 16);
    ds.views.clear();
    assert!(matches!(Pretrainer::new(&ds, pretrain_config(1)), Err(Error::Contract(_))));
}

#[test]
fn checkpoint_bytes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let ckpt = pretrained(&ds, 5);
    let path = dir.path().join("c.sfck");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.iteration, 5);
    assert_eq!(back.config, ckpt.config);
    assert_eq!(back.render, ckpt.render);
    assert_eq!(back.field.params(), ckpt.field.params());
    assert_eq!(back.adam, ckpt.adam);

    let mut bytes = std::fs::read(&path).unwrap();
    // the config hash string starts right after magic, version and its length
    bytes[12] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn pretrain_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let (straight, trace) = stylefield::trainer::pretrain(&ds, pretrain_config(30)).unwrap();

    let mut first = Pretrainer::new(&ds, pretrain_config(30)).unwrap();
    let mut head = Vec::new();
    for _ in 0..12 {
        head.push(first.step().unwrap());
    }
    let path = dir.path().join("mid.sfck");
    first.state().save(&path).unwrap();
    drop(first);
    let mut resumed = Pretrainer::resume(&ds, Checkpoint::load(&path).unwrap()).unwrap();
    head.extend(resumed.run(|_, _| Ok(())).unwrap());
    assert_eq!(head, trace);
    assert_eq!(resumed.state().field.params(), straight.field.params());
}

#[test]
fn finetune_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let base = pretrained(&ds, 20);
    let poses = ds.poses();
    let styled = tints(&poses, [0.8, 0.3, 0.1]);
    let set = || StyleSets { first: styled.iter().collect(), second: None };
    let (straight, trace) = stylefield::trainer::finetune(base.clone(), &poses, set(), finetune_config(8)).unwrap();

    let mut a = Finetuner::new(base, &poses, set(), finetune_config(8)).unwrap();
    let mut got = vec![a.step().unwrap(), a.step().unwrap(), a.step().unwrap()];
    let mut bytes = Vec::new();
    a.state().write(&mut bytes).unwrap();
    let mid = Checkpoint::read(&mut bytes.as_slice(), Path::new("mid")).unwrap();
    let mut b = Finetuner::new(mid, &poses, set(), finetune_config(8)).unwrap();
    got.extend(b.run(|_, _| Ok(())).unwrap());
    assert_eq!(got, trace);
    assert_eq!(b.state().field.params(), straight.field.params());
}

#[test]
fn patch_corners_are_uniform() {
    // 33 x 33 possible corners; quadrant counts are weighted by area
    let (w, h, s) = (64, 48, 16);
    let (nx, ny) = (w - s + 1, h - s + 1);
    let split = |n: usize| n / 2;
    let mut counts = [0usize; 4];
    let draws = 10_000;
    for i in 0..draws {
        let mut rng = step_rng(17, i);
        let (x, y) = sample_corner(w, h, s, &mut rng).unwrap();
        counts[(x >= split(nx)) as usize + 2 * (y >= split(ny)) as usize] += 1;
    }
    let fx = [split(nx) as f64 / nx as f64, 1.0 - split(nx) as f64 / nx as f64];
    let fy = [split(ny) as f64 / ny as f64, 1.0 - split(ny) as f64 / ny as f64];
    let chi2: f64 = (0..4)
        .map(|q| {
            let e = draws as f64 * fx[q % 2] * fy[q / 2];
            (counts[q] as f64 - e).powi(2) / e
        })
        .sum();
    // 99th percentile of chi-square with 3 degrees of freedom
    assert!(chi2 < 11.345, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn patch_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let cam = &ds.views[0].camera;
    let mut rng = step_rng(0, 0);
    for _ in 0..20 {
        assert_eq!(sample_corner(16, 16, 16, &mut rng).unwrap(), (0, 0));
    }
    assert!(matches!(sample_patch(cam, 17, &mut rng), Err(Error::Contract(_))));
    let p = sample_patch(cam, 8, &mut rng).unwrap();
    assert_eq!(p.rays.len(), 64);
    assert_eq!(p.rays[9], cam.pixel_ray(p.x0 + 1, p.y0 + 1).unwrap());
    let seq = |seed| {
        let mut r = step_rng(seed, 3);
        (0..5).map(|_| sample_corner(40, 30, 8, &mut r).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(seq(1), seq(1));
    assert_ne!(seq(1), seq(2));
    assert!(rng.random::<u32>() != rng.random::<u32>());
}

#[test]
fn identity_style_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let base = pretrained(&ds, 300);
    let poses = ds.poses();
    let cfg = TrainConfig { stratified: false, lambda_dist: 0.0, ..finetune_config(500) };
    let styled = renders(&base, &poses, cfg.samples_per_ray);
    let (after, trace) = stylefield::trainer::finetune(
        base.clone(),
        &poses,
        StyleSets { first: styled.iter().collect(), second: None },
        cfg,
    )
    .unwrap();
    assert!(trace[0].data < 1e-6, "initial style loss {}", trace[0].data);
    let drift = param_rms_change(&base, &after);
    assert!(drift < 1e-3, "parameter drift {drift}");
}

#[test]
fn style_and_distortion_are_the_only_gradient_sources() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let base = pretrained(&ds, 20);
    let poses = ds.poses();
    let styled = tints(&poses, [0.2, 0.6, 0.9]);
    let grads = |style: f64, lambda: f64| {
        let mut cfg = TrainConfig { lambda_dist: lambda, ..finetune_config(1) };
        cfg.weights.style = style;
        let t = Finetuner::new(base.clone(), &poses, StyleSets { first: styled.iter().collect(), second: None }, cfg).unwrap();
        t.evaluate().unwrap()
    };
    let total = grads(1.0, 0.5);
    let style_only = grads(1.0, 0.0);
    let dist_only = grads(0.0, 0.5);
    assert_eq!(total.record.data, style_only.record.data);
    assert_eq!(style_only.record.loss, style_only.record.data);
    let scale = total.grads.iter().flat_map(|g| g.data()).fold(0f32, |m, v| m.max(v.abs()));
    assert!(scale > 0.0);
    for ((t, s), d) in total.grads.iter().zip(&style_only.grads).zip(&dist_only.grads) {
        for ((a, b), c) in t.data().iter().zip(s.data()).zip(d.data()) {
            assert!((a - (b + c)).abs() <= 1e-4 * scale, "{a} vs {b} + {c}");
        }
    }
    let none = grads(0.0, 0.0);
    assert!(none.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn rgb_weight_off_leaves_only_distortion_in_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let mut cfg = TrainConfig { lambda_dist: 0.0, ..pretrain_config(1) };
    cfg.weights.rgb = 0.0;
    let eval = Pretrainer::new(&ds, cfg).unwrap().evaluate().unwrap();
    assert!(eval.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn blend_endpoints_reproduce_single_style_traces() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let base = pretrained(&ds, 20);
    let poses = ds.poses();
    let (a, b) = (tints(&poses, [0.9, 0.2, 0.2]), tints(&poses, [0.1, 0.3, 0.9]));
    let run = |first: &[Tensor<f64>], second: Option<&[Tensor<f64>]>, t: Option<f64>| {
        let cfg = TrainConfig { blend: t, ..finetune_config(6) };
        let sets = StyleSets { first: first.iter().collect(), second: second.map(|s| s.iter().collect()) };
        stylefield::trainer::finetune(base.clone(), &poses, sets, cfg).unwrap()
    };
    let (ca, ta) = run(&a, None, None);
    let (cb, tb) = run(&b, None, None);
    let (c1, t1) = run(&a, Some(&b), Some(1.0));
    let (c0, t0) = run(&a, Some(&b), Some(0.0));
    assert_eq!(t1, ta);
    assert_eq!(t0, tb);
    assert_eq!(c1.field.params(), ca.field.params());
    assert_eq!(c0.field.params(), cb.field.params());
}

#[test]
fn blend_arguments_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let base = pretrained(&ds, 1);
    let poses = ds.poses();
    let a = tints(&poses, [0.5; 3]);
    let sets = |second: bool| StyleSets { first: a.iter().collect(), second: second.then(|| a.iter().collect()) };
    let cfg = |t| TrainConfig { blend: t, ..finetune_config(1) };
    assert!(Finetuner::new(base.clone(), &poses, sets(false), cfg(Some(0.5))).is_err());
    assert!(Finetuner::new(base.clone(), &poses, sets(true), cfg(None)).is_err());
    assert!(Finetuner::new(base.clone(), &poses, sets(true), cfg(Some(1.5))).is_err());
    assert!(Finetuner::new(base.clone(), &poses, sets(false), TrainConfig { patch_size: 4, ..cfg(None) }).is_err());
    assert!(Finetuner::new(base, &poses, sets(true), cfg(Some(0.25))).is_ok());
}

#[test]
fn pose_mismatch_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let base = pretrained(&ds, 1);
    let poses = ds.poses();
    let styled = tints(&poses, [0.5; 3]);
    let short = StyleSets { first: styled[..3].iter().collect(), second: None };
    let err = Finetuner::new(base.clone(), &poses, short, finetune_config(1)).err().unwrap();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let wrong = vec![Tensor::zeros(vec![3, 8, 8]); 4];
    let err = Finetuner::new(base, &poses, StyleSets { first: wrong.iter().collect(), second: None }, finetune_config(1))
        .err()
        .unwrap()
        .to_string();
    assert!(err.contains(&poses.ids[0]), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_a_batch_dump() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene(dir.path(), 16);
    let mut ckpt = pretrained(&ds, 1);
    for v in ckpt.field.params_mut()[0].data_mut() {
        *v = f32::NAN;
    }
    let mut t = Pretrainer::resume(&ds, ckpt).unwrap();
    match t.step() {
        Err(Error::NonFinite { iteration, dump }) => {
            assert_eq!(iteration, 1);
            assert!(dump.contains(&ds.views[0].id) || dump.contains(&ds.views[1].id), "{dump}");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert_eq!(t.state().iteration, 1);
}
