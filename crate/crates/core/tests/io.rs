use stylefield::io::image::{load_png, to_rgb8};
use stylefield::io::scene::{ring_angles, BACKGROUND};
use stylefield::io::{generate_scene, Dataset, Manifest, Scene, SceneKind, SceneSpec};
use stylefield::nerf::camera::{dot, norm, normalize, scale, sub, Ray};
use stylefield::nerf::Camera;

fn spec(seed: u64) -> SceneSpec {
    SceneSpec { kind: SceneKind::Sphere, views: 8, resolution: 64, seed }
}

/// Closest-approach intersection: project the centre onto the ray, then step
/// back along it by the half chord.
fn geometric_hit(ray: &Ray, center: [f64; 3], radius: f64) -> Option<f64> {
    let to_center = sub(center, ray.origin);
    let along = dot(to_center, ray.dir);
    let closest = sub(to_center, scale(ray.dir, along));
    let miss2 = dot(closest, closest);
    if miss2 > radius * radius {
        return None;
    }
    let half_chord = (radius * radius - miss2).sqrt();
    let t = along - half_chord;
    (t > 0.0).then_some(t)
}

#[test]
fn sphere_view_matches_independent_intersection() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate_scene(&spec(3), dir.path()).unwrap();
    let ds = Dataset::load(&out.train).unwrap();
    let scene = Scene::new(SceneKind::Sphere, 3);
    let camera: &Camera = &ds.views[0].camera;
    let (image, hits) = scene.render(camera);
    let prim = &scene.primitives[0];
    let (h, w) = (camera.height(), camera.width());
    let mut covered = 0;
    for row in 0..h {
        for col in 0..w {
            let ray = camera.pixel_ray(col, row).unwrap();
            assert!((norm(ray.dir) - 1.0).abs() < 1e-12);
            let p = row * w + col;
            let expect = match geometric_hit(&ray, [0.0; 3], 1.0) {
                Some(t) => {
                    covered += 1;
                    assert!((hits[p].unwrap() - t).abs() < 1e-6, "pixel ({col}, {row})");
                    let point = ray.at(t);
                    scene.shade(prim, point, normalize(point))
                }
                None => {
                    assert!(hits[p].is_none(), "pixel ({col}, {row}) should miss");
                    BACKGROUND
                }
            };
            for c in 0..3 {
                assert!((image.data()[c * h * w + p] - expect[c]).abs() < 1e-6);
            }
        }
    }
    assert!(covered > 200 && covered < h * w, "sphere covers {covered} pixels");
    // the stored PNG is the 8-bit quantization of the same render
    assert_eq!(ds.views[0].image, stylefield::io::image::from_rgb8(&to_rgb8(&image).unwrap()));
}

#[test]
fn generation_layout_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ga = generate_scene(&spec(11), a.path()).unwrap();
    let gb = generate_scene(&spec(11), b.path()).unwrap();
    let train = Manifest::read(&ga.train).unwrap();
    let holdout = Manifest::read(&ga.holdout).unwrap();
    assert_eq!(train.frames.len(), 8);
    assert_eq!(holdout.frames.len(), 2);
    assert_eq!((train.w, train.h), (64, 64));
    for (da, db) in [(&ga.train, &gb.train), (&ga.holdout, &gb.holdout)] {
        let mut names: Vec<_> = std::fs::read_dir(da).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), if da == &ga.train { 9 } else { 3 });
        for n in names {
            assert_eq!(std::fs::read(da.join(&n)).unwrap(), std::fs::read(db.join(&n)).unwrap(), "{n:?}");
        }
    }
    let c = tempfile::tempdir().unwrap();
    let gc = generate_scene(&spec(12), c.path()).unwrap();
    assert_ne!(
        std::fs::read(ga.train.join("r_000.png")).unwrap(),
        std::fs::read(gc.train.join("r_000.png")).unwrap()
    );
}

#[test]
fn holdout_views_sit_between_training_views() {
    let (train, holdout) = ring_angles(&spec(5));
    let step = train[1] - train[0];
    for h in holdout {
        let k = ((h - train[0]) / step).floor();
        assert!(((h - train[0]) / step - k - 0.5).abs() < 1e-9);
    }
}

#[test]
fn every_scene_kind_loads_with_valid_poses() {
    for kind in [SceneKind::Sphere, SceneKind::Boxes, SceneKind::Plane] {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_scene(&SceneSpec { kind, views: 4, resolution: 16, seed: 1 }, dir.path()).unwrap();
        let ds = Dataset::load(&g.train).unwrap();
        assert_eq!(ds.views.len(), 4);
        let lit = ds.views[0].image.data().iter().filter(|&&v| v > 0.0).count();
        assert!(lit > 0, "{kind} renders only background");
        assert!(ds.manifest.near() < ds.manifest.far());
    }
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_scene(&SceneSpec { kind: SceneKind::Sphere, views: 1, resolution: 16, seed: 0 }, dir.path()).is_err());
}

#[test]
fn manifest_load_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_scene(&SceneSpec { views: 3, resolution: 8, ..spec(2) }, dir.path()).unwrap();
    let first = Manifest::read(&g.train).unwrap();
    let copy = dir.path().join("copy.json");
    first.write(&copy).unwrap();
    let second = Manifest::read(&copy).unwrap();
    assert_eq!(first, second);
    let a = first.cameras().unwrap();
    let b = second.cameras().unwrap();
    assert_eq!(a, b);
}

#[test]
fn stylized_pairing_reports_missing_views() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_scene(&SceneSpec { views: 4, resolution: 8, ..spec(2) }, dir.path()).unwrap();
    let ds = Dataset::load(&g.train).unwrap();
    let styled_dir = dir.path().join("styled");
    let styled = stylefield::io::stylize_dataset(&ds, "hue:0".parse().unwrap(), &styled_dir).unwrap();
    assert_eq!(styled.frames.len(), 4);
    let mut short = styled.clone();
    short.frames.truncate(2);
    short.write(&styled_dir).unwrap();
    let err = ds.poses().pair(&Dataset::load(&styled_dir).unwrap()).unwrap_err().to_string();
    assert!(err.contains("r_002") && err.contains("r_003"), "{err}");
    let full = dir.path().join("styled_full");
    stylefield::io::stylize_dataset(&ds, "hue:0".parse().unwrap(), &full).unwrap();
    let full = Dataset::load(&full).unwrap();
    let paired = ds.poses().pair(&full).unwrap();
    // identity hue rotation survives 8-bit quantization exactly
    for (img, view) in paired.iter().zip(&ds.views) {
        assert_eq!(**img, view.image);
    }
    assert_eq!(load_png(g.train.join("r_000.png")).unwrap(), ds.views[0].image);
}
