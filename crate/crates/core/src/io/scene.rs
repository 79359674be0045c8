//! Analytic test scenes: closed-form ray intersection with Lambertian
//! shading on a black background, photographed from a ring of cameras.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stylefield_tensor::Tensor;

use super::image::save_png;
use super::manifest::{Frame, Manifest};
use super::stylize::hsv_to_rgb;
use crate::error::{Error, Result};
use crate::nerf::camera::{dot, normalize, sub, Vec3};
use crate::nerf::{Camera, Intrinsics, Ray};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Sphere,
    Boxes,
    Plane,
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "boxes" => Ok(Self::Boxes),
            "plane" => Ok(Self::Plane),
            other => Err(Error::contract(format!("unknown scene kind {other:?} (sphere, boxes, plane)"))),
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sphere => "sphere",
            Self::Boxes => "boxes",
            Self::Plane => "plane",
        })
    }
}

/// Surface color as a function of the hit point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Albedo {
    Constant([f64; 3]),
    /// Hue sweeping `hue_lo..hue_hi` degrees from the bottom to the top of
    /// a sphere, with value banded by longitude.
    SphereSweep { hue_lo: f64, hue_hi: f64, bands: f64, phase: f64 },
    /// Smooth two-tone pattern over the xz plane.
    Ripple { a: [f64; 3], b: [f64; 3], freq: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: Vec3, max: Vec3 },
    /// Square patch of the plane `y = height`.
    Floor { height: f64, half_extent: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: Albedo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub color: [f64; 3],
}

/// Camera ring and sampling range that frame a scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Framing {
    pub radius: f64,
    pub elevation_deg: f64,
    pub near: f64,
    pub far: f64,
    pub scene_bound: f64,
    pub fov_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    /// Unit direction towards the light.
    pub light: Vec3,
    pub ambient: f64,
    pub framing: Framing,
}

pub const BACKGROUND: [f64; 3] = [0.0; 3];

/// Ray parameter of the nearer forward intersection with a sphere.
pub fn intersect_sphere(ray: &Ray, center: Vec3, radius: f64) -> Option<f64> {
    let oc = sub(ray.origin, center);
    let b = dot(oc, ray.dir);
    let c = dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|&t| t > 1e-9)
}

fn intersect_cuboid(ray: &Ray, min: Vec3, max: Vec3) -> Option<(f64, Vec3)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    for a in 0..3 {
        let inv = 1.0 / ray.dir[a];
        let (mut lo, mut hi) = ((min[a] - ray.origin[a]) * inv, (max[a] - ray.origin[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        if lo > t0 {
            t0 = lo;
            axis = a;
        }
        t1 = t1.min(hi);
    }
    if t0 > t1 || t0 <= 1e-9 {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = -ray.dir[axis].signum();
    Some((t0, n))
}

impl Albedo {
    fn at(&self, p: Vec3, shape: &Shape) -> [f64; 3] {
        match *self {
            Albedo::Constant(c) => c,
            Albedo::SphereSweep { hue_lo, hue_hi, bands, phase } => {
                let (c, r) = match *shape {
                    Shape::Sphere { center, radius } => (center, radius),
                    _ => ([0.0; 3], 1.0),
                };
                let q = sub(p, c);
                let height = (q[1] / r).clamp(-1.0, 1.0);
                let hue = hue_lo + (hue_hi - hue_lo) * 0.5 * (height + 1.0);
                let lon = q[2].atan2(q[0]);
                let value = 0.8 + 0.15 * (bands * lon + phase).sin();
                hsv_to_rgb(hue, 0.85, value)
            }
            Albedo::Ripple { a, b, freq } => {
                let m = 0.5 + 0.5 * (freq * p[0]).sin() * (freq * p[2]).cos();
                [0, 1, 2].map(|i| a[i] * (1.0 - m) + b[i] * m)
            }
        }
    }
}

impl Scene {
    pub fn new(kind: SceneKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let light = normalize([0.5, 0.8, 0.6]);
        match kind {
            SceneKind::Sphere => Self {
                primitives: vec![Primitive {
                    shape: Shape::Sphere { center: [0.0; 3], radius: 1.0 },
                    albedo: Albedo::SphereSweep {
                        hue_lo: 0.0,
                        hue_hi: 60.0,
                        bands: 3.0,
                        phase: rng.random_range(0.0..2.0 * PI),
                    },
                }],
                light,
                ambient: 0.35,
                framing: Framing { radius: 4.0, elevation_deg: 15.0, near: 2.5, far: 5.5, scene_bound: 4.0, fov_deg: 40.0 },
            },
            SceneKind::Boxes => {
                let mut primitives = Vec::new();
                for i in 0..3 {
                    let angle = 2.0 * PI * i as f64 / 3.0 + rng.random_range(0.0..0.5);
                    let (cx, cz) = (0.7 * angle.cos(), 0.7 * angle.sin());
                    let half = rng.random_range(0.25..0.45);
                    let hue = 120.0 * i as f64 + rng.random_range(0.0..40.0);
                    primitives.push(Primitive {
                        shape: Shape::Cuboid {
                            min: [cx - half, -0.6, cz - half],
                            max: [cx + half, -0.6 + 2.0 * half, cz + half],
                        },
                        albedo: Albedo::Constant(hsv_to_rgb(hue, 0.7, 0.9)),
                    });
                }
                Self {
                    primitives,
                    light,
                    ambient: 0.35,
                    framing: Framing { radius: 4.0, elevation_deg: 20.0, near: 2.0, far: 6.0, scene_bound: 4.0, fov_deg: 40.0 },
                }
            }
            SceneKind::Plane => Self {
                primitives: vec![Primitive {
                    shape: Shape::Floor { height: 0.0, half_extent: 1.5 },
                    albedo: Albedo::Ripple {
                        a: [0.8, 0.3, 0.2],
                        b: [0.9, 0.8, 0.3],
                        freq: rng.random_range(2.0..3.0),
                    },
                }],
                light,
                ambient: 0.35,
                framing: Framing { radius: 4.0, elevation_deg: 45.0, near: 2.0, far: 7.0, scene_bound: 4.0, fov_deg: 45.0 },
            },
        }
    }

    pub fn hit(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<(f64, Vec3, &Primitive)> = None;
        for prim in &self.primitives {
            let found = match prim.shape {
                Shape::Sphere { center, radius } => intersect_sphere(ray, center, radius)
                    .map(|t| (t, normalize(sub(ray.at(t), center)))),
                Shape::Cuboid { min, max } => intersect_cuboid(ray, min, max),
                Shape::Floor { height, half_extent } => {
                    let t = (height - ray.origin[1]) / ray.dir[1];
                    let p = ray.at(t);
                    (t > 1e-9 && p[0].abs() <= half_extent && p[2].abs() <= half_extent)
                        .then(|| (t, [0.0, ray.origin[1].signum(), 0.0]))
                }
            };
            if let Some((t, n)) = found {
                if best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, n, prim));
                }
            }
        }
        best.map(|(t, normal, prim)| {
            let point = ray.at(t);
            Hit { t, point, normal, color: self.shade(prim, point, normal) }
        })
    }

    /// Lambertian shading with an ambient floor.
    pub fn shade(&self, prim: &Primitive, point: Vec3, normal: Vec3) -> [f64; 3] {
        let albedo = prim.albedo.at(point, &prim.shape);
        let k = self.ambient + (1.0 - self.ambient) * dot(normal, self.light).max(0.0);
        albedo.map(|a| a * k)
    }

    pub fn trace(&self, ray: &Ray) -> [f64; 3] {
        self.hit(ray).map_or(BACKGROUND, |h| h.color)
    }

    /// Pixel-centre render and hit distance (`None` on background).
    pub fn render(&self, camera: &Camera) -> (Tensor<f64>, Vec<Option<f64>>) {
        let (h, w) = (camera.height(), camera.width());
        let rays = camera.all_rays();
        let hits: Vec<Option<Hit>> = rays.iter().map(|r| self.hit(r)).collect();
        let image = Tensor::from_fn(vec![3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            hits[p].map_or(BACKGROUND[c], |hit| hit.color[c])
        });
        (image, hits.iter().map(|h| h.map(|h| h.t)).collect())
    }

    pub fn intrinsics(&self, resolution: usize) -> Intrinsics {
        let half = (self.framing.fov_deg.to_radians() / 2.0).tan();
        Intrinsics::centered(resolution as f64 / 2.0 / half, resolution, resolution)
    }

    /// Camera on the ring at azimuth `angle` (radians), looking at the origin.
    pub fn ring_camera(&self, angle: f64, resolution: usize) -> Camera {
        let f = &self.framing;
        let el = f.elevation_deg.to_radians();
        let eye = [f.radius * el.cos() * angle.cos(), f.radius * el.sin(), f.radius * el.cos() * angle.sin()];
        Camera::look_at(self.intrinsics(resolution), eye, [0.0; 3], [0.0, 1.0, 0.0]).expect("ring camera")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub views: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Where a generated scene was written.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub train: PathBuf,
    pub holdout: PathBuf,
}

pub const HOLDOUT_VIEWS: usize = 2;

/// Azimuths of the training ring and of the held-out views placed halfway
/// between training neighbours.
pub fn ring_angles(spec: &SceneSpec) -> (Vec<f64>, Vec<f64>) {
    let offset = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed).random_range(0.0..2.0 * PI / spec.views as f64);
    let step = 2.0 * PI / spec.views as f64;
    let train = (0..spec.views).map(|i| offset + step * i as f64).collect();
    let holdout = (0..HOLDOUT_VIEWS)
        .map(|j| offset + step * ((j * spec.views / HOLDOUT_VIEWS) as f64 + 0.5))
        .collect();
    (train, holdout)
}

fn write_split(scene: &Scene, spec: &SceneSpec, angles: &[f64], prefix: &str, dir: &Path) -> Result<()> {
    let mut frames = Vec::new();
    for (i, &a) in angles.iter().enumerate() {
        let cam = scene.ring_camera(a, spec.resolution);
        let name = format!("{prefix}_{i:03}.png");
        save_png(dir.join(&name), &scene.render(&cam).0)?;
        frames.push(Frame { file_path: name, transform_matrix: cam.c2w });
    }
    let k = scene.intrinsics(spec.resolution);
    let f = &scene.framing;
    Manifest {
        fl_x: k.fx,
        fl_y: k.fy,
        cx: k.cx,
        cy: k.cy,
        w: k.width,
        h: k.height,
        near: Some(f.near),
        far: Some(f.far),
        scene_bound: Some(f.scene_bound),
        background: Some(BACKGROUND),
        stylized_dir: None,
        frames,
    }
    .write(dir)
}

/// Writes `out/train` and `out/holdout`, each with PNG renders and a
/// manifest.
pub fn generate_scene(spec: &SceneSpec, out: impl AsRef<Path>) -> Result<GeneratedScene> {
    if spec.views < 2 {
        return Err(Error::contract("a synthetic scene needs at least two views"));
    }
    if spec.resolution < 4 {
        return Err(Error::contract("resolution must be at least 4 pixels"));
    }
    let out = out.as_ref();
    let scene = Scene::new(spec.kind, spec.seed);
    let (train_angles, holdout_angles) = ring_angles(spec);
    let generated = GeneratedScene {
        train: out.join("train"),
        holdout: out.join("holdout"),
    };
    write_split(&scene, spec, &train_angles, "r", &generated.train)?;
    write_split(&scene, spec, &holdout_angles, "h", &generated.holdout)?;
    Ok(generated)
}

/// Shortcut used by the warp-error tests: one opaque constant-color floor.
pub fn constant_floor(color: [f64; 3], half_extent: f64) -> Scene {
    Scene {
        primitives: vec![Primitive {
            shape: Shape::Floor { height: 0.0, half_extent },
            albedo: Albedo::Constant(color),
        }],
        light: [0.0, 1.0, 0.0],
        ambient: 1.0,
        framing: Framing { radius: 4.0, elevation_deg: 60.0, near: 1.0, far: 10.0, scene_bound: 8.0, fov_deg: 40.0 },
    }
}
