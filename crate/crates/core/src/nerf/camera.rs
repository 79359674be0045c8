//! Pinhole cameras. Camera space is right-handed with the camera looking
//! along -Z, +X right and +Y up; image rows grow downwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// A ray `o + t d` with unit `d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels with the principal point at the frame centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// Camera-to-world transform, row-major.
    pub c2w: [[f64; 4]; 4],
}

/// Largest deviation of the rotation block from orthonormality.
pub fn orthonormality_error(m: &[[f64; 4]; 4]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((d - want).abs());
        }
    }
    worst
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, c2w: [[f64; 4]; 4]) -> Result<Self> {
        let Intrinsics { fx, fy, cx, cy, width, height } = intrinsics;
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::contract(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !cx.is_finite() || !cy.is_finite() || width == 0 || height == 0 {
            return Err(Error::contract("principal point must be finite and the frame non-empty"));
        }
        if c2w.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("camera matrix has non-finite entries"));
        }
        let err = orthonormality_error(&c2w);
        if err > 1e-4 {
            return Err(Error::contract(format!("rotation block is not orthonormal (error {err:.2e})")));
        }
        Ok(Self { intrinsics, c2w })
    }

    /// Camera at `eye` looking at `target`, with `up` resolving the roll.
    pub fn look_at(intrinsics: Intrinsics, eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let back = normalize(sub(eye, target));
        let right = cross(up, back);
        if norm(right) < 1e-9 {
            return Err(Error::contract("look_at: up vector parallel to the viewing direction"));
        }
        let right = normalize(right);
        let true_up = cross(back, right);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r] = [right[r], true_up[r], back[r], eye[r]];
        }
        m[3][3] = 1.0;
        Self::new(intrinsics, m)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn origin(&self) -> Vec3 {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    fn to_world(&self, v: Vec3) -> Vec3 {
        let m = &self.c2w;
        [dot([m[0][0], m[0][1], m[0][2]], v), dot([m[1][0], m[1][1], m[1][2]], v), dot([m[2][0], m[2][1], m[2][2]], v)]
    }

    /// Ray through continuous image coordinates `(u, v)`; `(cx, cy)` maps to
    /// the optical axis.
    pub fn ray_at(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let d_cam = [(u - k.cx) / k.fx, -(v - k.cy) / k.fy, -1.0];
        Ray {
            origin: self.origin(),
            dir: normalize(self.to_world(d_cam)),
        }
    }

    /// Ray through the centre of pixel `(col, row)`.
    pub fn pixel_ray(&self, col: usize, row: usize) -> Result<Ray> {
        if col >= self.width() || row >= self.height() {
            return Err(Error::contract(format!(
                "pixel ({col}, {row}) outside {}x{} frame",
                self.width(),
                self.height()
            )));
        }
        Ok(self.ray_at(col as f64 + 0.5, row as f64 + 0.5))
    }

    /// Rays for the listed `(col, row)` pixels.
    pub fn rays(&self, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
        pixels.iter().map(|&(c, r)| self.pixel_ray(c, r)).collect()
    }

    /// Rays for every pixel in row-major order.
    pub fn all_rays(&self) -> Vec<Ray> {
        let mut out = Vec::with_capacity(self.width() * self.height());
        for row in 0..self.height() {
            for col in 0..self.width() {
                out.push(self.ray_at(col as f64 + 0.5, row as f64 + 0.5));
            }
        }
        out
    }

    /// Rays for the `size_x x size_y` rectangle with top-left `(x0, y0)`,
    /// row-major.
    pub fn patch_rays(&self, x0: usize, y0: usize, size_x: usize, size_y: usize) -> Result<Vec<Ray>> {
        if x0 + size_x > self.width() || y0 + size_y > self.height() {
            return Err(Error::contract("patch extends beyond the frame"));
        }
        let mut out = Vec::with_capacity(size_x * size_y);
        for row in y0..y0 + size_y {
            for col in x0..x0 + size_x {
                out.push(self.ray_at(col as f64 + 0.5, row as f64 + 0.5));
            }
        }
        Ok(out)
    }

    /// Image coordinates `(u, v)` and the distance along the optical axis of
    /// a world point, or `None` when it lies behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let m = &self.c2w;
        let rel = sub(p, self.origin());
        // inverse rotation is the transpose
        let x = dot([m[0][0], m[1][0], m[2][0]], rel);
        let y = dot([m[0][1], m[1][1], m[2][1]], rel);
        let z = dot([m[0][2], m[1][2], m[2][2]], rel);
        if z >= -1e-12 {
            return None;
        }
        let k = &self.intrinsics;
        let depth = -z;
        Some((k.cx + k.fx * x / depth, k.cy - k.fy * y / depth, depth))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: [[f64; 4]; 4] = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];

    fn k() -> Intrinsics {
        Intrinsics { fx: 50.0, fy: 40.0, cx: 32.0, cy: 24.0, width: 64, height: 48 }
    }

    #[test]
    fn principal_axis_and_offsets() {
        let cam = Camera::new(k(), IDENTITY).unwrap();
        let r = cam.ray_at(32.0, 24.0);
        assert_eq!(r.dir, [0.0, 0.0, -1.0]);
        let r = cam.ray_at(32.0 + 50.0, 24.0);
        let s = 1.0 / 2f64.sqrt();
        assert!((r.dir[0] - s).abs() < 1e-15 && r.dir[1] == 0.0 && (r.dir[2] + s).abs() < 1e-15);
        // rows grow downwards, +Y is up
        assert!(cam.ray_at(32.0, 0.0).dir[1] > 0.0);
    }

    #[test]
    fn translated_origin() {
        let mut m = IDENTITY;
        m[0][3] = 1.0;
        m[1][3] = 2.0;
        m[2][3] = 3.0;
        let cam = Camera::new(k(), m).unwrap();
        assert!(cam.all_rays().iter().all(|r| r.origin == [1.0, 2.0, 3.0]));
    }

    #[test]
    fn out_of_frame_pixel_is_rejected() {
        let cam = Camera::new(k(), IDENTITY).unwrap();
        assert!(cam.pixel_ray(63, 47).is_ok());
        assert!(matches!(cam.pixel_ray(64, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_cameras() {
        let mut bad = k();
        bad.fx = 0.0;
        assert!(Camera::new(bad, IDENTITY).is_err());
        let mut skew = IDENTITY;
        skew[0][1] = 0.1;
        assert!(Camera::new(k(), skew).is_err());
    }

    #[test]
    fn project_inverts_ray_at() {
        let cam = Camera::look_at(k(), [3.0, 1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        let r = cam.ray_at(10.25, 40.5);
        let (u, v, _) = cam.project(r.at(2.5)).unwrap();
        assert!((u - 10.25).abs() < 1e-9 && (v - 40.5).abs() < 1e-9);
        let behind = r.at(-1.0);
        assert!(cam.project(behind).is_none());
        let centre = cam.ray_at(32.0, 24.0);
        let to_target = normalize(sub([0.0; 3], cam.origin()));
        assert!(norm(sub(centre.dir, to_target)) < 1e-12);
    }
}
