//! Posed image datasets described by a JSON manifest.
//!
//! ```json
//! {
//!   "fl_x": 70.0, "fl_y": 70.0,       // focal lengths in pixels
//!   "cx": 32.0, "cy": 32.0,           // principal point in pixels
//!   "w": 64, "h": 64,                 // frame size shared by all frames
//!   "near": 2.0, "far": 6.0,          // optional sampling range (0.1 / 10)
//!   "scene_bound": 2.0,               // optional encoding bound (far)
//!   "background": [0.0, 0.0, 0.0],    // optional composite color (black)
//!   "stylized_dir": "../styled",      // optional paired stylized dataset
//!   "frames": [
//!     { "file_path": "r_000.png",     // relative to the manifest
//!       "transform_matrix": [[...], [...], [...], [0, 0, 0, 1]] }
//!   ]
//! }
//! ```
//!
//! `transform_matrix` is the row-major camera-to-world transform of a camera
//! looking along its local -Z axis with +Y up.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stylefield_tensor::Tensor;

use super::image::load_png;
use crate::error::{Error, Result};
use crate::nerf::camera::orthonormality_error;
use crate::nerf::{Camera, Intrinsics, SampleOptions};

pub const MANIFEST_NAME: &str = "transforms.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

impl Frame {
    /// View identifier: the file name without extension.
    pub fn id(&self) -> String {
        Path::new(&self.file_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.file_path.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fl_x: f64,
    pub fl_y: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: usize,
    pub h: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stylized_dir: Option<String>,
    pub frames: Vec<Frame>,
}

impl Manifest {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fl_x,
            fy: self.fl_y,
            cx: self.cx,
            cy: self.cy,
            width: self.w,
            height: self.h,
        }
    }

    pub fn near(&self) -> f64 {
        self.near.unwrap_or(0.1)
    }

    pub fn far(&self) -> f64 {
        self.far.unwrap_or(10.0)
    }

    pub fn background(&self) -> [f64; 3] {
        self.background.unwrap_or([0.0; 3])
    }

    pub fn scene_bound(&self) -> f64 {
        self.scene_bound.unwrap_or_else(|| self.far())
    }

    /// Sampling range of the manifest with `samples` per ray.
    pub fn sample_options(&self, samples: usize, stratified: bool) -> SampleOptions {
        SampleOptions {
            near: self.near(),
            far: self.far(),
            samples,
            stratified,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path(path.as_ref());
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = manifest_path(path.as_ref());
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Validated cameras, one per frame. Slightly non-orthonormal rotations
    /// are repaired with a warning.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let k = self.intrinsics();
        self.frames
            .iter()
            .map(|f| {
                let mut m = f.transform_matrix;
                if m.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::contract(format!(
                        "frame {}: transform_matrix has non-finite entries",
                        f.file_path
                    )));
                }
                let err = orthonormality_error(&m);
                if err > 1e-3 {
                    log::warn!(
                        "frame {}: rotation off orthonormal by {err:.2e}, repaired by Gram-Schmidt",
                        f.file_path
                    );
                    gram_schmidt(&mut m)?;
                } else if err > 1e-4 {
                    gram_schmidt(&mut m)?;
                }
                Camera::new(k, m).map_err(|e| Error::contract(format!("frame {}: {e}", f.file_path)))
            })
            .collect()
    }
}

/// Re-orthonormalizes the rotation columns in place (x, then y, then z).
fn gram_schmidt(m: &mut [[f64; 4]; 4]) -> Result<()> {
    let mut cols = [[0.0; 3]; 3];
    for c in 0..3 {
        let mut v = [m[0][c], m[1][c], m[2][c]];
        for prev in &cols[..c] {
            let d: f64 = (0..3).map(|i| v[i] * prev[i]).sum();
            for i in 0..3 {
                v[i] -= d * prev[i];
            }
        }
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n < 1e-9 {
            return Err(Error::contract("degenerate rotation block cannot be repaired"));
        }
        cols[c] = [v[0] / n, v[1] / n, v[2] / n];
    }
    for c in 0..3 {
        for r in 0..3 {
            m[r][c] = cols[c][r];
        }
    }
    Ok(())
}

/// A directory path resolves to its `transforms.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

#[derive(Clone, Debug)]
pub struct View {
    pub id: String,
    pub camera: Camera,
    /// `3 x H x W` in `[0, 1]`.
    pub image: Tensor<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub views: Vec<View>,
}

/// Camera poses without pixels, as handed to fine-tuning.
#[derive(Clone, Debug)]
pub struct PoseSet {
    pub ids: Vec<String>,
    pub cameras: Vec<Camera>,
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path(path.as_ref());
        let manifest = Manifest::read(&path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cameras = manifest.cameras()?;
        let mut views = Vec::with_capacity(cameras.len());
        for (frame, camera) in manifest.frames.iter().zip(cameras) {
            let file = root.join(&frame.file_path);
            if !file.is_file() {
                return Err(Error::io(&file, std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found")));
            }
            let image = load_png(&file)?;
            if image.shape() != [3, manifest.h, manifest.w] {
                return Err(Error::format(
                    &file,
                    format!("image is {:?}, manifest says {}x{}", &image.shape()[1..], manifest.w, manifest.h),
                ));
            }
            views.push(View { id: frame.id(), camera, image });
        }
        Ok(Self { root, manifest, views })
    }

    pub fn poses(&self) -> PoseSet {
        PoseSet {
            ids: self.views.iter().map(|v| v.id.clone()).collect(),
            cameras: self.views.iter().map(|v| v.camera).collect(),
        }
    }

    /// The paired stylized dataset named by `stylized_dir`, if any.
    pub fn stylized(&self) -> Result<Option<Dataset>> {
        match &self.manifest.stylized_dir {
            Some(dir) => Dataset::load(self.root.join(dir)).map(Some),
            None => Ok(None),
        }
    }
}

impl PoseSet {
    /// Poses of a manifest without decoding any image.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        Ok(Self {
            ids: manifest.frames.iter().map(Frame::id).collect(),
            cameras: manifest.cameras()?,
        })
    }

    /// Images of `styled` in pose order. Every pose id must be present.
    pub fn pair<'a>(&self, styled: &'a Dataset) -> Result<Vec<&'a Tensor<f64>>> {
        let available: BTreeSet<&str> = styled.views.iter().map(|v| v.id.as_str()).collect();
        let missing: Vec<&str> = self.ids.iter().map(String::as_str).filter(|id| !available.contains(id)).collect();
        if !missing.is_empty() {
            return Err(Error::contract(format!(
                "stylized set {} is missing views: {}",
                styled.root.display(),
                missing.join(", ")
            )));
        }
        Ok(self
            .ids
            .iter()
            .map(|id| &styled.views.iter().find(|v| &v.id == id).expect("checked").image)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::image::save_png;

    fn manifest(files: &[&str]) -> Manifest {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            m[i][i] = 1.0;
        }
        m[2][3] = 3.0;
        Manifest {
            fl_x: 10.0,
            fl_y: 10.0,
            cx: 2.0,
            cy: 2.0,
            w: 4,
            h: 4,
            near: Some(1.0),
            far: None,
            scene_bound: None,
            background: None,
            stylized_dir: None,
            frames: files
                .iter()
                .map(|f| Frame { file_path: f.to_string(), transform_matrix: m })
                .collect(),
        }
    }

    #[test]
    fn minimal_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(&["a.png", "b.png"]);
        for f in ["a.png", "b.png"] {
            save_png(dir.path().join(f), &Tensor::full(vec![3, 4, 4], 0.5)).unwrap();
        }
        m.write(dir.path()).unwrap();
        let again = Manifest::read(dir.path()).unwrap();
        assert_eq!(again, m);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.views.len(), 2);
        assert_eq!(ds.views[1].id, "b");
    }

    #[test]
    fn absent_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        manifest(&["gone.png"]).write(dir.path()).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("gone.png"), "{err}");
    }

    #[test]
    fn pose_repair_and_rejection() {
        let mut m = manifest(&["a.png"]);
        m.frames[0].transform_matrix[0][1] = 0.05;
        let cams = m.cameras().unwrap();
        assert!(orthonormality_error(&cams[0].c2w) < 1e-12);
        m.frames[0].transform_matrix[0][0] = f64::NAN;
        assert!(m.cameras().is_err());
    }

    #[test]
    fn pairing_lists_missing_views() {
        let dir = tempfile::tempdir().unwrap();
        let styled = dir.path().join("styled");
        save_png(styled.join("a.png"), &Tensor::zeros(vec![3, 4, 4])).unwrap();
        manifest(&["a.png"]).write(&styled).unwrap();
        let styled = Dataset::load(&styled).unwrap();
        let poses = PoseSet {
            ids: vec!["a".into(), "b".into(), "c".into()],
            cameras: vec![],
        };
        let err = poses.pair(&styled).unwrap_err().to_string();
        assert!(err.contains("b, c"), "{err}");
    }
}
