//! Golden activation fixtures: reference feature-stack outputs produced by
//! an independent implementation, replayed through [`VggStack`].
//!
//! A fixture directory holds a `fixtures.json` manifest, the VGGW weight
//! file, the input PNGs, and one activation file per image. Activation files
//! are `"VGGA"`, `version: u32 = 1`, `count: u32`, then one
//! [`crate::tensor_io`] record per tap named `tap.<layer index>` with shape
//! `C x H x W`.
//!
//! ```json
//! {
//!   "weights": "vgg.vggw",
//!   "normalize": true,
//!   "mean": [0.485, 0.456, 0.406],
//!   "std": [0.229, 0.224, 0.225],
//!   "taps": [1, 3, 6, 8, 11],
//!   "tolerance_abs": 1e-4,
//!   "fixtures": [{ "image": "img_000.png", "activations": "img_000.vgga" }]
//! }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stylefield_tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::image::{load_png, save_png};
use crate::tensor_io;
use crate::vgg::{VggStack, NORMALIZE_MEAN, NORMALIZE_STD};

pub const FIXTURE_MANIFEST: &str = "fixtures.json";
pub const ACTIVATION_MAGIC: &[u8; 4] = b"VGGA";
pub const ACTIVATION_VERSION: u32 = 1;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub image: String,
    pub activations: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub weights: String,
    pub normalize: bool,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub taps: Vec<usize>,
    pub tolerance_abs: f64,
    pub fixtures: Vec<FixtureEntry>,
}

impl FixtureManifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(FIXTURE_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(FIXTURE_MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json { path: path.clone(), source })?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn write_activations(path: &Path, taps: &[(usize, Tensor<f32>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        w.write_all(ACTIVATION_MAGIC)?;
        tensor_io::write_u32(&mut w, ACTIVATION_VERSION)?;
        tensor_io::write_u32(&mut w, taps.len() as u32)?;
        for (layer, t) in taps {
            tensor_io::write_tensor(&mut w, &format!("tap.{layer}"), t)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

pub fn read_activations(path: &Path) -> Result<Vec<(usize, Tensor<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != ACTIVATION_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected \"VGGA\"")));
    }
    let version = tensor_io::read_u32(&mut r).map_err(io)?;
    if version != ACTIVATION_VERSION {
        return Err(Error::format(path, format!("unsupported activation version {version}")));
    }
    let count = tensor_io::read_u32(&mut r).map_err(io)?;
    (0..count)
        .map(|_| {
            let (name, t) = tensor_io::read_tensor(&mut r).map_err(io)?;
            let layer = name
                .strip_prefix("tap.")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, format!("unexpected record name {name:?}")))?;
            Ok((layer, t))
        })
        .collect()
}

/// Per-tap activations as `C x H x W` tensors.
pub fn activations(stack: &VggStack<f32>, image: &Tensor<f64>, normalize: bool) -> Result<Vec<(usize, Tensor<f32>)>> {
    let tape = stylefield_tensor::Tape::new();
    let maps = stack.extract(tape.constant(image.cast()), normalize)?;
    let values = maps.values();
    Ok(stack
        .taps()
        .iter()
        .zip(values)
        .zip(&maps.extents)
        .map(|((&layer, v), &(h, w))| {
            let c = v.shape()[0];
            (layer, v.reshape(vec![c, h, w]).expect("tap extent"))
        })
        .collect())
}

/// Writes a fixture set for `stack` and `images` into `dir`. Activations are
/// computed from the written (8-bit) PNGs so replay sees the same input.
pub fn write_fixtures(stack: &VggStack<f32>, images: &[Tensor<f64>], dir: impl AsRef<Path>) -> Result<FixtureManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let weights = "vgg.vggw".to_string();
    stack.save_weights(dir.join(&weights))?;
    let mut fixtures = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let entry = FixtureEntry {
            image: format!("img_{i:03}.png"),
            activations: format!("img_{i:03}.vgga"),
        };
        let png = dir.join(&entry.image);
        save_png(&png, img)?;
        let taps = activations(stack, &load_png(&png)?, true)?;
        write_activations(&dir.join(&entry.activations), &taps)?;
        fixtures.push(entry);
    }
    let manifest = FixtureManifest {
        weights,
        normalize: true,
        mean: NORMALIZE_MEAN,
        std: NORMALIZE_STD,
        taps: stack.taps().to_vec(),
        tolerance_abs: DEFAULT_TOLERANCE,
        fixtures,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureReport {
    pub image: PathBuf,
    /// `(layer index, max absolute deviation)` per tap.
    pub taps: Vec<(usize, f64)>,
    pub tolerance: f64,
}

impl FixtureReport {
    pub fn max_error(&self) -> f64 {
        self.taps.iter().map(|t| t.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
    }
}

/// Replays every fixture in `dir` through the extractor. A fixture made with
/// other normalization constants than the extractor's is rejected.
pub fn replay(dir: impl AsRef<Path>) -> Result<Vec<FixtureReport>> {
    let dir = dir.as_ref();
    let manifest = FixtureManifest::read(dir)?;
    let origin = dir.join(FIXTURE_MANIFEST);
    if manifest.normalize {
        let off = manifest
            .mean
            .iter()
            .zip(NORMALIZE_MEAN)
            .chain(manifest.std.iter().zip(NORMALIZE_STD))
            .any(|(a, b)| (a - b).abs() > 1e-9);
        if off {
            return Err(Error::format(
                &origin,
                format!(
                    "fixtures use mean {:?} / std {:?}, the extractor uses {NORMALIZE_MEAN:?} / {NORMALIZE_STD:?}",
                    manifest.mean, manifest.std
                ),
            ));
        }
    }
    let stack = VggStack::<f32>::load_weights(dir.join(&manifest.weights))?.with_taps(&manifest.taps)?;
    manifest
        .fixtures
        .iter()
        .map(|entry| {
            let image = dir.join(&entry.image);
            let act_path = dir.join(&entry.activations);
            let expected = read_activations(&act_path)?;
            let got = activations(&stack, &load_png(&image)?, manifest.normalize)?;
            let mut taps = Vec::with_capacity(expected.len());
            for (layer, want) in expected {
                let (_, have) = got
                    .iter()
                    .find(|(l, _)| *l == layer)
                    .ok_or_else(|| Error::format(&act_path, format!("tap {layer} is not in the manifest's tap list")))?;
                if have.shape() != want.shape() {
                    return Err(Error::format(
                        &act_path,
                        format!("tap {layer}: fixture shape {:?}, extractor shape {:?}", want.shape(), have.shape()),
                    ));
                }
                let err = have
                    .data()
                    .iter()
                    .zip(want.data())
                    .map(|(a, b)| (*a as f64 - *b as f64).abs())
                    .fold(0.0, f64::max);
                taps.push((layer, err));
            }
            Ok(FixtureReport { image, taps, tolerance: manifest.tolerance_abs })
        })
        .collect()
}
