//! Truncated VGG19 feature stack (the first twelve modules, through
//! `relu3_1`) and the VGGW weight file format.
//!
//! VGGW layout, little-endian: magic `"VGGW"`, `version: u32 = 1`,
//! `tensor_count: u32`, then one [`crate::tensor_io`] record per tensor.
//! Tensor names are `conv{block}_{idx}.weight` and `conv{block}_{idx}.bias`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stylefield_tensor::{Element, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::tensor_io;

pub const VGGW_MAGIC: &[u8; 4] = b"VGGW";
pub const VGGW_VERSION: u32 = 1;

/// ImageNet statistics the pre-trained weights expect on `[0, 1]` RGB.
pub const NORMALIZE_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const NORMALIZE_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        name: &'static str,
        in_channels: usize,
        out_channels: usize,
    },
    Relu {
        name: &'static str,
    },
    MaxPool,
}

/// The canonical VGG19 feature sequence up to and including `relu3_1`.
pub const LAYERS: [LayerKind; 12] = [
    LayerKind::Conv { name: "conv1_1", in_channels: 3, out_channels: 64 },
    LayerKind::Relu { name: "relu1_1" },
    LayerKind::Conv { name: "conv1_2", in_channels: 64, out_channels: 64 },
    LayerKind::Relu { name: "relu1_2" },
    LayerKind::MaxPool,
    LayerKind::Conv { name: "conv2_1", in_channels: 64, out_channels: 128 },
    LayerKind::Relu { name: "relu2_1" },
    LayerKind::Conv { name: "conv2_2", in_channels: 128, out_channels: 128 },
    LayerKind::Relu { name: "relu2_2" },
    LayerKind::MaxPool,
    LayerKind::Conv { name: "conv3_1", in_channels: 128, out_channels: 256 },
    LayerKind::Relu { name: "relu3_1" },
];

/// Layer positions whose activations are exported: the five relus.
pub const DEFAULT_TAPS: [usize; 5] = [1, 3, 6, 8, 11];

const KERNEL: usize = 3;

/// Conv names with their expected weight shapes, in file order.
pub fn conv_shapes() -> Vec<(&'static str, [usize; 4])> {
    LAYERS
        .iter()
        .filter_map(|l| match *l {
            LayerKind::Conv { name, in_channels, out_channels } => {
                Some((name, [out_channels, in_channels, KERNEL, KERNEL]))
            }
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug)]
struct ConvParams<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

/// Immutable feature extractor. Weights never require gradients.
#[derive(Clone, Debug)]
pub struct VggStack<T> {
    convs: Vec<ConvParams<T>>,
    taps: Vec<usize>,
}

/// Per-tap activations reshaped to `N_l x M_l` (channels by pixels).
#[derive(Clone, Debug)]
pub struct FeatureMaps<'t, T: Element> {
    pub layers: Vec<Var<'t, T>>,
    /// Spatial extent `(H_l, W_l)` of each tap.
    pub extents: Vec<(usize, usize)>,
}

impl<'t, T: Element> FeatureMaps<'t, T> {
    pub fn channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.shape()[0]).collect()
    }

    /// Values only, cut from the tape.
    pub fn values(&self) -> Vec<Tensor<T>> {
        self.layers.iter().map(|l| (*l.value()).clone()).collect()
    }
}

impl<T: Element> VggStack<T> {
    fn from_convs(convs: Vec<ConvParams<T>>) -> Self {
        Self {
            convs,
            taps: DEFAULT_TAPS.to_vec(),
        }
    }

    /// All-zero weights and biases.
    pub fn zeros() -> Self {
        Self::from_convs(
            conv_shapes()
                .into_iter()
                .map(|(_, shape)| ConvParams {
                    weight: Tensor::zeros(shape.to_vec()),
                    bias: Tensor::zeros(vec![shape[0]]),
                })
                .collect(),
        )
    }

    /// He-normal weights scaled by `gain`, zero biases, fixed by `seed`.
    ///
    /// Used when no pre-trained weight file is supplied; random conv stacks
    /// still produce usable texture statistics.
    pub fn random(seed: u64, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_convs(
            conv_shapes()
                .into_iter()
                .map(|(_, shape)| {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("std");
                    ConvParams {
                        weight: Tensor::from_fn(shape.to_vec(), |_| {
                            T::from_f64_lossy(normal.sample(&mut rng))
                        }),
                        bias: Tensor::zeros(vec![shape[0]]),
                    }
                })
                .collect(),
        )
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Restricts the exported activations to the given layer positions.
    pub fn with_taps(mut self, taps: &[usize]) -> Result<Self> {
        for &t in taps {
            if t >= LAYERS.len() {
                return Err(Error::contract(format!("tap {t} beyond the {} layers", LAYERS.len())));
            }
        }
        self.taps = taps.to_vec();
        self.taps.sort_unstable();
        self.taps.dedup();
        Ok(self)
    }

    /// Channel count `N_l` at each tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps
            .iter()
            .map(|&tap| {
                LAYERS[..=tap]
                    .iter()
                    .rev()
                    .find_map(|l| match l {
                        LayerKind::Conv { out_channels, .. } => Some(*out_channels),
                        _ => None,
                    })
                    .unwrap_or(3)
            })
            .collect()
    }

    pub fn cast<U: Element>(&self) -> VggStack<U> {
        VggStack {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
            taps: self.taps.clone(),
        }
    }

    /// Runs `image` (`3 x H x W`, values in `[0, 1]`) through the stack.
    ///
    /// The result stays on `image`'s tape, so gradients flow back to the
    /// image when it requires them.
    pub fn extract<'t>(&self, image: Var<'t, T>, normalize: bool) -> Result<FeatureMaps<'t, T>> {
        let shape = image.shape();
        let [channels, height, width] = shape[..] else {
            return Err(Error::dimension(format!("expected a 3 x H x W image, got {shape:?}")));
        };
        if channels != 3 {
            return Err(Error::dimension(format!("expected 3 channels, got {channels}")));
        }
        if height < 4 || width < 4 {
            return Err(Error::dimension(format!(
                "image {height}x{width} is too small for two 2x2 pools"
            )));
        }
        let tape = image.tape();
        let mut x = if normalize {
            let scale: Vec<T> = NORMALIZE_STD.iter().map(|s| T::from_f64_lossy(1.0 / s)).collect();
            let shift: Vec<T> = NORMALIZE_MEAN
                .iter()
                .zip(NORMALIZE_STD)
                .map(|(m, s)| T::from_f64_lossy(-m / s))
                .collect();
            image.channel_affine(&scale, &shift)?
        } else {
            image
        };
        let last = self.taps.iter().copied().max();
        let mut layers = Vec::with_capacity(self.taps.len());
        let mut extents = Vec::with_capacity(self.taps.len());
        let mut convs = self.convs.iter();
        for (i, layer) in LAYERS.iter().enumerate() {
            if Some(i) > last {
                break;
            }
            x = match layer {
                LayerKind::Conv { .. } => {
                    let p = convs.next().expect("conv count");
                    let w = tape.constant(p.weight.clone());
                    let b = tape.constant(p.bias.clone());
                    x.conv2d(&w, &b, 1, 1)?
                }
                LayerKind::Relu { .. } => x.relu(),
                LayerKind::MaxPool => x.maxpool2d(2, 2)?,
            };
            if self.taps.contains(&i) {
                let s = x.shape();
                extents.push((s[1], s[2]));
                layers.push(x.reshape(vec![s[0], s[1] * s[2]])?);
            }
        }
        Ok(FeatureMaps { layers, extents })
    }

    /// Convenience wrapper returning detached tap values for a constant image.
    pub fn extract_values(&self, image: &Tensor<T>, normalize: bool) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let maps = self.extract(tape.constant(image.clone()), normalize)?;
        Ok(maps.values())
    }
}

impl VggStack<f32> {
    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_weights(&mut BufReader::new(file), path)
    }

    /// Parses VGGW bytes; `origin` only labels errors.
    pub fn read_weights(r: &mut impl Read, origin: &Path) -> Result<Self> {
        let io = |e| Error::io(origin, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != VGGW_MAGIC {
            return Err(Error::format(origin, format!("bad magic {magic:?}, expected \"VGGW\"")));
        }
        let version = tensor_io::read_u32(r).map_err(io)?;
        if version != VGGW_VERSION {
            return Err(Error::format(origin, format!("unsupported VGGW version {version}")));
        }
        let count = tensor_io::read_u32(r).map_err(io)?;
        let mut tensors = std::collections::HashMap::new();
        for _ in 0..count {
            let (name, t) = tensor_io::read_tensor(r).map_err(io)?;
            tensors.insert(name, t);
        }
        let mut convs = Vec::new();
        for (name, shape) in conv_shapes() {
            let mut take = |suffix: &str, expected: &[usize]| {
                let key = format!("{name}.{suffix}");
                let t = tensors
                    .remove(&key)
                    .ok_or_else(|| Error::format(origin, format!("missing tensor {key}")))?;
                if t.shape() != expected {
                    return Err(Error::format(
                        origin,
                        format!("tensor {key} has shape {:?}, expected {expected:?}", t.shape()),
                    ));
                }
                Ok(t)
            };
            let weight = take("weight", &shape)?;
            let bias = take("bias", &shape[..1])?;
            convs.push(ConvParams { weight, bias });
        }
        if !tensors.is_empty() {
            let mut extra: Vec<_> = tensors.keys().cloned().collect();
            extra.sort();
            log::debug!("{}: ignoring tensors beyond relu3_1: {extra:?}", origin.display());
        }
        Ok(Self::from_convs(convs))
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_weights(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_weights(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(VGGW_MAGIC)?;
        tensor_io::write_u32(w, VGGW_VERSION)?;
        tensor_io::write_u32(w, (self.convs.len() * 2) as u32)?;
        for ((name, _), p) in conv_shapes().into_iter().zip(&self.convs) {
            tensor_io::write_tensor(w, &format!("{name}.weight"), &p.weight)?;
            tensor_io::write_tensor(w, &format!("{name}.bias"), &p.bias)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(stack: &VggStack<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        stack.write_weights(&mut buf).unwrap();
        buf
    }

    #[test]
    fn architecture_is_fixed() {
        let shapes = conv_shapes();
        assert_eq!(shapes.len(), 5);
        assert_eq!(shapes[0], ("conv1_1", [64, 3, 3, 3]));
        assert_eq!(shapes[4], ("conv3_1", [256, 128, 3, 3]));
        assert_eq!(VggStack::<f32>::zeros().tap_channels(), vec![64, 64, 128, 128, 256]);
    }

    #[test]
    fn zero_weights_round_trip_and_give_zero_features() {
        let buf = bytes(&VggStack::zeros());
        let stack = VggStack::read_weights(&mut buf.as_slice(), Path::new("mem")).unwrap();
        let image = Tensor::from_fn(vec![3, 8, 8], |i| (i % 7) as f32 / 7.0);
        for f in stack.extract_values(&image, true).unwrap() {
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn missing_tensor_is_named() {
        let mut buf = Vec::new();
        buf.extend_from_slice(VGGW_MAGIC);
        tensor_io::write_u32(&mut buf, 1).unwrap();
        let shapes = conv_shapes();
        tensor_io::write_u32(&mut buf, 9).unwrap();
        for (name, shape) in &shapes {
            if *name != "conv3_1" {
                tensor_io::write_tensor(&mut buf, &format!("{name}.weight"), &Tensor::zeros(shape.to_vec())).unwrap();
            }
            tensor_io::write_tensor(&mut buf, &format!("{name}.bias"), &Tensor::zeros(vec![shape[0]])).unwrap();
        }
        let err = VggStack::read_weights(&mut buf.as_slice(), Path::new("w.vggw")).unwrap_err();
        assert!(err.to_string().contains("conv3_1.weight"), "{err}");
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let good = bytes(&VggStack::zeros());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            VggStack::read_weights(&mut bad_magic.as_slice(), Path::new("m")),
            Err(Error::Format { .. })
        ));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            VggStack::read_weights(&mut bad_version.as_slice(), Path::new("m")),
            Err(Error::Format { .. })
        ));
        let truncated = &good[..good.len() - 10];
        assert!(matches!(
            VggStack::read_weights(&mut &truncated[..], Path::new("m")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn wrong_shape_is_named() {
        let mut buf = Vec::new();
        buf.extend_from_slice(VGGW_MAGIC);
        tensor_io::write_u32(&mut buf, 1).unwrap();
        tensor_io::write_u32(&mut buf, 10).unwrap();
        for (name, shape) in conv_shapes() {
            let shape = if name == "conv2_1" { [128, 32, 3, 3] } else { shape };
            tensor_io::write_tensor(&mut buf, &format!("{name}.weight"), &Tensor::zeros(shape.to_vec())).unwrap();
            tensor_io::write_tensor(&mut buf, &format!("{name}.bias"), &Tensor::zeros(vec![shape[0]])).unwrap();
        }
        let err = VggStack::read_weights(&mut buf.as_slice(), Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("conv2_1.weight"), "{err}");
    }

    #[test]
    fn extract_checks_input() {
        let stack = VggStack::<f32>::zeros();
        let tape = Tape::new();
        let two_channels = tape.constant(Tensor::zeros(vec![2, 8, 8]));
        assert!(matches!(stack.extract(two_channels, false), Err(Error::Dimension(_))));
        let tiny = tape.constant(Tensor::zeros(vec![3, 3, 8]));
        assert!(stack.extract(tiny, false).is_err());
    }

    #[test]
    fn tap_extents_halve_after_pools() {
        let stack = VggStack::<f32>::random(1, 1.0);
        let tape = Tape::new();
        let maps = stack.extract(tape.constant(Tensor::zeros(vec![3, 16, 12])), true).unwrap();
        assert_eq!(maps.extents, vec![(16, 12), (16, 12), (8, 6), (8, 6), (4, 3)]);
        assert_eq!(maps.channels(), vec![64, 64, 128, 128, 256]);
        assert_eq!(maps.layers[4].shape(), vec![256, 12]);
    }

    #[test]
    fn random_weights_are_deterministic() {
        let a = VggStack::<f32>::random(42, 1.0);
        let b = VggStack::<f32>::random(42, 1.0);
        let image = Tensor::from_fn(vec![3, 8, 8], |i| ((i * 31) % 17) as f32 / 17.0);
        assert_eq!(a.extract_values(&image, true).unwrap(), b.extract_values(&image, true).unwrap());
        assert_eq!(bytes(&a), bytes(&b));
    }
}
