//! Datasets, images, synthetic scenes and reference stylizations.

pub mod image;
pub mod manifest;
pub mod scene;
pub mod stylize;

pub use manifest::{Dataset, Frame, Manifest, PoseSet, View};
pub use scene::{generate_scene, GeneratedScene, Scene, SceneKind, SceneSpec};
pub use stylize::{stylize_dataset, StyleTransform};
