//! Radiance field, cameras and volume rendering.

pub mod camera;
pub mod field;
pub mod render;

pub use camera::{Camera, Intrinsics, Ray, Vec3};
pub use field::{FieldConfig, RadianceField};
pub use render::{
    composite, distortion, render_batch, render_ray, render_rays, render_view, volume_weights,
    RaySamples, RenderOutput, RenderedView, SampleOptions,
};
