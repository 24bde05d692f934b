//! Material decomposition toolkit: split-sum PBR shading with analytic
//! material gradients, perceptual and re-render losses, DDIM scheduler
//! math for single-step inference, and multi-view UV backprojection.

pub mod camera;
pub mod envlight;
pub mod error;
pub mod image;
pub mod imageio;
pub mod losses;
pub mod mesh;
pub mod pipeline;
pub mod raster;
pub mod scheduler;
pub mod shading;
pub mod uvspace;

pub use camera::Camera;
pub use envlight::{EnvMap, PrefilterConfig, PrefilteredEnv};
pub use error::{Error, Result};
pub use image::ImageF;
pub use mesh::TriMesh;
pub use raster::{rasterize_gbuffer, GBuffer};
pub use shading::{render_view, shade, MaterialMaps, MaterialSample};
