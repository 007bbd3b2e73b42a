//! Synthetic scenes and dataset I/O.

mod dataset;
mod models;
mod scene;

use thiserror::Error;

pub use dataset::{write_dataset, DatasetPaths};
pub use models::{
    affine_model, fit_residual, fit_rfm, pushbroom_model, view_model, ModelBox, ModelKind, ViewGeometry,
    MAX_FIT_RESIDUAL, PUSHBROOM_ALTITUDE,
};
pub use scene::{
    generate_scene, occlusion_mask, offset_region, perturb_mesh, render, truth_dem, BoxSpec, Scene, SceneSpec,
    SceneView, Terrain, Texture, TextureSpec, ViewSpec,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("RFM fit residual {0:.4} px exceeds the tolerance")]
    FitResidualTooLarge(f64),
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("rendering failed: {0}")]
    Render(String),
    #[error("writing dataset: {0}")]
    Write(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
