//! Writing generated scenes in the on-disk formats of the other modules.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::imaging::write_float_raster;
use crate::mesh::write_ply;

use super::{Scene, SynthError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub images: Vec<PathBuf>,
    pub rpcs: Vec<PathBuf>,
    pub truth_dem: PathBuf,
    pub truth_mesh: PathBuf,
    pub eval_mask: PathBuf,
}

/// Writes images (float rasters), RPC text files, the truth DEM and mesh and
/// the evaluation mask into `dir`. Returned paths are relative to `dir`.
pub fn write_dataset(scene: &Scene, dir: &Path) -> Result<DatasetPaths, SynthError> {
    std::fs::create_dir_all(dir)?;
    let err = |e: &dyn std::fmt::Display| SynthError::Write(e.to_string());
    let mut images = Vec::new();
    let mut rpcs = Vec::new();
    for (k, v) in scene.views.iter().enumerate() {
        let img = PathBuf::from(format!("view_{k}.f32"));
        let rpc = PathBuf::from(format!("view_{k}_rpc.txt"));
        write_float_raster(&v.image, &dir.join(&img)).map_err(|e| err(&e))?;
        v.model.write_rpc_text(&dir.join(&rpc)).map_err(|e| err(&e))?;
        images.push(img);
        rpcs.push(rpc);
    }
    let paths = DatasetPaths {
        images,
        rpcs,
        truth_dem: "truth_dem.asc".into(),
        truth_mesh: "truth_mesh.ply".into(),
        eval_mask: "eval_mask.asc".into(),
    };
    scene.truth_dem.write_esri_ascii(&dir.join(&paths.truth_dem)).map_err(|e| err(&e))?;
    write_ply(&scene.truth_mesh, &dir.join(&paths.truth_mesh)).map_err(|e| err(&e))?;
    scene.eval_mask.write_esri_ascii(&dir.join(&paths.eval_mask)).map_err(|e| err(&e))?;
    Ok(paths)
}
