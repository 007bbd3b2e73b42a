//! Photometric mesh refinement by gradient descent over an image pyramid.

mod pairs;

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geoframe::{chained_jacobian, LocalFrame};
use crate::imaging::{downsample, zncc_field, ImageError, Raster};
use crate::mesh::{densify, mesh_from_dem, smoothness_energy, thin_plate_displacement, DemGrid, MeshError, TriMesh};
use crate::raycast::{build_virtual_camera, cast_view, transfer, Bvh, CameraPlanes, RaycastError, VirtualCamera};
use crate::rfm::RfmModel;

pub use pairs::{pair_angle, select_pairs, view_direction};

/// Pixels whose ray meets the hit face at `|n . d|` below this are left out of
/// the gradient (grazing incidence).
const MIN_INCIDENCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("no usable image pairs")]
    NoValidPairs,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{images} images but {models} sensor models")]
    InputMismatch { images: usize, models: usize },
    #[error(transparent)]
    Raycast(#[from] RaycastError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Weight of the photometric term.
    pub alpha: f64,
    /// Weight of the thin-plate term.
    pub beta_smooth: f64,
    /// Homogenization factor of the thin-plate term; `None` means `1/gsd^2`
    /// at each level.
    pub beta_scale: Option<f64>,
    /// Vertex motion per iteration, in level GSD, for a gradient of unit
    /// normalized magnitude.
    pub step_size: f64,
    /// Largest vertex motion per iteration, in level GSD.
    pub max_step: f64,
    pub iterations_per_level: usize,
    pub start_level: u32,
    /// Ordered `(reference, source)` view pairs; selected by angle if absent.
    pub pair_list: Option<Vec<(usize, usize)>>,
    pub min_angle: f64,
    pub max_angle: f64,
    pub zncc_window: usize,
    /// Ray origins sit this far above the mean surface height.
    pub plane_offset: f64,
    pub delta_h: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            alpha: 1.0,
            beta_smooth: 0.05,
            beta_scale: None,
            step_size: 0.05,
            max_step: 0.5,
            iterations_per_level: 20,
            start_level: 0,
            pair_list: None,
            min_angle: 5.0,
            max_angle: 13.0,
            zncc_window: 7,
            plane_offset: 500.0,
            delta_h: 100.0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let fail = |m: &str| Err(RefineError::Config(m.to_string()));
        if !(self.alpha > 0.0) {
            return fail("alpha must be positive");
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return fail("step_size must be non-negative");
        }
        if !(self.max_step > 0.0) {
            return fail("max_step must be positive");
        }
        if !(self.beta_smooth >= 0.0) || self.beta_scale.is_some_and(|b| !(b >= 0.0)) {
            return fail("smoothness weights must be non-negative");
        }
        if self.iterations_per_level == 0 {
            return fail("iterations_per_level must be at least 1");
        }
        if !(self.min_angle < self.max_angle) {
            return fail("min_angle must be below max_angle");
        }
        if self.zncc_window < 3 || self.zncc_window % 2 == 0 {
            return fail("zncc_window must be odd and at least 3");
        }
        if !(self.delta_h > 0.0) {
            return fail("delta_h must be positive");
        }
        Ok(())
    }

    fn beta(&self, gsd: f64) -> f64 {
        self.beta_scale.unwrap_or(1.0 / (gsd * gsd)) * self.beta_smooth
    }
}

/// Descent direction of the photometric energy per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    /// `-dE/dv` per vertex.
    pub vectors: Vec<Vector3<f64>>,
    /// Number of pixels contributing to each vertex.
    pub support: Vec<u32>,
}

impl GradientField {
    pub fn zeros(n: usize) -> GradientField {
        GradientField { vectors: vec![Vector3::zeros(); n], support: vec![0; n] }
    }

    fn add(&mut self, other: &GradientField) {
        for (a, b) in self.vectors.iter_mut().zip(&other.vectors) {
            *a += b;
        }
        for (a, b) in self.support.iter_mut().zip(&other.support) {
            *a += b;
        }
    }

    /// Root mean square magnitude over supported vertices.
    pub fn rms(&self) -> f64 {
        let (sum, n) = self
            .vectors
            .iter()
            .zip(&self.support)
            .filter(|(_, &s)| s > 0)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v.norm_squared(), n + 1));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }
}

/// Photometric energy of a set of pairs and optionally its gradient.
#[derive(Debug, Clone)]
pub struct PhotoEvaluation {
    /// Sum of `-ZNCC` over all valid window centers of all pairs.
    pub energy: f64,
    pub valid_centers: usize,
    pub gradient: Option<GradientField>,
}

/// Evaluates the photometric energy for `pairs` of `cams`, assembling the
/// gradient when `with_gradient` is set.
///
/// For a pixel of view i hitting face `f` at `X` along ray `d`, moving the
/// face plane by `s` along its unit normal `n` moves the hit point by
/// `s d / (n . d)`. The pixel's transferred intensity then changes at the
/// rate `DI_j DPi_j d / (n . d)`, which is weighted by the ZNCC derivative and
/// distributed over the face's vertices by barycentric weight.
pub fn photometric_evaluation(
    m: &TriMesh,
    bvh: &Bvh,
    cams: &[VirtualCamera],
    pairs: &[(usize, usize)],
    window: usize,
    with_gradient: bool,
) -> Result<PhotoEvaluation, RefineError> {
    if pairs.is_empty() {
        return Err(RefineError::NoValidPairs);
    }
    let mut refs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    refs.sort_unstable();
    refs.dedup();
    let hits: Vec<_> = refs.iter().map(|&i| (i, cast_view(bvh, m, &cams[i]))).collect();
    let hits_of = |i: usize| &hits.iter().find(|(k, _)| *k == i).expect("cast for every reference").1;

    let per_pair: Vec<Result<(f64, usize, Option<GradientField>), RefineError>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (ci, cj) = (&cams[i], &cams[j]);
            let (reproj, records) = transfer(bvh, m, hits_of(i), ci, cj);
            let sim = zncc_field(&ci.intensities, &reproj, window)?;
            let energy = sim.total();
            let centers = sim.valid_centers();
            if !with_gradient {
                return Ok((energy, centers, None));
            }
            let mut field = GradientField::zeros(m.vertex_count());
            let d2m = sim.d2m.values();
            for (p, rec) in records.iter().enumerate() {
                let Some(rec) = rec else { continue };
                if d2m[p] == 0.0 {
                    continue;
                }
                let n = m.face_normal(rec.face);
                let nd = n.dot(&rec.dir);
                if nd.abs() < MIN_INCIDENCE {
                    continue;
                }
                let Some((_, gx, gy)) = cj.intensities.bilinear_with_gradient(rec.xj) else { continue };
                let Ok(jac) = chained_jacobian(&cj.model, &cj.frame, &rec.point) else { continue };
                let dpx = jac * rec.dir;
                let rate = (gx * dpx.x + gy * dpx.y) / nd;
                let de_ds = d2m[p] * rate;
                let face = m.faces()[rec.face];
                for (k, &v) in face.iter().enumerate() {
                    let w = rec.bary[k];
                    field.vectors[v as usize] -= (de_ds * w) * n;
                    if w > 0.0 {
                        field.support[v as usize] += 1;
                    }
                }
            }
            Ok((energy, centers, Some(field)))
        })
        .collect();

    let mut energy = 0.0;
    let mut valid_centers = 0;
    let mut gradient = with_gradient.then(|| GradientField::zeros(m.vertex_count()));
    for r in per_pair {
        let (e, c, g) = r?;
        energy += e;
        valid_centers += c;
        if let (Some(total), Some(g)) = (gradient.as_mut(), g) {
            total.add(&g);
        }
    }
    Ok(PhotoEvaluation { energy, valid_centers, gradient })
}

pub fn photometric_gradient(
    m: &TriMesh,
    bvh: &Bvh,
    cams: &[VirtualCamera],
    pairs: &[(usize, usize)],
    window: usize,
) -> Result<GradientField, RefineError> {
    let eval = photometric_evaluation(m, bvh, cams, pairs, window, true)?;
    Ok(eval.gradient.expect("requested"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub photo: f64,
    pub smooth: f64,
    pub total: f64,
}

pub fn energy(
    m: &TriMesh,
    bvh: &Bvh,
    cams: &[VirtualCamera],
    pairs: &[(usize, usize)],
    cfg: &RefineConfig,
    gsd: f64,
) -> Result<EnergyTerms, RefineError> {
    let photo = photometric_evaluation(m, bvh, cams, pairs, cfg.zncc_window, false)?.energy;
    Ok(combine(photo, smoothness_energy(m), cfg, gsd))
}

fn combine(photo: f64, smooth: f64, cfg: &RefineConfig, gsd: f64) -> EnergyTerms {
    EnergyTerms { photo, smooth, total: cfg.alpha * photo + cfg.beta(gsd) * smooth }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub level: u32,
    /// Energy before the update of this iteration; the final record of a
    /// level (iteration = iterations_per_level) is the refined mesh.
    pub iteration: usize,
    pub photo: f64,
    pub smooth: f64,
    pub total: f64,
    /// Window centers contributing to the photometric term.
    pub valid_centers: usize,
}

pub fn write_energy_csv(log: &[EnergyRecord], path: &Path) -> Result<(), RefineError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "level,iteration,photo,smooth,total")?;
    for r in log {
        writeln!(f, "{},{},{},{},{}", r.level, r.iteration, r.photo, r.smooth, r.total)?;
    }
    f.flush()?;
    Ok(())
}

/// Builds the virtual cameras of one pyramid level.
pub fn level_cameras(
    images: &[Raster],
    models: &[RfmModel],
    frame: &LocalFrame,
    surface_h: f64,
    cfg: &RefineConfig,
) -> Result<Vec<VirtualCamera>, RefineError> {
    if images.len() != models.len() {
        return Err(RefineError::InputMismatch { images: images.len(), models: models.len() });
    }
    let refs: Vec<&RfmModel> = models.iter().collect();
    let mut planes = CameraPlanes::default_for(surface_h, &refs, frame);
    planes.plane_h = planes.plane_h.min(surface_h + cfg.plane_offset);
    planes.delta_h = cfg.delta_h.min(0.5 * (planes.plane_h - surface_h)).max(1e-3);
    images
        .iter()
        .zip(models)
        .map(|(img, model)| Ok(build_virtual_camera(model, frame, img, &planes)?))
        .collect()
}

fn mean_height(m: &TriMesh) -> f64 {
    m.vertices().iter().map(|v| v.z).sum::<f64>() / m.vertex_count().max(1) as f64
}

fn mean_gsd(cams: &[VirtualCamera]) -> f64 {
    cams.iter().map(|c| c.gsd).sum::<f64>() / cams.len() as f64
}

/// Runs `cfg.iterations_per_level` descent steps with fixed cameras.
pub fn refine_with_cameras(
    mesh: TriMesh,
    cams: &[VirtualCamera],
    pairs: &[(usize, usize)],
    cfg: &RefineConfig,
    level: u32,
    log: &mut Vec<EnergyRecord>,
) -> Result<TriMesh, RefineError> {
    cfg.validate()?;
    let mut mesh = mesh;
    let gsd = mean_gsd(cams);
    let beta = cfg.beta(gsd);
    let max_move = cfg.max_step * gsd;
    // gradient normalization fixed at the first iteration of the level
    let mut norm: Option<f64> = None;
    for it in 0..=cfg.iterations_per_level {
        let bvh = Bvh::build(&mesh);
        let last = it == cfg.iterations_per_level;
        let want_gradient = !last && cfg.step_size > 0.0;
        let eval = photometric_evaluation(&mesh, &bvh, cams, pairs, cfg.zncc_window, want_gradient)?;
        let terms = combine(eval.energy, smoothness_energy(&mesh), cfg, gsd);
        log.push(EnergyRecord {
            level,
            iteration: it,
            photo: terms.photo,
            smooth: terms.smooth,
            total: terms.total,
            valid_centers: eval.valid_centers,
        });
        log::debug!("level {level} iteration {it}: photo {:.4} smooth {:.4} total {:.4}", terms.photo, terms.smooth, terms.total);
        if last || cfg.step_size == 0.0 {
            continue;
        }
        let grad = eval.gradient.expect("requested");
        let g_norm = *norm.get_or_insert_with(|| grad.rms());
        let photo_scale = if g_norm > 0.0 { cfg.alpha / g_norm } else { 0.0 };
        let smooth = thin_plate_displacement(&mesh);
        let step = cfg.step_size * gsd;
        let displacement: Vec<Vector3<f64>> = grad
            .vectors
            .iter()
            .zip(&smooth)
            .map(|(g, s)| {
                let d = step * (photo_scale * g + beta * gsd * s);
                let len = d.norm();
                if len > max_move {
                    d * (max_move / len)
                } else {
                    d
                }
            })
            .collect();
        mesh.displace(&displacement);
    }
    Ok(mesh)
}

/// One pyramid level: builds cameras for the given images and descends.
pub fn refine_level(
    mesh: TriMesh,
    images: &[Raster],
    models: &[RfmModel],
    frame: &LocalFrame,
    cfg: &RefineConfig,
    level: u32,
    log: &mut Vec<EnergyRecord>,
) -> Result<TriMesh, RefineError> {
    cfg.validate()?;
    let cams = level_cameras(images, models, frame, mean_height(&mesh), cfg)?;
    let pairs = match &cfg.pair_list {
        Some(p) => p.clone(),
        None => select_pairs(models, frame, cfg.min_angle, cfg.max_angle),
    };
    if pairs.is_empty() {
        return Err(RefineError::NoValidPairs);
    }
    if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= cams.len() || *j >= cams.len() || i == j) {
        return Err(RefineError::Config(format!("pair ({i}, {j}) is out of range or degenerate")));
    }
    refine_with_cameras(mesh, &cams, &pairs, cfg, level, log)
}

#[derive(Debug, Clone)]
pub enum InitialSurface {
    Dem(DemGrid),
    Mesh(TriMesh),
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub mesh: TriMesh,
    pub log: Vec<EnergyRecord>,
    /// Mean ground sampling distance of the full-resolution images.
    pub gsd: f64,
}

/// DEM decimation giving a vertex spacing close to `2 * 2^level` GSD.
pub fn decimation_for(dem: &DemGrid, gsd: f64, level: u32) -> usize {
    let target = 2.0 * (1u64 << level) as f64 * gsd / dem.cell_size;
    let mut d = 1usize;
    while (2 * d) as f64 <= target * std::f64::consts::SQRT_2 {
        d *= 2;
    }
    d
}

/// Coarse-to-fine refinement from `start_level` down to full resolution,
/// densifying the mesh between levels.
pub fn refine_hierarchical(
    initial: InitialSurface,
    images: &[Raster],
    models: &[RfmModel],
    frame: &LocalFrame,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, RefineError> {
    cfg.validate()?;
    if images.len() != models.len() {
        return Err(RefineError::InputMismatch { images: images.len(), models: models.len() });
    }
    let pairs = match &cfg.pair_list {
        Some(p) => p.clone(),
        None => select_pairs(models, frame, cfg.min_angle, cfg.max_angle),
    };
    if pairs.is_empty() {
        return Err(RefineError::NoValidPairs);
    }
    let level_cfg = RefineConfig { pair_list: Some(pairs), ..cfg.clone() };
    let mut log = Vec::new();
    let mut gsd = None;
    let mut mesh = match initial {
        InitialSurface::Mesh(m) => m,
        InitialSurface::Dem(dem) => {
            let h = dem.mean_height().ok_or(MeshError::EmptyDem)?;
            let cams = level_cameras(images, models, frame, h, cfg)?;
            let g = mean_gsd(&cams);
            gsd = Some(g);
            mesh_from_dem(&dem, decimation_for(&dem, g, cfg.start_level))?
        }
    };
    for level in (0..=cfg.start_level).rev() {
        let imgs: Vec<Raster> = images.iter().map(|r| downsample(r, level)).collect();
        let mods: Vec<RfmModel> = models.iter().map(|m| m.downscaled(level)).collect();
        log::info!("level {level}: {} vertices, {} faces", mesh.vertex_count(), mesh.face_count());
        let cams = level_cameras(&imgs, &mods, frame, mean_height(&mesh), &level_cfg)?;
        if level == 0 {
            gsd = Some(mean_gsd(&cams));
        }
        mesh = refine_with_cameras(mesh, &cams, level_cfg.pair_list.as_deref().expect("set"), &level_cfg, level, &mut log)?;
        if level > 0 {
            mesh = densify(&mesh);
        }
    }
    Ok(RefineOutcome { mesh, log, gsd: gsd.expect("level 0 always runs") })
}
