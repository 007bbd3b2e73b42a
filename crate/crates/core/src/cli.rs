//! Command-line front end: argument parsing, project configuration and the
//! subcommands wiring the library into end-to-end runs.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, EvalError, DEFAULT_TRUNCATION};
use crate::geoframe::{validate_frame, LocalFrame};
use crate::imaging::{read_raster, write_float_raster, Raster};
use crate::mesh::{dem_from_mesh, mesh_from_dem, read_ply, write_ply, DemGrid, MeshError, TriMesh};
use crate::raycast::{validate_ray_straightness, RaycastError};
use crate::refine::{refine_hierarchical, write_energy_csv, InitialSurface, RefineConfig, RefineError};
use crate::rfm::{GeoPoint, PixelCoord, RfmModel};
use crate::synthio::{generate_scene, SceneSpec, SynthError};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Frame check distances in meters.
pub const FRAME_SCALES: [f64; 7] = [100.0, 200.0, 500.0, 1000.0, 2000.0, 3000.0, 5000.0];
/// Plane heights (meters above the anchor) of the ray straightness check.
pub const STRAIGHTNESS_HEIGHTS: [f64; 5] = [1.0, 10.0, 100.0, 500.0, 1000.0];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
        CliError::Io { path: path.to_path_buf(), message: e.to_string() }
    }
}

impl From<RefineError> for CliError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::Config(_) | RefineError::NoValidPairs | RefineError::InputMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            RefineError::Io(e) => CliError::Io { path: PathBuf::new(), message: e.to_string() },
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::GridMismatch => CliError::Config(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "meshforge", version, about = "Photometric mesh refinement for satellite stereo")]
pub struct Cli {
    /// Worker threads (defaults to the hardware count).
    #[arg(long, global = true, env = "MESHFORGE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene at the paths named in a project config.
    Synth {
        config: PathBuf,
    },
    /// Report local-frame and virtual-ray approximation errors.
    Validate {
        /// RPC text files.
        #[arg(long = "rpc", required = true)]
        rpcs: Vec<PathBuf>,
        /// Frame anchor latitude; the first RPC's offsets when absent.
        #[arg(long, requires = "lon", allow_hyphen_values = true)]
        lat: Option<f64>,
        #[arg(long, requires = "lat", allow_hyphen_values = true)]
        lon: Option<f64>,
        /// Anchor height; ray checks start this high.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        height: f64,
        #[arg(long, default_value_t = 100.0)]
        delta_h: f64,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Triangulate an ESRI ASCII DEM.
    MeshFromDem {
        #[arg(long)]
        dem: PathBuf,
        #[arg(long, default_value_t = 1)]
        decimation: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a surface as described by a project config.
    Refine {
        config: PathBuf,
        /// Check the configuration and inputs without writing anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Rasterize a mesh by vertical ray casting.
    DemFromMesh {
        #[arg(long)]
        mesh: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a DEM against a reference DEM.
    Evaluate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
        trunc: f64,
        /// Skip the median vertical alignment.
        #[arg(long)]
        no_align: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Aligned residual grid output.
        #[arg(long)]
        residuals: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Csv,
}

/// Output grid, either copied from a template DEM or given explicitly.
#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long, conflicts_with_all = ["origin_x", "origin_y", "cell_size", "ncols", "nrows"])]
    pub template: Option<PathBuf>,
    /// Easting of the first column's cell center.
    #[arg(long, allow_hyphen_values = true)]
    pub origin_x: Option<f64>,
    /// Northing of the first row's cell center.
    #[arg(long, allow_hyphen_values = true)]
    pub origin_y: Option<f64>,
    #[arg(long)]
    pub cell_size: Option<f64>,
    #[arg(long)]
    pub ncols: Option<usize>,
    #[arg(long)]
    pub nrows: Option<usize>,
}

/// Everything a reproducible run needs. Relative paths are resolved against
/// the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    #[serde(default)]
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub rpcs: Vec<PathBuf>,
    #[serde(default)]
    pub initial_dem: Option<PathBuf>,
    #[serde(default)]
    pub initial_mesh: Option<PathBuf>,
    #[serde(default)]
    pub truth_dem: Option<PathBuf>,
    #[serde(default)]
    pub truth_mesh: Option<PathBuf>,
    #[serde(default)]
    pub eval_mask: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Local frame origin; falls back to the scene anchor, then to the first
    /// RPC's offsets.
    #[serde(default)]
    pub anchor: Option<GeoPoint>,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub scene: Option<SceneSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Std. dev. (m) of the noise added to the truth DEM when `synth` writes
    /// `initial_dem`.
    #[serde(default)]
    pub start_noise: f64,
}

impl ProjectConfig {
    pub fn load(path: &Path) -> Result<ProjectConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: ProjectConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.images.iter_mut().for_each(fix);
        self.rpcs.iter_mut().for_each(fix);
        for p in [
            &mut self.initial_dem,
            &mut self.initial_mesh,
            &mut self.truth_dem,
            &mut self.truth_mesh,
            &mut self.eval_mask,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    /// Checks the settings and that every refinement input exists.
    pub fn validate_for_refine(&self) -> Result<(), CliError> {
        self.refine.validate()?;
        if self.images.len() != self.rpcs.len() {
            return Err(CliError::Config(format!("{} images but {} RPC files", self.images.len(), self.rpcs.len())));
        }
        if self.images.len() < 2 {
            return Err(CliError::Config("at least two images are required".into()));
        }
        match (&self.initial_dem, &self.initial_mesh) {
            (None, None) => return Err(CliError::Config("one of initial_dem or initial_mesh is required".into())),
            (Some(_), Some(_)) => return Err(CliError::Config("initial_dem and initial_mesh are exclusive".into())),
            _ => {}
        }
        let inputs = self.images.iter().chain(&self.rpcs).chain(self.initial_dem.iter()).chain(self.initial_mesh.iter());
        for p in inputs {
            if !p.is_file() {
                return Err(CliError::io(p, "no such file"));
            }
        }
        let out_parent = self.output_dir.ancestors().find(|a| a.exists()).unwrap_or(Path::new("."));
        let writable = std::fs::metadata(out_parent).map(|m| m.is_dir() && !m.permissions().readonly()).unwrap_or(false);
        if !writable {
            return Err(CliError::io(&self.output_dir, "output directory is not writable"));
        }
        Ok(())
    }

    fn frame(&self, models: &[RfmModel]) -> Result<LocalFrame, CliError> {
        let anchor = self
            .anchor
            .or(self.scene.as_ref().map(|s| s.anchor))
            .or(models.first().map(|m| GeoPoint::new(m.lat_off, m.lon_off, m.height_off)))
            .ok_or_else(|| CliError::Config("no frame anchor".into()))?;
        LocalFrame::build(anchor).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Artifacts written by `refine`.
pub struct RefineOutputs {
    pub mesh: PathBuf,
    pub dem: PathBuf,
    pub energy: PathBuf,
}

impl RefineOutputs {
    pub fn in_dir(dir: &Path) -> RefineOutputs {
        RefineOutputs {
            mesh: dir.join("refined_mesh.ply"),
            dem: dir.join("refined_dem.asc"),
            energy: dir.join("energy.csv"),
        }
    }
}

fn read_dem(path: &Path) -> Result<DemGrid, CliError> {
    DemGrid::read_esri_ascii(path).map_err(|e| CliError::io(path, e))
}

fn write_dem(dem: &DemGrid, path: &Path) -> Result<(), CliError> {
    dem.write_esri_ascii(path).map_err(|e| CliError::io(path, e))
}

fn read_model(path: &Path) -> Result<RfmModel, CliError> {
    RfmModel::read_rpc_text(path).map_err(|e| CliError::io(path, e))
}

fn mesh_error(e: MeshError) -> CliError {
    match e {
        MeshError::Io(e) => CliError::Io { path: PathBuf::new(), message: e.to_string() },
        other => CliError::Numerical(other.to_string()),
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e)),
        _ => Ok(()),
    }
}

pub fn cmd_synth(config: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = ProjectConfig::load(config)?;
    let spec = cfg.scene.as_ref().ok_or_else(|| CliError::Config("synth needs a scene".into()))?;
    if cfg.images.len() != spec.views.len() || cfg.rpcs.len() != spec.views.len() {
        return Err(CliError::Config(format!("scene has {} views; list as many images and rpcs", spec.views.len())));
    }
    if !(cfg.start_noise >= 0.0) {
        return Err(CliError::Config("start_noise must be non-negative".into()));
    }
    let scene = generate_scene(spec, cfg.seed).map_err(|e| match e {
        SynthError::InvalidSpec(m) => CliError::Config(m),
        other => CliError::Numerical(other.to_string()),
    })?;
    for ((view, img), rpc) in scene.views.iter().zip(&cfg.images).zip(&cfg.rpcs) {
        create_parent(img)?;
        write_float_raster(&view.image, img).map_err(|e| CliError::io(img, e))?;
        create_parent(rpc)?;
        view.model.write_rpc_text(rpc).map_err(|e| CliError::io(rpc, e))?;
    }
    if let Some(p) = &cfg.truth_dem {
        create_parent(p)?;
        write_dem(&scene.truth_dem, p)?;
    }
    if let Some(p) = &cfg.truth_mesh {
        create_parent(p)?;
        write_ply(&scene.truth_mesh, p).map_err(|e| CliError::io(p, e))?;
    }
    if let Some(p) = &cfg.eval_mask {
        create_parent(p)?;
        write_dem(&scene.eval_mask, p)?;
    }
    if let Some(p) = &cfg.initial_dem {
        let mut start = scene.truth_dem.clone();
        if cfg.start_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            let noise = Normal::new(0.0, cfg.start_noise).expect("checked above");
            for h in start.heights.iter_mut() {
                *h += noise.sample(&mut rng);
            }
        }
        create_parent(p)?;
        write_dem(&start, p)?;
    }
    writeln!(out, "wrote {} views ({}x{} px)", scene.views.len(), spec.image_size(), spec.image_size())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}

pub fn cmd_refine(config: &Path, dry_run: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = ProjectConfig::load(config)?;
    cfg.validate_for_refine()?;
    let stdout_err = |e: std::io::Error| CliError::io(Path::new("<stdout>"), e);
    if dry_run {
        writeln!(out, "configuration ok: {} images", cfg.images.len()).map_err(stdout_err)?;
        return Ok(());
    }
    let images: Vec<Raster> = cfg
        .images
        .iter()
        .map(|p| read_raster(p).map_err(|e| CliError::io(p, e)))
        .collect::<Result<_, _>>()?;
    let models: Vec<RfmModel> = cfg.rpcs.iter().map(|p| read_model(p)).collect::<Result<_, _>>()?;
    let frame = cfg.frame(&models)?;
    let (initial, template) = match (&cfg.initial_dem, &cfg.initial_mesh) {
        (Some(p), _) => {
            let dem = read_dem(p)?;
            (InitialSurface::Dem(dem.clone()), Some(dem))
        }
        (None, Some(p)) => {
            let mesh = read_ply(p).map_err(|e| CliError::io(p, e))?;
            let template = cfg.truth_dem.as_deref().map(read_dem).transpose()?;
            (InitialSurface::Mesh(mesh), template)
        }
        (None, None) => unreachable!("checked by validate_for_refine"),
    };
    let outcome = refine_hierarchical(initial, &images, &models, &frame, &cfg.refine)?;
    let template = match template {
        Some(t) => t,
        None => grid_over(&outcome.mesh, outcome.gsd),
    };
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    let paths = RefineOutputs::in_dir(&cfg.output_dir);
    write_ply(&outcome.mesh, &paths.mesh).map_err(|e| CliError::io(&paths.mesh, e))?;
    write_dem(&dem_from_mesh(&outcome.mesh, &template), &paths.dem)?;
    write_energy_csv(&outcome.log, &paths.energy).map_err(|e| CliError::io(&paths.energy, e))?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        writeln!(out, "energy {:.6} -> {:.6} over {} records", first.total, last.total, outcome.log.len())
            .map_err(stdout_err)?;
    }
    Ok(())
}

/// North-up grid covering the mesh footprint at `cell` spacing.
fn grid_over(m: &TriMesh, cell: f64) -> DemGrid {
    let (lo, hi) = m.bounds();
    let ncols = ((hi.x - lo.x) / cell).floor() as usize + 1;
    let nrows = ((hi.y - lo.y) / cell).floor() as usize + 1;
    DemGrid::from_fn(lo.x, hi.y, cell, ncols, nrows, |_, _| 0.0)
}

pub fn cmd_mesh_from_dem(dem: &Path, decimation: usize, out_path: &Path) -> Result<(), CliError> {
    let grid = read_dem(dem)?;
    let mesh = mesh_from_dem(&grid, decimation).map_err(|e| match e {
        MeshError::BadDecimation(_) => CliError::Config(e.to_string()),
        other => mesh_error(other),
    })?;
    create_parent(out_path)?;
    write_ply(&mesh, out_path).map_err(|e| CliError::io(out_path, e))
}

pub fn cmd_dem_from_mesh(mesh: &Path, grid: &GridArgs, out_path: &Path) -> Result<(), CliError> {
    let m = read_ply(mesh).map_err(|e| CliError::io(mesh, e))?;
    let template = match &grid.template {
        Some(t) => read_dem(t)?,
        None => match (grid.origin_x, grid.origin_y, grid.cell_size, grid.ncols, grid.nrows) {
            (Some(ox), Some(oy), Some(cs), Some(nc), Some(nr)) if cs > 0.0 && nc > 0 && nr > 0 => {
                DemGrid::from_fn(ox, oy, cs, nc, nr, |_, _| 0.0)
            }
            _ => return Err(CliError::Config("give --template or a complete positive grid".into())),
        },
    };
    create_parent(out_path)?;
    write_dem(&dem_from_mesh(&m, &template), out_path)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    test: &Path,
    truth: &Path,
    mask: Option<&Path>,
    trunc: f64,
    align: bool,
    report: Option<&Path>,
    residuals: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if !(trunc > 0.0) {
        return Err(CliError::Config("trunc must be positive".into()));
    }
    let test = read_dem(test)?;
    let truth = read_dem(truth)?;
    let mask = mask.map(read_dem).transpose()?;
    let (metrics, grid) = evaluate(&test, &truth, mask.as_ref(), trunc, align)?;
    let json = serde_json::to_string_pretty(&metrics).map_err(|e| CliError::Numerical(e.to_string()))?;
    writeln!(out, "{json}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    if let Some(p) = report {
        create_parent(p)?;
        std::fs::write(p, json).map_err(|e| CliError::io(p, e))?;
    }
    if let Some(p) = residuals {
        create_parent(p)?;
        write_dem(&grid, p)?;
    }
    Ok(())
}

pub fn cmd_validate(
    rpcs: &[PathBuf],
    anchor: Option<(f64, f64)>,
    height: f64,
    delta_h: f64,
    format: ReportFormat,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if !(delta_h > 0.0) {
        return Err(CliError::Config("delta_h must be positive".into()));
    }
    let models: Vec<RfmModel> = rpcs.iter().map(|p| read_model(p)).collect::<Result<_, _>>()?;
    let first = models.first().ok_or_else(|| CliError::Config("no RPC files".into()))?;
    let (lat, lon) = anchor.unwrap_or((first.lat_off, first.lon_off));
    let anchor = GeoPoint::new(lat, lon, height);
    let frame = LocalFrame::build(anchor).map_err(|e| CliError::Config(e.to_string()))?;
    let rows = validate_frame(&frame, &FRAME_SCALES, 0.0);
    let w = |e: std::io::Error| CliError::io(Path::new("<stdout>"), e);

    match format {
        ReportFormat::Text => {
            writeln!(out, "local frame at lat {:.6} lon {:.6}", anchor.lat, anchor.lon).map_err(w)?;
            writeln!(out, "{:>8} {:>12} {:>12} {:>10}", "s [m]", "x' [m]", "y' [m]", "angle [deg]").map_err(w)?;
            for r in &rows {
                writeln!(out, "{:>8.0} {:>12.4} {:>12.4} {:>10.4}", r.scale, r.len_x, r.len_y, r.angle_deg).map_err(w)?;
            }
        }
        ReportFormat::Csv => {
            writeln!(out, "table,s_m,len_x_m,len_y_m,angle_deg").map_err(w)?;
            for r in &rows {
                writeln!(out, "frame,{},{},{},{}", r.scale, r.len_x, r.len_y, r.angle_deg).map_err(w)?;
            }
            writeln!(out, "table,rpc,height_m,off_nadir_deg,variation_deg").map_err(w)?;
        }
    }

    for (path, model) in rpcs.iter().zip(&models) {
        let center = PixelCoord::new(model.samp_off, model.line_off);
        let heights: Vec<f64> = STRAIGHTNESS_HEIGHTS.to_vec();
        let rows = validate_ray_straightness(model, &frame, &center, &heights, delta_h).map_err(|e| match e {
            RaycastError::Rfm(e) => CliError::Numerical(format!("{}: {e}", path.display())),
            other => CliError::Numerical(other.to_string()),
        })?;
        let base = rows[0].off_nadir_deg;
        let name = path.display();
        match format {
            ReportFormat::Text => {
                writeln!(out, "\nray straightness for {name}").map_err(w)?;
                writeln!(out, "{:>8} {:>14} {:>14}", "h [m]", "off-nadir [deg]", "variation [deg]").map_err(w)?;
                for r in &rows {
                    writeln!(out, "{:>8.0} {:>14.6} {:>14.3e}", r.height, r.off_nadir_deg, r.off_nadir_deg - base)
                        .map_err(w)?;
                }
            }
            ReportFormat::Csv => {
                for r in &rows {
                    writeln!(out, "ray,{name},{},{},{}", r.height, r.off_nadir_deg, r.off_nadir_deg - base)
                        .map_err(w)?;
                }
            }
        }
    }
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth { config } => cmd_synth(&config, out),
        Command::Validate { rpcs, lat, lon, height, delta_h, format } => {
            cmd_validate(&rpcs, lat.zip(lon), height, delta_h, format, out)
        }
        Command::MeshFromDem { dem, decimation, out: o } => cmd_mesh_from_dem(&dem, decimation, &o),
        Command::Refine { config, dry_run } => cmd_refine(&config, dry_run, out),
        Command::DemFromMesh { mesh, grid, out: o } => cmd_dem_from_mesh(&mesh, &grid, &o),
        Command::Evaluate { test, truth, mask, trunc, no_align, report, residuals } => cmd_evaluate(
            &test,
            &truth,
            mask.as_deref(),
            trunc,
            !no_align,
            report.as_deref(),
            residuals.as_deref(),
            out,
        ),
    }
}
