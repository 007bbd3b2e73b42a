//! Oracles and fixtures shared by the integration tests. The oracles are
//! straight-line reimplementations that avoid the library code under test.
#![allow(dead_code)]

use std::path::Path;

use meshforge::eval::MetricsReport;
use meshforge::geoframe::LocalFrame;
use meshforge::mesh::{dem_from_mesh, DemGrid, TriMesh};
use meshforge::raycast::{intersect_triangle, Hit, T_MIN};
use meshforge::rfm::{GeoPoint, RfmModel};
use meshforge::synthio::{BoxSpec, ModelKind, Scene, SceneSpec, Terrain, TextureSpec, ViewSpec};
use nalgebra::Vector3;
use rand::Rng;

/// RPC00B projection evaluated term by term.
pub fn rpc_eval(m: &RfmModel, lat: f64, lon: f64, h: f64) -> (f64, f64) {
    let b = (lat - m.lat_off) / m.lat_scale;
    let l = (lon - m.lon_off) / m.lon_scale;
    let z = (h - m.height_off) / m.height_scale;
    let t = [
        1.0,
        l,
        b,
        z,
        l * b,
        l * z,
        b * z,
        l * l,
        b * b,
        z * z,
        b * l * z,
        l * l * l,
        l * b * b,
        l * z * z,
        l * l * b,
        b * b * b,
        b * z * z,
        l * l * z,
        b * b * z,
        z * z * z,
    ];
    let poly = |c: &[f64; 20]| c.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
    let samp = poly(&m.samp_num) / poly(&m.samp_den) * m.samp_scale + m.samp_off + m.shift_samp;
    let line = poly(&m.line_num) / poly(&m.line_den) * m.line_scale + m.line_off + m.shift_line;
    (samp, line)
}

/// Random cubic model centered on `anchor` whose denominators stay close to one.
pub fn random_model<R: Rng>(rng: &mut R, anchor: GeoPoint) -> RfmModel {
    let mut coeffs = |big: f64, small: f64| {
        let mut c = [0.0; 20];
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = rng.gen_range(-1.0..1.0) * if i < 4 { big } else { small };
        }
        c
    };
    let mut samp_num = coeffs(0.2, 0.05);
    let mut line_num = coeffs(0.2, 0.05);
    let mut samp_den = coeffs(0.02, 0.01);
    let mut line_den = coeffs(0.02, 0.01);
    samp_num[1] = rng.gen_range(0.6..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    line_num[2] = rng.gen_range(0.6..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    samp_den[0] = 1.0;
    line_den[0] = 1.0;
    RfmModel {
        samp_num,
        samp_den,
        line_num,
        line_den,
        lat_scale: rng.gen_range(0.01..0.1),
        lat_off: anchor.lat,
        lon_scale: rng.gen_range(0.01..0.1),
        lon_off: anchor.lon,
        height_scale: rng.gen_range(100.0..1000.0),
        height_off: anchor.height + rng.gen_range(-100.0..100.0),
        samp_scale: rng.gen_range(1000.0..20000.0),
        samp_off: rng.gen_range(1000.0..20000.0),
        line_scale: rng.gen_range(1000.0..20000.0),
        line_off: rng.gen_range(1000.0..20000.0),
        shift_samp: rng.gen_range(-2.0..2.0),
        shift_line: rng.gen_range(-2.0..2.0),
        validity_expansion: 1.2,
    }
}

/// Local (east, north, up) meters to geographic, from the frame's scale
/// factors alone.
pub fn local_to_geo(frame: &LocalFrame, p: &Vector3<f64>) -> GeoPoint {
    let a = frame.anchor_geo;
    GeoPoint::new(a.lat + p.y / frame.inv_db, a.lon + p.x / frame.inv_dl, a.height + p.z)
}

/// Largest entry error of `got` against `want`, relative to the largest
/// magnitude of the row.
pub fn row_relative_error(got: &[[f64; 3]; 2], want: &[[f64; 3]; 2]) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..2 {
        let scale = want[r].iter().chain(&got[r]).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for c in 0..3 {
            worst = worst.max((got[r][c] - want[r][c]).abs() / scale);
        }
    }
    worst
}

/// Nearest hit over all faces, ties broken by face index.
pub fn exhaustive_intersect(m: &TriMesh, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for f in 0..m.face_count() {
        let [a, b, c] = m.face_vertices(f);
        let Some((t, u, v)) = intersect_triangle(o, d, &a, &b, &c) else { continue };
        if t <= T_MIN {
            continue;
        }
        if best.is_none_or(|h| t < h.t) {
            best = Some(Hit { face: f, bary: [1.0 - u - v, u, v], t, point: o + d * t });
        }
    }
    best
}

/// Highest surface point above each cell center by 2D barycentric
/// interpolation over every face.
pub fn exhaustive_dem(m: &TriMesh, template: &DemGrid) -> DemGrid {
    let mut out = template.empty_like();
    for r in 0..template.nrows {
        for c in 0..template.ncols {
            let (x, y) = template.cell_center(r, c);
            let mut top: Option<f64> = None;
            for f in 0..m.face_count() {
                let [a, b, cc] = m.face_vertices(f);
                let det = (b.x - a.x) * (cc.y - a.y) - (cc.x - a.x) * (b.y - a.y);
                if det.abs() < 1e-15 {
                    continue;
                }
                let u = ((x - a.x) * (cc.y - a.y) - (cc.x - a.x) * (y - a.y)) / det;
                let v = ((b.x - a.x) * (y - a.y) - (x - a.x) * (b.y - a.y)) / det;
                let eps = 1e-12;
                if u < -eps || v < -eps || u + v > 1.0 + eps {
                    continue;
                }
                let z = a.z + u * (b.z - a.z) + v * (cc.z - a.z);
                top = Some(top.map_or(z, |t: f64| t.max(z)));
            }
            if let Some(z) = top {
                out.set(r, c, Some(z));
            }
        }
    }
    out
}

/// Metric suite recomputed from first principles.
pub fn brute_force_metrics(test: &DemGrid, truth: &DemGrid, mask: Option<&DemGrid>, trunc: f64) -> MetricsReport {
    let mut r = Vec::new();
    let mut n_total = 0;
    for i in 0..truth.heights.len() {
        if let Some(m) = mask {
            let v = m.heights[i];
            if v == m.nodata || v == 0.0 {
                continue;
            }
        }
        n_total += 1;
        let (a, b) = (test.heights[i], truth.heights[i]);
        if a != test.nodata && b != truth.nodata {
            r.push(a - b);
        }
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s
    };
    let median = |v: &[f64]| {
        let s = sorted(v);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    };
    let mut sq = 0.0;
    let mut inside = 0usize;
    for x in &r {
        if x.abs() < trunc {
            sq += x * x;
            inside += 1;
        }
    }
    let med = median(&r);
    let dev: Vec<f64> = r.iter().map(|x| (x - med).abs()).collect();
    let abs = sorted(&r.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let rank = (0.68 * abs.len() as f64).ceil() as usize;
    MetricsReport {
        completeness_pct: 100.0 * inside as f64 / r.len() as f64,
        rmse_trunc_m: if inside > 0 { (sq / inside as f64).sqrt() } else { 0.0 },
        rmse_defined: inside > 0,
        nmad_m: 1.4826 * median(&dev),
        perc68_m: abs[rank.max(1) - 1],
        n_total,
        n_valid: r.len(),
        vertical_offset_applied_m: 0.0,
        truncation_m: trunc,
    }
}

/// Surface RMSE and median absolute residual against the truth DEM over the
/// scene's evaluation mask.
pub fn surface_error(m: &TriMesh, scene: &Scene) -> (f64, f64) {
    let dem = dem_from_mesh(m, &scene.truth_dem);
    let mut r = Vec::new();
    for i in 0..dem.heights.len() {
        let (a, b) = (dem.heights[i], scene.truth_dem.heights[i]);
        if scene.eval_mask.heights[i] == 1.0 && a != dem.nodata {
            r.push(a - b);
        }
    }
    assert!(!r.is_empty(), "no evaluation cells");
    let rmse = (r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64).sqrt();
    let mut abs: Vec<f64> = r.iter().map(|x| x.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = abs.len();
    let med = if n % 2 == 1 { abs[n / 2] } else { 0.5 * (abs[n / 2 - 1] + abs[n / 2]) };
    (rmse, med)
}

fn views(off_nadir_deg: f64, azimuths: &[f64], kind: ModelKind) -> Vec<ViewSpec> {
    azimuths.iter().map(|&azimuth_deg| ViewSpec { off_nadir_deg, azimuth_deg, kind }).collect()
}

/// 256 x 256 px boxes scene seen from four sides; neighbouring views meet
/// at 8.3 degrees and opposite ones at 11.8 degrees.
pub fn boxes_scene_spec() -> SceneSpec {
    SceneSpec {
        extent: 128.0,
        gsd: 0.5,
        terrain: Terrain::Boxes {
            base: 0.0,
            boxes: vec![
                BoxSpec { cx: -30.0, cy: 25.0, half_x: 12.0, half_y: 9.0, height: 4.0 },
                BoxSpec { cx: 20.0, cy: 20.0, half_x: 10.0, half_y: 16.0, height: 6.0 },
                BoxSpec { cx: -15.0, cy: -25.0, half_x: 18.0, half_y: 8.0, height: 3.0 },
                BoxSpec { cx: 30.0, cy: -30.0, half_x: 8.0, half_y: 8.0, height: 5.0 },
            ],
        },
        texture: TextureSpec::default(),
        views: views(5.9, &[0.0, 90.0, 180.0, 270.0], ModelKind::Affine),
        anchor: GeoPoint::new(30.31, -81.66, 0.0),
        eval_margin: 6.0,
    }
}

/// Rolling terrain for the gross block offset experiment.
pub fn rolling_scene_spec() -> SceneSpec {
    SceneSpec {
        terrain: Terrain::Fractal { base: 0.0, amplitude: 3.0, wavelength: 80.0, octaves: 3, seed: 5 },
        ..boxes_scene_spec()
    }
}

/// 64 x 64 px ramp scene for gradient checks.
pub fn small_scene_spec() -> SceneSpec {
    SceneSpec {
        extent: 32.0,
        gsd: 0.5,
        terrain: Terrain::Fractal { base: 1.0, amplitude: 1.5, wavelength: 30.0, octaves: 2, seed: 2 },
        texture: TextureSpec::default(),
        views: views(5.9, &[0.0, 90.0, 180.0], ModelKind::Affine),
        anchor: GeoPoint::new(30.31, -81.66, 0.0),
        eval_margin: 2.0,
    }
}

/// Project config of the small end-to-end fixture; all paths relative to
/// `dir`.
pub fn write_fixture_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "images": ["data/v0.f32", "data/v1.f32", "data/v2.f32"],
        "rpcs": ["data/v0_rpc.txt", "data/v1_rpc.txt", "data/v2_rpc.txt"],
        "initial_dem": "data/initial_dem.asc",
        "truth_dem": "data/truth_dem.asc",
        "truth_mesh": "data/truth_mesh.ply",
        "eval_mask": "data/mask.asc",
        "output_dir": "out",
        "seed": 4,
        "start_noise": 0.5,
        "scene": {
            "extent": 32.0,
            "gsd": 0.5,
            "terrain": {"kind": "boxes", "base": 0.0,
                        "boxes": [{"cx": 2.0, "cy": -3.0, "half_x": 6.0, "half_y": 4.0, "height": 3.0}]},
            "views": [
                {"off_nadir_deg": 5.0, "azimuth_deg": 0.0, "kind": "affine"},
                {"off_nadir_deg": 5.0, "azimuth_deg": 120.0, "kind": "affine"},
                {"off_nadir_deg": 5.0, "azimuth_deg": 240.0, "kind": "cubic-perspective-fit"}
            ]
        },
        "refine": {"start_level": 1, "iterations_per_level": 5}
    });
    let path = dir.join("project.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}
