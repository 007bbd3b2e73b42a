//! Triangle surface meshes in the local frame.

mod dem;
mod ply;

use std::collections::HashMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geoframe::LocalPoint;
use crate::raycast::Bvh;

pub use dem::{DemGrid, DEFAULT_NODATA};
pub use ply::{parse_ply, read_ply, to_ply_ascii, write_ply};

const MIN_FACE_AREA: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    BadIndex { face: usize, index: u32, count: usize },
    #[error("face {0} is degenerate (area {1:e} m^2)")]
    DegenerateFace(usize, f64),
    #[error("DEM has fewer than 2x2 valid samples at the requested decimation")]
    EmptyDem,
    #[error("invalid DEM: {0}")]
    InvalidDem(String),
    #[error("decimation must be a power of two, got {0}")]
    BadDecimation(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<LocalPoint>,
    faces: Vec<[u32; 3]>,
    vertex_normals: Vec<Vector3<f64>>,
    one_ring: Vec<Vec<u32>>,
    neighbors: Vec<Vec<u32>>,
    boundary: Vec<bool>,
}

impl TriMesh {
    pub fn new(vertices: Vec<LocalPoint>, faces: Vec<[u32; 3]>) -> Result<TriMesh, MeshError> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &idx in f {
                if idx as usize >= n {
                    return Err(MeshError::BadIndex { face: fi, index: idx, count: n });
                }
            }
            let area = triangle_area(&vertices, f);
            if !(area > MIN_FACE_AREA) {
                return Err(MeshError::DegenerateFace(fi, area));
            }
        }
        let (one_ring, neighbors, boundary) = build_topology(n, &faces);
        let mut mesh = TriMesh {
            vertices,
            faces,
            vertex_normals: Vec::new(),
            one_ring,
            neighbors,
            boundary,
        };
        mesh.recompute_normals();
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[LocalPoint] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn vertex_normals(&self) -> &[Vector3<f64>] {
        &self.vertex_normals
    }

    /// Faces incident to each vertex, in ascending face order.
    pub fn one_ring(&self, v: usize) -> &[u32] {
        &self.one_ring[v]
    }

    /// Vertices sharing an edge with `v`, ascending.
    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.neighbors[v]
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn face_vertices(&self, f: usize) -> [LocalPoint; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Unit face normal, or zero for a collapsed face.
    pub fn face_normal(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.face_vertices(f);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::zeros()
        }
    }

    pub fn face_area(&self, f: usize) -> f64 {
        triangle_area(&self.vertices, &self.faces[f])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounds(&self) -> (LocalPoint, LocalPoint) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Replace all vertex positions, keeping connectivity.
    pub fn set_vertices(&mut self, vertices: Vec<LocalPoint>) {
        assert_eq!(vertices.len(), self.vertices.len(), "vertex count must not change");
        self.vertices = vertices;
        self.recompute_normals();
    }

    pub fn displace(&mut self, displacement: &[Vector3<f64>]) {
        assert_eq!(displacement.len(), self.vertices.len());
        for (v, d) in self.vertices.iter_mut().zip(displacement) {
            *v += d;
        }
        self.recompute_normals();
    }

    /// Area-weighted vertex normals; isolated or fully collapsed vertices get +z.
    fn recompute_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            for &i in f {
                acc[i as usize] += n;
            }
        }
        self.vertex_normals = acc
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vector3::z()
                }
            })
            .collect();
    }

    /// Rebuild adjacency from the face list and compare with the cached tables.
    pub fn topology_consistent(&self) -> bool {
        let (one_ring, neighbors, boundary) = build_topology(self.vertices.len(), &self.faces);
        one_ring == self.one_ring && neighbors == self.neighbors && boundary == self.boundary
    }

    /// Umbrella Laplacian of an arbitrary per-vertex field; zero on boundary
    /// and isolated vertices.
    pub fn umbrella(&self, field: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        (0..self.vertices.len())
            .map(|i| {
                let nb = &self.neighbors[i];
                if self.boundary[i] || nb.is_empty() {
                    return Vector3::zeros();
                }
                let mean = nb.iter().map(|&j| field[j as usize]).sum::<Vector3<f64>>() / nb.len() as f64;
                mean - field[i]
            })
            .collect()
    }

    pub fn laplacian(&self) -> Vec<Vector3<f64>> {
        self.umbrella(&self.vertices)
    }
}

fn triangle_area(vertices: &[LocalPoint], f: &[u32; 3]) -> f64 {
    let [a, b, c] = f.map(|i| vertices[i as usize]);
    0.5 * (b - a).cross(&(c - a)).norm()
}

type Topology = (Vec<Vec<u32>>, Vec<Vec<u32>>, Vec<bool>);

fn build_topology(n: usize, faces: &[[u32; 3]]) -> Topology {
    let mut one_ring = vec![Vec::new(); n];
    let mut neighbors = vec![Vec::new(); n];
    let mut edge_use: HashMap<(u32, u32), u32> = HashMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let a = f[k];
            let b = f[(k + 1) % 3];
            one_ring[a as usize].push(fi as u32);
            neighbors[a as usize].push(b);
            neighbors[b as usize].push(a);
            *edge_use.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    for nb in &mut neighbors {
        nb.sort_unstable();
        nb.dedup();
    }
    let mut boundary = vec![false; n];
    for (&(a, b), &count) in &edge_use {
        if count == 1 {
            boundary[a as usize] = true;
            boundary[b as usize] = true;
        }
    }
    (one_ring, neighbors, boundary)
}

/// Triangulate a DEM sampled at `decimation * cell_size` spacing. Each sample
/// is the mean of the valid cells in its `decimation x decimation` block and
/// sits at the block center.
pub fn mesh_from_dem(dem: &DemGrid, decimation: usize) -> Result<TriMesh, MeshError> {
    if decimation == 0 || !decimation.is_power_of_two() {
        return Err(MeshError::BadDecimation(decimation));
    }
    let d = decimation;
    let rows = dem.nrows / d;
    let cols = dem.ncols / d;
    if rows < 2 || cols < 2 {
        return Err(MeshError::EmptyDem);
    }
    let mut index = vec![u32::MAX; rows * cols];
    let mut vertices = Vec::new();
    let half = 0.5 * (d as f64 - 1.0);
    for r in 0..rows {
        for c in 0..cols {
            let mut sum = 0.0;
            let mut count = 0usize;
            for rr in r * d..(r + 1) * d {
                for cc in c * d..(c + 1) * d {
                    if let Some(h) = dem.get(rr, cc) {
                        sum += h;
                        count += 1;
                    }
                }
            }
            if count > 0 {
                let x = dem.origin_x + (c as f64 * d as f64 + half) * dem.cell_size;
                let y = dem.origin_y - (r as f64 * d as f64 + half) * dem.cell_size;
                index[r * cols + c] = vertices.len() as u32;
                vertices.push(Vector3::new(x, y, sum / count as f64));
            }
        }
    }
    let mut faces = Vec::new();
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let tl = index[r * cols + c];
            let tr = index[r * cols + c + 1];
            let bl = index[(r + 1) * cols + c];
            let br = index[(r + 1) * cols + c + 1];
            if [tl, tr, bl, br].contains(&u32::MAX) {
                continue;
            }
            faces.push([bl, br, tr]);
            faces.push([bl, tr, tl]);
        }
    }
    if faces.is_empty() {
        return Err(MeshError::EmptyDem);
    }
    // drop samples that ended up in no face
    let mut used = vec![false; vertices.len()];
    for f in &faces {
        for &i in f {
            used[i as usize] = true;
        }
    }
    let mut remap = vec![u32::MAX; vertices.len()];
    let mut kept = Vec::new();
    for (i, v) in vertices.into_iter().enumerate() {
        if used[i] {
            remap[i] = kept.len() as u32;
            kept.push(v);
        }
    }
    let faces = faces.into_iter().map(|f| f.map(|i| remap[i as usize])).collect();
    TriMesh::new(kept, faces)
}

/// Midpoint 1-to-4 subdivision; shared edges get a single new vertex.
pub fn densify(m: &TriMesh) -> TriMesh {
    let mut vertices = m.vertices.clone();
    let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
    let mut mid = |a: u32, b: u32, vertices: &mut Vec<LocalPoint>| -> u32 {
        *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
            vertices.push(0.5 * (vertices[a as usize] + vertices[b as usize]));
            (vertices.len() - 1) as u32
        })
    };
    let mut faces = Vec::with_capacity(4 * m.faces.len());
    for &[a, b, c] in &m.faces {
        let ab = mid(a, b, &mut vertices);
        let bc = mid(b, c, &mut vertices);
        let ca = mid(c, a, &mut vertices);
        faces.push([a, ab, ca]);
        faces.push([ab, b, bc]);
        faces.push([ca, bc, c]);
        faces.push([ab, bc, ca]);
    }
    let (one_ring, neighbors, boundary) = build_topology(vertices.len(), &faces);
    let mut out = TriMesh {
        vertices,
        faces,
        vertex_normals: Vec::new(),
        one_ring,
        neighbors,
        boundary,
    };
    out.recompute_normals();
    out
}

/// Thin-plate descent direction `-L(L(v))` with the umbrella operator `L`.
pub fn thin_plate_displacement(m: &TriMesh) -> Vec<Vector3<f64>> {
    let lap = m.laplacian();
    m.umbrella(&lap).into_iter().map(|v| -v).collect()
}

/// Sum of squared umbrella Laplacians.
pub fn smoothness_energy(m: &TriMesh) -> f64 {
    m.laplacian().iter().map(|l| l.norm_squared()).sum()
}

/// Rasterize the mesh onto `template` by casting a downward ray through each
/// cell center and keeping the highest hit.
pub fn dem_from_mesh(m: &TriMesh, template: &DemGrid) -> DemGrid {
    let bvh = Bvh::build(m);
    dem_from_mesh_with(m, &bvh, template)
}

pub fn dem_from_mesh_with(m: &TriMesh, bvh: &Bvh, template: &DemGrid) -> DemGrid {
    use rayon::prelude::*;
    let mut out = template.empty_like();
    if m.face_count() == 0 {
        return out;
    }
    let (_, hi) = m.bounds();
    let top = hi.z + 10.0;
    let down = -Vector3::z();
    let ncols = out.ncols;
    let nodata = out.nodata;
    out.heights.par_chunks_mut(ncols).enumerate().for_each(|(r, row)| {
        for (c, h) in row.iter_mut().enumerate() {
            let (x, y) = template.cell_center(r, c);
            *h = match bvh.intersect(m, &Vector3::new(x, y, top), &down) {
                Some(hit) => hit.point.z,
                None => nodata,
            };
        }
    });
    out
}
