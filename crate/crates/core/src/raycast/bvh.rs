//! Bounding volume hierarchy over mesh faces.

use nalgebra::Vector3;

use crate::geoframe::LocalPoint;
use crate::mesh::TriMesh;

/// Rays only report hits beyond this parameter.
pub const T_MIN: f64 = 1e-6;
const LEAF_SIZE: usize = 4;
const BARY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub face: usize,
    /// Weights of the face's three vertices, in face order.
    pub bary: [f64; 3],
    pub t: f64,
    pub point: LocalPoint,
}

#[derive(Debug, Clone)]
struct Node {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    /// Leaf: first index into `order`. Interior: left child.
    first: u32,
    /// Leaf: face count. Interior: 0.
    count: u32,
    right: u32,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

/// Möller-Trumbore ray/triangle test. Returns `(t, u, v)` with the hit at
/// `(1-u-v) a + u b + v c`.
#[inline]
pub fn intersect_triangle(
    origin: &LocalPoint,
    dir: &Vector3<f64>,
    a: &LocalPoint,
    b: &LocalPoint,
    c: &LocalPoint,
) -> Option<(f64, f64, f64)> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv;
    if u < -BARY_EPS || u > 1.0 + BARY_EPS {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < -BARY_EPS || u + v > 1.0 + BARY_EPS {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > T_MIN).then_some((t, u, v))
}

#[inline]
fn better(t: f64, face: usize, best: &Option<Hit>) -> bool {
    match best {
        None => true,
        Some(h) => t < h.t || (t == h.t && face < h.face),
    }
}

impl Bvh {
    pub fn build(m: &TriMesh) -> Bvh {
        let nf = m.face_count();
        let mut boxes = Vec::with_capacity(nf);
        let mut centroids = Vec::with_capacity(nf);
        for f in 0..nf {
            let [a, b, c] = m.face_vertices(f);
            boxes.push((a.inf(&b).inf(&c), a.sup(&b).sup(&c)));
            centroids.push((a + b + c) / 3.0);
        }
        let mut order: Vec<u32> = (0..nf as u32).collect();
        let mut nodes = Vec::with_capacity(2 * nf / LEAF_SIZE + 1);
        if nf > 0 {
            build_node(&mut nodes, &mut order, 0, nf, &boxes, &centroids);
        }
        Bvh { nodes, order }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Checks that every face sits in exactly one leaf of at most four faces
    /// and that every box contains its children.
    pub fn check_invariants(&self, m: &TriMesh) -> bool {
        let mut seen = vec![0u32; m.face_count()];
        let contains = |outer: &Node, lo: &Vector3<f64>, hi: &Vector3<f64>| {
            (0..3).all(|k| outer.lo[k] <= lo[k] && outer.hi[k] >= hi[k])
        };
        for n in &self.nodes {
            if n.count > 0 {
                if n.count as usize > LEAF_SIZE {
                    return false;
                }
                for &f in &self.order[n.first as usize..(n.first + n.count) as usize] {
                    seen[f as usize] += 1;
                    let [a, b, c] = m.face_vertices(f as usize);
                    if !contains(n, &a.inf(&b).inf(&c), &a.sup(&b).sup(&c)) {
                        return false;
                    }
                }
            } else {
                for child in [n.first, n.right] {
                    let ch = &self.nodes[child as usize];
                    if !contains(n, &ch.lo, &ch.hi) {
                        return false;
                    }
                }
            }
        }
        seen.iter().all(|&s| s == 1)
    }

    /// Nearest hit with `t > T_MIN`; ties go to the lower face id.
    pub fn intersect(&self, m: &TriMesh, origin: &LocalPoint, dir: &Vector3<f64>) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<Hit> = None;
        let mut stack = Vec::with_capacity(64);
        stack.push(0u32);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            let limit = best.map_or(f64::INFINITY, |h| h.t);
            if !slab(node, origin, dir, &inv, limit) {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.first as usize..(node.first + node.count) as usize] {
                    let f = f as usize;
                    let [a, b, c] = m.face_vertices(f);
                    if let Some((t, u, v)) = intersect_triangle(origin, dir, &a, &b, &c) {
                        if better(t, f, &best) {
                            best = Some(Hit { face: f, bary: [1.0 - u - v, u, v], t, point: origin + t * dir });
                        }
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(node.first);
            }
        }
        best
    }

    /// True if any face is hit with `t > T_MIN`.
    pub fn occluded(&self, m: &TriMesh, origin: &LocalPoint, dir: &Vector3<f64>) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if !slab(node, origin, dir, &inv, f64::INFINITY) {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.first as usize..(node.first + node.count) as usize] {
                    let [a, b, c] = m.face_vertices(f as usize);
                    if intersect_triangle(origin, dir, &a, &b, &c).is_some() {
                        return true;
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(node.first);
            }
        }
        false
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [u32],
    start: usize,
    end: usize,
    boxes: &[(Vector3<f64>, Vector3<f64>)],
    centroids: &[Vector3<f64>],
) -> u32 {
    let slice = &mut order[start..end];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut clo = lo;
    let mut chi = hi;
    for &f in slice.iter() {
        let (bl, bh) = &boxes[f as usize];
        lo = lo.inf(bl);
        hi = hi.sup(bh);
        clo = clo.inf(&centroids[f as usize]);
        chi = chi.sup(&centroids[f as usize]);
    }
    // pad so that edge-on and vertex-on rays are not culled by rounding
    let pad = 1e-9 * (1.0 + lo.amax().max(hi.amax()));
    lo.add_scalar_mut(-pad);
    hi.add_scalar_mut(pad);
    let idx = nodes.len() as u32;
    nodes.push(Node { lo, hi, first: start as u32, count: (end - start) as u32, right: 0 });
    if end - start <= LEAF_SIZE {
        return idx;
    }
    let axis = (chi - clo).imax();
    let mid = (end - start) / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    let left = build_node(nodes, order, start, start + mid, boxes, centroids);
    let right = build_node(nodes, order, start + mid, end, boxes, centroids);
    let node = &mut nodes[idx as usize];
    node.first = left;
    node.count = 0;
    node.right = right;
    idx
}

#[inline]
fn slab(node: &Node, origin: &LocalPoint, dir: &Vector3<f64>, inv: &Vector3<f64>, limit: f64) -> bool {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = limit;
    for k in 0..3 {
        if dir[k] == 0.0 {
            if origin[k] < node.lo[k] || origin[k] > node.hi[k] {
                return false;
            }
            continue;
        }
        let t1 = (node.lo[k] - origin[k]) * inv[k];
        let t2 = (node.hi[k] - origin[k]) * inv[k];
        tmin = tmin.max(t1.min(t2));
        tmax = tmax.min(t1.max(t2));
    }
    tmax >= tmin && tmax >= T_MIN
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{mesh_from_dem, DemGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exhaustive(m: &TriMesh, o: &LocalPoint, d: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for f in 0..m.face_count() {
            let [a, b, c] = m.face_vertices(f);
            if let Some((t, _, _)) = intersect_triangle(o, d, &a, &b, &c) {
                if best.map_or(true, |(bf, bt)| t < bt || (t == bt && f < bf)) {
                    best = Some((f, t));
                }
            }
        }
        best
    }

    fn flat(z: f64) -> TriMesh {
        mesh_from_dem(&DemGrid::from_fn(-10.0, 10.0, 1.0, 21, 21, |_, _| z), 1).unwrap()
    }

    #[test]
    fn vertical_ray_onto_plane() {
        let m = flat(0.0);
        let bvh = Bvh::build(&m);
        let hit = bvh.intersect(&m, &Vector3::new(0.0, 0.0, 100.0), &-Vector3::z()).unwrap();
        assert!((hit.t - 100.0).abs() < 1e-12);
        assert!(hit.point.norm() < 1e-12);
        assert!((hit.bary.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(bvh.intersect(&m, &Vector3::new(50.0, 0.0, 100.0), &-Vector3::z()).is_none());
        assert!(bvh.intersect(&m, &Vector3::new(0.0, 0.0, 100.0), &Vector3::z()).is_none());
        assert!(bvh.check_invariants(&m));
    }

    #[test]
    fn barycentric_matches_closed_form() {
        let (a, b, c) = (Vector3::new(0.0, 0.0, 1.0), Vector3::new(4.0, 0.0, 2.0), Vector3::new(0.0, 3.0, 0.5));
        let m = TriMesh::new(vec![a, b, c], vec![[0, 1, 2]]).unwrap();
        let bvh = Bvh::build(&m);
        let target = (a + b + c) / 3.0;
        let o = target + Vector3::new(1.0, -2.0, 10.0);
        let d = (target - o).normalize();
        let hit = bvh.intersect(&m, &o, &d).unwrap();
        for w in hit.bary {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((hit.t - (target - o).norm()).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_on_random_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dem = DemGrid::from_fn(0.0, 30.0, 1.0, 31, 31, |x, y| {
            3.0 * (0.3 * x).sin() * (0.2 * y).cos() + if (x - 15.0).abs() < 4.0 && (y - 15.0).abs() < 4.0 { 6.0 } else { 0.0 }
        });
        let m = mesh_from_dem(&dem, 1).unwrap();
        let bvh = Bvh::build(&m);
        assert!(bvh.check_invariants(&m));
        let mut hits = 0;
        for _ in 0..10_000 {
            let o = Vector3::new(rng.gen_range(-5.0..35.0), rng.gen_range(-5.0..35.0), rng.gen_range(-5.0..30.0));
            let d = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..0.3)).normalize();
            let fast = bvh.intersect(&m, &o, &d).map(|h| (h.face, h.t));
            let slow = exhaustive(&m, &o, &d);
            match (fast, slow) {
                (Some((f1, t1)), Some((f2, t2))) => {
                    assert_eq!(f1, f2);
                    assert!((t1 - t2).abs() < 1e-9);
                    hits += 1;
                }
                (None, None) => {}
                other => panic!("mismatch {other:?}"),
            }
            assert_eq!(bvh.occluded(&m, &o, &d), slow.is_some());
        }
        assert!(hits > 1000, "{hits}");
    }
}
