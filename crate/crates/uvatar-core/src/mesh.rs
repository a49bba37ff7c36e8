//! Triangle mesh container plus the spatial queries the rest of the crate
//! leans on: exact point-to-triangle distance, a static BVH for closest-point
//! and ray-cast queries, surface areas and normals.

use nalgebra::{Point3, Vector3};

/// Indexed triangle mesh. Vertex order is meaningful and preserved by every
/// operation in this crate.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Self {
        Self { vertices, faces }
    }

    pub fn face_points(&self, face: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Area-weighted normal of a face (unnormalized cross product / 2).
    pub fn face_area_normal(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.face_points(face);
        (b - a).cross(&(c - a)) * 0.5
    }

    pub fn face_normal(&self, face: usize) -> Vector3<f64> {
        let n = self.face_area_normal(face);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::zeros()
        }
    }

    pub fn face_area(&self, face: usize) -> f64 {
        self.face_area_normal(face).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }
}

/// Closest point on triangle (a, b, c) to `p`, with barycentric coordinates.
///
/// Region-based algorithm; exact up to floating point, no tolerance knobs.
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> (Point3<f64>, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Result of a closest-point-on-surface query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub distance: f64,
    pub point: Point3<f64>,
    pub face: usize,
    pub barycentric: [f64; 3],
}

/// Result of a ray-cast query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub face: usize,
    pub barycentric: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Point3<f64>,
    max: Point3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            max: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Point3<f64>) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(p[i]);
            self.max[i] = self.max[i].max(p[i]);
        }
    }

    fn merge(&mut self, other: &Aabb) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(other.min[i]);
            self.max[i] = self.max[i].max(other.max[i]);
        }
    }

    fn centroid_axis(&self, axis: usize) -> f64 {
        0.5 * (self.min[axis] + self.max[axis])
    }

    fn longest_axis(&self) -> usize {
        let d = self.max - self.min;
        if d.x >= d.y && d.x >= d.z {
            0
        } else if d.y >= d.z {
            1
        } else {
            2
        }
    }

    fn distance_sq(&self, p: &Point3<f64>) -> f64 {
        let mut d = 0.0;
        for i in 0..3 {
            let v = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }

    /// Slab test; returns the entry parameter interval if the ray hits.
    fn ray_range(&self, origin: &Point3<f64>, inv_dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let lo = (self.min[i] - origin[i]) * inv_dir[i];
            let hi = (self.max[i] - origin[i]) * inv_dir[i];
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

struct BvhNode {
    aabb: Aabb,
    // Leaf: start/len into `order`. Inner: left child is index+1, right is `right`.
    start: usize,
    len: usize,
    right: usize,
}

/// Static median-split BVH over the faces of a mesh.
///
/// Supports exact nearest-point queries (branch and bound over the triangle
/// set, so results match a brute-force scan) and first-hit / any-hit ray
/// casts.
pub struct TriangleBvh {
    mesh: Mesh,
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

const LEAF_SIZE: usize = 4;

impl TriangleBvh {
    pub fn build(mesh: Mesh) -> Self {
        let n = mesh.faces.len();
        let boxes: Vec<Aabb> = (0..n)
            .map(|f| {
                let mut bb = Aabb::empty();
                for p in mesh.face_points(f) {
                    bb.grow(&p);
                }
                bb
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::with_capacity(2 * n.max(1));
        if n > 0 {
            Self::build_node(&boxes, &mut order, 0, n, &mut nodes);
        }
        Self { mesh, nodes, order }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    fn build_node(boxes: &[Aabb], order: &mut [usize], start: usize, len: usize, nodes: &mut Vec<BvhNode>) -> usize {
        let mut aabb = Aabb::empty();
        for &f in &order[start..start + len] {
            aabb.merge(&boxes[f]);
        }
        let idx = nodes.len();
        nodes.push(BvhNode { aabb, start, len, right: usize::MAX });
        if len <= LEAF_SIZE {
            return idx;
        }
        let axis = aabb.longest_axis();
        let slice = &mut order[start..start + len];
        slice.sort_by(|&a, &b| {
            boxes[a]
                .centroid_axis(axis)
                .partial_cmp(&boxes[b].centroid_axis(axis))
                .unwrap()
        });
        let half = len / 2;
        Self::build_node(boxes, order, start, half, nodes);
        let right = Self::build_node(boxes, order, start + half, len - half, nodes);
        nodes[idx].right = right;
        nodes[idx].len = 0; // mark inner
        idx
    }

    /// Exact closest point on the mesh surface. Ties between faces resolve to
    /// the lowest face index so results are deterministic.
    pub fn closest_point(&self, p: &Point3<f64>) -> Option<SurfaceHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = SurfaceHit {
            distance: f64::INFINITY,
            point: *p,
            face: usize::MAX,
            barycentric: [0.0; 3],
        };
        self.closest_rec(0, p, &mut best);
        if best.face == usize::MAX {
            None
        } else {
            Some(best)
        }
    }

    fn closest_rec(&self, node: usize, p: &Point3<f64>, best: &mut SurfaceHit) {
        let n = &self.nodes[node];
        if n.aabb.distance_sq(p) >= best.distance * best.distance && best.face != usize::MAX {
            return;
        }
        if n.right == usize::MAX {
            for &f in &self.order[n.start..n.start + n.len] {
                let [a, b, c] = self.mesh.face_points(f);
                let (q, bary) = closest_point_on_triangle(p, &a, &b, &c);
                let d = (p - q).norm();
                if d < best.distance || (d == best.distance && f < best.face) {
                    *best = SurfaceHit { distance: d, point: q, face: f, barycentric: bary };
                }
            }
            return;
        }
        let left = node + 1;
        let right = n.right;
        let dl = self.nodes[left].aabb.distance_sq(p);
        let dr = self.nodes[right].aabb.distance_sq(p);
        if dl <= dr {
            self.closest_rec(left, p, best);
            self.closest_rec(right, p, best);
        } else {
            self.closest_rec(right, p, best);
            self.closest_rec(left, p, best);
        }
    }

    /// Nearest intersection of the ray with the mesh, if any. Ties between
    /// coincident hits resolve to the lowest face index.
    pub fn cast_ray(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vector3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<RayHit> = None;
        self.ray_rec(0, origin, dir, &inv, &mut best);
        best
    }

    fn ray_rec(
        &self,
        node: usize,
        origin: &Point3<f64>,
        dir: &Vector3<f64>,
        inv: &Vector3<f64>,
        best: &mut Option<RayHit>,
    ) {
        let n = &self.nodes[node];
        match n.aabb.ray_range(origin, inv) {
            None => return,
            Some((t0, _)) => {
                if let Some(b) = best {
                    if t0 > b.t {
                        return;
                    }
                }
            }
        }
        if n.right == usize::MAX {
            for &f in &self.order[n.start..n.start + n.len] {
                let [a, b, c] = self.mesh.face_points(f);
                if let Some((t, bary)) = ray_triangle(origin, dir, &a, &b, &c) {
                    let better = match best {
                        None => true,
                        Some(h) => t < h.t || (t == h.t && f < h.face),
                    };
                    if better {
                        *best = Some(RayHit { t, face: f, barycentric: bary });
                    }
                }
            }
            return;
        }
        self.ray_rec(node + 1, origin, dir, inv, best);
        self.ray_rec(n.right, origin, dir, inv, best);
    }

    /// True when any face intersects the open segment (t_min, t_max) along
    /// the ray. Used for occlusion tests.
    pub fn segment_occluded(
        &self,
        origin: &Point3<f64>,
        dir: &Vector3<f64>,
        t_min: f64,
        t_max: f64,
    ) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let inv = Vector3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        self.occluded_rec(0, origin, dir, &inv, t_min, t_max)
    }

    fn occluded_rec(
        &self,
        node: usize,
        origin: &Point3<f64>,
        dir: &Vector3<f64>,
        inv: &Vector3<f64>,
        t_min: f64,
        t_max: f64,
    ) -> bool {
        let n = &self.nodes[node];
        match n.aabb.ray_range(origin, inv) {
            None => return false,
            Some((t0, t1)) => {
                if t0 > t_max || t1 < t_min {
                    return false;
                }
            }
        }
        if n.right == usize::MAX {
            for &f in &self.order[n.start..n.start + n.len] {
                let [a, b, c] = self.mesh.face_points(f);
                if let Some((t, _)) = ray_triangle(origin, dir, &a, &b, &c) {
                    if t > t_min && t < t_max {
                        return true;
                    }
                }
            }
            return false;
        }
        self.occluded_rec(node + 1, origin, dir, inv, t_min, t_max)
            || self.occluded_rec(n.right, origin, dir, inv, t_min, t_max)
    }
}

/// Möller-Trumbore intersection. Returns (t, barycentric) for t ≥ 0.
pub fn ray_triangle(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Option<(f64, [f64; 3])> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    if t < 0.0 {
        return None;
    }
    Some((t, [1.0 - u - v, u, v]))
}
