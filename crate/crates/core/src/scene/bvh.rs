//! Bounding volume hierarchy over scene triangles.
//!
//! Construction is a deterministic median split over the longest centroid
//! axis with at most [`LEAF_SIZE`] triangles per leaf. Queries are pure,
//! so a built tree can be shared across threads.

use crate::math::{Aabb, Ray, Vec3, RAY_T_MIN};
use crate::scene::{SceneError, Triangle};

pub const LEAF_SIZE: usize = 4;

#[derive(Clone, Debug)]
struct BvhNode {
    aabb: Aabb,
    /// Leaf: `count > 0`, triangles in `order[start..start + count]`.
    /// Inner: `count == 0`, children at `start` and `start + 1`.
    start: u32,
    count: u32,
}

/// Closest intersection along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f32,
    pub prim: u32,
    pub mesh_id: i32,
    /// Geometric normal, flipped to face against the ray direction.
    pub normal: Vec3,
    pub albedo: Vec3,
}

#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
    triangles: Vec<Triangle>,
}

/// Möller–Trumbore, two-sided. Returns the ray parameter of the hit.
#[inline]
pub fn ray_triangle(ray: &Ray, tri: &Triangle) -> Option<f32> {
    let e1 = tri.v1 - tri.v0;
    let e2 = tri.v2 - tri.v0;
    let pvec = ray.direction.cross(e2);
    let det = e1.dot(pvec);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = ray.origin - tri.v0;
    let u = tvec.dot(pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(e1);
    let v = ray.direction.dot(qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(qvec) * inv_det;
    if t > RAY_T_MIN && t < ray.t_max {
        Some(t)
    } else {
        None
    }
}

impl Bvh {
    pub fn build(triangles: &[Triangle]) -> Result<Bvh, SceneError> {
        if triangles.is_empty() {
            return Err(SceneError::EmptyTriangleList);
        }
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let centroids: Vec<Vec3> = triangles.iter().map(Triangle::centroid).collect();
        let boxes: Vec<Aabb> = triangles.iter().map(Triangle::aabb).collect();
        let mut nodes = Vec::with_capacity(triangles.len() * 2);
        nodes.push(BvhNode { aabb: Aabb::EMPTY, start: 0, count: 0 });
        Self::build_node(0, &mut nodes, &mut order, 0, triangles.len(), &centroids, &boxes);
        Ok(Bvh { nodes, order, triangles: triangles.to_vec() })
    }

    fn build_node(
        node: usize,
        nodes: &mut Vec<BvhNode>,
        order: &mut [u32],
        start: usize,
        end: usize,
        centroids: &[Vec3],
        boxes: &[Aabb],
    ) {
        let mut aabb = Aabb::EMPTY;
        let mut centroid_bounds = Aabb::EMPTY;
        for &i in &order[start..end] {
            aabb.grow(&boxes[i as usize]);
            centroid_bounds.grow_point(centroids[i as usize]);
        }
        let count = end - start;
        if count <= LEAF_SIZE {
            nodes[node] = BvhNode { aabb, start: start as u32, count: count as u32 };
            return;
        }
        let axis = centroid_bounds.longest_axis();
        // Stable order under centroid ties keeps construction deterministic.
        order[start..end].sort_unstable_by(|&a, &b| {
            let ca = centroids[a as usize][axis];
            let cb = centroids[b as usize][axis];
            ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
        });
        let mid = start + count / 2;
        let left = nodes.len();
        nodes.push(BvhNode { aabb: Aabb::EMPTY, start: 0, count: 0 });
        nodes.push(BvhNode { aabb: Aabb::EMPTY, start: 0, count: 0 });
        nodes[node] = BvhNode { aabb, start: left as u32, count: 0 };
        Self::build_node(left, nodes, order, start, mid, centroids, boxes);
        Self::build_node(left + 1, nodes, order, mid, end, centroids, boxes);
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    fn hit_from(&self, prim: u32, ray: &Ray, t: f32) -> Hit {
        let tri = &self.triangles[prim as usize];
        let mut normal = tri.raw_normal().normalize();
        if normal.dot(ray.direction) > 0.0 {
            normal = -normal;
        }
        Hit { t, prim, mesh_id: tri.mesh_id, normal, albedo: tri.albedo }
    }

    /// Nearest intersection with `RAY_T_MIN < t < ray.t_max`, or `None`.
    /// Exact-`t` ties resolve to the lowest primitive index.
    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let inv_dir = ray.direction.recip();
        let mut best_t = ray.t_max;
        let mut best_prim: Option<u32> = None;
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        stack[sp] = 0;
        sp += 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if !node.aabb.hit(ray, inv_dir, RAY_T_MIN, best_t) {
                continue;
            }
            if node.count > 0 {
                for &prim in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    if let Some(t) = ray_triangle(ray, &self.triangles[prim as usize]) {
                        let better = match best_prim {
                            None => t < ray.t_max,
                            Some(bp) => t < best_t || (t == best_t && prim < bp),
                        };
                        if better {
                            best_t = t;
                            best_prim = Some(prim);
                        }
                    }
                }
            } else {
                stack[sp] = node.start;
                stack[sp + 1] = node.start + 1;
                sp += 2;
            }
        }
        best_prim.map(|prim| self.hit_from(prim, ray, best_t))
    }

    /// Any-hit query; terminates at the first intersection found.
    pub fn occluded(&self, ray: &Ray) -> bool {
        let inv_dir = ray.direction.recip();
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        stack[sp] = 0;
        sp += 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if !node.aabb.hit(ray, inv_dir, RAY_T_MIN, ray.t_max) {
                continue;
            }
            if node.count > 0 {
                for &prim in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    if ray_triangle(ray, &self.triangles[prim as usize]).is_some() {
                        return true;
                    }
                }
            } else {
                stack[sp] = node.start;
                stack[sp + 1] = node.start + 1;
                sp += 2;
            }
        }
        false
    }

    /// Structural invariants: each triangle index in exactly one leaf,
    /// parent boxes contain children, leaves within size bound.
    pub fn check_invariants(&self) -> bool {
        let mut seen = vec![0u32; self.triangles.len()];
        let mut ok = true;
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.count > 0 {
                if node.count as usize > LEAF_SIZE {
                    ok = false;
                }
                for &prim in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    seen[prim as usize] += 1;
                }
            } else {
                let l = &self.nodes[node.start as usize];
                let r = &self.nodes[node.start as usize + 1];
                if !node.aabb.contains(&l.aabb) || !node.aabb.contains(&r.aabb) {
                    ok = false;
                }
                if node.start as usize <= idx {
                    ok = false;
                }
            }
        }
        ok && seen.iter().all(|&c| c == 1)
    }
}

/// Brute-force closest hit used as the traversal oracle in tests.
pub fn linear_intersect(triangles: &[Triangle], ray: &Ray) -> Option<(u32, f32)> {
    let mut best: Option<(u32, f32)> = None;
    for (i, tri) in triangles.iter().enumerate() {
        if let Some(t) = ray_triangle(ray, tri) {
            match best {
                Some((_, bt)) if t >= bt => {}
                _ => best = Some((i as u32, t)),
            }
        }
    }
    best
}
