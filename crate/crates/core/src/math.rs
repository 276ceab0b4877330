//! Small geometric helpers shared by the tracer and rasterizer.

pub use glam::{Mat3, Quat, Vec2, Vec3};

/// Offset applied along the geometric normal before spawning secondary
/// rays, to avoid self-intersection with the surface they leave.
pub const SURFACE_EPSILON: f32 = 1e-4;

/// Intersections closer than this along a ray are ignored.
pub const RAY_T_MIN: f32 = 1e-6;

/// A ray segment: origin, unit direction, and maximum parametric distance.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_max: f32,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_max: f32) -> Self {
        debug_assert!((direction.length() - 1.0).abs() < 1e-4, "ray direction must be unit");
        debug_assert!(t_max > 0.0);
        Ray { origin, direction, t_max }
    }

    pub fn at(&self, t: f32) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: Vec3::splat(f32::INFINITY),
        max: Vec3::splat(f32::NEG_INFINITY),
    };

    pub fn from_points(points: &[Vec3]) -> Self {
        let mut b = Aabb::EMPTY;
        for p in points {
            b.grow_point(*p);
        }
        b
    }

    pub fn grow_point(&mut self, p: Vec3) {
        self.min = self.min.min(p);
        self.max = self.max.max(p);
    }

    pub fn grow(&mut self, other: &Aabb) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        self.min.cmple(other.min).all() && self.max.cmpge(other.max).all()
    }

    pub fn centroid(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn longest_axis(&self) -> usize {
        let ext = self.max - self.min;
        if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        }
    }

    /// Slab test against `ray` over [t_min, t_max]. `inv_dir` is the
    /// componentwise reciprocal of the ray direction (infinities are fine).
    pub fn hit(&self, ray: &Ray, inv_dir: Vec3, t_min: f32, t_max: f32) -> bool {
        let t0 = (self.min - ray.origin) * inv_dir;
        let t1 = (self.max - ray.origin) * inv_dir;
        let lo = t0.min(t1);
        let hi = t0.max(t1);
        let enter = lo.max_element().max(t_min);
        let exit = hi.min_element().min(t_max);
        enter <= exit
    }
}

/// Right-handed orthonormal camera basis from a forward direction and an
/// up hint. Falls back to a z-up hint when `forward` is (anti)parallel to
/// the hint.
pub fn look_basis(forward: Vec3, up_hint: Vec3) -> Mat3 {
    let f = forward.normalize();
    let mut r = f.cross(up_hint);
    if r.length_squared() < 1e-10 {
        r = f.cross(Vec3::Z);
    }
    let r = r.normalize();
    let u = r.cross(f);
    // Columns are x/y/z axes: right, up, forward.
    Mat3::from_cols(r, u, f)
}

/// Deterministic orthonormal frame around a unit vector (Duff et al.).
pub fn orthonormal_frame(n: Vec3) -> (Vec3, Vec3) {
    let sign = if n.z >= 0.0 { 1.0 } else { -1.0 };
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let t = Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let bt = Vec3::new(b, sign + n.y * n.y * a, -n.y);
    (t, bt)
}

/// The (right, up, forward) camera basis has determinant -1; flipping
/// forward turns it into a proper rotation for quaternion interpolation.
pub fn basis_to_quat(basis: &Mat3) -> Quat {
    Quat::from_mat3(&Mat3::from_cols(basis.x_axis, basis.y_axis, -basis.z_axis))
}

/// Inverse of [`basis_to_quat`], re-orthonormalized.
pub fn quat_to_basis(q: Quat) -> Mat3 {
    let m = Mat3::from_quat(q.normalize());
    let forward = (-m.z_axis).normalize();
    let right = forward.cross(m.y_axis).normalize();
    let up = right.cross(forward);
    Mat3::from_cols(right, up, forward)
}

/// True when the three basis columns are unit length and mutually
/// orthogonal within `tol`.
pub fn basis_is_orthonormal(m: &Mat3, tol: f32) -> bool {
    let (r, u, f) = (m.x_axis, m.y_axis, m.z_axis);
    (r.length() - 1.0).abs() <= tol
        && (u.length() - 1.0).abs() <= tol
        && (f.length() - 1.0).abs() <= tol
        && r.dot(u).abs() <= tol
        && r.dot(f).abs() <= tol
        && u.dot(f).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aabb_hit_axis_aligned() {
        let b = Aabb { min: Vec3::new(-1.0, -1.0, 2.0), max: Vec3::new(1.0, 1.0, 3.0) };
        let ray = Ray::new(Vec3::ZERO, Vec3::Z, 10.0);
        let inv = ray.direction.recip();
        assert!(b.hit(&ray, inv, 0.0, 10.0));
        assert!(!b.hit(&ray, inv, 0.0, 1.5));
        let miss = Ray::new(Vec3::new(5.0, 0.0, 0.0), Vec3::Z, 10.0);
        assert!(!b.hit(&miss, miss.direction.recip(), 0.0, 10.0));
    }

    #[test]
    fn look_basis_is_orthonormal() {
        let m = look_basis(Vec3::new(0.3, -0.8, 0.5), Vec3::Y);
        assert!(basis_is_orthonormal(&m, 1e-6));
        // Degenerate hint
        let m = look_basis(Vec3::Y, Vec3::Y);
        assert!(basis_is_orthonormal(&m, 1e-6));
    }

    #[test]
    fn frame_is_orthonormal() {
        for n in [Vec3::Y, Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.6, -0.48, 0.64)] {
            let n = n.normalize();
            let (t, b) = orthonormal_frame(n);
            assert!(t.dot(n).abs() < 1e-6);
            assert!(b.dot(n).abs() < 1e-6);
            assert!(t.dot(b).abs() < 1e-6);
            assert!((t.length() - 1.0).abs() < 1e-6);
        }
    }
}
