//! Scene representation: triangles, spherical area lights, camera, and
//! procedural scene generation. Ray queries live in [`bvh`].

pub mod bvh;

pub use bvh::{Bvh, Hit};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::math::{look_basis, Aabb, Mat3, Vec3};
use crate::sampler::PixelRng;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown scene name `{0}`")]
    UnknownScene(String),
    #[error("cannot build a BVH over an empty triangle list")]
    EmptyTriangleList,
    #[error("scene file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scene file I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// One triangle of scene geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangle {
    pub v0: Vec3,
    pub v1: Vec3,
    pub v2: Vec3,
    pub mesh_id: i32,
    pub albedo: Vec3,
}

impl Triangle {
    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(&[self.v0, self.v1, self.v2])
    }

    pub fn centroid(&self) -> Vec3 {
        (self.v0 + self.v1 + self.v2) / 3.0
    }

    /// Unnormalized geometric normal; zero for degenerate triangles.
    pub fn raw_normal(&self) -> Vec3 {
        (self.v1 - self.v0).cross(self.v2 - self.v0)
    }

    pub fn area(&self) -> f32 {
        0.5 * self.raw_normal().length()
    }
}

/// Spherical area light. Radius 0 degenerates to a point light.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Light {
    pub center: Vec3,
    pub radius: f32,
    pub intensity: Vec3,
}

/// Pinhole camera: extrinsics (position + orthonormal basis) plus the
/// intrinsics every pose of a run shares.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub position: Vec3,
    /// Columns: right, up, forward.
    pub basis: Mat3,
    pub vertical_fov: f32,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn look_at(position: Vec3, target: Vec3, fov: f32, width: u32, height: u32) -> Self {
        Camera { position, basis: look_basis(target - position, Vec3::Y), vertical_fov: fov, width, height }
    }
}

/// Rigid per-mesh motion applied in the scene tick.
#[derive(Clone, Copy, Debug)]
pub enum MeshAnimation {
    /// Rotate the mesh about a vertical axis through `center`.
    Spin { mesh_id: i32, center: Vec3, radians_per_tick: f32 },
    /// Sinusoidal translation along `direction`.
    Oscillate { mesh_id: i32, direction: Vec3, amplitude: f32, period_ticks: f32 },
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub triangles: Vec<Triangle>,
    pub lights: Vec<Light>,
    pub camera: Camera,
    pub animations: Vec<MeshAnimation>,
}

impl Scene {
    /// Triangles at a given tick, with any mesh animations applied.
    pub fn triangles_at(&self, tick: u32) -> Vec<Triangle> {
        if self.animations.is_empty() {
            return self.triangles.clone();
        }
        let mut tris = self.triangles.clone();
        for anim in &self.animations {
            match *anim {
                MeshAnimation::Spin { mesh_id, center, radians_per_tick } => {
                    let angle = radians_per_tick * tick as f32;
                    let rot = Mat3::from_rotation_y(angle);
                    for tri in tris.iter_mut().filter(|t| t.mesh_id == mesh_id) {
                        tri.v0 = rot * (tri.v0 - center) + center;
                        tri.v1 = rot * (tri.v1 - center) + center;
                        tri.v2 = rot * (tri.v2 - center) + center;
                    }
                }
                MeshAnimation::Oscillate { mesh_id, direction, amplitude, period_ticks } => {
                    let phase = (tick as f32 / period_ticks) * std::f32::consts::TAU;
                    let offset = direction * (amplitude * phase.sin());
                    for tri in tris.iter_mut().filter(|t| t.mesh_id == mesh_id) {
                        tri.v0 += offset;
                        tri.v1 += offset;
                        tri.v2 += offset;
                    }
                }
            }
        }
        tris
    }

    pub fn is_animated(&self) -> bool {
        !self.animations.is_empty()
    }
}

/// Key-value parameters for procedural scenes. Missing keys take
/// scene-specific defaults; generation is deterministic in (name, params).
pub type SceneParams = BTreeMap<String, f64>;

fn param(params: &SceneParams, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

/// Builds one of the procedural scenes: `box-room`, `columns-hall`, or
/// `corner-wall`.
pub fn generate_scene(name: &str, params: &SceneParams) -> Result<Scene, SceneError> {
    match name {
        "box-room" => Ok(box_room(params)),
        "columns-hall" => Ok(columns_hall(params)),
        "corner-wall" => Ok(corner_wall(params)),
        other => Err(SceneError::UnknownScene(other.to_string())),
    }
}

/// Appends a quad (two triangles) with the winding a-b-c, a-c-d.
pub fn push_quad(tris: &mut Vec<Triangle>, a: Vec3, b: Vec3, c: Vec3, d: Vec3, mesh_id: i32, albedo: Vec3) {
    tris.push(Triangle { v0: a, v1: b, v2: c, mesh_id, albedo });
    tris.push(Triangle { v0: a, v1: c, v2: d, mesh_id, albedo });
}

/// Axis-aligned box from min/max corners, all six faces.
pub fn push_box(tris: &mut Vec<Triangle>, min: Vec3, max: Vec3, mesh_id: i32, albedo: Vec3) {
    let (x0, y0, z0) = (min.x, min.y, min.z);
    let (x1, y1, z1) = (max.x, max.y, max.z);
    let p = |x: f32, y: f32, z: f32| Vec3::new(x, y, z);
    // bottom, top
    push_quad(tris, p(x0, y0, z0), p(x1, y0, z0), p(x1, y0, z1), p(x0, y0, z1), mesh_id, albedo);
    push_quad(tris, p(x0, y1, z0), p(x0, y1, z1), p(x1, y1, z1), p(x1, y1, z0), mesh_id, albedo);
    // -z, +z
    push_quad(tris, p(x0, y0, z0), p(x0, y1, z0), p(x1, y1, z0), p(x1, y0, z0), mesh_id, albedo);
    push_quad(tris, p(x0, y0, z1), p(x1, y0, z1), p(x1, y1, z1), p(x0, y1, z1), mesh_id, albedo);
    // -x, +x
    push_quad(tris, p(x0, y0, z0), p(x0, y0, z1), p(x0, y1, z1), p(x0, y1, z0), mesh_id, albedo);
    push_quad(tris, p(x1, y0, z0), p(x1, y1, z0), p(x1, y1, z1), p(x1, y0, z1), mesh_id, albedo);
}

/// Closed five-wall room (floor plus four walls, open top) with two boxes
/// and a column as shadow casters and one area light overhead.
fn box_room(params: &SceneParams) -> Scene {
    let half = param(params, "half_extent", 4.0) as f32;
    let height = param(params, "height", 3.0) as f32;
    let light_radius = param(params, "light_radius", 0.4) as f32;

    let mut tris = Vec::new();
    let floor_albedo = Vec3::new(0.75, 0.72, 0.68);
    let wall_albedo = Vec3::new(0.62, 0.66, 0.72);
    let p = |x: f32, y: f32, z: f32| Vec3::new(x, y, z);

    // floor (mesh 0), four walls (mesh 1..=4)
    push_quad(&mut tris, p(-half, 0.0, -half), p(half, 0.0, -half), p(half, 0.0, half), p(-half, 0.0, half), 0, floor_albedo);
    push_quad(&mut tris, p(-half, 0.0, -half), p(-half, height, -half), p(half, height, -half), p(half, 0.0, -half), 1, wall_albedo);
    push_quad(&mut tris, p(-half, 0.0, half), p(half, 0.0, half), p(half, height, half), p(-half, height, half), 2, wall_albedo);
    push_quad(&mut tris, p(-half, 0.0, -half), p(-half, 0.0, half), p(-half, height, half), p(-half, height, -half), 3, Vec3::new(0.70, 0.45, 0.40));
    push_quad(&mut tris, p(half, 0.0, -half), p(half, height, -half), p(half, height, half), p(half, 0.0, half), 4, Vec3::new(0.42, 0.62, 0.45));

    // shadow casters
    push_box(&mut tris, p(-1.7, 0.0, 0.3), p(-0.7, 1.0, 1.3), 5, Vec3::new(0.80, 0.55, 0.30));
    push_box(&mut tris, p(0.9, 0.0, -1.3), p(1.7, 1.6, -0.5), 6, Vec3::new(0.35, 0.50, 0.78));
    push_box(&mut tris, p(-0.3, 0.0, -2.2), p(0.3, 2.2, -1.6), 7, Vec3::new(0.70, 0.70, 0.72));

    let lights = vec![Light {
        center: Vec3::new(0.0, height - 0.4, 0.0),
        radius: light_radius,
        intensity: Vec3::new(14.0, 13.5, 12.5),
    }];

    let camera = Camera::look_at(Vec3::new(3.2, 1.9, 3.2), Vec3::new(0.0, 0.8, 0.0), 55f32.to_radians(), 320, 180);
    Scene { triangles: tris, lights, camera, animations: Vec::new() }
}

/// Ground plane meeting one large vertical wall along the line x = 0.
/// The wall is big enough relative to any reasonable hemisphere radius to
/// act as an infinite half-space occluder for points on the ground near it.
fn corner_wall(params: &SceneParams) -> Scene {
    let extent = param(params, "extent", 200.0) as f32;
    let wall_height = param(params, "wall_height", 100.0) as f32;
    let p = |x: f32, y: f32, z: f32| Vec3::new(x, y, z);

    let mut tris = Vec::new();
    // ground occupies x >= 0 (mesh 0); wall is the plane x = 0 (mesh 1)
    push_quad(&mut tris, p(0.0, 0.0, -extent), p(extent, 0.0, -extent), p(extent, 0.0, extent), p(0.0, 0.0, extent), 0, Vec3::new(0.70, 0.70, 0.70));
    push_quad(&mut tris, p(0.0, 0.0, -extent), p(0.0, 0.0, extent), p(0.0, wall_height, extent), p(0.0, wall_height, -extent), 1, Vec3::new(0.75, 0.68, 0.60));

    let lights = vec![Light { center: Vec3::new(8.0, 12.0, 0.0), radius: 0.5, intensity: Vec3::new(220.0, 220.0, 220.0) }];
    let camera = Camera::look_at(Vec3::new(0.6, 1.2, 0.0), Vec3::new(0.03, 0.0, 0.0), 55f32.to_radians(), 320, 180);
    Scene { triangles: tris, lights, camera, animations: Vec::new() }
}

/// Floor with a seeded grid of columns of randomized height and girth.
fn columns_hall(params: &SceneParams) -> Scene {
    let seed = param(params, "seed", 0.0) as u64;
    let cols = param(params, "columns", 4.0).max(1.0) as i32;
    let spacing = param(params, "spacing", 2.2) as f32;
    let half = spacing * (cols as f32 + 1.0) * 0.5;
    let p = |x: f32, y: f32, z: f32| Vec3::new(x, y, z);

    let mut tris = Vec::new();
    push_quad(&mut tris, p(-half, 0.0, -half), p(half, 0.0, -half), p(half, 0.0, half), p(-half, 0.0, half), 0, Vec3::new(0.72, 0.70, 0.66));

    let mut rng = PixelRng::from_key(seed ^ 0xC01_5EED);
    let mut mesh_id = 1;
    for i in 0..cols {
        for j in 0..cols {
            let cx = (i as f32 - (cols - 1) as f32 * 0.5) * spacing;
            let cz = (j as f32 - (cols - 1) as f32 * 0.5) * spacing;
            let h = 1.2 + 1.8 * rng.next_f32();
            let w = 0.25 + 0.2 * rng.next_f32();
            let tint = 0.45 + 0.35 * rng.next_f32();
            push_box(&mut tris, p(cx - w, 0.0, cz - w), p(cx + w, h, cz + w), mesh_id, Vec3::new(tint, tint * 0.95, tint * 0.85));
            mesh_id += 1;
        }
    }

    let lights = vec![Light { center: Vec3::new(0.0, 6.0, 0.0), radius: 0.6, intensity: Vec3::new(60.0, 58.0, 54.0) }];
    let camera = Camera::look_at(Vec3::new(half * 0.9, 2.2, half * 0.9), Vec3::new(0.0, 0.7, 0.0), 55f32.to_radians(), 320, 180);
    Scene { triangles: tris, lights, camera, animations: Vec::new() }
}

/// Parses the triangle-soup text format:
/// header `tris <count> lights <count>`, one triangle per record
/// (9 vertex floats, mesh_id, 3 albedo floats), one light per record
/// (3 center floats, radius, 3 intensity floats). `#` starts a comment.
pub fn parse_soup(text: &str) -> Result<(Vec<Triangle>, Vec<Light>), SceneError> {
    struct Cursor<'a> {
        tokens: Vec<(usize, &'a str)>,
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, what: &str) -> Result<(usize, &'a str), SceneError> {
            let t = self.tokens.get(self.pos).copied().ok_or_else(|| SceneError::Parse {
                line: self.tokens.last().map_or(0, |t| t.0),
                msg: format!("unexpected end of file, expected {what}"),
            })?;
            self.pos += 1;
            Ok(t)
        }
        fn keyword(&mut self, kw: &str) -> Result<(), SceneError> {
            let t = self.take(kw)?;
            if t.1 == kw {
                Ok(())
            } else {
                Err(SceneError::Parse { line: t.0, msg: format!("expected `{kw}`, found `{}`", t.1) })
            }
        }
        fn num<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, SceneError> {
            let t = self.take(what)?;
            t.1.parse().map_err(|_| SceneError::Parse { line: t.0, msg: format!("invalid {what} `{}`", t.1) })
        }
        fn vec3(&mut self, what: &str) -> Result<Vec3, SceneError> {
            Ok(Vec3::new(self.num(what)?, self.num(what)?, self.num(what)?))
        }
    }

    let mut tokens: Vec<(usize, &str)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            tokens.push((idx + 1, tok));
        }
    }
    let mut cur = Cursor { tokens, pos: 0 };

    cur.keyword("tris")?;
    let tri_count: usize = cur.num("triangle count")?;
    cur.keyword("lights")?;
    let light_count: usize = cur.num("light count")?;

    let mut triangles = Vec::with_capacity(tri_count.min(1 << 22));
    for _ in 0..tri_count {
        let v0 = cur.vec3("vertex")?;
        let v1 = cur.vec3("vertex")?;
        let v2 = cur.vec3("vertex")?;
        let mesh_id: i32 = cur.num("mesh id")?;
        let albedo = cur.vec3("albedo")?;
        triangles.push(Triangle { v0, v1, v2, mesh_id, albedo });
    }
    let mut lights = Vec::with_capacity(light_count.min(1 << 10));
    for _ in 0..light_count {
        let center = cur.vec3("center")?;
        let radius = cur.num("radius")?;
        let intensity = cur.vec3("intensity")?;
        lights.push(Light { center, radius, intensity });
    }
    if cur.pos != cur.tokens.len() {
        let t = cur.tokens[cur.pos];
        return Err(SceneError::Parse { line: t.0, msg: format!("trailing token `{}`", t.1) });
    }
    Ok((triangles, lights))
}

pub fn load_soup(path: &Path) -> Result<(Vec<Triangle>, Vec<Light>), SceneError> {
    parse_soup(&std::fs::read_to_string(path)?)
}

pub fn write_soup(triangles: &[Triangle], lights: &[Light]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "tris {} lights {}", triangles.len(), lights.len());
    for t in triangles {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {}",
            t.v0.x, t.v0.y, t.v0.z, t.v1.x, t.v1.y, t.v1.z, t.v2.x, t.v2.y, t.v2.z, t.mesh_id, t.albedo.x, t.albedo.y, t.albedo.z
        );
    }
    for l in lights {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            l.center.x, l.center.y, l.center.z, l.radius, l.intensity.x, l.intensity.y, l.intensity.z
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_room_shape() {
        let scene = generate_scene("box-room", &SceneParams::new()).unwrap();
        assert!(scene.triangles.len() >= 10);
        assert_eq!(scene.lights.len(), 1);
        for t in &scene.triangles {
            assert!(t.area() > 0.0);
            assert!(t.mesh_id >= 0);
        }
    }

    #[test]
    fn corner_wall_has_ground_and_wall() {
        let scene = generate_scene("corner-wall", &SceneParams::new()).unwrap();
        let ground: Vec<_> = scene.triangles.iter().filter(|t| t.mesh_id == 0).collect();
        let wall: Vec<_> = scene.triangles.iter().filter(|t| t.mesh_id == 1).collect();
        assert_eq!(ground.len(), 2);
        assert_eq!(wall.len(), 2);
        for t in ground {
            assert!(t.raw_normal().normalize().y.abs() > 0.999);
        }
        for t in wall {
            assert!(t.raw_normal().normalize().x.abs() > 0.999);
        }
    }

    #[test]
    fn columns_hall_deterministic() {
        let mut params = SceneParams::new();
        params.insert("seed".into(), 7.0);
        let a = generate_scene("columns-hall", &params).unwrap();
        let b = generate_scene("columns-hall", &params).unwrap();
        assert_eq!(a.triangles.len(), b.triangles.len());
        for (x, y) in a.triangles.iter().zip(&b.triangles) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn unknown_scene_is_an_error() {
        assert!(matches!(generate_scene("pink-room", &SceneParams::new()), Err(SceneError::UnknownScene(_))));
    }

    #[test]
    fn soup_round_trip() {
        let scene = generate_scene("box-room", &SceneParams::new()).unwrap();
        let text = write_soup(&scene.triangles, &scene.lights);
        let (tris, lights) = parse_soup(&text).unwrap();
        assert_eq!(tris, scene.triangles);
        assert_eq!(lights, scene.lights);
    }

    #[test]
    fn soup_rejects_garbage() {
        assert!(parse_soup("tris 1 lights 0\n0 0 0 1 0 0").is_err());
        assert!(parse_soup("quads 1 lights 0").is_err());
        let good = "tris 0 lights 0\n# comment\n";
        assert!(parse_soup(good).is_ok());
    }

    #[test]
    fn animations_move_only_their_mesh() {
        let mut scene = generate_scene("box-room", &SceneParams::new()).unwrap();
        scene.animations.push(MeshAnimation::Oscillate {
            mesh_id: 5,
            direction: Vec3::X,
            amplitude: 0.5,
            period_ticks: 60.0,
        });
        let t0 = scene.triangles_at(0);
        let t15 = scene.triangles_at(15);
        for (a, b) in t0.iter().zip(&t15) {
            if a.mesh_id == 5 {
                assert_ne!(a.v0, b.v0);
            } else {
                assert_eq!(a.v0, b.v0);
            }
        }
    }
}
