//! Client-side G-buffer: per-pixel geometry attributes rasterized from the
//! scene, plus screen-space motion vectors for temporal reprojection.
//!
//! Visible-surface determination is one primary ray per pixel center, so
//! the buffer matches a closest-hit query exactly at pixel centers.

use std::io::{Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::math::{Mat3, Ray, Vec2, Vec3};
use crate::scene::{Bvh, Camera};

/// Mesh id stored for background pixels.
pub const BACKGROUND_MESH: i32 = -1;
/// Motion value for pixels whose world position does not project into the
/// previous frame (behind the camera).
pub const MOTION_UNPROJECTED: f32 = 1.0e9;

const DUMP_MAGIC: u32 = u32::from_le_bytes(*b"DHRG");
const DUMP_HEADER_LEN: usize = 64;

/// All planes present in a full dump.
pub const PLANES_ALL: u32 = 0b11_1111;

#[derive(Debug, Error)]
pub enum GBufferError {
    #[error("dump I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dump: {0}")]
    Format(String),
}

/// Camera extrinsics for one frame. Intrinsics (fov, resolution) come from
/// the [`Camera`] shared by every pose of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    /// Columns: right, up, forward.
    pub basis: Mat3,
}

impl CameraPose {
    pub fn new(position: Vec3, basis: Mat3) -> Self {
        CameraPose { position, basis }
    }

    pub fn of_camera(camera: &Camera) -> Self {
        CameraPose { position: camera.position, basis: camera.basis }
    }

    /// 12-float wire form: position, right, up, forward.
    pub fn to_floats(&self) -> [f32; 12] {
        let (r, u, f) = (self.basis.x_axis, self.basis.y_axis, self.basis.z_axis);
        [
            self.position.x, self.position.y, self.position.z, r.x, r.y, r.z, u.x, u.y, u.z, f.x, f.y, f.z,
        ]
    }

    pub fn from_floats(v: &[f32; 12]) -> Self {
        CameraPose {
            position: Vec3::new(v[0], v[1], v[2]),
            basis: Mat3::from_cols(Vec3::new(v[3], v[4], v[5]), Vec3::new(v[6], v[7], v[8]), Vec3::new(v[9], v[10], v[11])),
        }
    }

    /// Bitwise identity of the wire form; used to match retained frames.
    pub fn bits_eq(&self, other: &CameraPose) -> bool {
        self.to_floats().iter().zip(other.to_floats()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Primary ray through the center of pixel (x, y).
    pub fn pixel_ray(&self, camera: &Camera, x: u32, y: u32) -> Ray {
        let (w, h) = (camera.width as f32, camera.height as f32);
        let tan_half = (camera.vertical_fov * 0.5).tan();
        let aspect = w / h;
        let ndc_x = 2.0 * (x as f32 + 0.5) / w - 1.0;
        let ndc_y = 1.0 - 2.0 * (y as f32 + 0.5) / h;
        let dir = (self.basis.z_axis + self.basis.x_axis * (ndc_x * tan_half * aspect) + self.basis.y_axis * (ndc_y * tan_half))
            .normalize();
        Ray::new(self.position, dir, f32::MAX)
    }

    /// Projects a world point to continuous pixel coordinates and linear
    /// view depth. Pixel centers land on integer coordinates. `None` when
    /// the point is at or behind the camera plane.
    pub fn project(&self, camera: &Camera, point: Vec3) -> Option<(f32, f32, f32)> {
        let d = point - self.position;
        let depth = d.dot(self.basis.z_axis);
        if depth <= 1e-6 {
            return None;
        }
        let tan_half = (camera.vertical_fov * 0.5).tan();
        let aspect = camera.width as f32 / camera.height as f32;
        let sx = d.dot(self.basis.x_axis) / (depth * tan_half * aspect);
        let sy = d.dot(self.basis.y_axis) / (depth * tan_half);
        let px = (sx + 1.0) * camera.width as f32 * 0.5 - 0.5;
        let py = (1.0 - sy) * camera.height as f32 * 0.5 - 0.5;
        Some((px, py, depth))
    }

    /// Linear view depth of a point; the same expression the rasterizer
    /// stores, so reprojected depths compare bit-exactly.
    pub fn view_depth(&self, point: Vec3) -> f32 {
        (point - self.position).dot(self.basis.z_axis)
    }
}

/// Per-pixel geometry attributes at camera resolution.
#[derive(Clone, Debug)]
pub struct GBuffer {
    pub width: u32,
    pub height: u32,
    pub frame_id: u32,
    pub pose: CameraPose,
    pub world_pos: Vec<Vec3>,
    pub normal: Vec<Vec3>,
    /// Linear view depth; +inf for background.
    pub depth: Vec<f32>,
    pub mesh_id: Vec<i32>,
    /// Previous-frame pixel coords minus current coords; zero for
    /// background, [`MOTION_UNPROJECTED`] when the point is behind the
    /// previous camera.
    pub motion: Vec<Vec2>,
    pub albedo: Vec<Vec3>,
}

impl GBuffer {
    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.mesh_id[idx] >= 0
    }
}

struct PixelSample {
    world_pos: Vec3,
    normal: Vec3,
    depth: f32,
    mesh_id: i32,
    albedo: Vec3,
}

/// Rasterizes the G-buffer for one pose. The motion plane is zeroed;
/// fill it with [`compute_motion`].
pub fn rasterize(bvh: &Bvh, camera: &Camera, pose: &CameraPose, frame_id: u32) -> GBuffer {
    let (w, h) = (camera.width, camera.height);
    let n = (w * h) as usize;
    let samples: Vec<PixelSample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i as u32 % w, i as u32 / w);
            let ray = pose.pixel_ray(camera, x, y);
            match bvh.intersect(&ray) {
                Some(hit) => {
                    let world_pos = ray.at(hit.t);
                    PixelSample {
                        world_pos,
                        normal: hit.normal,
                        depth: pose.view_depth(world_pos),
                        mesh_id: hit.mesh_id,
                        albedo: hit.albedo,
                    }
                }
                None => PixelSample {
                    world_pos: Vec3::ZERO,
                    normal: Vec3::ZERO,
                    depth: f32::INFINITY,
                    mesh_id: BACKGROUND_MESH,
                    albedo: Vec3::ZERO,
                },
            }
        })
        .collect();

    let mut g = GBuffer {
        width: w,
        height: h,
        frame_id,
        pose: *pose,
        world_pos: Vec::with_capacity(n),
        normal: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        mesh_id: Vec::with_capacity(n),
        motion: vec![Vec2::ZERO; n],
        albedo: Vec::with_capacity(n),
    };
    for s in samples {
        g.world_pos.push(s.world_pos);
        g.normal.push(s.normal);
        g.depth.push(s.depth);
        g.mesh_id.push(s.mesh_id);
        g.albedo.push(s.albedo);
    }
    g
}

/// Fills the motion plane: for each valid pixel, the offset from its
/// current pixel coordinates to where its world position fell in the
/// previous pose. Background pixels get zero motion.
pub fn compute_motion(gbuffer: &mut GBuffer, camera: &Camera, prev_pose: &CameraPose) {
    let w = gbuffer.width;
    let motion: Vec<Vec2> = (0..gbuffer.pixel_count())
        .into_par_iter()
        .map(|i| {
            if !gbuffer.is_valid(i) {
                return Vec2::ZERO;
            }
            let (x, y) = (i as u32 % w, i as u32 / w);
            match prev_pose.project(camera, gbuffer.world_pos[i]) {
                Some((px, py, _)) => Vec2::new(px - x as f32, py - y as f32),
                None => Vec2::splat(MOTION_UNPROJECTED),
            }
        })
        .collect();
    gbuffer.motion = motion;
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes selected planes to the binary dump format: a 64-byte header
/// (magic "DHRG", width, height, frame_id, plane bitmap, zero padding)
/// followed by the selected planes as row-major little-endian scalars.
pub fn write_dump(g: &GBuffer, planes: u32, out: &mut dyn Write) -> Result<(), GBufferError> {
    let mut header = Vec::with_capacity(DUMP_HEADER_LEN);
    put_u32(&mut header, DUMP_MAGIC);
    put_u32(&mut header, g.width);
    put_u32(&mut header, g.height);
    put_u32(&mut header, g.frame_id);
    put_u32(&mut header, planes);
    header.resize(DUMP_HEADER_LEN, 0);
    out.write_all(&header)?;

    fn write_f32_plane(out: &mut dyn Write, vals: impl Iterator<Item = f32>) -> Result<(), GBufferError> {
        let mut bytes = Vec::new();
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
        Ok(())
    }
    if planes & 1 != 0 {
        for c in 0..3 {
            write_f32_plane(out, g.world_pos.iter().map(|v| v[c]))?;
        }
    }
    if planes & 2 != 0 {
        for c in 0..3 {
            write_f32_plane(out, g.normal.iter().map(|v| v[c]))?;
        }
    }
    if planes & 4 != 0 {
        write_f32_plane(out, g.depth.iter().copied())?;
    }
    if planes & 8 != 0 {
        let mut bytes = Vec::with_capacity(g.pixel_count() * 4);
        for v in &g.mesh_id {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    if planes & 16 != 0 {
        for c in 0..2 {
            write_f32_plane(out, g.motion.iter().map(|v| v[c]))?;
        }
    }
    if planes & 32 != 0 {
        for c in 0..3 {
            write_f32_plane(out, g.albedo.iter().map(|v| v[c]))?;
        }
    }
    Ok(())
}

/// Reads a dump produced by [`write_dump`]. Planes absent from the bitmap
/// come back zeroed (depth +inf, mesh id background).
pub fn read_dump(input: &mut dyn Read) -> Result<GBuffer, GBufferError> {
    let mut header = [0u8; DUMP_HEADER_LEN];
    input.read_exact(&mut header)?;
    let get = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    if get(0) != DUMP_MAGIC {
        return Err(GBufferError::Format("bad magic".into()));
    }
    let (width, height, frame_id, planes) = (get(4), get(8), get(12), get(16));
    if width == 0 || height == 0 || width.saturating_mul(height) > 1 << 26 {
        return Err(GBufferError::Format(format!("implausible dimensions {width}x{height}")));
    }
    let n = (width * height) as usize;

    let mut read_f32_plane = |input: &mut dyn Read| -> Result<Vec<f32>, GBufferError> {
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let read_vec3 = |input: &mut dyn Read, read: &mut dyn FnMut(&mut dyn Read) -> Result<Vec<f32>, GBufferError>| -> Result<Vec<Vec3>, GBufferError> {
        let x = read(input)?;
        let y = read(input)?;
        let z = read(input)?;
        Ok((0..n).map(|i| Vec3::new(x[i], y[i], z[i])).collect())
    };

    let world_pos = if planes & 1 != 0 { read_vec3(input, &mut read_f32_plane)? } else { vec![Vec3::ZERO; n] };
    let normal = if planes & 2 != 0 { read_vec3(input, &mut read_f32_plane)? } else { vec![Vec3::ZERO; n] };
    let depth = if planes & 4 != 0 { read_f32_plane(input)? } else { vec![f32::INFINITY; n] };
    let mesh_id = if planes & 8 != 0 {
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes)?;
        bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()
    } else {
        vec![BACKGROUND_MESH; n]
    };
    let motion = if planes & 16 != 0 {
        let x = read_f32_plane(input)?;
        let y = read_f32_plane(input)?;
        (0..n).map(|i| Vec2::new(x[i], y[i])).collect()
    } else {
        vec![Vec2::ZERO; n]
    };
    let albedo = if planes & 32 != 0 { read_vec3(input, &mut read_f32_plane)? } else { vec![Vec3::ZERO; n] };

    Ok(GBuffer {
        width,
        height,
        frame_id,
        pose: CameraPose { position: Vec3::ZERO, basis: Mat3::IDENTITY },
        world_pos,
        normal,
        depth,
        mesh_id,
        motion,
        albedo,
    })
}
