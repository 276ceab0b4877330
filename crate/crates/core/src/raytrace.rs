//! Server-side ray tracing: per-pixel shadow visibility bitmasks (hard or
//! cone-jittered soft) and raw ambient-occlusion ray counts.

use rayon::prelude::*;
use thiserror::Error;

use crate::gbuffer::{CameraPose, GBuffer};
use crate::math::{orthonormal_frame, Ray, Vec3, SURFACE_EPSILON};
use crate::sampler::{PixelRng, TAG_AO, TAG_SHADOW_BASE};
use crate::scene::{Bvh, Light};

pub use crate::sampler::SamplerState;

/// A visibility bitmask is one byte per pixel, so at most 8 lights.
pub const MAX_LIGHTS: usize = 8;

#[derive(Debug, Error)]
pub enum RaytraceError {
    #[error("{0} lights exceed the {MAX_LIGHTS}-bit visibility mask")]
    TooManyLights(usize),
    #[error("ambient occlusion ray count must be in 1..=255")]
    BadRayCount,
    #[error("hemisphere radius must be positive, got {0}")]
    BadRadius(f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShadowMode {
    Hard,
    Soft,
}

/// Per-pixel light visibility bits (bit i set = light i reached).
#[derive(Clone, Debug)]
pub struct VisibilityBuffer {
    pub width: u32,
    pub height: u32,
    pub frame_id: u32,
    pub pose: CameraPose,
    pub light_count: u8,
    pub mode: ShadowMode,
    pub bits: Vec<u8>,
}

impl VisibilityBuffer {
    pub fn full_mask(light_count: u8) -> u8 {
        if light_count == 0 {
            0
        } else {
            ((1u16 << light_count) - 1) as u8
        }
    }
}

/// Per-pixel count of unoccluded ambient-occlusion rays out of
/// `rays_per_pixel`, within hemisphere radius `radius`.
#[derive(Clone, Debug)]
pub struct AoBuffer {
    pub width: u32,
    pub height: u32,
    pub frame_id: u32,
    pub pose: CameraPose,
    pub rays_per_pixel: u8,
    pub radius: f32,
    pub counts: Vec<u8>,
}

/// Half-angle of the cone subtended by a spherical light at `point`:
/// asin(min(1, radius / distance)). Zero for point lights; clamps to pi/2
/// when the point is inside the emitter.
pub fn cone_half_angle(light: &Light, point: Vec3) -> f32 {
    let dist = (light.center - point).length();
    debug_assert!(dist > 0.0, "shaded point coincides with the light center");
    if light.radius <= 0.0 {
        return 0.0;
    }
    (light.radius / dist).min(1.0).asin()
}

/// Uniform direction over the spherical cap of `half_angle` around `axis`.
pub fn sample_cone(axis: Vec3, half_angle: f32, rng: &mut PixelRng) -> Vec3 {
    let (u, v) = rng.next_2d();
    if half_angle <= 0.0 {
        return axis;
    }
    let cos_max = half_angle.cos();
    let cos_theta = 1.0 - u * (1.0 - cos_max);
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    let phi = std::f32::consts::TAU * v;
    let (t, b) = orthonormal_frame(axis);
    (t * (sin_theta * phi.cos()) + b * (sin_theta * phi.sin()) + axis * cos_theta).normalize()
}

/// Cosine-weighted direction in the hemisphere around `normal`
/// (concentric disk mapping, density cos(theta)/pi).
pub fn sample_cosine_hemisphere(normal: Vec3, rng: &mut PixelRng) -> Vec3 {
    let (u, v) = rng.next_2d();
    let (dx, dy) = concentric_disk(u, v);
    let z = (1.0 - dx * dx - dy * dy).max(0.0).sqrt();
    let (t, b) = orthonormal_frame(normal);
    (t * dx + b * dy + normal * z).normalize()
}

fn concentric_disk(u: f32, v: f32) -> (f32, f32) {
    let ox = 2.0 * u - 1.0;
    let oy = 2.0 * v - 1.0;
    if ox == 0.0 && oy == 0.0 {
        return (0.0, 0.0);
    }
    let (r, theta) = if ox.abs() > oy.abs() {
        (ox, std::f32::consts::FRAC_PI_4 * (oy / ox))
    } else {
        (oy, std::f32::consts::FRAC_PI_2 - std::f32::consts::FRAC_PI_4 * (ox / oy))
    };
    (r * theta.cos(), r * theta.sin())
}

/// Distance along `dir` (unit, from `origin`) to the surface of the
/// sphere (center, radius); smallest positive root, or the projection of
/// the center when the discriminant degenerates at the cone boundary.
fn sphere_surface_distance(origin: Vec3, dir: Vec3, center: Vec3, radius: f32) -> f32 {
    let oc = center - origin;
    let b = dir.dot(oc);
    let disc = (b * b - (oc.length_squared() - radius * radius)).max(0.0);
    let sq = disc.sqrt();
    let near = b - sq;
    if near > 0.0 {
        near
    } else {
        b + sq
    }
}

/// Shadow bit for one light from an epsilon-offset surface point.
fn light_visible(bvh: &Bvh, origin: Vec3, light: &Light, mode: ShadowMode, rng: &mut PixelRng) -> bool {
    let to_center = light.center - origin;
    let dist = to_center.length();
    if dist <= SURFACE_EPSILON {
        return true; // inside the emitter
    }
    let axis = to_center / dist;
    let (dir, t_max) = match mode {
        ShadowMode::Hard => (axis, dist),
        ShadowMode::Soft => {
            let half = cone_half_angle(light, origin);
            let dir = sample_cone(axis, half, rng);
            let t = sphere_surface_distance(origin, dir, light.center, light.radius);
            (dir, if t > 0.0 { t } else { dist })
        }
    };
    !bvh.occluded(&Ray::new(origin, dir, t_max))
}

/// Traces one shadow ray per pixel per light and packs the results into a
/// visibility bitmask buffer. Background pixels are fully lit.
pub fn trace_visibility(
    gbuffer: &GBuffer,
    bvh: &Bvh,
    lights: &[Light],
    mode: ShadowMode,
    sampler: &SamplerState,
) -> Result<VisibilityBuffer, RaytraceError> {
    if lights.len() > MAX_LIGHTS {
        return Err(RaytraceError::TooManyLights(lights.len()));
    }
    let light_count = lights.len() as u8;
    let full = VisibilityBuffer::full_mask(light_count);
    let bits: Vec<u8> = (0..gbuffer.pixel_count())
        .into_par_iter()
        .map(|i| {
            if !gbuffer.is_valid(i) {
                return full;
            }
            let origin = gbuffer.world_pos[i] + gbuffer.normal[i] * SURFACE_EPSILON;
            let mut mask = 0u8;
            for (li, light) in lights.iter().enumerate() {
                let mut rng = sampler.pixel_stream(i as u64, TAG_SHADOW_BASE + li as u32);
                if light_visible(bvh, origin, light, mode, &mut rng) {
                    mask |= 1 << li;
                }
            }
            mask
        })
        .collect();
    Ok(VisibilityBuffer {
        width: gbuffer.width,
        height: gbuffer.height,
        frame_id: sampler.frame_id() as u32,
        pose: gbuffer.pose,
        light_count,
        mode,
        bits,
    })
}

/// Casts `rays_per_pixel` cosine-weighted rays of length `radius` from
/// each valid pixel and counts the unoccluded ones. Background pixels
/// report a fully unoccluded hemisphere.
pub fn trace_ao(
    gbuffer: &GBuffer,
    bvh: &Bvh,
    rays_per_pixel: u8,
    radius: f32,
    sampler: &SamplerState,
) -> Result<AoBuffer, RaytraceError> {
    if rays_per_pixel == 0 {
        return Err(RaytraceError::BadRayCount);
    }
    if !(radius > 0.0) {
        return Err(RaytraceError::BadRadius(radius));
    }
    let counts: Vec<u8> = (0..gbuffer.pixel_count())
        .into_par_iter()
        .map(|i| {
            if !gbuffer.is_valid(i) {
                return rays_per_pixel;
            }
            let normal = gbuffer.normal[i];
            let origin = gbuffer.world_pos[i] + normal * SURFACE_EPSILON;
            let mut rng = sampler.pixel_stream(i as u64, TAG_AO);
            let mut unoccluded = 0u8;
            for _ in 0..rays_per_pixel {
                let dir = sample_cosine_hemisphere(normal, &mut rng);
                if !bvh.occluded(&Ray::new(origin, dir, radius)) {
                    unoccluded += 1;
                }
            }
            unoccluded
        })
        .collect();
    Ok(AoBuffer {
        width: gbuffer.width,
        height: gbuffer.height,
        frame_id: sampler.frame_id() as u32,
        pose: gbuffer.pose,
        rays_per_pixel,
        radius,
        counts,
    })
}

/// Builds a synthetic one-row G-buffer over explicit (position, normal)
/// surface points; handy for tracing isolated points in tests and oracles.
pub fn point_row_gbuffer(points: &[(Vec3, Vec3)]) -> GBuffer {
    use crate::math::{Mat3, Vec2};
    let n = points.len();
    GBuffer {
        width: n as u32,
        height: 1,
        frame_id: 0,
        pose: CameraPose { position: Vec3::ZERO, basis: Mat3::IDENTITY },
        world_pos: points.iter().map(|p| p.0).collect(),
        normal: points.iter().map(|p| p.1).collect(),
        depth: vec![1.0; n],
        mesh_id: vec![0; n],
        motion: vec![Vec2::ZERO; n],
        albedo: vec![Vec3::ONE; n],
    }
}
