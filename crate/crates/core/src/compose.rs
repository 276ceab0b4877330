//! Client-side integration: reprojection-based prediction of stale server
//! buffers and final composition (Lambertian direct lighting gated by the
//! visibility bitmask, attenuated by the AO factor).

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::gbuffer::{CameraPose, GBuffer};
use crate::math::Vec3;
use crate::raytrace::{AoBuffer, VisibilityBuffer};
use crate::sampler::hash64;
use crate::scene::{Camera, Light};

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("buffer dimensions disagree: {0}")]
    DimensionMismatch(String),
    #[error("ao count {count} exceeds ray total {n}")]
    CountOverflow { count: u8, n: u8 },
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

/// Final color frame rendered entirely on the server for the remote
/// rendering baseline (linear 8-bit RGB).
#[derive(Clone, Debug)]
pub struct ColorBuffer {
    pub width: u32,
    pub height: u32,
    pub frame_id: u32,
    pub pose: CameraPose,
    pub rgb: Vec<u8>,
}

/// Composited image: linear float RGB plus quantized views for metrics
/// and export.
#[derive(Clone, Debug)]
pub struct FinalImage {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<f32>,
}

impl FinalImage {
    /// Clamped linear 8-bit RGB (the metric-facing variant; no gamma).
    pub fn to_u8_linear(&self) -> Vec<u8> {
        self.rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Rec. 601 luma of the clamped 8-bit image.
    pub fn luma_u8(&self) -> Vec<u8> {
        let rgb = self.to_u8_linear();
        rgb.chunks_exact(3)
            .map(|p| {
                let y = 0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2]);
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }

    /// Order-sensitive content hash of the quantized image.
    pub fn content_hash(&self) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for b in self.to_u8_linear() {
            acc = hash64(acc ^ u64::from(b));
        }
        acc
    }

    /// PNG export with gamma 2.2 applied for display.
    pub fn save_png(&self, path: &Path) -> Result<(), ComposeError> {
        let bytes: Vec<u8> = self
            .rgb
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0).powf(1.0 / 2.2) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width, self.height, bytes)
            .expect("dimensions match buffer length");
        img.save(path)?;
        Ok(())
    }
}

/// Knobs of the Lambertian composition.
#[derive(Clone, Copy, Debug)]
pub struct ShadingParams {
    /// Constant ambient term, attenuated by AO alongside direct light.
    pub ambient: f32,
    pub clear_color: Vec3,
}

impl Default for ShadingParams {
    fn default() -> Self {
        ShadingParams { ambient: 0.15, clear_color: Vec3::new(0.02, 0.02, 0.025) }
    }
}

/// Occlusion factor from a quantized ray count: `count / n`.
pub fn ao_factor(count: u8, n: u8) -> Result<f32, ComposeError> {
    if count > n {
        return Err(ComposeError::CountOverflow { count, n });
    }
    Ok(f32::from(count) / f32::from(n))
}

/// Composition over per-pixel fractional visibility (stride `lights.len()`
/// per pixel) and a fractional AO plane. Both the bitmask path and the
/// high-sample reference renderer funnel through here, so they share one
/// arithmetic path.
pub fn compose_from_fractions(
    gbuffer: &GBuffer,
    vis: &[f32],
    ao: &[f32],
    lights: &[Light],
    shading: &ShadingParams,
) -> Result<FinalImage, ComposeError> {
    let n = gbuffer.pixel_count();
    if ao.len() != n || vis.len() != n * lights.len().max(1) {
        return Err(ComposeError::DimensionMismatch(format!(
            "gbuffer {} pixels, vis {}, ao {}",
            n,
            vis.len(),
            ao.len()
        )));
    }
    let stride = lights.len();
    let rgb: Vec<f32> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let color = if gbuffer.is_valid(i) {
                let p = gbuffer.world_pos[i];
                let normal = gbuffer.normal[i];
                let mut radiance = Vec3::splat(shading.ambient);
                for (li, light) in lights.iter().enumerate() {
                    let v = vis[i * stride + li];
                    if v <= 0.0 {
                        continue;
                    }
                    let to_light = light.center - p;
                    let dist_sq = to_light.length_squared().max(1e-6);
                    let ndotl = normal.dot(to_light / dist_sq.sqrt()).max(0.0);
                    radiance += light.intensity * (v * ndotl / dist_sq);
                }
                gbuffer.albedo[i] * radiance * ao[i]
            } else {
                shading.clear_color
            };
            [color.x, color.y, color.z]
        })
        .collect();
    Ok(FinalImage { width: gbuffer.width, height: gbuffer.height, rgb })
}

/// Final composition from quantized server buffers: visibility bits gate
/// each light, the AO count scales everything including ambient.
pub fn compose_final(
    gbuffer: &GBuffer,
    vis: &VisibilityBuffer,
    ao: &AoBuffer,
    lights: &[Light],
    shading: &ShadingParams,
) -> Result<FinalImage, ComposeError> {
    let n = gbuffer.pixel_count();
    if vis.width != gbuffer.width || vis.height != gbuffer.height || ao.width != gbuffer.width || ao.height != gbuffer.height {
        return Err(ComposeError::DimensionMismatch(format!(
            "gbuffer {}x{}, vis {}x{}, ao {}x{}",
            gbuffer.width, gbuffer.height, vis.width, vis.height, ao.width, ao.height
        )));
    }
    let stride = lights.len();
    let mut vis_frac = vec![0.0f32; n * stride.max(1)];
    for i in 0..n {
        for li in 0..stride {
            vis_frac[i * stride + li] = f32::from((vis.bits[i] >> li) & 1);
        }
    }
    let mut ao_frac = vec![1.0f32; n];
    for i in 0..n {
        ao_frac[i] = ao_factor(ao.counts[i], ao.rays_per_pixel)?;
    }
    compose_from_fractions(gbuffer, &vis_frac, &ao_frac, lights, shading)
}

/// Renders the remote-baseline color plane (what the server ships when the
/// client does no rendering at all).
pub fn compose_color_buffer(
    gbuffer: &GBuffer,
    vis: &VisibilityBuffer,
    ao: &AoBuffer,
    lights: &[Light],
    shading: &ShadingParams,
    frame_id: u32,
) -> Result<ColorBuffer, ComposeError> {
    let img = compose_final(gbuffer, vis, ao, lights, shading)?;
    Ok(ColorBuffer {
        width: img.width,
        height: img.height,
        frame_id,
        pose: gbuffer.pose,
        rgb: img.to_u8_linear(),
    })
}

/// Reprojection result: the predicted buffer plus the per-pixel hole mask
/// (pixels with no valid stale source, filled with the fully-lit /
/// fully-unoccluded fallback).
pub struct PredictionResult<T> {
    pub buffer: T,
    pub holes: Vec<bool>,
    pub hole_count: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PredictionParams {
    /// Relative depth tolerance when a retained depth plane is available.
    pub tau_z: f32,
}

impl Default for PredictionParams {
    fn default() -> Self {
        PredictionParams { tau_z: 0.1 }
    }
}

/// Core reprojection: for each valid current pixel, project its world
/// position into the stale buffer's pose and copy the stale value when the
/// tap lands in bounds and (if a retained depth plane for that frame
/// exists) the projected depth validates against it.
fn reproject_values(
    stale_pose: &CameraPose,
    gbuffer_now: &GBuffer,
    camera: &Camera,
    stale_depth: Option<&[f32]>,
    params: &PredictionParams,
    fetch: impl Fn(usize) -> u8 + Sync,
    fallback: u8,
) -> (Vec<u8>, Vec<bool>) {
    let (w, h) = (gbuffer_now.width as i32, gbuffer_now.height as i32);
    let pairs: Vec<(u8, bool)> = (0..gbuffer_now.pixel_count())
        .into_par_iter()
        .map(|i| {
            if !gbuffer_now.is_valid(i) {
                return (fallback, false);
            }
            let projected = stale_pose.project(camera, gbuffer_now.world_pos[i]);
            let (px, py, depth) = match projected {
                Some(p) => p,
                None => return (fallback, true),
            };
            let (tx, ty) = (px.round() as i32, py.round() as i32);
            if tx < 0 || ty < 0 || tx >= w || ty >= h {
                return (fallback, true);
            }
            let tap = (ty * w + tx) as usize;
            if let Some(depths) = stale_depth {
                let z = depths[tap];
                if !z.is_finite() || (depth - z).abs() / depth.max(z) > params.tau_z {
                    return (fallback, true);
                }
            }
            (fetch(tap), false)
        })
        .collect();
    let mut values = Vec::with_capacity(pairs.len());
    let mut holes = Vec::with_capacity(pairs.len());
    for (v, hole) in pairs {
        values.push(v);
        holes.push(hole);
    }
    (values, holes)
}

pub fn reproject_visibility(
    stale: &VisibilityBuffer,
    gbuffer_now: &GBuffer,
    camera: &Camera,
    stale_depth: Option<&[f32]>,
    params: &PredictionParams,
) -> PredictionResult<VisibilityBuffer> {
    let fallback = VisibilityBuffer::full_mask(stale.light_count);
    let (bits, holes) =
        reproject_values(&stale.pose, gbuffer_now, camera, stale_depth, params, |tap| stale.bits[tap], fallback);
    let hole_count = holes.iter().filter(|&&h| h).count();
    let buffer = VisibilityBuffer { bits, pose: gbuffer_now.pose, ..stale.clone() };
    PredictionResult { buffer, holes, hole_count }
}

pub fn reproject_ao(
    stale: &AoBuffer,
    gbuffer_now: &GBuffer,
    camera: &Camera,
    stale_depth: Option<&[f32]>,
    params: &PredictionParams,
) -> PredictionResult<AoBuffer> {
    let fallback = stale.rays_per_pixel;
    let (counts, holes) =
        reproject_values(&stale.pose, gbuffer_now, camera, stale_depth, params, |tap| stale.counts[tap], fallback);
    let hole_count = holes.iter().filter(|&&h| h).count();
    let buffer = AoBuffer { counts, pose: gbuffer_now.pose, ..stale.clone() };
    PredictionResult { buffer, holes, hole_count }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbuffer::{compute_motion, rasterize, CameraPose};
    use crate::raytrace::{trace_ao, trace_visibility, ShadowMode};
    use crate::sampler::SamplerState;
    use crate::scene::{generate_scene, Bvh, SceneParams};
    use proptest::prelude::*;

    fn setup(width: u32, height: u32) -> (Bvh, Camera, crate::scene::Scene) {
        let scene = generate_scene("box-room", &SceneParams::new()).unwrap();
        let bvh = Bvh::build(&scene.triangles).unwrap();
        let mut camera = scene.camera;
        camera.width = width;
        camera.height = height;
        (bvh, camera, scene)
    }

    #[test]
    fn ao_factor_arithmetic() {
        assert_eq!(ao_factor(0, 64).unwrap(), 0.0);
        assert_eq!(ao_factor(64, 64).unwrap(), 1.0);
        assert_eq!(ao_factor(32, 64).unwrap(), 0.5);
        assert!(matches!(ao_factor(65, 64), Err(ComposeError::CountOverflow { .. })));
    }

    #[test]
    fn lambertian_matches_analytic_shading() {
        let (bvh, camera, scene) = setup(48, 27);
        let pose = CameraPose::of_camera(&camera);
        let g = rasterize(&bvh, &camera, &pose, 0);
        let n = g.pixel_count();
        let vis = VisibilityBuffer {
            width: camera.width,
            height: camera.height,
            frame_id: 0,
            pose,
            light_count: 1,
            mode: ShadowMode::Hard,
            bits: vec![1; n],
        };
        let ao = AoBuffer {
            width: camera.width,
            height: camera.height,
            frame_id: 0,
            pose,
            rays_per_pixel: 32,
            radius: 1.0,
            counts: vec![32; n],
        };
        let shading = ShadingParams { ambient: 0.0, ..Default::default() };
        let img = compose_final(&g, &vis, &ao, &scene.lights, &shading).unwrap();
        for i in 0..n {
            if !g.is_valid(i) {
                continue;
            }
            let light = scene.lights[0];
            let to_light = light.center - g.world_pos[i];
            let d2 = to_light.length_squared();
            let expected = g.albedo[i] * light.intensity * (g.normal[i].dot(to_light.normalize()).max(0.0) / d2);
            let got = Vec3::new(img.rgb[i * 3], img.rgb[i * 3 + 1], img.rgb[i * 3 + 2]);
            assert!((got - expected).length() < 1e-4, "pixel {i}: {got:?} vs {expected:?}");
        }
    }

    #[test]
    fn zero_ao_blacks_out_foreground() {
        let (bvh, camera, scene) = setup(32, 18);
        let pose = CameraPose::of_camera(&camera);
        let g = rasterize(&bvh, &camera, &pose, 0);
        let n = g.pixel_count();
        let vis = VisibilityBuffer {
            width: camera.width,
            height: camera.height,
            frame_id: 0,
            pose,
            light_count: 1,
            mode: ShadowMode::Hard,
            bits: vec![1; n],
        };
        let ao = AoBuffer {
            width: camera.width,
            height: camera.height,
            frame_id: 0,
            pose,
            rays_per_pixel: 32,
            radius: 1.0,
            counts: vec![0; n],
        };
        let img = compose_final(&g, &vis, &ao, &scene.lights, &ShadingParams::default()).unwrap();
        for i in 0..n {
            if g.is_valid(i) {
                assert_eq!(&img.rgb[i * 3..i * 3 + 3], &[0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (bvh, camera, scene) = setup(32, 18);
        let pose = CameraPose::of_camera(&camera);
        let g = rasterize(&bvh, &camera, &pose, 0);
        let vis = VisibilityBuffer {
            width: 16,
            height: 9,
            frame_id: 0,
            pose,
            light_count: 1,
            mode: ShadowMode::Hard,
            bits: vec![1; 144],
        };
        let ao = AoBuffer {
            width: 16,
            height: 9,
            frame_id: 0,
            pose,
            rays_per_pixel: 32,
            radius: 1.0,
            counts: vec![32; 144],
        };
        assert!(compose_final(&g, &vis, &ao, &scene.lights, &ShadingParams::default()).is_err());
    }

    #[test]
    fn identity_prediction_is_exact_with_zero_holes() {
        let (bvh, camera, scene) = setup(64, 36);
        let pose = CameraPose::of_camera(&camera);
        let mut g = rasterize(&bvh, &camera, &pose, 3);
        compute_motion(&mut g, &camera, &pose);
        let sampler = SamplerState::for_frame(2, 3);
        let vis = trace_visibility(&g, &bvh, &scene.lights, ShadowMode::Hard, &sampler).unwrap();
        let ao = trace_ao(&g, &bvh, 16, 1.0, &sampler).unwrap();

        let pv = reproject_visibility(&vis, &g, &camera, Some(&g.depth), &PredictionParams::default());
        assert_eq!(pv.hole_count, 0);
        assert_eq!(pv.buffer.bits, vis.bits);
        let pa = reproject_ao(&ao, &g, &camera, Some(&g.depth), &PredictionParams::default());
        assert_eq!(pa.hole_count, 0);
        assert_eq!(pa.buffer.counts, ao.counts);
    }

    #[test]
    fn full_frustum_miss_falls_back_everywhere() {
        let (bvh, camera, scene) = setup(48, 27);
        let pose = CameraPose::of_camera(&camera);
        let g = rasterize(&bvh, &camera, &pose, 0);
        // stale buffer rendered while looking the opposite way
        let away = CameraPose { position: pose.position, basis: crate::math::look_basis(-pose.basis.z_axis, Vec3::Y) };
        let sampler = SamplerState::for_frame(2, 0);
        let g_away = rasterize(&bvh, &camera, &away, 0);
        let vis = trace_visibility(&g_away, &bvh, &scene.lights, ShadowMode::Hard, &sampler).unwrap();
        let p = reproject_visibility(&vis, &g, &camera, None, &PredictionParams::default());
        let valid = (0..g.pixel_count()).filter(|&i| g.is_valid(i)).count();
        assert_eq!(p.hole_count, valid);
        let full = VisibilityBuffer::full_mask(vis.light_count);
        assert!(p.buffer.bits.iter().all(|&b| b == full));
    }

    proptest! {
        /// Flipping any visibility bit on, or raising any AO count, never
        /// darkens the composed pixel.
        #[test]
        fn composition_is_monotone(bits in 0u8..2, count in 0u8..32, bump in 1u8..8) {
            let (bvh, camera, scene) = setup(8, 8);
            let pose = CameraPose::of_camera(&camera);
            let g = rasterize(&bvh, &camera, &pose, 0);
            let n = g.pixel_count();
            let mk_vis = |b: u8| VisibilityBuffer {
                width: 8, height: 8, frame_id: 0, pose,
                light_count: 1, mode: ShadowMode::Hard, bits: vec![b; n],
            };
            let mk_ao = |c: u8| AoBuffer {
                width: 8, height: 8, frame_id: 0, pose,
                rays_per_pixel: 32, radius: 1.0, counts: vec![c; n],
            };
            let shading = ShadingParams::default();
            let base = compose_final(&g, &mk_vis(bits), &mk_ao(count), &scene.lights, &shading).unwrap();
            let lit = compose_final(&g, &mk_vis(1), &mk_ao(count), &scene.lights, &shading).unwrap();
            let brighter = compose_final(&g, &mk_vis(bits), &mk_ao((count + bump).min(32)), &scene.lights, &shading).unwrap();
            for i in 0..base.rgb.len() {
                prop_assert!(lit.rgb[i] >= base.rgb[i] - 1e-6);
                prop_assert!(brighter.rgb[i] >= base.rgb[i] - 1e-6);
            }
        }
    }

    #[test]
    fn png_export_writes_file() {
        let img = FinalImage { width: 4, height: 2, rgb: vec![0.5; 24] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.png");
        img.save_png(&path).unwrap();
        assert!(path.exists());
        let hash_a = img.content_hash();
        let hash_b = img.content_hash();
        assert_eq!(hash_a, hash_b);
    }
}
