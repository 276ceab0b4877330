//! Modified spatiotemporal variance-guided filtering for the AO signal.
//!
//! Differences from classic SVGF: the signal is the scalar unoccluded
//! fraction rather than luminance, variance is driven purely by geometry
//! (temporal moments of the scalar, spatial estimate weighted by depth and
//! normal similarity), and the edge-stopping weights carry no luminance
//! term at all. Filtering happens on the server before quantization and
//! compression.

use rayon::prelude::*;
use thiserror::Error;

use crate::gbuffer::{CameraPose, GBuffer, MOTION_UNPROJECTED};
use crate::math::Vec3;
use crate::raytrace::{AoBuffer, VisibilityBuffer};

/// Temporal history length saturates here.
pub const HISTORY_CAP: u16 = 64;

const WEIGHT_EPSILON: f32 = 1e-8;
const GRADIENT_FLOOR: f32 = 1e-4;

/// 1D B3-spline kernel; the 5x5 footprint is its outer product.
const B3: [f32; 5] = [1.0 / 16.0, 1.0 / 4.0, 3.0 / 8.0, 1.0 / 4.0, 1.0 / 16.0];

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("buffer dimensions {0}x{1} do not match history {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
}

#[derive(Clone, Copy, Debug)]
pub struct FilterParams {
    /// Temporal blend weight toward the current frame, in (0, 1].
    pub alpha: f32,
    /// History length below which variance falls back to the spatial estimate.
    pub history_min: u16,
    /// Number of a-trous passes; tap dilation doubles each pass.
    pub iterations: u32,
    pub sigma_z: f32,
    pub sigma_n: f32,
    /// Relative depth tolerance for history validation.
    pub tau_z: f32,
    /// Minimum normal agreement (dot product) for history validation.
    pub tau_n: f32,
    /// Also run the filter over soft-shadow bit planes.
    pub filter_shadow_bits: bool,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            alpha: 0.2,
            history_min: 4,
            iterations: 5,
            sigma_z: 1.0,
            sigma_n: 128.0,
            tau_z: 0.1,
            tau_n: 0.9,
            filter_shadow_bits: false,
        }
    }
}

/// Geometry attributes of one sample, as used by history validation.
#[derive(Clone, Copy, Debug)]
pub struct GeometrySample {
    pub depth: f32,
    pub normal: Vec3,
    pub mesh_id: i32,
}

/// A previous-frame sample survives only if it is the same mesh, at a
/// consistent projected depth, with an agreeing normal.
pub fn validate_history(cur: &GeometrySample, prev: &GeometrySample, params: &FilterParams) -> bool {
    cur.mesh_id == prev.mesh_id
        && (cur.depth - prev.depth).abs() / cur.depth.max(prev.depth) <= params.tau_z
        && cur.normal.dot(prev.normal) >= params.tau_n
}

/// Accumulated per-pixel state carried between frames.
#[derive(Clone, Debug)]
pub struct FilterHistory {
    pub width: u32,
    pub height: u32,
    pub mean: Vec<f32>,
    pub m2: Vec<f32>,
    pub len: Vec<u16>,
    pub prev_depth: Vec<f32>,
    pub prev_normal: Vec<Vec3>,
    pub prev_mesh: Vec<i32>,
    pub prev_pose: Option<CameraPose>,
}

impl FilterHistory {
    pub fn new(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        FilterHistory {
            width,
            height,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            len: vec![0; n],
            prev_depth: vec![f32::INFINITY; n],
            prev_normal: vec![Vec3::ZERO; n],
            prev_mesh: vec![-1; n],
            prev_pose: None,
        }
    }
}

/// Temporal accumulation output for one frame.
pub struct TemporalResult {
    pub mean: Vec<f32>,
    pub m2: Vec<f32>,
    pub len: Vec<u16>,
}

/// Exponential-moving-average accumulation with bilinear, geometry
/// validated history reprojection through the motion field. Pixels with no
/// valid history restart at the current sample with history length 1.
pub fn temporal_accumulate(values: &[f32], gbuffer: &GBuffer, history: &FilterHistory, params: &FilterParams) -> TemporalResult {
    let (w, h) = (gbuffer.width as i32, gbuffer.height as i32);
    let alpha = params.alpha;
    let out: Vec<(f32, f32, u16)> = (0..values.len())
        .into_par_iter()
        .map(|i| {
            let x = values[i];
            let fresh = (x, x * x, 1u16);
            if !gbuffer.is_valid(i) || history.prev_pose.is_none() {
                return fresh;
            }
            let motion = gbuffer.motion[i];
            if motion.x >= MOTION_UNPROJECTED {
                return fresh;
            }
            let px = (i as i32 % w) as f32 + motion.x;
            let py = (i as i32 / w) as f32 + motion.y;
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            let cur = GeometrySample { depth: gbuffer.depth[i], normal: gbuffer.normal[i], mesh_id: gbuffer.mesh_id[i] };

            let mut wsum = 0.0f32;
            let mut mean = 0.0f32;
            let mut m2 = 0.0f32;
            let mut len = 0.0f32;
            for (dx, dy, bw) in [
                (0, 0, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                if bw < 1e-6 {
                    continue;
                }
                let tx = x0 as i32 + dx;
                let ty = y0 as i32 + dy;
                if tx < 0 || ty < 0 || tx >= w || ty >= h {
                    continue;
                }
                let t = (ty * w + tx) as usize;
                if history.len[t] == 0 || history.prev_mesh[t] < 0 {
                    continue;
                }
                let prev = GeometrySample {
                    depth: history.prev_depth[t],
                    normal: history.prev_normal[t],
                    mesh_id: history.prev_mesh[t],
                };
                if !validate_history(&cur, &prev, params) {
                    continue;
                }
                wsum += bw;
                mean += bw * history.mean[t];
                m2 += bw * history.m2[t];
                len += bw * f32::from(history.len[t]);
            }
            if wsum <= 0.0 {
                return fresh;
            }
            let prev_mean = mean / wsum;
            let prev_m2 = m2 / wsum;
            let prev_len = (len / wsum).floor() as u16;
            (
                alpha * x + (1.0 - alpha) * prev_mean,
                alpha * x * x + (1.0 - alpha) * prev_m2,
                (prev_len + 1).min(HISTORY_CAP),
            )
        })
        .collect();

    let mut r = TemporalResult {
        mean: Vec::with_capacity(out.len()),
        m2: Vec::with_capacity(out.len()),
        len: Vec::with_capacity(out.len()),
    };
    for (mean, m2, len) in out {
        r.mean.push(mean);
        r.m2.push(m2);
        r.len.push(len);
    }
    r
}

/// Screen-space depth gradient magnitude per pixel: the larger of the
/// forward differences along x and y (backward at borders and next to
/// background), floored at a small constant.
pub fn depth_gradient(gbuffer: &GBuffer) -> Vec<f32> {
    let (w, h) = (gbuffer.width as i32, gbuffer.height as i32);
    (0..gbuffer.pixel_count())
        .into_par_iter()
        .map(|i| {
            if !gbuffer.is_valid(i) {
                return GRADIENT_FLOOR;
            }
            let (x, y) = (i as i32 % w, i as i32 / w);
            let z = gbuffer.depth[i];
            let sample = |xx: i32, yy: i32| -> Option<f32> {
                if xx < 0 || yy < 0 || xx >= w || yy >= h {
                    return None;
                }
                let j = (yy * w + xx) as usize;
                gbuffer.is_valid(j).then(|| gbuffer.depth[j])
            };
            let dx = sample(x + 1, y).or_else(|| sample(x - 1, y)).map_or(0.0, |zz| (zz - z).abs());
            let dy = sample(x, y + 1).or_else(|| sample(x, y - 1)).map_or(0.0, |zz| (zz - z).abs());
            dx.max(dy).max(GRADIENT_FLOOR)
        })
        .collect()
}

#[inline]
fn edge_weights(gbuffer: &GBuffer, grad_p: f32, p: usize, q: usize, dist: f32, params: &FilterParams) -> f32 {
    let wz = (-(gbuffer.depth[p] - gbuffer.depth[q]).abs() / (params.sigma_z * grad_p * dist + WEIGHT_EPSILON)).exp();
    let wn = gbuffer.normal[p].dot(gbuffer.normal[q]).max(0.0).powf(params.sigma_n);
    wz * wn
}

/// Per-pixel variance of the integrated signal: temporal moments where
/// enough history has accumulated, otherwise a geometry-weighted estimate
/// over a 7x7 neighborhood of the integrated values.
pub fn estimate_variance(temporal: &TemporalResult, gbuffer: &GBuffer, grad: &[f32], params: &FilterParams) -> Vec<f32> {
    let (w, h) = (gbuffer.width as i32, gbuffer.height as i32);
    (0..temporal.mean.len())
        .into_par_iter()
        .map(|i| {
            if !gbuffer.is_valid(i) {
                return 0.0;
            }
            if temporal.len[i] >= params.history_min {
                return (temporal.m2[i] - temporal.mean[i] * temporal.mean[i]).max(0.0);
            }
            let (x, y) = (i as i32 % w, i as i32 / w);
            let mut wsum = 0.0f32;
            let mut s1 = 0.0f32;
            let mut s2 = 0.0f32;
            for dy in -3..=3i32 {
                for dx in -3..=3i32 {
                    let (qx, qy) = (x + dx, y + dy);
                    if qx < 0 || qy < 0 || qx >= w || qy >= h {
                        continue;
                    }
                    let q = (qy * w + qx) as usize;
                    if !gbuffer.is_valid(q) {
                        continue;
                    }
                    let dist = dx.abs().max(dy.abs()) as f32;
                    let wt = if q == i { 1.0 } else { edge_weights(gbuffer, grad[i], i, q, dist, params) };
                    let v = temporal.mean[q];
                    wsum += wt;
                    s1 += wt * v;
                    s2 += wt * v * v;
                }
            }
            let mu = s1 / wsum;
            (s2 / wsum - mu * mu).max(0.0)
        })
        .collect()
}

/// One edge-aware a-trous pass: a 5x5 B3-spline kernel with taps dilated
/// by `step`, weighted by depth and normal similarity only. The output is
/// the weight-normalized sum; variance propagates with squared normalized
/// weights.
pub fn atrous_pass(
    values: &[f32],
    variance: &[f32],
    gbuffer: &GBuffer,
    grad: &[f32],
    step: i32,
    params: &FilterParams,
) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (gbuffer.width as i32, gbuffer.height as i32);
    let out: Vec<(f32, f32)> = (0..values.len())
        .into_par_iter()
        .map(|i| {
            if !gbuffer.is_valid(i) {
                return (values[i], variance[i]);
            }
            let (x, y) = (i as i32 % w, i as i32 / w);
            let mut wsum = 0.0f32;
            let mut vsum = 0.0f32;
            let mut w2var = 0.0f32;
            for (ky, &cy) in B3.iter().enumerate() {
                for (kx, &cx) in B3.iter().enumerate() {
                    let dx = (kx as i32 - 2) * step;
                    let dy = (ky as i32 - 2) * step;
                    let (qx, qy) = (x + dx, y + dy);
                    if qx < 0 || qy < 0 || qx >= w || qy >= h {
                        continue;
                    }
                    let q = (qy * w + qx) as usize;
                    if !gbuffer.is_valid(q) {
                        continue;
                    }
                    let kernel = cx * cy;
                    let wt = if q == i {
                        kernel
                    } else {
                        kernel * edge_weights(gbuffer, grad[i], i, q, step as f32, params)
                    };
                    wsum += wt;
                    vsum += wt * values[q];
                    w2var += wt * wt * variance[q];
                }
            }
            (vsum / wsum, w2var / (wsum * wsum))
        })
        .collect();
    let mut vals = Vec::with_capacity(out.len());
    let mut vars = Vec::with_capacity(out.len());
    for (v, var) in out {
        vals.push(v);
        vars.push(var);
    }
    (vals, vars)
}

/// Stateful filter: owns the history for one stream and advances it by
/// exactly one frame per call.
pub struct SvgfFilter {
    pub params: FilterParams,
    history: FilterHistory,
}

impl SvgfFilter {
    pub fn new(width: u32, height: u32, params: FilterParams) -> Self {
        SvgfFilter { params, history: FilterHistory::new(width, height) }
    }

    pub fn history(&self) -> &FilterHistory {
        &self.history
    }

    /// Runs the full pipeline on a scalar field in [0, 1]: temporal
    /// accumulation, variance estimation, then `iterations` a-trous passes
    /// with doubling step. Updates the owned history with the temporal
    /// result and this frame's geometry.
    pub fn filter_scalar(&mut self, values: &[f32], gbuffer: &GBuffer) -> Result<Vec<f32>, DenoiseError> {
        if gbuffer.width != self.history.width || gbuffer.height != self.history.height {
            return Err(DenoiseError::DimensionMismatch(
                gbuffer.width,
                gbuffer.height,
                self.history.width,
                self.history.height,
            ));
        }
        let temporal = temporal_accumulate(values, gbuffer, &self.history, &self.params);
        let grad = depth_gradient(gbuffer);
        let mut variance = estimate_variance(&temporal, gbuffer, &grad, &self.params);
        let mut vals = temporal.mean.clone();
        for pass in 0..self.params.iterations {
            let step = 1i32 << pass.min(20);
            let (v, var) = atrous_pass(&vals, &variance, gbuffer, &grad, step, &self.params);
            vals = v;
            variance = var;
        }

        self.history.mean = temporal.mean;
        self.history.m2 = temporal.m2;
        self.history.len = temporal.len;
        self.history.prev_depth = gbuffer.depth.clone();
        self.history.prev_normal = gbuffer.normal.clone();
        self.history.prev_mesh = gbuffer.mesh_id.clone();
        self.history.prev_pose = Some(gbuffer.pose);
        Ok(vals)
    }

    /// Full AO path: counts -> fractions -> filter -> requantized counts
    /// (round half away from zero, clamped to [0, N]).
    pub fn filter_ao(&mut self, ao: &AoBuffer, gbuffer: &GBuffer) -> Result<AoBuffer, DenoiseError> {
        let n = f32::from(ao.rays_per_pixel);
        let values: Vec<f32> = ao.counts.iter().map(|&c| f32::from(c) / n).collect();
        let filtered = self.filter_scalar(&values, gbuffer)?;
        let counts = filtered.iter().map(|&o| (o * n).round().clamp(0.0, n) as u8).collect();
        Ok(AoBuffer { counts, ..ao.clone() })
    }
}

/// Optional filter over soft-shadow bit planes: each light lane is
/// treated as a 0/1 scalar with its own history, then re-thresholded.
pub struct ShadowFilter {
    lanes: Vec<SvgfFilter>,
}

impl ShadowFilter {
    pub fn new(width: u32, height: u32, light_count: u8, params: FilterParams) -> Self {
        ShadowFilter { lanes: (0..light_count).map(|_| SvgfFilter::new(width, height, params)).collect() }
    }

    pub fn filter_bits(&mut self, vis: &VisibilityBuffer, gbuffer: &GBuffer) -> Result<VisibilityBuffer, DenoiseError> {
        let mut out = vis.clone();
        for (lane, filter) in self.lanes.iter_mut().enumerate() {
            let values: Vec<f32> = vis.bits.iter().map(|&b| f32::from((b >> lane) & 1)).collect();
            let filtered = filter.filter_scalar(&values, gbuffer)?;
            for (byte, &v) in out.bits.iter_mut().zip(&filtered) {
                let bit = 1u8 << lane;
                if v.round() >= 1.0 {
                    *byte |= bit;
                } else {
                    *byte &= !bit;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbuffer::{CameraPose, GBuffer};
    use crate::math::{Mat3, Vec2};
    use crate::sampler::PixelRng;

    /// Flat synthetic G-buffer: constant depth and normal, one mesh,
    /// zero motion (static camera fixture).
    fn flat_gbuffer(w: u32, h: u32) -> GBuffer {
        let n = (w * h) as usize;
        GBuffer {
            width: w,
            height: h,
            frame_id: 0,
            pose: CameraPose { position: Vec3::ZERO, basis: Mat3::IDENTITY },
            world_pos: vec![Vec3::ZERO; n],
            normal: vec![Vec3::Y; n],
            depth: vec![5.0; n],
            mesh_id: vec![0; n],
            motion: vec![Vec2::ZERO; n],
            albedo: vec![Vec3::ONE; n],
        }
    }

    #[test]
    fn validation_criteria() {
        let params = FilterParams::default();
        let a = GeometrySample { depth: 3.0, normal: Vec3::Y, mesh_id: 2 };
        assert!(validate_history(&a, &a, &params));
        let other_mesh = GeometrySample { mesh_id: 3, ..a };
        assert!(!validate_history(&a, &other_mesh, &params));
        let turned = GeometrySample { normal: Vec3::X, ..a };
        assert!(!validate_history(&a, &turned, &params));
        let deeper = GeometrySample { depth: 4.0, ..a };
        assert!(!validate_history(&a, &deeper, &params));
        let near = GeometrySample { depth: 3.1, ..a };
        assert!(validate_history(&a, &near, &params));
    }

    #[test]
    fn first_frame_is_identity_with_unit_history() {
        let g = flat_gbuffer(8, 8);
        let history = FilterHistory::new(8, 8);
        let values: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        let r = temporal_accumulate(&values, &g, &history, &FilterParams::default());
        assert_eq!(r.mean, values);
        assert!(r.len.iter().all(|&l| l == 1));
    }

    #[test]
    fn constant_input_is_a_fixed_point() {
        let g = flat_gbuffer(8, 8);
        let mut filter = SvgfFilter::new(8, 8, FilterParams::default());
        let values = vec![0.7f32; 64];
        for _ in 0..16 {
            let out = filter.filter_scalar(&values, &g).unwrap();
            for &v in &out {
                assert!((v - 0.7).abs() < 1e-6);
            }
        }
        // long constant history drives temporal variance to zero
        for i in 0..64 {
            let var = filter.history().m2[i] - filter.history().mean[i] * filter.history().mean[i];
            assert!(var.abs() < 1e-6);
        }
        assert!(filter.history().len.iter().all(|&l| l == 16));
    }

    #[test]
    fn alpha_one_reproduces_current_frame() {
        let g = flat_gbuffer(8, 8);
        let params = FilterParams { alpha: 1.0, ..FilterParams::default() };
        let history = {
            let mut h = FilterHistory::new(8, 8);
            h.mean = vec![0.1; 64];
            h.m2 = vec![0.01; 64];
            h.len = vec![10; 64];
            h.prev_depth = g.depth.clone();
            h.prev_normal = g.normal.clone();
            h.prev_mesh = g.mesh_id.clone();
            h.prev_pose = Some(g.pose);
            h
        };
        let values: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).fract()).collect();
        let r = temporal_accumulate(&values, &g, &history, &params);
        for (got, want) in r.mean.iter().zip(&values) {
            assert_eq!(got, want);
        }
    }

    #[test]
    fn ema_reduces_noise_threefold_after_64_frames() {
        let g = flat_gbuffer(32, 32);
        let mut filter = SvgfFilter::new(32, 32, FilterParams { iterations: 1, ..FilterParams::default() });
        let true_mean = 0.5f32;
        let half_width = 0.2f32;
        let sigma = half_width / 3f32.sqrt();
        let mut rng = PixelRng::from_key(99);
        for _ in 0..64 {
            let values: Vec<f32> = (0..1024).map(|_| true_mean + (rng.next_f32() * 2.0 - 1.0) * half_width).collect();
            filter.filter_scalar(&values, &g).unwrap();
        }
        let mean_abs_err: f32 = filter.history().mean.iter().map(|&m| (m - true_mean).abs()).sum::<f32>() / 1024.0;
        assert!(mean_abs_err <= sigma / 3.0, "mean |err| {mean_abs_err} vs sigma/3 {}", sigma / 3.0);
        // second moments stay consistent: m2 >= mean^2 (up to float eps)
        for i in 0..1024 {
            assert!(filter.history().m2[i] >= filter.history().mean[i].powi(2) - 1e-5);
        }
    }

    #[test]
    fn spatial_variance_positive_on_checkerboard() {
        let g = flat_gbuffer(16, 16);
        let values: Vec<f32> = (0..256).map(|i| (((i % 16) + (i / 16)) % 2) as f32).collect();
        let r = temporal_accumulate(&values, &g, &FilterHistory::new(16, 16), &FilterParams::default());
        let grad = depth_gradient(&g);
        // fresh history -> h = 1 < h_min -> spatial estimate everywhere
        let var = estimate_variance(&r, &g, &grad, &FilterParams::default());
        assert!(var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn spatial_variance_matches_unweighted_oracle_on_flat_geometry() {
        let g = flat_gbuffer(16, 16);
        let mut rng = PixelRng::from_key(5);
        let values: Vec<f32> = (0..256).map(|_| rng.next_f32()).collect();
        let r = temporal_accumulate(&values, &g, &FilterHistory::new(16, 16), &FilterParams::default());
        let grad = depth_gradient(&g);
        let var = estimate_variance(&r, &g, &grad, &FilterParams::default());
        for y in 0..16i32 {
            for x in 0..16i32 {
                // direct unweighted 7x7 sample variance
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                let mut count = 0.0f64;
                for dy in -3..=3 {
                    for dx in -3..=3 {
                        let (qx, qy) = (x + dx, y + dy);
                        if qx < 0 || qy < 0 || qx >= 16 || qy >= 16 {
                            continue;
                        }
                        let v = f64::from(values[(qy * 16 + qx) as usize]);
                        s1 += v;
                        s2 += v * v;
                        count += 1.0;
                    }
                }
                let mu = s1 / count;
                let expected = (s2 / count - mu * mu).max(0.0);
                let got = f64::from(var[(y * 16 + x) as usize]);
                assert!((got - expected).abs() < 1e-6, "({x},{y}): {got} vs {expected}");
            }
        }
    }

    #[test]
    fn atrous_impulse_matches_b3_convolution_on_flat_geometry() {
        let g = flat_gbuffer(16, 16);
        let mut values = vec![0.0f32; 256];
        values[8 * 16 + 8] = 1.0;
        let variance = vec![0.0f32; 256];
        let grad = depth_gradient(&g);
        let (out, _) = atrous_pass(&values, &variance, &g, &grad, 1, &FilterParams::default());
        for y in 0..16i32 {
            for x in 0..16i32 {
                let (dx, dy) = (x - 8, y - 8);
                let expected = if dx.abs() <= 2 && dy.abs() <= 2 {
                    B3[(dx + 2) as usize] * B3[(dy + 2) as usize]
                } else {
                    0.0
                };
                let got = out[(y * 16 + x) as usize];
                assert!((got - expected).abs() < 1e-6, "({x},{y}): {got} vs {expected}");
            }
        }
    }

    #[test]
    fn atrous_output_is_a_convex_combination() {
        let g = flat_gbuffer(16, 16);
        let mut rng = PixelRng::from_key(7);
        let values: Vec<f32> = (0..256).map(|_| rng.next_f32()).collect();
        let variance = vec![0.01f32; 256];
        let grad = depth_gradient(&g);
        let mut vals = values.clone();
        let mut var = variance;
        for pass in 0..3 {
            let (v, nv) = atrous_pass(&vals, &var, &g, &grad, 1 << pass, &FilterParams::default());
            vals = v;
            var = nv;
        }
        let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for &v in &vals {
            assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
        assert!(var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_noise_ao_passes_through_unchanged() {
        use crate::raytrace::AoBuffer;
        let g = flat_gbuffer(16, 16);
        let ao = AoBuffer {
            width: 16,
            height: 16,
            frame_id: 0,
            pose: g.pose,
            rays_per_pixel: 32,
            radius: 1.0,
            counts: vec![32; 256],
        };
        let mut filter = SvgfFilter::new(16, 16, FilterParams::default());
        for _ in 0..4 {
            let out = filter.filter_ao(&ao, &g).unwrap();
            assert_eq!(out.counts, ao.counts);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = flat_gbuffer(8, 8);
        let mut filter = SvgfFilter::new(16, 16, FilterParams::default());
        let values = vec![0.0; 64];
        assert!(matches!(filter.filter_scalar(&values, &g), Err(DenoiseError::DimensionMismatch(..))));
    }

    #[test]
    fn range_preserved_on_random_frames() {
        let mut rng = PixelRng::from_key(31);
        for frame in 0..50 {
            let mut g = flat_gbuffer(12, 12);
            // perturb geometry so edge weights vary
            for i in 0..g.pixel_count() {
                g.depth[i] = 1.0 + 4.0 * rng.next_f32();
                g.normal[i] = Vec3::new(rng.next_f32() - 0.5, 1.0, rng.next_f32() - 0.5).normalize();
                if rng.next_f32() < 0.1 {
                    g.mesh_id[i] = -1; // scatter background pixels
                }
            }
            let mut filter = SvgfFilter::new(12, 12, FilterParams::default());
            let values: Vec<f32> = (0..144).map(|_| rng.next_f32()).collect();
            let out = filter.filter_scalar(&values, &g).unwrap();
            for &v in &out {
                assert!((0.0..=1.0).contains(&v), "frame {frame}: {v}");
            }
        }
    }

    #[test]
    fn static_noisy_stream_variance_drops() {
        let g = flat_gbuffer(24, 24);
        let mut filter = SvgfFilter::new(24, 24, FilterParams::default());
        let n = 24 * 24;
        let mut rng = PixelRng::from_key(77);
        let mut input_frames: Vec<Vec<f32>> = Vec::new();
        let mut output_frames: Vec<Vec<f32>> = Vec::new();
        for frame in 0..96 {
            let values: Vec<f32> = (0..n).map(|_| 0.5 + (rng.next_f32() - 0.5) * 0.6).collect();
            let out = filter.filter_scalar(&values, &g).unwrap();
            if frame >= 64 {
                input_frames.push(values);
                output_frames.push(out);
            }
        }
        let temporal_std = |frames: &[Vec<f32>]| -> f64 {
            let f = frames.len() as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let mean: f64 = frames.iter().map(|fr| f64::from(fr[i])).sum::<f64>() / f;
                let var: f64 = frames.iter().map(|fr| (f64::from(fr[i]) - mean).powi(2)).sum::<f64>() / f;
                acc += var.sqrt();
            }
            acc / n as f64
        };
        let in_std = temporal_std(&input_frames);
        let out_std = temporal_std(&output_frames);
        assert!(out_std <= 0.25 * in_std, "output std {out_std} vs input {in_std}");
    }

    #[test]
    fn shadow_bit_filter_round_trips_clean_bits() {
        use crate::raytrace::{ShadowMode, VisibilityBuffer};
        let g = flat_gbuffer(8, 8);
        let vis = VisibilityBuffer {
            width: 8,
            height: 8,
            frame_id: 0,
            pose: g.pose,
            light_count: 2,
            mode: ShadowMode::Soft,
            bits: vec![0b11; 64],
        };
        let mut filter = ShadowFilter::new(8, 8, 2, FilterParams::default());
        let out = filter.filter_bits(&vis, &g).unwrap();
        assert_eq!(out.bits, vis.bits);
    }
}
