//! Quantitative evaluation: SSIM on luma, bandwidth accounting, per-frame
//! delivery records, least-squares fits, and deterministic CSV/SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::FinalImage;
use crate::transport::PassId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image dimensions disagree: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("image {0}x{1} smaller than the {2}-pixel SSIM window")]
    TooSmall(u32, u32, usize),
    #[error("bandwidth window must be positive")]
    ZeroWindow,
    #[error("report I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Standard SSIM constants: 11x11 Gaussian window with sigma 1.5,
/// K1 = 0.01, K2 = 0.03 over an 8-bit dynamic range, computed on
/// Rec. 601 luma.
#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 255.0 }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable filter with zero padding; only windows fully inside the
/// image are consumed by the SSIM mean, so the padding never shows.
fn filter_separable(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let half = kernel.len() / 2;
    let mut tmp = vec![0.0f64; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - half as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - half as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean structural similarity between two images, over all fully interior
/// windows of their luma planes.
pub fn ssim(a: &FinalImage, b: &FinalImage, params: &SsimParams) -> Result<f64, MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let la: Vec<f64> = a.luma_u8().iter().map(|&v| f64::from(v)).collect();
    let lb: Vec<f64> = b.luma_u8().iter().map(|&v| f64::from(v)).collect();
    ssim_planes(&la, &lb, a.width as usize, a.height as usize, params)
}

/// SSIM over raw luma planes (also used by the test oracle route).
pub fn ssim_planes(la: &[f64], lb: &[f64], w: usize, h: usize, params: &SsimParams) -> Result<f64, MetricsError> {
    if w < params.window || h < params.window {
        return Err(MetricsError::TooSmall(w as u32, h as u32, params.window));
    }
    let kernel = gaussian_kernel(params.window, params.sigma);
    let aa: Vec<f64> = la.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = la.iter().zip(lb).map(|(x, y)| x * y).collect();

    let mu_a = filter_separable(la, w, h, &kernel);
    let mu_b = filter_separable(lb, w, h, &kernel);
    let e_aa = filter_separable(&aa, w, h, &kernel);
    let e_bb = filter_separable(&bb, w, h, &kernel);
    let e_ab = filter_separable(&ab, w, h, &kernel);

    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let half = params.window / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in half..h - half {
        for x in half..w - half {
            let i = y * w + x;
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            sum += s;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// One (server frame, pass) delivery record.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FrameRow {
    pub frame_id: u32,
    pub pass: String,
    pub raw_bytes: u32,
    pub compressed_bytes: u32,
    pub packets: u16,
    pub delivered: bool,
    /// Camera send to frame completion, in virtual ms; -1 when the frame
    /// never completed.
    pub end_to_end_ms: f64,
    /// Gap since the previous completed frame of the same pass; -1 for the
    /// first completion and for frames that never completed.
    pub frame_time_ms: f64,
}

/// Everything one run measured, sufficient to regenerate its reports.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<FrameRow>,
    /// Virtual run length in seconds.
    pub duration_s: f64,
    /// Delivered wire bytes per pass (the assembler's ingest ledger).
    pub delivered_wire_bytes: BTreeMap<String, u64>,
    pub completed_frames: BTreeMap<String, u64>,
    /// Frames the client composed (one per tick in sim mode).
    pub displayed_frames: u64,
    /// Mean SSIM against the zero-latency reference, when one was given.
    pub mean_ssim: Option<f64>,
    pub per_frame_ssim: Vec<f64>,
    /// Wall-clock seconds, informational only (excluded from CSV).
    pub wall_seconds: f64,
}

impl RunRecord {
    /// Delivered frames of `pass` per virtual second.
    pub fn delivered_fps(&self, pass: PassId) -> f64 {
        let n = self.completed_frames.get(pass.name()).copied().unwrap_or(0);
        n as f64 / self.duration_s
    }

    pub fn delivered_bytes(&self, pass: PassId) -> u64 {
        self.delivered_wire_bytes.get(pass.name()).copied().unwrap_or(0)
    }

    pub fn total_delivered_bytes(&self) -> u64 {
        self.delivered_wire_bytes.values().sum()
    }

    /// Deterministic per-frame CSV with the documented column order.
    pub fn frames_csv(&self) -> String {
        let mut out = String::from("frame_id,pass,raw_bytes,compressed_bytes,packets,delivered,end_to_end_ms,frame_time_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.3},{:.3}",
                r.frame_id, r.pass, r.raw_bytes, r.compressed_bytes, r.packets, r.delivered, r.end_to_end_ms, r.frame_time_ms
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        let _ = writeln!(out, "duration_s,{:.6}", self.duration_s);
        let _ = writeln!(out, "displayed_frames,{}", self.displayed_frames);
        for (pass, bytes) in &self.delivered_wire_bytes {
            let _ = writeln!(out, "delivered_bytes_{pass},{bytes}");
            let fps = self.completed_frames.get(pass).copied().unwrap_or(0) as f64 / self.duration_s;
            let _ = writeln!(out, "delivered_fps_{pass},{fps:.4}");
            let bps = *bytes as f64 * 8.0 / self.duration_s;
            let _ = writeln!(out, "bandwidth_bps_{pass},{bps:.1}");
        }
        let total_bps = self.total_delivered_bytes() as f64 * 8.0 / self.duration_s;
        let _ = writeln!(out, "bandwidth_bps_total,{total_bps:.1}");
        if let Some(s) = self.mean_ssim {
            let _ = writeln!(out, "mean_ssim,{s:.6}");
        }
        out
    }
}

/// Delivered bits per second over `window_s`, per pass and total.
pub struct BandwidthReport {
    pub per_pass_bps: BTreeMap<String, f64>,
    pub total_bps: f64,
}

pub fn measure_bandwidth(record: &RunRecord, window_s: f64) -> Result<BandwidthReport, MetricsError> {
    if window_s <= 0.0 {
        return Err(MetricsError::ZeroWindow);
    }
    let mut per_pass_bps = BTreeMap::new();
    let mut total = 0.0;
    for (pass, bytes) in &record.delivered_wire_bytes {
        let bps = *bytes as f64 * 8.0 / window_s;
        per_pass_bps.insert(pass.clone(), bps);
        total += bps;
    }
    Ok(BandwidthReport { per_pass_bps, total_bps: total })
}

/// Ordinary least squares y = slope x + intercept, with R^2.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 || syy == 0.0 {
        return (0.0, mean_y, 1.0);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r2 = (sxy * sxy) / (sxx * syy);
    (slope, intercept, r2)
}

/// Writes frames.csv and summary.csv for a run.
pub fn emit_reports(record: &RunRecord, dir: &Path) -> Result<(), MetricsError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("frames.csv"), record.frames_csv())?;
    std::fs::write(dir.join("summary.csv"), record.summary_csv())?;
    Ok(())
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal deterministic SVG line/scatter chart: one polyline plus point
/// markers per series, linear axes with min/max labels, inline legend.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut svg = String::new();
    let _ = write!(svg, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">");
    let _ = write!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = write!(svg, "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\">{title}</text>", w / 2.0);
    // axes
    let _ = write!(svg, "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - mb, w - mr, h - mb);
    let _ = write!(svg, "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>", h - mb);
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">{x_label}</text>",
        (ml + w - mr) / 2.0,
        h - 12.0
    );
    let _ = write!(
        svg,
        "<text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 16 {})\">{y_label}</text>",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    );
    // min/max tick labels
    let _ = write!(svg, "<text x=\"{ml}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\">{x0:.3}</text>", h - mb + 16.0);
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">{x1:.3}</text>",
        w - mr,
        h - mb + 16.0
    );
    let _ = write!(svg, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">{y0:.3}</text>", ml - 6.0, h - mb);
    let _ = write!(svg, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">{y1:.3}</text>", ml - 6.0, mt + 4.0);

    for (si, (name, points)) in series.iter().enumerate() {
        let color = SVG_COLORS[si % SVG_COLORS.len()];
        if points.len() > 1 {
            let mut path = String::new();
            for (i, &(x, y)) in points.iter().enumerate() {
                let _ = write!(path, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, px(x), py(y));
            }
            let _ = write!(svg, "<path d=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>");
        }
        for &(x, y) in points {
            let _ = write!(svg, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>", px(x), py(y));
        }
        let ly = mt + 16.0 * si as f64;
        let _ = write!(svg, "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", w - mr - 150.0, ly);
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" font-family=\"sans-serif\">{name}</text>",
            w - mr - 135.0,
            ly + 9.0
        );
    }
    svg.push_str("</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image_from_luma(luma: &[u8], w: u32, h: u32) -> FinalImage {
        let rgb = luma.iter().flat_map(|&v| [f32::from(v) / 255.0; 3]).collect();
        FinalImage { width: w, height: h, rgb }
    }

    fn stock_pairs() -> Vec<(FinalImage, FinalImage, &'static str)> {
        let (w, h) = (48u32, 32u32);
        let n = (w * h) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gradient: Vec<u8> = (0..n).map(|i| ((i as u32 % w) * 255 / w) as u8).collect();
        let checker: Vec<u8> = (0..n).map(|i| if ((i as u32 % w) / 8 + (i as u32 / w) / 8) % 2 == 0 { 200 } else { 40 }).collect();
        let noise: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
        let circles: Vec<u8> = (0..n)
            .map(|i| {
                let (x, y) = ((i as u32 % w) as f32 - 24.0, (i as u32 / w) as f32 - 16.0);
                (((x * x + y * y).sqrt() * 0.5).sin() * 100.0 + 128.0) as u8
            })
            .collect();
        let noisy_gradient: Vec<u8> = gradient.iter().map(|&v| v.saturating_add(rng.gen_range(0..30))).collect();
        let blur_checker: Vec<u8> = checker.iter().map(|&v| ((u16::from(v) + 120) / 2) as u8).collect();
        vec![
            (image_from_luma(&gradient, w, h), image_from_luma(&noisy_gradient, w, h), "gradient-noise"),
            (image_from_luma(&checker, w, h), image_from_luma(&blur_checker, w, h), "checker-flat"),
            (image_from_luma(&noise, w, h), image_from_luma(&gradient, w, h), "noise-gradient"),
            (image_from_luma(&circles, w, h), image_from_luma(&checker, w, h), "circles-checker"),
            (image_from_luma(&circles, w, h), image_from_luma(&noise, w, h), "circles-noise"),
        ]
    }

    /// Direct per-window SSIM: same definition, independent computational
    /// route (explicit window sums instead of separable filtering).
    fn ssim_direct(la: &[f64], lb: &[f64], w: usize, h: usize, params: &SsimParams) -> f64 {
        let kernel = gaussian_kernel(params.window, params.sigma);
        let half = params.window / 2;
        let c1 = (params.k1 * params.dynamic_range).powi(2);
        let c2 = (params.k2 * params.dynamic_range).powi(2);
        let mut sum = 0.0;
        let mut count = 0;
        for cy in half..h - half {
            for cx in half..w - half {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut eaa, mut ebb, mut eab) = (0.0f64, 0.0, 0.0);
                for ky in 0..params.window {
                    for kx in 0..params.window {
                        let wgt = kernel[ky] * kernel[kx];
                        let i = (cy + ky - half) * w + (cx + kx - half);
                        ma += wgt * la[i];
                        mb += wgt * lb[i];
                        eaa += wgt * la[i] * la[i];
                        ebb += wgt * lb[i] * lb[i];
                        eab += wgt * la[i] * lb[i];
                    }
                }
                let va = eaa - ma * ma;
                let vb = ebb - mb * mb;
                let cov = eab - ma * mb;
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        sum / f64::from(count as u32)
    }

    #[test]
    fn ssim_identity_is_one() {
        let (a, _, _) = stock_pairs().remove(0);
        let s = ssim(&a, &a, &SsimParams::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn ssim_inverted_structured_image_is_low() {
        let pairs = stock_pairs();
        let a = &pairs[3].0; // circles
        let inverted = FinalImage {
            width: a.width,
            height: a.height,
            rgb: a.rgb.iter().map(|&v| 1.0 - v).collect(),
        };
        let s = ssim(a, &inverted, &SsimParams::default()).unwrap();
        assert!(s < 0.2, "{s}");
    }

    #[test]
    fn ssim_is_symmetric() {
        for (a, b, name) in stock_pairs() {
            let ab = ssim(&a, &b, &SsimParams::default()).unwrap();
            let ba = ssim(&b, &a, &SsimParams::default()).unwrap();
            assert!((ab - ba).abs() < 1e-9, "{name}: {ab} vs {ba}");
        }
    }

    #[test]
    fn ssim_matches_direct_reference_on_stock_pairs() {
        for (a, b, name) in stock_pairs() {
            let fast = ssim(&a, &b, &SsimParams::default()).unwrap();
            let la: Vec<f64> = a.luma_u8().iter().map(|&v| f64::from(v)).collect();
            let lb: Vec<f64> = b.luma_u8().iter().map(|&v| f64::from(v)).collect();
            let slow = ssim_direct(&la, &lb, a.width as usize, a.height as usize, &SsimParams::default());
            assert!((fast - slow).abs() < 1e-3, "{name}: {fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_rejects_mismatched_and_tiny_images() {
        let a = image_from_luma(&[0; 48 * 32], 48, 32);
        let b = image_from_luma(&[0; 32 * 48], 32, 48);
        assert!(matches!(ssim(&a, &b, &SsimParams::default()), Err(MetricsError::DimensionMismatch(..))));
        let tiny = image_from_luma(&[0; 64], 8, 8);
        assert!(matches!(ssim(&tiny, &tiny, &SsimParams::default()), Err(MetricsError::TooSmall(..))));
    }

    #[test]
    fn bandwidth_arithmetic() {
        let mut record = RunRecord { duration_s: 1.0, ..Default::default() };
        record.delivered_wire_bytes.insert("ao".into(), 57_600);
        let report = measure_bandwidth(&record, 1.0).unwrap();
        assert_eq!(report.per_pass_bps["ao"], 460_800.0);
        assert_eq!(report.total_bps, 460_800.0);
        assert!(matches!(measure_bandwidth(&record, 0.0), Err(MetricsError::ZeroWindow)));
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (f64::from(i), 3.0 * f64::from(i) - 2.0)).collect();
        let (slope, intercept, r2) = linear_fit(&pts);
        assert!((slope - 3.0).abs() < 1e-12);
        assert!((intercept + 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_is_deterministic_and_header_only_when_empty() {
        let record = RunRecord { duration_s: 5.0, ..Default::default() };
        let csv = record.frames_csv();
        assert_eq!(csv, "frame_id,pass,raw_bytes,compressed_bytes,packets,delivered,end_to_end_ms,frame_time_ms\n");
        let mut full = record.clone();
        full.rows.push(FrameRow {
            frame_id: 1,
            pass: "ao".into(),
            raw_bytes: 100,
            compressed_bytes: 50,
            packets: 1,
            delivered: true,
            end_to_end_ms: 16.0,
            frame_time_ms: -1.0,
        });
        assert_eq!(full.frames_csv(), full.frames_csv());
        assert!(full.frames_csv().contains("1,ao,100,50,1,true,16.000,-1.000"));
    }

    #[test]
    fn svg_chart_contains_series_and_labels() {
        let series = vec![
            ("hybrid".to_string(), vec![(1.0, 10.0), (2.0, 5.0)]),
            ("remote".to_string(), vec![(1.0, 20.0), (2.0, 9.0)]),
        ];
        let svg = svg_line_chart("frame size vs fps", "bytes", "fps", &series);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("hybrid") && svg.contains("remote"));
        assert!(svg.contains("frame size vs fps") && svg.contains("bytes") && svg.contains("fps"));
        assert_eq!(svg, svg_line_chart("frame size vs fps", "bytes", "fps", &series));
    }
}
