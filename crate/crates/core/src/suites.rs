//! Experiment suites: bandwidth comparison against the remote-rendering
//! baseline, latency tolerance with and without prediction, frame-size
//! versus delivered fps under a capped link, and the AO parameter sweeps.
//! Each suite emits CSV and SVG artifacts and evaluates its thresholds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::denoise::SvgfFilter;
use crate::gbuffer::{compute_motion, rasterize};
use crate::metrics::{linear_fit, svg_line_chart};
use crate::raytrace::{trace_ao, SamplerState};
use crate::scene::Bvh;
use crate::sim::{run_sim, SimError, SimOptions};
use crate::trajectory::Trajectory;
use crate::transport::PassId;

#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<SuiteCheck>,
    pub artifacts: Vec<PathBuf>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn print(&self) {
        for c in &self.checks {
            println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
}

fn check(checks: &mut Vec<SuiteCheck>, name: &str, passed: bool, detail: String) {
    checks.push(SuiteCheck { name: name.to_string(), passed, detail });
}

fn write_artifact(dir: &Path, name: &str, content: &str, artifacts: &mut Vec<PathBuf>) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    artifacts.push(path);
    Ok(())
}

pub fn run_suite(name: &str, config: &Config, out_dir: &Path) -> Result<SuiteReport, SimError> {
    match name {
        "bandwidth" => bandwidth_suite(config, out_dir),
        "latency-sweep" => latency_sweep_suite(config, out_dir),
        "size-vs-fps" => size_vs_fps_suite(config, out_dir),
        "ao-params" => ao_params_suite(config, out_dir),
        other => Err(SimError::Config(crate::config::ConfigError::Invalid {
            path: "suite".into(),
            msg: format!("unknown suite `{other}` (expected bandwidth|latency-sweep|size-vs-fps|ao-params)"),
        })),
    }
}

/// Hybrid (visibility + AO passes) versus remote (full color plane) over
/// the same trajectory and transport.
pub fn bandwidth_suite(config: &Config, out_dir: &Path) -> Result<SuiteReport, SimError> {
    let mut hybrid_cfg = config.clone();
    hybrid_cfg.passes.visibility = true;
    hybrid_cfg.passes.ao = true;
    hybrid_cfg.passes.remote_color = false;
    let mut remote_cfg = hybrid_cfg.clone();
    remote_cfg.passes.remote_color = true;

    let hybrid = run_sim(&hybrid_cfg, &SimOptions::default())?;
    let remote = run_sim(&remote_cfg, &SimOptions::default())?;

    let hybrid_bytes = hybrid.record.delivered_bytes(PassId::Visibility) + hybrid.record.delivered_bytes(PassId::Ao);
    let remote_bytes = remote.record.delivered_bytes(PassId::Color);
    let ratio = hybrid_bytes as f64 / remote_bytes as f64;
    let duration = hybrid.record.duration_s;

    let mut csv = String::from("config,pass,delivered_bytes,bandwidth_bps\n");
    for (name, record, passes) in [
        ("hybrid", &hybrid.record, vec![PassId::Visibility, PassId::Ao]),
        ("remote", &remote.record, vec![PassId::Color]),
    ] {
        for pass in passes {
            let bytes = record.delivered_bytes(pass);
            let _ = writeln!(csv, "{name},{},{bytes},{:.1}", pass.name(), bytes as f64 * 8.0 / duration);
        }
    }
    let _ = writeln!(csv, "ratio,hybrid_over_remote,{hybrid_bytes},{ratio:.4}");

    let raw_ao = hybrid.record.delivered_wire_bytes.get("ao_unfiltered_equivalent").copied().unwrap_or(0);
    let filtered_ao = hybrid.record.delivered_wire_bytes.get("ao_filtered_compressed").copied().unwrap_or(0);
    let _ = writeln!(csv, "ao_compressed,filtered,{filtered_ao},");
    let _ = writeln!(csv, "ao_compressed,unfiltered,{raw_ao},");

    let mut artifacts = Vec::new();
    write_artifact(out_dir, "bandwidth.csv", &csv, &mut artifacts)?;
    let series = vec![
        ("hybrid bps".to_string(), vec![(0.0, hybrid_bytes as f64 * 8.0 / duration)]),
        ("remote bps".to_string(), vec![(0.0, remote_bytes as f64 * 8.0 / duration)]),
    ];
    write_artifact(
        out_dir,
        "bandwidth.svg",
        &svg_line_chart("delivered bandwidth", "configuration", "bits per second", &series),
        &mut artifacts,
    )?;
    crate::metrics::emit_reports(&hybrid.record, &out_dir.join("hybrid"))?;
    crate::metrics::emit_reports(&remote.record, &out_dir.join("remote"))?;

    let mut checks = Vec::new();
    check(
        &mut checks,
        "bandwidth-ratio",
        (0.15..=0.40).contains(&ratio),
        format!("hybrid/remote = {ratio:.4} (hybrid {hybrid_bytes} B, remote {remote_bytes} B), want [0.15, 0.40]"),
    );
    check(
        &mut checks,
        "filtered-ao-compresses-no-worse",
        filtered_ao <= raw_ao && raw_ao > 0,
        format!("filtered {filtered_ao} B vs unfiltered {raw_ao} B over the trajectory"),
    );
    Ok(SuiteReport { suite: "bandwidth".into(), checks, artifacts })
}

/// Delays {0, 50, 100, 200} ms on the camera path, with and without
/// prediction, each scored by mean SSIM against the zero-latency run;
/// plus a replayed 12 ms-mean latency trace.
pub fn latency_sweep_suite(config: &Config, out_dir: &Path) -> Result<SuiteReport, SimError> {
    let delays = [0.0f64, 50.0, 100.0, 200.0];

    let mut ref_cfg = config.clone();
    ref_cfg.uplink.delay_ms = 0.0;
    ref_cfg.client.prediction = true;
    let reference = run_sim(&ref_cfg, &SimOptions { keep_luma: true, ..Default::default() })?;
    let ref_luma = reference.luma_frames.expect("reference keeps luma");

    let mut results: Vec<(f64, bool, f64)> = Vec::new();
    for &delay in &delays {
        for prediction in [true, false] {
            let mut cfg = config.clone();
            cfg.uplink.delay_ms = delay;
            cfg.client.prediction = prediction;
            let out = run_sim(&cfg, &SimOptions { reference_luma: Some(ref_luma.clone()), ..Default::default() })?;
            results.push((delay, prediction, out.record.mean_ssim.unwrap_or(0.0)));
        }
    }

    // replayed trace with a 12 ms mean
    let mut trace_cfg = config.clone();
    trace_cfg.uplink.synth_trace_mean_ms = 12.0;
    trace_cfg.client.prediction = true;
    let trace_out = run_sim(&trace_cfg, &SimOptions { reference_luma: Some(ref_luma.clone()), ..Default::default() })?;
    let trace_ssim = trace_out.record.mean_ssim.unwrap_or(0.0);

    let mut csv = String::from("delay_ms,prediction,mean_ssim\n");
    for (delay, pred, ssim) in &results {
        let _ = writeln!(csv, "{delay},{pred},{ssim:.6}");
    }
    let _ = writeln!(csv, "trace12,true,{trace_ssim:.6}");

    let series = vec![
        (
            "with prediction".to_string(),
            results.iter().filter(|r| r.1).map(|r| (r.0, r.2)).collect::<Vec<_>>(),
        ),
        (
            "without prediction".to_string(),
            results.iter().filter(|r| !r.1).map(|r| (r.0, r.2)).collect::<Vec<_>>(),
        ),
    ];
    let mut artifacts = Vec::new();
    write_artifact(out_dir, "latency_sweep.csv", &csv, &mut artifacts)?;
    write_artifact(
        out_dir,
        "latency_sweep.svg",
        &svg_line_chart("latency tolerance", "camera delay (ms)", "mean SSIM vs zero latency", &series),
        &mut artifacts,
    )?;

    let ssim_of = |delay: f64, pred: bool| {
        results
            .iter()
            .find(|r| r.0 == delay && r.1 == pred)
            .map(|r| r.2)
            .unwrap_or(0.0)
    };
    let mut checks = Vec::new();
    for &delay in &delays[1..] {
        let with = ssim_of(delay, true);
        let without = ssim_of(delay, false);
        check(
            &mut checks,
            &format!("prediction-helps-{delay:.0}ms"),
            with > without + 0.01,
            format!("SSIM with {with:.4} vs without {without:.4} (need +0.01)"),
        );
    }
    let at200 = ssim_of(200.0, true);
    check(&mut checks, "ssim-200ms-floor", at200 >= 0.80, format!("SSIM at 200 ms with prediction = {at200:.4}, want >= 0.80"));
    check(&mut checks, "ssim-trace12-floor", trace_ssim >= 0.87, format!("SSIM on 12 ms trace = {trace_ssim:.4}, want >= 0.87"));
    check(
        &mut checks,
        "trace12-beats-200ms",
        trace_ssim > at200,
        format!("trace {trace_ssim:.4} vs 200 ms {at200:.4}"),
    );
    Ok(SuiteReport { suite: "latency-sweep".into(), checks, artifacts })
}

/// Pads each AO frame to a sweep of wire sizes under a capped link with a
/// send-gated server, and fits delivered fps against size.
pub fn size_vs_fps_suite(config: &Config, out_dir: &Path) -> Result<SuiteReport, SimError> {
    let sizes: [u32; 6] = [16_000, 64_000, 80_000, 96_000, 112_000, 128_000];
    let cap_bps = 8_000_000.0;

    let mut rows: Vec<(f64, f64)> = Vec::new();
    for &size in &sizes {
        let mut cfg = config.clone();
        cfg.passes.visibility = false;
        cfg.passes.ao = true;
        cfg.passes.remote_color = false;
        cfg.transport.pad_frames_to = size;
        cfg.sim.send_gated = true;
        cfg.downlink.bandwidth_bps = cap_bps;
        let out = run_sim(&cfg, &SimOptions::default())?;
        rows.push((f64::from(size), out.record.delivered_fps(PassId::Ao)));
    }

    let mut csv = String::from("frame_bytes,delivered_fps\n");
    for (size, fps) in &rows {
        let _ = writeln!(csv, "{size},{fps:.4}");
    }
    let limited: Vec<(f64, f64)> = rows.iter().copied().filter(|r| r.1 < config.sim.tick_rate * 0.95).collect();
    let (slope, intercept, r2) = linear_fit(&limited);
    let _ = writeln!(csv, "fit_slope,{slope:.8}");
    let _ = writeln!(csv, "fit_intercept,{intercept:.4}");
    let _ = writeln!(csv, "fit_r2,{r2:.4}");

    let mut artifacts = Vec::new();
    write_artifact(out_dir, "size_vs_fps.csv", &csv, &mut artifacts)?;
    write_artifact(
        out_dir,
        "size_vs_fps.svg",
        &svg_line_chart("frame size vs delivered fps", "frame size (bytes)", "fps", &[("ao pass".to_string(), rows.clone())]),
        &mut artifacts,
    )?;

    let mut checks = Vec::new();
    let monotone = rows.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-9);
    check(
        &mut checks,
        "fps-monotone-nonincreasing",
        monotone,
        format!("fps by size: {:?}", rows.iter().map(|r| (r.0 as u64, (r.1 * 100.0).round() / 100.0)).collect::<Vec<_>>()),
    );
    check(
        &mut checks,
        "link-limited-linear-fit",
        limited.len() >= 3 && r2 >= 0.9 && slope < 0.0,
        format!("R^2 = {r2:.4} over {} link-limited sizes (slope {slope:.3e})", limited.len()),
    );
    Ok(SuiteReport { suite: "size-vs-fps".into(), checks, artifacts })
}

/// Hemisphere-radius and ray-count sweeps on a static frame: occlusion
/// strength must grow with radius (shared ray directions), and 32 vs 64
/// rays must agree after filtering.
pub fn ao_params_suite(config: &Config, out_dir: &Path) -> Result<SuiteReport, SimError> {
    let scene = config.build_scene()?;
    let camera = scene.camera;
    let trajectory = Trajectory::new(config.keyframes());
    let pose = trajectory.pose_at(0);
    let bvh = Bvh::build(&scene.triangles_at(0))?;
    let mut gbuffer = rasterize(&bvh, &camera, &pose, 0);
    compute_motion(&mut gbuffer, &camera, &pose);
    let valid: Vec<usize> = (0..gbuffer.pixel_count()).filter(|&i| gbuffer.is_valid(i)).collect();

    // radius sweep with shared directions: one frame, same sampler
    let radii = [0.1f32, 1.0, 2.0, 5.0];
    let sampler = SamplerState::for_frame(config.render.seed, 0);
    let mut occlusion_by_radius: Vec<(f64, f64)> = Vec::new();
    for &r in &radii {
        let ao = trace_ao(&gbuffer, &bvh, config.ao.rays, r, &sampler)?;
        let mean_occlusion: f64 = valid
            .iter()
            .map(|&i| 1.0 - f64::from(ao.counts[i]) / f64::from(config.ao.rays))
            .sum::<f64>()
            / valid.len() as f64;
        occlusion_by_radius.push((f64::from(r), mean_occlusion));
    }

    // ray-count sweep: filtered means after a burst of static frames
    let ray_counts = [8u8, 16, 32, 64];
    let frames = 16u32;
    let mut filtered_by_n: Vec<(u8, Vec<f32>)> = Vec::new();
    for &n in &ray_counts {
        let mut filter = SvgfFilter::new(camera.width, camera.height, config.filter.to_params());
        let mut last = Vec::new();
        for frame in 0..frames {
            let sampler = SamplerState::for_frame(config.render.seed, u64::from(frame));
            let ao = trace_ao(&gbuffer, &bvh, n, config.ao.radius, &sampler)?;
            let values: Vec<f32> = ao.counts.iter().map(|&c| f32::from(c) / f32::from(n)).collect();
            last = filter.filter_scalar(&values, &gbuffer)?;
        }
        filtered_by_n.push((n, last));
    }
    let o32 = &filtered_by_n.iter().find(|f| f.0 == 32).unwrap().1;
    let o64 = &filtered_by_n.iter().find(|f| f.0 == 64).unwrap().1;
    let mean_abs_diff: f64 =
        valid.iter().map(|&i| f64::from((o32[i] - o64[i]).abs())).sum::<f64>() / valid.len() as f64;

    let mut csv = String::from("sweep,value,metric\n");
    for (r, occ) in &occlusion_by_radius {
        let _ = writeln!(csv, "radius,{r},{occ:.6}");
    }
    for (n, vals) in &filtered_by_n {
        let mean: f64 = valid.iter().map(|&i| f64::from(vals[i])).sum::<f64>() / valid.len() as f64;
        let _ = writeln!(csv, "rays,{n},{mean:.6}");
    }
    let _ = writeln!(csv, "rays,abs_diff_32_64,{mean_abs_diff:.6}");

    let mut artifacts = Vec::new();
    write_artifact(out_dir, "ao_params.csv", &csv, &mut artifacts)?;
    write_artifact(
        out_dir,
        "ao_radius.svg",
        &svg_line_chart("mean occlusion vs hemisphere radius", "radius", "mean occlusion", &[("occlusion".to_string(), occlusion_by_radius.clone())]),
        &mut artifacts,
    )?;
    let n_series: Vec<(f64, f64)> = filtered_by_n
        .iter()
        .map(|(n, vals)| {
            let mean: f64 = valid.iter().map(|&i| f64::from(vals[i])).sum::<f64>() / valid.len() as f64;
            (f64::from(*n), mean)
        })
        .collect();
    write_artifact(
        out_dir,
        "ao_rays.svg",
        &svg_line_chart("filtered AO vs ray count", "rays per pixel", "mean unoccluded fraction", &[("mean".to_string(), n_series)]),
        &mut artifacts,
    )?;

    let mut checks = Vec::new();
    let monotone = occlusion_by_radius.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-9);
    check(
        &mut checks,
        "occlusion-grows-with-radius",
        monotone,
        format!("mean occlusion over r {:?}", occlusion_by_radius),
    );
    check(
        &mut checks,
        "32-vs-64-rays-agree",
        mean_abs_diff <= 0.02,
        format!("mean |O32 - O64| after filtering = {mean_abs_diff:.4}, want <= 0.02"),
    );
    Ok(SuiteReport { suite: "ao-params".into(), checks, artifacts })
}
