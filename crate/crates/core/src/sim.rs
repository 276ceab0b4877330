//! Run orchestration: the deterministic in-process simulation (client and
//! server interleaved on one virtual clock), the transport-free pipeline
//! it must match bit-for-bit at zero latency, the offline high-sample
//! reference renderer, and the real-socket serve/client loops.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;

use thiserror::Error;

use crate::compose::{
    compose_color_buffer, compose_final, compose_from_fractions, reproject_ao, reproject_visibility, ColorBuffer,
    FinalImage, PredictionParams, ShadingParams,
};
use crate::config::{Config, ConfigError};
use crate::denoise::{ShadowFilter, SvgfFilter};
use crate::gbuffer::{compute_motion, rasterize, CameraPose, GBuffer};
use crate::metrics::{FrameRow, RunRecord, SsimParams};
use crate::netsim::{load_trace, synth_trace, Channel, NetsimError};
use crate::raytrace::{trace_ao, trace_visibility, AoBuffer, SamplerState, ShadowMode, VisibilityBuffer};
use crate::scene::{Bvh, Camera, Light, Scene, SceneError};
use crate::trajectory::Trajectory;
use crate::transport::{
    decode_frame, encode_frame, packetize, Assembler, CameraMessage, Codec, Datagram, FrameHeader, PassBuffer, PassId,
    TransportError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Raytrace(#[from] crate::raytrace::RaytraceError),
    #[error(transparent)]
    Denoise(#[from] crate::denoise::DenoiseError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Compose(#[from] crate::compose::ComposeError),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("socket mode: {0}")]
    Socket(String),
}

/// Per-tick geometry provider; rebuilds the BVH only for animated scenes.
struct GeometryCache {
    scene: Scene,
    current_tick: u32,
    bvh: Bvh,
}

impl GeometryCache {
    fn new(scene: Scene) -> Result<Self, SceneError> {
        let bvh = Bvh::build(&scene.triangles_at(0))?;
        Ok(GeometryCache { scene, current_tick: 0, bvh })
    }

    fn bvh_at(&mut self, tick: u32) -> Result<&Bvh, SceneError> {
        if self.scene.is_animated() && tick != self.current_tick {
            self.bvh = Bvh::build(&self.scene.triangles_at(tick))?;
            self.current_tick = tick;
        }
        Ok(&self.bvh)
    }
}

/// Everything the server sends for one rendered frame of one pass.
pub struct SentFrame {
    pub header: FrameHeader,
    pub datagrams: Vec<Datagram>,
    /// Client tick whose pose this frame was traced for.
    pub pose_tick: u32,
    /// Compressed size of the unfiltered AO plane, alongside the shipped
    /// (filtered) one; measured when `measure_raw_ao` is on.
    pub raw_ao_compressed: Option<u32>,
}

/// Server side: traces against the latest received pose, filters, encodes.
pub struct ServerState {
    geometry: GeometryCache,
    camera: Camera,
    lights: Vec<Light>,
    shadow_mode: ShadowMode,
    ao_rays: u8,
    ao_radius: f32,
    filter: Option<SvgfFilter>,
    shadow_filter: Option<ShadowFilter>,
    seed: u64,
    passes: crate::config::PassConfig,
    codec_base: Codec,
    pad_frames_to: u32,
    payload_capacity: usize,
    shading: ShadingParams,
    pub measure_raw_ao: bool,
    latest_pose: Option<(u32, CameraPose)>,
    seq: u32,
}

impl ServerState {
    pub fn new(config: &Config, scene: Scene) -> Result<Self, SimError> {
        let camera = scene.camera;
        let lights = scene.lights.clone();
        let filter_params = config.filter.to_params();
        let filter = config
            .filter
            .enabled
            .then(|| SvgfFilter::new(camera.width, camera.height, filter_params));
        let shadow_filter = (config.filter.enabled && config.filter.filter_shadow_bits).then(|| {
            ShadowFilter::new(camera.width, camera.height, lights.len() as u8, filter_params)
        });
        let codec_base = if config.transport.codec == "identity" { Codec::Identity } else { Codec::Lz4 };
        Ok(ServerState {
            geometry: GeometryCache::new(scene)?,
            camera,
            lights,
            shadow_mode: config.shadow_mode(),
            ao_rays: config.ao.rays,
            ao_radius: config.ao.radius,
            filter,
            shadow_filter,
            seed: config.render.seed,
            passes: config.passes.clone(),
            codec_base,
            pad_frames_to: config.transport.pad_frames_to,
            payload_capacity: config.transport.payload_capacity,
            shading: ShadingParams { ambient: config.render.ambient, ..Default::default() },
            measure_raw_ao: false,
            latest_pose: None,
            seq: 0,
        })
    }

    pub fn receive_pose(&mut self, tick: u32, pose: CameraPose) {
        match self.latest_pose {
            Some((cur, _)) if cur >= tick => {}
            _ => self.latest_pose = Some((tick, pose)),
        }
    }

    /// Traces and filters one frame against a pose. This is the single
    /// arithmetic path shared by the distributed and transport-free modes.
    pub fn render_buffers(
        &mut self,
        pose_tick: u32,
        pose: &CameraPose,
    ) -> Result<(GBuffer, Option<VisibilityBuffer>, Option<AoBuffer>, Option<AoBuffer>), SimError> {
        let frame = self.seq;
        self.seq += 1;
        let bvh = self.geometry.bvh_at(pose_tick)?;
        let mut gbuffer = rasterize(bvh, &self.camera, pose, frame);
        let prev_pose = self
            .filter
            .as_ref()
            .and_then(|f| f.history().prev_pose)
            .unwrap_or(*pose);
        compute_motion(&mut gbuffer, &self.camera, &prev_pose);
        let sampler = SamplerState::for_frame(self.seed, u64::from(frame));

        let need_vis = self.passes.visibility || self.passes.remote_color;
        let need_ao = self.passes.ao || self.passes.remote_color;
        let mut vis = need_vis
            .then(|| trace_visibility(&gbuffer, &bvh, &self.lights, self.shadow_mode, &sampler))
            .transpose()?;
        let raw_ao = need_ao
            .then(|| trace_ao(&gbuffer, &bvh, self.ao_rays, self.ao_radius, &sampler))
            .transpose()?;
        let ao = match (&mut self.filter, raw_ao.clone()) {
            (Some(filter), Some(raw)) => Some(filter.filter_ao(&raw, &gbuffer)?),
            (None, raw) => raw,
            (Some(_), None) => None,
        };
        if let (Some(sf), Some(v)) = (&mut self.shadow_filter, vis.as_ref()) {
            vis = Some(sf.filter_bits(v, &gbuffer)?);
        }
        Ok((gbuffer, vis, ao, raw_ao))
    }

    fn codec_for(&self, pass: PassId) -> Codec {
        if self.pad_frames_to > 0 && matches!(pass, PassId::Ao | PassId::Color) {
            Codec::PaddedLz4 { pad_to: self.pad_frames_to }
        } else {
            self.codec_base
        }
    }

    fn encode_one(&self, buffer: &PassBuffer, pose_tick: u32, raw_ao_compressed: Option<u32>) -> Result<SentFrame, SimError> {
        let (header, bytes) = encode_frame(buffer, self.codec_for(buffer.pass()));
        let datagrams = packetize(&header, &bytes, self.payload_capacity)?;
        Ok(SentFrame { header, datagrams, pose_tick, raw_ao_compressed })
    }

    /// Renders against the newest pose and encodes the enabled passes.
    /// Returns nothing until the first camera message arrives.
    pub fn render_tick(&mut self) -> Result<Vec<SentFrame>, SimError> {
        let Some((pose_tick, pose)) = self.latest_pose else {
            return Ok(Vec::new());
        };
        let frame = self.seq;
        let (gbuffer, vis, ao, raw_ao) = self.render_buffers(pose_tick, &pose)?;
        let raw_ao_compressed = if self.measure_raw_ao {
            raw_ao.as_ref().map(|raw| {
                let (h, _) = encode_frame(&PassBuffer::Ao(raw.clone()), self.codec_base);
                h.compressed_size
            })
        } else {
            None
        };
        let mut out = Vec::new();
        if self.passes.remote_color {
            let (vis, ao) = (vis.expect("remote needs vis"), ao.expect("remote needs ao"));
            let color = compose_color_buffer(&gbuffer, &vis, &ao, &self.lights, &self.shading, frame)?;
            out.push(self.encode_one(&PassBuffer::Color(color), pose_tick, raw_ao_compressed)?);
        } else {
            if let Some(v) = vis.filter(|_| self.passes.visibility) {
                out.push(self.encode_one(&PassBuffer::Visibility(v), pose_tick, None)?);
            }
            if let Some(a) = ao.filter(|_| self.passes.ao) {
                out.push(self.encode_one(&PassBuffer::Ao(a), pose_tick, raw_ao_compressed)?);
            }
        }
        Ok(out)
    }
}

/// Client side: reassembles frames, predicts stale buffers, composes.
pub struct ClientState {
    camera: Camera,
    lights: Vec<Light>,
    shading: ShadingParams,
    ao_rays: u8,
    prediction: bool,
    pred_params: PredictionParams,
    pub assembler: Assembler,
    latest_vis: Option<VisibilityBuffer>,
    latest_ao: Option<AoBuffer>,
    latest_color: Option<ColorBuffer>,
    retained: VecDeque<(CameraPose, Vec<f32>)>,
    retain_cap: usize,
}

impl ClientState {
    pub fn new(config: &Config, scene: &Scene) -> Self {
        ClientState {
            camera: scene.camera,
            lights: scene.lights.clone(),
            shading: ShadingParams { ambient: config.render.ambient, ..Default::default() },
            ao_rays: config.ao.rays,
            prediction: config.client.prediction,
            pred_params: PredictionParams { tau_z: config.client.tau_z },
            assembler: Assembler::new(config.transport.expiry_ms),
            latest_vis: None,
            latest_ao: None,
            latest_color: None,
            retained: VecDeque::new(),
            retain_cap: config.client.retain_frames.max(1),
        }
    }

    pub fn retain_depth(&mut self, pose: CameraPose, depth: Vec<f32>) {
        self.retained.push_back((pose, depth));
        while self.retained.len() > self.retain_cap {
            self.retained.pop_front();
        }
    }

    fn retained_depth_for(&self, pose: &CameraPose) -> Option<&[f32]> {
        self.retained.iter().rev().find(|(p, _)| p.bits_eq(pose)).map(|(_, d)| d.as_slice())
    }

    pub fn ingest_wire(&mut self, bytes: &[u8], now_ms: f64) -> Result<(), TransportError> {
        let dgram = Datagram::from_bytes(bytes)?;
        self.assembler.ingest(dgram, now_ms);
        Ok(())
    }

    /// Completes frames due at `now_ms`, decoding and keeping the newest
    /// buffer per pass. Returns headers of newly completed frames.
    pub fn advance(&mut self, now_ms: f64) -> Result<Vec<FrameHeader>, TransportError> {
        let mut headers = Vec::new();
        for (header, bytes) in self.assembler.advance(now_ms) {
            let buffer = decode_frame(&header, &bytes)?;
            match buffer {
                PassBuffer::Visibility(v) => {
                    if self.latest_vis.as_ref().is_none_or(|cur| v.frame_id > cur.frame_id) {
                        self.latest_vis = Some(v);
                    }
                }
                PassBuffer::Ao(a) => {
                    if self.latest_ao.as_ref().is_none_or(|cur| a.frame_id > cur.frame_id) {
                        self.latest_ao = Some(a);
                    }
                }
                PassBuffer::Color(c) => {
                    if self.latest_color.as_ref().is_none_or(|cur| c.frame_id > cur.frame_id) {
                        self.latest_color = Some(c);
                    }
                }
            }
            headers.push(header);
        }
        Ok(headers)
    }

    fn fallback_vis(&self, gbuffer: &GBuffer) -> VisibilityBuffer {
        VisibilityBuffer {
            width: gbuffer.width,
            height: gbuffer.height,
            frame_id: 0,
            pose: gbuffer.pose,
            light_count: self.lights.len() as u8,
            mode: ShadowMode::Hard,
            bits: vec![VisibilityBuffer::full_mask(self.lights.len() as u8); gbuffer.pixel_count()],
        }
    }

    fn fallback_ao(&self, gbuffer: &GBuffer) -> AoBuffer {
        AoBuffer {
            width: gbuffer.width,
            height: gbuffer.height,
            frame_id: 0,
            pose: gbuffer.pose,
            rays_per_pixel: self.ao_rays,
            radius: 1.0,
            counts: vec![self.ao_rays; gbuffer.pixel_count()],
        }
    }

    /// Composes this tick's image from the freshest server buffers,
    /// reprojected to the current pose when prediction is on.
    pub fn compose_tick(&self, gbuffer: &GBuffer, remote: bool) -> Result<FinalImage, SimError> {
        if remote {
            let n = (self.camera.width * self.camera.height) as usize;
            let rgb = match &self.latest_color {
                Some(c) => c.rgb.iter().map(|&v| f32::from(v) / 255.0).collect(),
                None => {
                    let cc = self.shading.clear_color;
                    (0..n).flat_map(|_| [cc.x, cc.y, cc.z]).collect()
                }
            };
            return Ok(FinalImage { width: self.camera.width, height: self.camera.height, rgb });
        }
        let vis = match &self.latest_vis {
            Some(stale) if self.prediction => {
                let depth = self.retained_depth_for(&stale.pose);
                reproject_visibility(stale, gbuffer, &self.camera, depth, &self.pred_params).buffer
            }
            Some(stale) => stale.clone(),
            None => self.fallback_vis(gbuffer),
        };
        let ao = match &self.latest_ao {
            Some(stale) if self.prediction => {
                let depth = self.retained_depth_for(&stale.pose);
                reproject_ao(stale, gbuffer, &self.camera, depth, &self.pred_params).buffer
            }
            Some(stale) => stale.clone(),
            None => self.fallback_ao(gbuffer),
        };
        Ok(compose_final(gbuffer, &vis, &ao, &self.lights, &self.shading)?)
    }
}

/// What a run should keep or emit besides its metrics record.
#[derive(Default)]
pub struct SimOptions {
    pub keep_luma: bool,
    /// Per-frame SSIM against this luma sequence (the zero-latency
    /// reference), folded into the record.
    pub reference_luma: Option<Vec<Vec<u8>>>,
    pub png_dir: Option<PathBuf>,
    pub png_every: u32,
}

pub struct SimOutput {
    pub record: RunRecord,
    pub frame_hashes: Vec<u64>,
    pub luma_frames: Option<Vec<Vec<u8>>>,
}

fn build_channel(section: &crate::config::LinkSection) -> Result<Channel, SimError> {
    let link = section.to_link();
    if !section.trace_file.is_empty() {
        let trace = load_trace(std::path::Path::new(&section.trace_file))?;
        return Ok(Channel::with_trace(link, trace)?);
    }
    if section.synth_trace_mean_ms > 0.0 {
        let trace = synth_trace(section.synth_trace_mean_ms, 1024, link.seed);
        return Ok(Channel::with_trace(link, trace)?);
    }
    Ok(Channel::new(link))
}

struct FrameMeta {
    pose_tick: u32,
    raw_bytes: u32,
    compressed_bytes: u32,
    packets: u16,
    completed_ms: Option<f64>,
    raw_ao_compressed: Option<u32>,
}

/// The deterministic in-process simulation: per tick the client sends its
/// camera pose uplink, the server renders against the newest pose it has
/// and streams encoded passes downlink, and the client reassembles,
/// predicts, and composes. Fully deterministic in the config.
pub fn run_sim(config: &Config, options: &SimOptions) -> Result<SimOutput, SimError> {
    let wall_start = std::time::Instant::now();
    let scene = config.build_scene()?;
    let camera = scene.camera;
    let trajectory = Trajectory::new(config.keyframes());
    let mut server = ServerState::new(config, scene.clone())?;
    server.measure_raw_ao = true;
    let mut client = ClientState::new(config, &scene);
    let mut uplink = build_channel(&config.uplink)?;
    let mut downlink = build_channel(&config.downlink)?;
    let mut client_geometry = GeometryCache::new(scene)?;
    let tick_ms = config.tick_ms();
    let remote = config.passes.remote_color;

    let mut meta: BTreeMap<(PassId, u32), FrameMeta> = BTreeMap::new();
    let mut frame_hashes = Vec::with_capacity(config.sim.ticks as usize);
    let mut luma_frames = options.keep_luma.then(Vec::new);
    let mut per_frame_ssim = Vec::new();
    let ssim_params = SsimParams::default();

    for tick in 0..config.sim.ticks {
        let now = f64::from(tick) * tick_ms;
        let pose = trajectory.pose_at(tick);

        // client side: current-view G-buffer (skipped entirely in remote
        // mode, where the client does no rendering)
        let gbuffer_now = if remote {
            None
        } else {
            let bvh = client_geometry.bvh_at(tick)?;
            let g = rasterize(bvh, &camera, &pose, tick);
            client.retain_depth(pose, g.depth.clone());
            Some(g)
        };

        // camera message goes uplink
        let msg = CameraMessage { frame_id: tick, pose, timestamp_ms: now as u32 };
        uplink.send(msg.to_bytes(), now);

        // server ingests poses and renders
        for bytes in uplink.poll(now) {
            if let Ok(msg) = CameraMessage::from_bytes(&bytes) {
                server.receive_pose(msg.frame_id, msg.pose);
            }
        }
        if !config.sim.send_gated || downlink.is_idle(now) {
            for sent in server.render_tick()? {
                meta.insert(
                    (sent.header.pass, sent.header.frame_id),
                    FrameMeta {
                        pose_tick: sent.pose_tick,
                        raw_bytes: sent.header.raw_size,
                        compressed_bytes: sent.header.compressed_size,
                        packets: sent.header.packet_count(config.transport.payload_capacity),
                        completed_ms: None,
                        raw_ao_compressed: sent.raw_ao_compressed,
                    },
                );
                for d in &sent.datagrams {
                    downlink.send(d.to_bytes(), now);
                }
            }
        }

        // client ingests, completes, composes
        for bytes in downlink.poll(now) {
            client.ingest_wire(&bytes, now)?;
        }
        for header in client.advance(now)? {
            if let Some(m) = meta.get_mut(&(header.pass, header.frame_id)) {
                m.completed_ms = Some(now);
            }
        }
        let image = match &gbuffer_now {
            Some(g) => client.compose_tick(g, false)?,
            None => client.compose_tick(&empty_gbuffer(&camera, pose, tick), true)?,
        };

        frame_hashes.push(image.content_hash());
        if let Some(reference) = &options.reference_luma {
            let luma = image.luma_u8();
            let la: Vec<f64> = reference[tick as usize].iter().map(|&v| f64::from(v)).collect();
            let lb: Vec<f64> = luma.iter().map(|&v| f64::from(v)).collect();
            per_frame_ssim.push(crate::metrics::ssim_planes(
                &la,
                &lb,
                camera.width as usize,
                camera.height as usize,
                &ssim_params,
            )?);
            if let Some(frames) = &mut luma_frames {
                frames.push(luma);
            }
        } else if let Some(frames) = &mut luma_frames {
            frames.push(image.luma_u8());
        }
        if let Some(dir) = &options.png_dir {
            let every = options.png_every.max(1);
            if tick % every == 0 {
                std::fs::create_dir_all(dir)?;
                image.save_png(&dir.join(format!("frame_{tick:04}.png")))?;
            }
        }
    }

    // fold bookkeeping into the record
    let duration_s = f64::from(config.sim.ticks) * tick_ms / 1000.0;
    let mut record = RunRecord { duration_s, displayed_frames: u64::from(config.sim.ticks), ..Default::default() };
    let mut last_complete: BTreeMap<PassId, f64> = BTreeMap::new();
    let mut raw_ao_total: u64 = 0;
    let mut filtered_ao_total: u64 = 0;
    for ((pass, frame_id), m) in &meta {
        let (end_to_end, frame_time) = match m.completed_ms {
            Some(done) => {
                let e2e = done - f64::from(m.pose_tick) * tick_ms;
                let ft = last_complete.get(pass).map_or(-1.0, |prev| done - prev);
                last_complete.insert(*pass, done);
                *record.completed_frames.entry(pass.name().to_string()).or_insert(0) += 1;
                (e2e, ft)
            }
            None => (-1.0, -1.0),
        };
        if let Some(raw) = m.raw_ao_compressed {
            raw_ao_total += u64::from(raw);
            filtered_ao_total += u64::from(m.compressed_bytes);
        }
        record.rows.push(FrameRow {
            frame_id: *frame_id,
            pass: pass.name().to_string(),
            raw_bytes: m.raw_bytes,
            compressed_bytes: m.compressed_bytes,
            packets: m.packets,
            delivered: m.completed_ms.is_some(),
            end_to_end_ms: end_to_end,
            frame_time_ms: frame_time,
        });
    }
    for (pass, bytes) in &client.assembler.delivered_bytes {
        record.delivered_wire_bytes.insert(pass.name().to_string(), *bytes);
    }
    debug_assert_eq!(client.assembler.total_delivered_bytes(), downlink.delivered_bytes());
    if raw_ao_total > 0 {
        record.delivered_wire_bytes.insert("ao_unfiltered_equivalent".to_string(), raw_ao_total);
        record.delivered_wire_bytes.insert("ao_filtered_compressed".to_string(), filtered_ao_total);
    }
    if !per_frame_ssim.is_empty() {
        record.mean_ssim = Some(per_frame_ssim.iter().sum::<f64>() / per_frame_ssim.len() as f64);
        record.per_frame_ssim = per_frame_ssim;
    }
    record.wall_seconds = wall_start.elapsed().as_secs_f64();
    Ok(SimOutput { record, frame_hashes, luma_frames })
}

fn empty_gbuffer(camera: &Camera, pose: CameraPose, tick: u32) -> GBuffer {
    let n = (camera.width * camera.height) as usize;
    GBuffer {
        width: camera.width,
        height: camera.height,
        frame_id: tick,
        pose,
        world_pos: vec![crate::math::Vec3::ZERO; n],
        normal: vec![crate::math::Vec3::ZERO; n],
        depth: vec![f32::INFINITY; n],
        mesh_id: vec![-1; n],
        motion: vec![crate::math::Vec2::ZERO; n],
        albedo: vec![crate::math::Vec3::ZERO; n],
    }
}

/// The same pipeline with the transport skipped entirely: the server-side
/// trace feeds composition directly. The zero-latency zero-loss
/// distributed run must match this bit for bit.
pub fn run_transport_free(config: &Config, options: &SimOptions) -> Result<SimOutput, SimError> {
    let wall_start = std::time::Instant::now();
    let scene = config.build_scene()?;
    let trajectory = Trajectory::new(config.keyframes());
    let mut server = ServerState::new(config, scene.clone())?;
    let client = ClientState::new(config, &scene);
    let lights = scene.lights.clone();
    let shading = ShadingParams { ambient: config.render.ambient, ..Default::default() };

    let mut frame_hashes = Vec::new();
    let mut luma_frames = options.keep_luma.then(Vec::new);
    for tick in 0..config.sim.ticks {
        let pose = trajectory.pose_at(tick);
        let (gbuffer, vis, ao, _) = server.render_buffers(tick, &pose)?;
        let image = if config.passes.remote_color {
            let color = compose_color_buffer(
                &gbuffer,
                vis.as_ref().expect("remote needs vis"),
                ao.as_ref().expect("remote needs ao"),
                &lights,
                &shading,
                tick,
            )?;
            FinalImage {
                width: color.width,
                height: color.height,
                rgb: color.rgb.iter().map(|&v| f32::from(v) / 255.0).collect(),
            }
        } else {
            let vis = vis.unwrap_or_else(|| client.fallback_vis(&gbuffer));
            let ao = ao.unwrap_or_else(|| client.fallback_ao(&gbuffer));
            compose_final(&gbuffer, &vis, &ao, &lights, &shading)?
        };
        frame_hashes.push(image.content_hash());
        if let Some(frames) = &mut luma_frames {
            frames.push(image.luma_u8());
        }
        if let Some(dir) = &options.png_dir {
            let every = options.png_every.max(1);
            if tick % every == 0 {
                std::fs::create_dir_all(dir)?;
                image.save_png(&dir.join(format!("frame_{tick:04}.png")))?;
            }
        }
    }
    let record = RunRecord {
        duration_s: f64::from(config.sim.ticks) * config.tick_ms() / 1000.0,
        displayed_frames: u64::from(config.sim.ticks),
        wall_seconds: wall_start.elapsed().as_secs_f64(),
        ..Default::default()
    };
    Ok(SimOutput { record, frame_hashes, luma_frames })
}

/// Offline reference render at `spp` samples per pixel: fractional
/// area-light visibility from `spp` cone rays per light and fractional AO
/// from `rays * spp` cosine rays, no transport, no filtering. With spp 1
/// and a shared seed this reproduces the unfiltered single-frame output.
pub fn run_reference(config: &Config, spp: u32, ticks: &[u32]) -> Result<Vec<FinalImage>, SimError> {
    use crate::math::{Ray, SURFACE_EPSILON};
    use crate::raytrace::{sample_cone, sample_cosine_hemisphere, cone_half_angle};
    use rayon::prelude::*;

    let scene = config.build_scene()?;
    let camera = scene.camera;
    let trajectory = Trajectory::new(config.keyframes());
    let mut geometry = GeometryCache::new(scene.clone())?;
    let shading = ShadingParams { ambient: config.render.ambient, ..Default::default() };
    let mode = config.shadow_mode();
    let lights = &scene.lights;
    let spp = spp.max(1);

    let mut out = Vec::with_capacity(ticks.len());
    for &tick in ticks {
        let pose = trajectory.pose_at(tick);
        let bvh = geometry.bvh_at(tick)?;
        let gbuffer = rasterize(bvh, &camera, &pose, tick);
        let sampler = SamplerState::for_frame(config.render.seed, u64::from(tick));
        let n = gbuffer.pixel_count();
        let stride = lights.len();

        let vis: Vec<f32> = (0..n * stride.max(1))
            .into_par_iter()
            .map(|j| {
                let (i, li) = (j / stride.max(1), j % stride.max(1));
                if stride == 0 || !gbuffer.is_valid(i) {
                    return 1.0;
                }
                let light = &lights[li];
                let origin = gbuffer.world_pos[i] + gbuffer.normal[i] * SURFACE_EPSILON;
                let to_center = light.center - origin;
                let dist = to_center.length();
                if dist <= SURFACE_EPSILON {
                    return 1.0;
                }
                let axis = to_center / dist;
                let mut rng = sampler.pixel_stream(i as u64, crate::sampler::TAG_SHADOW_BASE + li as u32);
                let mut lit = 0u32;
                for _ in 0..spp {
                    let (dir, t_max) = match mode {
                        ShadowMode::Hard => (axis, dist),
                        ShadowMode::Soft => {
                            let half = cone_half_angle(light, origin);
                            let dir = sample_cone(axis, half, &mut rng);
                            let oc = light.center - origin;
                            let b = dir.dot(oc);
                            let disc = (b * b - (oc.length_squared() - light.radius * light.radius)).max(0.0);
                            let near = b - disc.sqrt();
                            let t = if near > 0.0 { near } else { b + disc.sqrt() };
                            (dir, if t > 0.0 { t } else { dist })
                        }
                    };
                    if !bvh.occluded(&Ray::new(origin, dir, t_max)) {
                        lit += 1;
                    }
                    if mode == ShadowMode::Hard {
                        // the center ray is deterministic; no need to repeat
                        lit *= spp;
                        break;
                    }
                }
                lit as f32 / spp as f32
            })
            .collect();

        let total_rays = u32::from(config.ao.rays) * spp;
        let ao: Vec<f32> = (0..n)
            .into_par_iter()
            .map(|i| {
                if !gbuffer.is_valid(i) {
                    return 1.0;
                }
                let normal = gbuffer.normal[i];
                let origin = gbuffer.world_pos[i] + normal * SURFACE_EPSILON;
                let mut rng = sampler.pixel_stream(i as u64, crate::sampler::TAG_AO);
                let mut unoccluded = 0u32;
                for _ in 0..total_rays {
                    let dir = sample_cosine_hemisphere(normal, &mut rng);
                    if !bvh.occluded(&Ray::new(origin, dir, config.ao.radius)) {
                        unoccluded += 1;
                    }
                }
                unoccluded as f32 / total_rays as f32
            })
            .collect();

        out.push(compose_from_fractions(&gbuffer, &vis, &ao, lights, &shading)?);
    }
    Ok(out)
}

/// Wall-clock UDP server: receives camera messages, renders, streams
/// passes back to the sender. Runs until `max_frames` frames are sent.
pub fn run_serve(config: &Config, bind: &str, max_frames: u32) -> Result<u32, SimError> {
    use crate::netsim::udp::Endpoint;
    let scene = config.build_scene()?;
    let mut server = ServerState::new(config, scene)?;
    let endpoint = Endpoint::bind(bind).map_err(|e| SimError::Socket(format!("bind {bind}: {e}")))?;
    let mut client_addr = None;
    let mut sent = 0u32;
    let start = std::time::Instant::now();
    let tick = std::time::Duration::from_secs_f64(config.tick_ms() / 1000.0);
    while sent < max_frames {
        for (bytes, from) in endpoint.poll() {
            if let Ok(msg) = CameraMessage::from_bytes(&bytes) {
                server.receive_pose(msg.frame_id, msg.pose);
                client_addr = Some(from);
            }
        }
        if let Some(addr) = client_addr {
            for frame in server.render_tick()? {
                for d in &frame.datagrams {
                    endpoint
                        .send_to(&d.to_bytes(), addr)
                        .map_err(|e| SimError::Socket(format!("send: {e}")))?;
                }
                sent += 1;
            }
        }
        std::thread::sleep(tick);
        if start.elapsed().as_secs() > 600 {
            break;
        }
    }
    Ok(sent)
}

/// Wall-clock UDP client: walks the trajectory in real time, streams
/// camera messages, composes from whatever arrives. Returns composed
/// frame count.
pub fn run_client(config: &Config, server_addr: &str, bind: &str) -> Result<u32, SimError> {
    use crate::netsim::udp::Endpoint;
    let scene = config.build_scene()?;
    let camera = scene.camera;
    let trajectory = Trajectory::new(config.keyframes());
    let mut geometry = GeometryCache::new(scene.clone())?;
    let mut client = ClientState::new(config, &scene);
    let endpoint = Endpoint::bind(bind).map_err(|e| SimError::Socket(format!("bind {bind}: {e}")))?;
    let addr: std::net::SocketAddr =
        server_addr.parse().map_err(|e| SimError::Socket(format!("bad address {server_addr}: {e}")))?;
    let tick_duration = std::time::Duration::from_secs_f64(config.tick_ms() / 1000.0);
    let start = std::time::Instant::now();
    let mut composed = 0u32;
    for tick in 0..config.sim.ticks {
        let now_ms = start.elapsed().as_secs_f64() * 1000.0;
        let pose = trajectory.pose_at(tick);
        let bvh = geometry.bvh_at(tick)?;
        let gbuffer = rasterize(bvh, &camera, &pose, tick);
        client.retain_depth(pose, gbuffer.depth.clone());
        let msg = CameraMessage { frame_id: tick, pose, timestamp_ms: now_ms as u32 };
        endpoint
            .send_to(&msg.to_bytes(), addr)
            .map_err(|e| SimError::Socket(format!("send: {e}")))?;
        for (bytes, _) in endpoint.poll() {
            let _ = client.ingest_wire(&bytes, now_ms);
        }
        client.advance(now_ms)?;
        let image = client.compose_tick(&gbuffer, config.passes.remote_color)?;
        if !config.output.dir.is_empty() && config.output.png_every > 0 && tick % config.output.png_every == 0 {
            let dir = PathBuf::from(&config.output.dir);
            std::fs::create_dir_all(&dir)?;
            image.save_png(&dir.join(format!("frame_{tick:04}.png")))?;
        }
        composed += 1;
        std::thread::sleep(tick_duration);
    }
    Ok(composed)
}
