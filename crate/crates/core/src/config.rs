//! Run configuration: one TOML document with every knob of the pipeline,
//! all defaults materialized, plus dotted-path overrides for the CLI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoise::FilterParams;
use crate::netsim::LinkConfig;
use crate::raytrace::ShadowMode;
use crate::scene::{generate_scene, load_soup, Camera, Light, Scene, SceneParams};
use crate::trajectory::{default_orbit, Keyframe};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(String),
    #[error("config `{path}`: {msg}")]
    Invalid { path: String, msg: String },
    #[error("referenced file `{0}` does not exist")]
    MissingFile(PathBuf),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error(transparent)]
    Netsim(#[from] crate::netsim::NetsimError),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneConfig {
    /// Procedural scene name or `file:<path>` to a triangle-soup file.
    pub source: String,
    pub params: BTreeMap<String, f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { source: "box-room".into(), params: BTreeMap::new() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub fov_deg: f32,
    /// "hard" or "soft".
    pub shadow_mode: String,
    pub ambient: f32,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { width: 320, height: 180, fov_deg: 55.0, shadow_mode: "hard".into(), ambient: 0.15, seed: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AoConfig {
    pub rays: u8,
    pub radius: f32,
}

impl Default for AoConfig {
    fn default() -> Self {
        AoConfig { rays: 32, radius: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FilterConfig {
    pub enabled: bool,
    pub alpha: f32,
    pub history_min: u16,
    pub iterations: u32,
    pub sigma_z: f32,
    pub sigma_n: f32,
    pub tau_z: f32,
    pub tau_n: f32,
    pub filter_shadow_bits: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let p = FilterParams::default();
        FilterConfig {
            enabled: true,
            alpha: p.alpha,
            history_min: p.history_min,
            iterations: p.iterations,
            sigma_z: p.sigma_z,
            sigma_n: p.sigma_n,
            tau_z: p.tau_z,
            tau_n: p.tau_n,
            filter_shadow_bits: p.filter_shadow_bits,
        }
    }
}

impl FilterConfig {
    pub fn to_params(&self) -> FilterParams {
        FilterParams {
            alpha: self.alpha,
            history_min: self.history_min,
            iterations: self.iterations,
            sigma_z: self.sigma_z,
            sigma_n: self.sigma_n,
            tau_z: self.tau_z,
            tau_n: self.tau_n,
            filter_shadow_bits: self.filter_shadow_bits,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TransportConfig {
    pub payload_capacity: usize,
    /// "lz4" or "identity".
    pub codec: String,
    /// When positive, AO/color frames are padded to this wire size
    /// (the frame-size experiment knob).
    pub pad_frames_to: u32,
    pub expiry_ms: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig { payload_capacity: 1200, codec: "lz4".into(), pad_frames_to: 0, expiry_ms: 500.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PassConfig {
    pub visibility: bool,
    pub ao: bool,
    /// Remote-rendering baseline: ship the composed color plane instead of
    /// the lighting passes.
    pub remote_color: bool,
}

impl Default for PassConfig {
    fn default() -> Self {
        PassConfig { visibility: true, ao: true, remote_color: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LinkSection {
    pub delay_ms: f64,
    pub jitter_ms: f64,
    pub loss_prob: f64,
    /// 0 means unlimited.
    pub bandwidth_bps: f64,
    pub seed: u64,
    /// Optional latency trace file; overrides delay/jitter when set.
    pub trace_file: String,
    /// Optional synthetic lognormal trace mean; overrides delay/jitter
    /// when positive and no trace file is given.
    pub synth_trace_mean_ms: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        LinkSection {
            delay_ms: 0.0,
            jitter_ms: 0.0,
            loss_prob: 0.0,
            bandwidth_bps: 0.0,
            seed: 7,
            trace_file: String::new(),
            synth_trace_mean_ms: 0.0,
        }
    }
}

impl LinkSection {
    pub fn to_link(&self) -> LinkConfig {
        LinkConfig {
            delay_ms: self.delay_ms,
            jitter_ms: self.jitter_ms,
            loss_prob: self.loss_prob,
            bandwidth_bps: (self.bandwidth_bps > 0.0).then_some(self.bandwidth_bps),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ClientConfig {
    pub prediction: bool,
    pub tau_z: f32,
    /// Depth planes retained for prediction validation.
    pub retain_frames: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig { prediction: true, tau_z: 0.1, retain_frames: 64 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SimConfig {
    pub ticks: u32,
    pub tick_rate: f64,
    /// Server skips a frame while the downlink is still serializing the
    /// previous one (used by the frame-size sweep).
    pub send_gated: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { ticks: 300, tick_rate: 60.0, send_gated: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// Empty means the built-in orbit-and-dolly trajectory.
    pub keyframes: Vec<Keyframe>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: String,
    /// Dump every n-th composed frame as PNG (0 = none).
    pub png_every: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LightConfig {
    pub center: [f32; 3],
    pub radius: f32,
    pub intensity: [f32; 3],
}

impl Default for LightConfig {
    fn default() -> Self {
        LightConfig { center: [0.0, 2.0, 0.0], radius: 0.3, intensity: [10.0, 10.0, 10.0] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct Config {
    pub scene: SceneConfig,
    pub render: RenderConfig,
    pub ao: AoConfig,
    pub filter: FilterConfig,
    pub transport: TransportConfig,
    pub passes: PassConfig,
    pub uplink: LinkSection,
    pub downlink: LinkSection,
    pub client: ClientConfig,
    pub sim: SimConfig,
    pub trajectory: TrajectoryConfig,
    pub output: OutputConfig,
    /// When nonempty, replaces the scene's own lights.
    pub lights: Vec<LightConfig>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses with `key.path=value` overrides applied on the TOML tree
    /// before deserialization. Array elements address by index.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Config, ConfigError> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (path, raw) in overrides {
            apply_override(&mut value, path, raw)?;
        }
        let cfg: Config = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full TOML with every default materialized.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn shadow_mode(&self) -> ShadowMode {
        if self.render.shadow_mode == "soft" {
            ShadowMode::Soft
        } else {
            ShadowMode::Hard
        }
    }

    pub fn keyframes(&self) -> Vec<Keyframe> {
        if self.trajectory.keyframes.is_empty() {
            default_orbit(self.sim.ticks)
        } else {
            self.trajectory.keyframes.clone()
        }
    }

    pub fn tick_ms(&self) -> f64 {
        1000.0 / self.sim.tick_rate
    }

    /// Builds the scene (procedural or from file), applying the camera
    /// resolution/fov and any light overrides.
    pub fn build_scene(&self) -> Result<Scene, ConfigError> {
        let mut scene = if let Some(path) = self.scene.source.strip_prefix("file:") {
            let path = Path::new(path);
            let (triangles, lights) = load_soup(path)?;
            let camera = Camera::look_at(
                crate::math::Vec3::new(3.0, 2.0, 3.0),
                crate::math::Vec3::ZERO,
                self.render.fov_deg.to_radians(),
                self.render.width,
                self.render.height,
            );
            Scene { triangles, lights, camera, animations: Vec::new() }
        } else {
            let params: SceneParams = self.scene.params.clone();
            generate_scene(&self.scene.source, &params)?
        };
        scene.camera.width = self.render.width;
        scene.camera.height = self.render.height;
        scene.camera.vertical_fov = self.render.fov_deg.to_radians();
        if !self.lights.is_empty() {
            scene.lights = self
                .lights
                .iter()
                .map(|l| Light {
                    center: l.center.into(),
                    radius: l.radius,
                    intensity: l.intensity.into(),
                })
                .collect();
        }
        Ok(scene)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let fail = |path: &str, msg: String| Err(ConfigError::Invalid { path: path.into(), msg });
        if self.render.width == 0 || self.render.height == 0 {
            return fail("render.width/height", "resolution must be positive".into());
        }
        if !(self.render.fov_deg > 0.0 && self.render.fov_deg < 180.0) {
            return fail("render.fov_deg", format!("{} out of (0, 180)", self.render.fov_deg));
        }
        if self.render.shadow_mode != "hard" && self.render.shadow_mode != "soft" {
            return fail("render.shadow_mode", format!("`{}` is not hard|soft", self.render.shadow_mode));
        }
        if self.ao.rays == 0 {
            return fail("ao.rays", "must be in 1..=255".into());
        }
        if !(self.ao.radius > 0.0) {
            return fail("ao.radius", "must be positive".into());
        }
        if !(self.filter.alpha > 0.0 && self.filter.alpha <= 1.0) {
            return fail("filter.alpha", format!("{} out of (0, 1]", self.filter.alpha));
        }
        if self.filter.iterations == 0 {
            return fail("filter.iterations", "must be at least 1".into());
        }
        if self.transport.payload_capacity < crate::transport::MIN_PAYLOAD_CAPACITY {
            return fail("transport.payload_capacity", "below minimum 64".into());
        }
        if self.transport.codec != "lz4" && self.transport.codec != "identity" {
            return fail("transport.codec", format!("`{}` is not lz4|identity", self.transport.codec));
        }
        if self.sim.ticks == 0 {
            return fail("sim.ticks", "must run at least one tick".into());
        }
        if !(self.sim.tick_rate > 0.0) {
            return fail("sim.tick_rate", "must be positive".into());
        }
        for link in [("uplink", &self.uplink), ("downlink", &self.downlink)] {
            if !(0.0..1.0).contains(&link.1.loss_prob) {
                return fail(&format!("{}.loss_prob", link.0), "must be in [0, 1)".into());
            }
            if !link.1.trace_file.is_empty() && !Path::new(&link.1.trace_file).exists() {
                return Err(ConfigError::MissingFile(PathBuf::from(&link.1.trace_file)));
            }
        }
        if let Some(path) = self.scene.source.strip_prefix("file:") {
            if !Path::new(path).exists() {
                return Err(ConfigError::MissingFile(PathBuf::from(path)));
            }
        }
        let kf = &self.trajectory.keyframes;
        if !kf.is_empty() {
            for pair in kf.windows(2) {
                if pair[1].tick <= pair[0].tick {
                    return fail("trajectory.keyframes", "ticks must be strictly increasing".into());
                }
            }
        }
        Ok(())
    }
}

fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<(), ConfigError> {
    // parse the value as a TOML scalar/array; bare words become strings
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let segments: Vec<&str> = path.split('.').collect();
    let mut node = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Ok(index) = seg.parse::<usize>() {
            let arr = node.as_array_mut().ok_or_else(|| ConfigError::Invalid {
                path: path.into(),
                msg: format!("`{seg}` indexes a non-array"),
            })?;
            while arr.len() <= index {
                arr.push(toml::Value::Table(Default::default()));
            }
            if last {
                arr[index] = parsed;
                return Ok(());
            }
            node = &mut arr[index];
        } else {
            let table = node.as_table_mut().ok_or_else(|| ConfigError::Invalid {
                path: path.into(),
                msg: format!("`{seg}` indexes a non-table"),
            })?;
            if last {
                table.insert((*seg).to_string(), parsed);
                return Ok(());
            }
            node = table
                .entry((*seg).to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        let text = cfg.to_toml();
        let back = Config::parse(&text).unwrap();
        assert_eq!(cfg, back);
        // defaults are materialized in the printed form
        assert!(text.contains("width = 320"));
        assert!(text.contains("rays = 32"));
        assert!(text.contains("payload_capacity = 1200"));
    }

    #[test]
    fn parse_partial_text_fills_defaults() {
        let cfg = Config::parse("[render]\nwidth = 160\nheight = 90\n").unwrap();
        assert_eq!(cfg.render.width, 160);
        assert_eq!(cfg.ao.rays, 32);
        assert!(cfg.passes.visibility);
    }

    #[test]
    fn overrides_apply_by_dotted_path() {
        let cfg = Config::parse_with_overrides(
            "",
            &[
                ("render.width".into(), "64".into()),
                ("ao.radius".into(), "2.5".into()),
                ("render.shadow_mode".into(), "soft".into()),
                ("uplink.delay_ms".into(), "200".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.render.width, 64);
        assert_eq!(cfg.ao.radius, 2.5);
        assert_eq!(cfg.shadow_mode(), ShadowMode::Soft);
        assert_eq!(cfg.uplink.delay_ms, 200.0);
    }

    #[test]
    fn validation_failures_name_the_path() {
        let err = Config::parse("[ao]\nrays = 0\n").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { path, .. } if path == "ao.rays"), "{err}");
        let err = Config::parse("[render]\nshadow_mode = \"fuzzy\"\n").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { path, .. } if path == "render.shadow_mode"));
        let err = Config::parse("[uplink]\ntrace_file = \"/nonexistent/file.trace\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::MissingFile(_)));
    }

    #[test]
    fn keyframe_order_enforced() {
        let text = r#"
[[trajectory.keyframes]]
tick = 10
position = [0.0, 1.0, 0.0]
look_at = [0.0, 0.0, 0.0]
[[trajectory.keyframes]]
tick = 10
position = [1.0, 1.0, 0.0]
look_at = [0.0, 0.0, 0.0]
"#;
        assert!(Config::parse(text).is_err());
    }

    #[test]
    fn scene_build_applies_resolution_and_light_overrides() {
        let cfg = Config::parse(
            "[render]\nwidth = 64\nheight = 36\n[[lights]]\ncenter = [0.0, 2.0, 0.0]\nradius = 0.1\nintensity = [5.0, 5.0, 5.0]\n",
        )
        .unwrap();
        let scene = cfg.build_scene().unwrap();
        assert_eq!(scene.camera.width, 64);
        assert_eq!(scene.lights.len(), 1);
        assert_eq!(scene.lights[0].radius, 0.1);
    }
}
