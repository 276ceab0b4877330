//! `dhr`: drive the distributed hybrid rendering pipeline.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 an experiment suite ran but missed its thresholds.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dhr_core::config::{Config, ConfigError};
use dhr_core::denoise::SvgfFilter;
use dhr_core::gbuffer::read_dump;
use dhr_core::metrics::{emit_reports, RunRecord};
use dhr_core::sim::{run_client, run_reference, run_serve, run_sim, run_transport_free, SimError, SimOptions};
use dhr_core::suites::run_suite;

#[derive(Parser)]
#[command(name = "dhr", about = "Distributed hybrid rendering: simulation, sockets, reference renders, experiment suites", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key by dotted path, e.g. --set render.width=160
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print the fully materialized configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, ConfigError> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)?,
            None => String::new(),
        };
        let mut overrides = Vec::new();
        for s in &self.sets {
            let (key, value) = s.split_once('=').ok_or_else(|| ConfigError::Invalid {
                path: s.clone(),
                msg: "override must look like key.path=value".into(),
            })?;
            overrides.push((key.to_string(), value.to_string()));
        }
        Config::parse_with_overrides(&text, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Deterministic in-process simulation over the virtual clock.
    Sim {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for CSV/record/PNG artifacts.
        #[arg(long, default_value = "out/sim")]
        out: PathBuf,
        /// Skip the transport and run the single-process pipeline.
        #[arg(long)]
        transport_free: bool,
    },
    /// Offline high-sample reference render (ground truth frames).
    Reference {
        #[command(flatten)]
        config: ConfigArgs,
        /// Samples per pixel multiplier.
        #[arg(long, default_value_t = 256)]
        spp: u32,
        /// Comma-separated ticks to render (default: tick 0).
        #[arg(long, default_value = "0")]
        ticks: String,
        #[arg(long, default_value = "out/reference")]
        out: PathBuf,
    },
    /// Run one experiment suite and evaluate its thresholds.
    Suite {
        /// bandwidth | latency-sweep | size-vs-fps | ao-params
        name: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/suites")]
        out: PathBuf,
    },
    /// Real-socket server: trace and stream passes to a UDP client.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:46000")]
        bind: String,
        /// Stop after this many frames.
        #[arg(long, default_value_t = 600)]
        max_frames: u32,
    },
    /// Real-socket client: walk the trajectory against a live server.
    Client {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:46000")]
        server: String,
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: String,
    },
    /// Re-emit CSV reports from a saved run record.
    Report {
        /// record.json produced by `sim`.
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value = "out/report")]
        out: PathBuf,
    },
    /// Standalone denoiser over dumped G-buffer + raw AO plane files.
    Denoise {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of NNNN.dhrg / NNNN.ao frame pairs, processed in order.
        #[arg(long)]
        dir: PathBuf,
        /// AO rays per pixel the planes were traced with.
        #[arg(long)]
        rays: u8,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                AppError::Config(_) => ExitCode::from(1),
                AppError::Runtime(_) => ExitCode::from(2),
            }
        }
    }
}

enum AppError {
    Config(ConfigError),
    Runtime(String),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Config(e) => write!(f, "{e}"),
            AppError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e)
    }
}

impl From<SimError> for AppError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => AppError::Config(c),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Runtime(e.to_string())
    }
}

fn maybe_print_config(args: &ConfigArgs) -> Result<Option<Config>, AppError> {
    let cfg = args.load()?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn dispatch(cli: Cli) -> Result<ExitCode, AppError> {
    match cli.command {
        Command::Sim { config, out, transport_free } => {
            let Some(cfg) = maybe_print_config(&config)? else {
                return Ok(ExitCode::SUCCESS);
            };
            let options = SimOptions {
                png_dir: (cfg.output.png_every > 0).then(|| out.join("frames")),
                png_every: cfg.output.png_every,
                ..Default::default()
            };
            let output = if transport_free { run_transport_free(&cfg, &options)? } else { run_sim(&cfg, &options)? };
            std::fs::create_dir_all(&out)?;
            emit_reports(&output.record, &out).map_err(|e| AppError::Runtime(e.to_string()))?;
            let json = serde_json::to_string_pretty(&output.record).map_err(|e| AppError::Runtime(e.to_string()))?;
            std::fs::write(out.join("record.json"), json)?;
            println!(
                "{} ticks in {:.2}s wall; artifacts in {}",
                output.record.displayed_frames,
                output.record.wall_seconds,
                out.display()
            );
            for (pass, bytes) in &output.record.delivered_wire_bytes {
                if !pass.starts_with("ao_") {
                    println!("  {pass}: {bytes} delivered bytes ({:.0} bps)", *bytes as f64 * 8.0 / output.record.duration_s);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Reference { config, spp, ticks, out } => {
            let Some(cfg) = maybe_print_config(&config)? else {
                return Ok(ExitCode::SUCCESS);
            };
            let ticks: Vec<u32> = ticks
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<u32>().map_err(|_| AppError::Runtime(format!("bad tick `{s}`"))))
                .collect::<Result<_, _>>()?;
            let frames = run_reference(&cfg, spp, &ticks)?;
            std::fs::create_dir_all(&out)?;
            for (tick, frame) in ticks.iter().zip(&frames) {
                frame
                    .save_png(&out.join(format!("reference_{tick:04}_spp{spp}.png")))
                    .map_err(|e| AppError::Runtime(e.to_string()))?;
            }
            println!("{} reference frames at spp {spp} in {}", frames.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Suite { name, config, out } => {
            let Some(cfg) = maybe_print_config(&config)? else {
                return Ok(ExitCode::SUCCESS);
            };
            let report = run_suite(&name, &cfg, &out.join(&name))?;
            report.print();
            if report.all_passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
        Command::Serve { config, bind, max_frames } => {
            let Some(cfg) = maybe_print_config(&config)? else {
                return Ok(ExitCode::SUCCESS);
            };
            let sent = run_serve(&cfg, &bind, max_frames)?;
            println!("served {sent} frames on {bind}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Client { config, server, bind } => {
            let Some(cfg) = maybe_print_config(&config)? else {
                return Ok(ExitCode::SUCCESS);
            };
            let frames = run_client(&cfg, &server, &bind)?;
            println!("composed {frames} frames against {server}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { record, out } => {
            let json = std::fs::read_to_string(&record)?;
            let record: RunRecord = serde_json::from_str(&json).map_err(|e| AppError::Runtime(format!("bad record: {e}")))?;
            emit_reports(&record, &out).map_err(|e| AppError::Runtime(e.to_string()))?;
            println!("reports in {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Denoise { config, dir, rays } => {
            let Some(cfg) = maybe_print_config(&config)? else {
                return Ok(ExitCode::SUCCESS);
            };
            let n = denoise_directory(&cfg, &dir, rays)?;
            println!("filtered {n} frames in {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Streams NNNN.dhrg + NNNN.ao pairs through the filter in ascending
/// order, writing NNNN.filtered.ao next to each input.
fn denoise_directory(cfg: &Config, dir: &Path, rays: u8) -> Result<u32, AppError> {
    if rays == 0 {
        return Err(AppError::Runtime("--rays must be at least 1".into()));
    }
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".dhrg").map(|s| s.to_string())
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(AppError::Runtime(format!("no .dhrg frames in {}", dir.display())));
    }
    let mut filter: Option<SvgfFilter> = None;
    let mut done = 0u32;
    for stem in &stems {
        let mut gfile = std::fs::File::open(dir.join(format!("{stem}.dhrg")))?;
        let gbuffer = read_dump(&mut gfile).map_err(|e| AppError::Runtime(e.to_string()))?;
        let counts = std::fs::read(dir.join(format!("{stem}.ao")))?;
        if counts.len() != gbuffer.pixel_count() {
            return Err(AppError::Runtime(format!(
                "{stem}.ao holds {} bytes, expected {}",
                counts.len(),
                gbuffer.pixel_count()
            )));
        }
        let f = filter.get_or_insert_with(|| SvgfFilter::new(gbuffer.width, gbuffer.height, cfg.filter.to_params()));
        let values: Vec<f32> = counts.iter().map(|&c| f32::from(c) / f32::from(rays)).collect();
        let filtered = f.filter_scalar(&values, &gbuffer).map_err(|e| AppError::Runtime(e.to_string()))?;
        let out: Vec<u8> = filtered
            .iter()
            .map(|&o| (o * f32::from(rays)).round().clamp(0.0, f32::from(rays)) as u8)
            .collect();
        std::fs::write(dir.join(format!("{stem}.filtered.ao")), out)?;
        done += 1;
    }
    Ok(done)
}
