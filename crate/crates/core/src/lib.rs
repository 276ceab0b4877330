//! Distributed hybrid rendering at desk scale.
//!
//! A thin client rasterizes a G-buffer locally while a server traces
//! per-pixel shadow visibility bitmasks and ambient-occlusion ray counts,
//! denoises the AO signal, and ships both passes over a lossy datagram
//! link. The client predicts late frames by reprojection and composites
//! the final image. Everything runs on a deterministic virtual clock so
//! experiments are reproducible bit-for-bit.

pub mod compose;
pub mod config;
pub mod denoise;
pub mod gbuffer;
pub mod math;
pub mod metrics;
pub mod netsim;
pub mod raytrace;
pub mod sampler;
pub mod scene;
pub mod sim;
pub mod suites;
pub mod trajectory;
pub mod transport;
