//! Wire encoding of server buffers: lossless compression, MTU-sized
//! packetization, reassembly with whole-frame-drop semantics, and the
//! client-to-server camera message.
//!
//! Datagram layout (little-endian): magic "DHRP", frame_id u32, pass_id
//! u8, packet_index u16, packet_count u16, payload_len u16, then payload.
//! The first packet of a frame carries a fixed 96-byte frame header before
//! its payload chunk: pose as 12 f32, dims 2 u16, params 3 f32 + mode u8,
//! raw/compressed sizes 2 u32, codec id u8, zero padding. Camera message:
//! magic "DHRC", frame_id u32, pose 12 f32, timestamp u32 ms.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::compose::ColorBuffer;
use crate::gbuffer::CameraPose;
use crate::raytrace::{AoBuffer, ShadowMode, VisibilityBuffer};

pub const DATAGRAM_MAGIC: u32 = u32::from_le_bytes(*b"DHRP");
pub const CAMERA_MAGIC: u32 = u32::from_le_bytes(*b"DHRC");
pub const DATAGRAM_HEADER_LEN: usize = 15;
pub const FRAME_HEADER_LEN: usize = 96;
pub const CAMERA_MESSAGE_LEN: usize = 60;
/// Conservative default payload bytes per datagram.
pub const DEFAULT_PAYLOAD_CAPACITY: usize = 1200;
pub const MIN_PAYLOAD_CAPACITY: usize = 64;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("payload length {got} does not match header compressed size {want}")]
    SizeMismatch { got: usize, want: usize },
    #[error("unknown codec id {0}")]
    UnknownCodec(u8),
    #[error("decompressed size {got}, header says {want}")]
    RawSizeMismatch { got: usize, want: usize },
    #[error("payload capacity {0} below minimum {MIN_PAYLOAD_CAPACITY}")]
    CapacityTooSmall(usize),
}

/// One lighting pass on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PassId {
    Visibility,
    Ao,
    Color,
}

impl PassId {
    pub fn to_u8(self) -> u8 {
        match self {
            PassId::Visibility => 0,
            PassId::Ao => 1,
            PassId::Color => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self, TransportError> {
        match v {
            0 => Ok(PassId::Visibility),
            1 => Ok(PassId::Ao),
            2 => Ok(PassId::Color),
            other => Err(TransportError::Corrupt(format!("bad pass id {other}"))),
        }
    }

    pub fn bytes_per_pixel(self) -> u32 {
        match self {
            PassId::Visibility | PassId::Ao => 1,
            PassId::Color => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PassId::Visibility => "visibility",
            PassId::Ao => "ao",
            PassId::Color => "color",
        }
    }
}

/// Lossless block codec for plane payloads. The identity codec exists for
/// tests; the padded variant inflates frames to a fixed wire size for the
/// frame-size experiments while remaining losslessly decodable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Codec {
    Identity,
    Lz4,
    /// LZ4 followed by zero padding up to `pad_to` bytes (a 4-byte inner
    /// length prefix makes the padding skippable).
    PaddedLz4 { pad_to: u32 },
}

impl Codec {
    pub fn id(&self) -> u8 {
        match self {
            Codec::Identity => 0,
            Codec::Lz4 => 1,
            Codec::PaddedLz4 { .. } => 2,
        }
    }

    pub fn compress(&self, raw: &[u8]) -> Vec<u8> {
        match self {
            Codec::Identity => raw.to_vec(),
            Codec::Lz4 => lz4_flex::block::compress(raw),
            Codec::PaddedLz4 { pad_to } => {
                let inner = lz4_flex::block::compress(raw);
                let mut out = Vec::with_capacity((*pad_to as usize).max(inner.len() + 4));
                out.extend_from_slice(&(inner.len() as u32).to_le_bytes());
                out.extend_from_slice(&inner);
                if out.len() < *pad_to as usize {
                    out.resize(*pad_to as usize, 0);
                }
                out
            }
        }
    }

    pub fn decompress(codec_id: u8, bytes: &[u8], raw_size: usize) -> Result<Vec<u8>, TransportError> {
        let raw = match codec_id {
            0 => bytes.to_vec(),
            1 => lz4_flex::block::decompress(bytes, raw_size)
                .map_err(|e| TransportError::Corrupt(format!("lz4: {e}")))?,
            2 => {
                if bytes.len() < 4 {
                    return Err(TransportError::Corrupt("padded block shorter than length prefix".into()));
                }
                let inner_len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
                let end = 4 + inner_len;
                if end > bytes.len() {
                    return Err(TransportError::Corrupt("padded block inner length out of range".into()));
                }
                lz4_flex::block::decompress(&bytes[4..end], raw_size)
                    .map_err(|e| TransportError::Corrupt(format!("lz4: {e}")))?
            }
            other => return Err(TransportError::UnknownCodec(other)),
        };
        if raw.len() != raw_size {
            return Err(TransportError::RawSizeMismatch { got: raw.len(), want: raw_size });
        }
        Ok(raw)
    }
}

/// Pass-specific parameter echo carried in the frame header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PassParams {
    Visibility { light_count: u8, mode: ShadowMode },
    Ao { rays_per_pixel: u8, radius: f32 },
    Color,
}

/// Metadata describing one encoded frame of one pass.
#[derive(Clone, Copy, Debug)]
pub struct FrameHeader {
    pub frame_id: u32,
    pub pass: PassId,
    pub pose: CameraPose,
    pub width: u16,
    pub height: u16,
    pub params: PassParams,
    pub raw_size: u32,
    pub compressed_size: u32,
    pub codec_id: u8,
}

impl FrameHeader {
    pub fn packet_count(&self, payload_capacity: usize) -> u16 {
        let c = (self.compressed_size as usize).div_ceil(payload_capacity).max(1);
        c as u16
    }

    fn params_triple(&self) -> ([f32; 3], u8) {
        match self.params {
            PassParams::Visibility { light_count, mode } => {
                ([f32::from(light_count), 0.0, 0.0], if mode == ShadowMode::Soft { 1 } else { 0 })
            }
            PassParams::Ao { rays_per_pixel, radius } => ([f32::from(rays_per_pixel), radius, 0.0], 0),
            PassParams::Color => ([0.0, 0.0, 0.0], 0),
        }
    }

    /// Fixed 96-byte blob carried by a frame's first packet.
    pub fn to_blob(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut b = [0u8; FRAME_HEADER_LEN];
        let mut o = 0usize;
        for f in self.pose.to_floats() {
            b[o..o + 4].copy_from_slice(&f.to_le_bytes());
            o += 4;
        }
        b[o..o + 2].copy_from_slice(&self.width.to_le_bytes());
        b[o + 2..o + 4].copy_from_slice(&self.height.to_le_bytes());
        o += 4;
        let (params, mode) = self.params_triple();
        for p in params {
            b[o..o + 4].copy_from_slice(&p.to_le_bytes());
            o += 4;
        }
        b[o] = mode;
        o += 1;
        b[o..o + 4].copy_from_slice(&self.raw_size.to_le_bytes());
        b[o + 4..o + 8].copy_from_slice(&self.compressed_size.to_le_bytes());
        o += 8;
        b[o] = self.codec_id;
        b
    }

    pub fn from_blob(frame_id: u32, pass: PassId, b: &[u8]) -> Result<Self, TransportError> {
        if b.len() < FRAME_HEADER_LEN {
            return Err(TransportError::Corrupt("frame header blob too short".into()));
        }
        let f32_at = |o: usize| f32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let mut floats = [0f32; 12];
        for (i, f) in floats.iter_mut().enumerate() {
            *f = f32_at(i * 4);
        }
        let pose = CameraPose::from_floats(&floats);
        let width = u16::from_le_bytes(b[48..50].try_into().unwrap());
        let height = u16::from_le_bytes(b[50..52].try_into().unwrap());
        let p0 = f32_at(52);
        let p1 = f32_at(56);
        let mode = b[64];
        let raw_size = u32::from_le_bytes(b[65..69].try_into().unwrap());
        let compressed_size = u32::from_le_bytes(b[69..73].try_into().unwrap());
        let codec_id = b[73];
        let params = match pass {
            PassId::Visibility => PassParams::Visibility {
                light_count: p0 as u8,
                mode: if mode == 1 { ShadowMode::Soft } else { ShadowMode::Hard },
            },
            PassId::Ao => PassParams::Ao { rays_per_pixel: p0 as u8, radius: p1 },
            PassId::Color => PassParams::Color,
        };
        Ok(FrameHeader { frame_id, pass, pose, width, height, params, raw_size, compressed_size, codec_id })
    }
}

/// One buffer as produced by the server or reconstructed by the client.
#[derive(Clone, Debug)]
pub enum PassBuffer {
    Visibility(VisibilityBuffer),
    Ao(AoBuffer),
    Color(ColorBuffer),
}

impl PassBuffer {
    pub fn pass(&self) -> PassId {
        match self {
            PassBuffer::Visibility(_) => PassId::Visibility,
            PassBuffer::Ao(_) => PassId::Ao,
            PassBuffer::Color(_) => PassId::Color,
        }
    }

    pub fn plane_bytes(&self) -> &[u8] {
        match self {
            PassBuffer::Visibility(v) => &v.bits,
            PassBuffer::Ao(a) => &a.counts,
            PassBuffer::Color(c) => &c.rgb,
        }
    }

    pub fn pose(&self) -> &CameraPose {
        match self {
            PassBuffer::Visibility(v) => &v.pose,
            PassBuffer::Ao(a) => &a.pose,
            PassBuffer::Color(c) => &c.pose,
        }
    }

    pub fn frame_id(&self) -> u32 {
        match self {
            PassBuffer::Visibility(v) => v.frame_id,
            PassBuffer::Ao(a) => a.frame_id,
            PassBuffer::Color(c) => c.frame_id,
        }
    }
}

/// Compresses a buffer's plane and builds its frame header.
pub fn encode_frame(buffer: &PassBuffer, codec: Codec) -> (FrameHeader, Vec<u8>) {
    let raw = buffer.plane_bytes();
    let compressed = codec.compress(raw);
    let (width, height, params) = match buffer {
        PassBuffer::Visibility(v) => (
            v.width,
            v.height,
            PassParams::Visibility { light_count: v.light_count, mode: v.mode },
        ),
        PassBuffer::Ao(a) => (a.width, a.height, PassParams::Ao { rays_per_pixel: a.rays_per_pixel, radius: a.radius }),
        PassBuffer::Color(c) => (c.width, c.height, PassParams::Color),
    };
    let header = FrameHeader {
        frame_id: buffer.frame_id(),
        pass: buffer.pass(),
        pose: *buffer.pose(),
        width: width as u16,
        height: height as u16,
        params,
        raw_size: raw.len() as u32,
        compressed_size: compressed.len() as u32,
        codec_id: codec.id(),
    };
    (header, compressed)
}

/// Reconstructs the buffer described by `header` from its compressed
/// bytes. Fails loudly on truncation, size mismatch, or corruption;
/// never yields a partial buffer.
pub fn decode_frame(header: &FrameHeader, bytes: &[u8]) -> Result<PassBuffer, TransportError> {
    if bytes.len() != header.compressed_size as usize {
        return Err(TransportError::SizeMismatch { got: bytes.len(), want: header.compressed_size as usize });
    }
    let expected_raw = u32::from(header.width) * u32::from(header.height) * header.pass.bytes_per_pixel();
    if header.raw_size != expected_raw {
        return Err(TransportError::Corrupt(format!(
            "raw size {} inconsistent with {}x{} {}",
            header.raw_size,
            header.width,
            header.height,
            header.pass.name()
        )));
    }
    let raw = Codec::decompress(header.codec_id, bytes, header.raw_size as usize)?;
    let (w, h) = (u32::from(header.width), u32::from(header.height));
    Ok(match header.params {
        PassParams::Visibility { light_count, mode } => PassBuffer::Visibility(VisibilityBuffer {
            width: w,
            height: h,
            frame_id: header.frame_id,
            pose: header.pose,
            light_count,
            mode,
            bits: raw,
        }),
        PassParams::Ao { rays_per_pixel, radius } => PassBuffer::Ao(AoBuffer {
            width: w,
            height: h,
            frame_id: header.frame_id,
            pose: header.pose,
            rays_per_pixel,
            radius,
            counts: raw,
        }),
        PassParams::Color => PassBuffer::Color(ColorBuffer { width: w, height: h, frame_id: header.frame_id, pose: header.pose, rgb: raw }),
    })
}

/// One UDP-sized fragment of an encoded frame.
#[derive(Clone, Debug)]
pub struct Datagram {
    pub frame_id: u32,
    pub pass: PassId,
    pub packet_index: u16,
    pub packet_count: u16,
    pub payload: Vec<u8>,
    /// Present on packet 0 only.
    pub frame_header: Option<FrameHeader>,
}

impl Datagram {
    /// Wire bytes, including the 96-byte frame header on packet 0.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DATAGRAM_HEADER_LEN + FRAME_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&DATAGRAM_MAGIC.to_le_bytes());
        out.extend_from_slice(&self.frame_id.to_le_bytes());
        out.push(self.pass.to_u8());
        out.extend_from_slice(&self.packet_index.to_le_bytes());
        out.extend_from_slice(&self.packet_count.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u16).to_le_bytes());
        if self.packet_index == 0 {
            let header = self.frame_header.as_ref().expect("packet 0 must carry the frame header");
            out.extend_from_slice(&header.to_blob());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TransportError> {
        if bytes.len() < DATAGRAM_HEADER_LEN {
            return Err(TransportError::Corrupt("datagram shorter than header".into()));
        }
        let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if magic != DATAGRAM_MAGIC {
            return Err(TransportError::Corrupt("bad datagram magic".into()));
        }
        let frame_id = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let pass = PassId::from_u8(bytes[8])?;
        let packet_index = u16::from_le_bytes(bytes[9..11].try_into().unwrap());
        let packet_count = u16::from_le_bytes(bytes[11..13].try_into().unwrap());
        let payload_len = u16::from_le_bytes(bytes[13..15].try_into().unwrap()) as usize;
        if packet_count == 0 || packet_index >= packet_count {
            return Err(TransportError::Corrupt("packet index out of range".into()));
        }
        let mut offset = DATAGRAM_HEADER_LEN;
        let frame_header = if packet_index == 0 {
            let header = FrameHeader::from_blob(frame_id, pass, &bytes[offset..])?;
            offset += FRAME_HEADER_LEN;
            Some(header)
        } else {
            None
        };
        if bytes.len() != offset + payload_len {
            return Err(TransportError::Corrupt(format!(
                "datagram length {} != header-implied {}",
                bytes.len(),
                offset + payload_len
            )));
        }
        Ok(Datagram { frame_id, pass, packet_index, packet_count, payload: bytes[offset..].to_vec(), frame_header })
    }

    pub fn wire_len(&self) -> usize {
        DATAGRAM_HEADER_LEN + if self.packet_index == 0 { FRAME_HEADER_LEN } else { 0 } + self.payload.len()
    }
}

/// Splits compressed frame bytes into datagrams of at most
/// `payload_capacity` payload bytes; all packets except possibly the last
/// are full, and at least one packet is always produced.
pub fn packetize(header: &FrameHeader, bytes: &[u8], payload_capacity: usize) -> Result<Vec<Datagram>, TransportError> {
    if payload_capacity < MIN_PAYLOAD_CAPACITY {
        return Err(TransportError::CapacityTooSmall(payload_capacity));
    }
    debug_assert_eq!(bytes.len(), header.compressed_size as usize);
    let count = header.packet_count(payload_capacity);
    let mut out = Vec::with_capacity(count as usize);
    for index in 0..count {
        let start = index as usize * payload_capacity;
        let end = (start + payload_capacity).min(bytes.len());
        out.push(Datagram {
            frame_id: header.frame_id,
            pass: header.pass,
            packet_index: index,
            packet_count: count,
            payload: bytes[start..end].to_vec(),
            frame_header: (index == 0).then_some(*header),
        });
    }
    Ok(out)
}

/// Client-to-server camera update.
#[derive(Clone, Copy, Debug)]
pub struct CameraMessage {
    pub frame_id: u32,
    pub pose: CameraPose,
    pub timestamp_ms: u32,
}

impl CameraMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CAMERA_MESSAGE_LEN);
        out.extend_from_slice(&CAMERA_MAGIC.to_le_bytes());
        out.extend_from_slice(&self.frame_id.to_le_bytes());
        for f in self.pose.to_floats() {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&self.timestamp_ms.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TransportError> {
        if bytes.len() != CAMERA_MESSAGE_LEN {
            return Err(TransportError::Corrupt("camera message length".into()));
        }
        if u32::from_le_bytes(bytes[0..4].try_into().unwrap()) != CAMERA_MAGIC {
            return Err(TransportError::Corrupt("bad camera magic".into()));
        }
        let frame_id = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let mut floats = [0f32; 12];
        for (i, f) in floats.iter_mut().enumerate() {
            let o = 8 + i * 4;
            *f = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        }
        let timestamp_ms = u32::from_le_bytes(bytes[56..60].try_into().unwrap());
        Ok(CameraMessage { frame_id, pose: CameraPose::from_floats(&floats), timestamp_ms })
    }
}

/// Reassembly status of one (pass, frame) pair.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameStatus {
    Pending,
    Complete,
    Dropped,
}

struct PartialFrame {
    header: Option<FrameHeader>,
    packet_count: u16,
    received: Vec<bool>,
    received_count: u16,
    chunks: Vec<Option<Vec<u8>>>,
    first_seen_ms: f64,
    poisoned: bool,
}

/// Per-connection reassembler with whole-frame-drop semantics: a frame is
/// complete only when every packet index arrived; it is dropped when it
/// times out, when a newer frame of the same pass completes first, or when
/// packets disagree about its shape.
pub struct Assembler {
    expiry_ms: f64,
    frames: BTreeMap<(PassId, u32), PartialFrame>,
    status: BTreeMap<(PassId, u32), FrameStatus>,
    completed: Vec<(FrameHeader, Vec<u8>)>,
    /// Delivered wire bytes per pass, counted on ingest.
    pub delivered_bytes: BTreeMap<PassId, u64>,
}

impl Assembler {
    pub fn new(expiry_ms: f64) -> Self {
        Assembler {
            expiry_ms,
            frames: BTreeMap::new(),
            status: BTreeMap::new(),
            completed: Vec::new(),
            delivered_bytes: BTreeMap::new(),
        }
    }

    pub fn status(&self, pass: PassId, frame_id: u32) -> FrameStatus {
        self.status.get(&(pass, frame_id)).cloned().unwrap_or(FrameStatus::Pending)
    }

    /// Feeds one datagram. Duplicates are idempotent; conflicting shape or
    /// header information poisons the frame.
    pub fn ingest(&mut self, dgram: Datagram, now_ms: f64) {
        *self.delivered_bytes.entry(dgram.pass).or_insert(0) += dgram.wire_len() as u64;
        let key = (dgram.pass, dgram.frame_id);
        if matches!(self.status.get(&key), Some(FrameStatus::Complete | FrameStatus::Dropped)) {
            return;
        }
        let entry = self.frames.entry(key).or_insert_with(|| PartialFrame {
            header: None,
            packet_count: dgram.packet_count,
            received: vec![false; dgram.packet_count as usize],
            received_count: 0,
            chunks: vec![None; dgram.packet_count as usize],
            first_seen_ms: now_ms,
            poisoned: false,
        });
        if entry.packet_count != dgram.packet_count {
            entry.poisoned = true;
            return;
        }
        if let Some(h) = dgram.frame_header {
            match entry.header {
                None => entry.header = Some(h),
                Some(prev) => {
                    if prev.compressed_size != h.compressed_size || prev.raw_size != h.raw_size || !prev.pose.bits_eq(&h.pose) {
                        entry.poisoned = true;
                        return;
                    }
                }
            }
        }
        let idx = dgram.packet_index as usize;
        if !entry.received[idx] {
            entry.received[idx] = true;
            entry.received_count += 1;
            entry.chunks[idx] = Some(dgram.payload);
        }
    }

    /// Resolves frame states at `now_ms` and returns newly completed
    /// frames in (pass, frame_id) order.
    pub fn advance(&mut self, now_ms: f64) -> Vec<(FrameHeader, Vec<u8>)> {
        let keys: Vec<(PassId, u32)> = self.frames.keys().copied().collect();
        for key in keys {
            let frame = self.frames.get_mut(&key).unwrap();
            if frame.poisoned {
                self.status.insert(key, FrameStatus::Dropped);
                self.frames.remove(&key);
                continue;
            }
            let complete = frame.received_count == frame.packet_count && frame.header.is_some();
            if complete {
                let frame = self.frames.remove(&key).unwrap();
                let header = frame.header.unwrap();
                let mut bytes = Vec::with_capacity(header.compressed_size as usize);
                for chunk in frame.chunks.into_iter().flatten() {
                    bytes.extend_from_slice(&chunk);
                }
                if bytes.len() != header.compressed_size as usize {
                    self.status.insert(key, FrameStatus::Dropped);
                    continue;
                }
                self.status.insert(key, FrameStatus::Complete);
                self.completed.push((header, bytes));
                // newest complete frame supersedes older pending ones
                let stale: Vec<(PassId, u32)> =
                    self.frames.keys().copied().filter(|&(p, id)| p == key.0 && id < key.1).collect();
                for s in stale {
                    self.frames.remove(&s);
                    self.status.insert(s, FrameStatus::Dropped);
                }
            } else if now_ms - frame.first_seen_ms >= self.expiry_ms {
                self.status.insert(key, FrameStatus::Dropped);
                self.frames.remove(&key);
            }
        }
        std::mem::take(&mut self.completed)
    }

    pub fn total_delivered_bytes(&self) -> u64 {
        self.delivered_bytes.values().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Mat3, Vec3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_pose() -> CameraPose {
        CameraPose { position: Vec3::new(1.0, 2.0, 3.0), basis: Mat3::IDENTITY }
    }

    fn ao_buffer(counts: Vec<u8>, w: u32, h: u32) -> PassBuffer {
        PassBuffer::Ao(AoBuffer {
            width: w,
            height: h,
            frame_id: 9,
            pose: test_pose(),
            rays_per_pixel: 32,
            radius: 1.0,
            counts,
        })
    }

    #[test]
    fn zeros_compress_far_below_raw() {
        let raw = vec![0u8; 320 * 180];
        let buf = ao_buffer(raw, 320, 180);
        let (header, bytes) = encode_frame(&buf, Codec::Lz4);
        assert_eq!(header.raw_size, 57_600);
        assert!(bytes.len() < 1_000, "compressed {} bytes", bytes.len());
        let back = decode_frame(&header, &bytes).unwrap();
        assert_eq!(back.plane_bytes(), buf.plane_bytes());
    }

    #[test]
    fn decode_round_trip_on_random_buffers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = rng.gen_range(1..64u32);
            let h = rng.gen_range(1..64u32);
            let counts: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..=32u8)).collect();
            let buf = ao_buffer(counts, w, h);
            for codec in [Codec::Identity, Codec::Lz4, Codec::PaddedLz4 { pad_to: 5000 }] {
                let (header, bytes) = encode_frame(&buf, codec);
                let back = decode_frame(&header, &bytes).unwrap();
                assert_eq!(back.plane_bytes(), buf.plane_bytes());
                assert!(header.pose.bits_eq(back.pose()));
            }
        }
    }

    #[test]
    fn truncation_and_mismatch_are_errors() {
        let buf = ao_buffer(vec![7u8; 1024], 32, 32);
        let (header, bytes) = encode_frame(&buf, Codec::Lz4);
        assert!(matches!(
            decode_frame(&header, &bytes[..bytes.len() - 1]),
            Err(TransportError::SizeMismatch { .. })
        ));
        let mut wrong = header;
        wrong.raw_size += 1;
        assert!(decode_frame(&wrong, &bytes).is_err());
        let mut corrupt = bytes.clone();
        if corrupt.len() > 4 {
            corrupt[2] ^= 0xFF;
            let _ = decode_frame(&header, &corrupt); // must not panic
        }
    }

    #[test]
    fn packetize_ceil_arithmetic() {
        let bytes = vec![0xAB; 100_000];
        let buf = ao_buffer(bytes, 320, 313); // raw plane not used here
        let (mut header, _) = encode_frame(&buf, Codec::Identity);
        header.compressed_size = 100_000;
        let packets = packetize(&header, &vec![0xAB; 100_000], 1200).unwrap();
        assert_eq!(packets.len(), 84);
        assert!(packets[..83].iter().all(|p| p.payload.len() == 1200));
        assert_eq!(packets[83].payload.len(), 400);
        assert!(packets[0].frame_header.is_some());
        assert!(packets[1].frame_header.is_none());
        // minimum one packet even for tiny frames
        header.compressed_size = 0;
        let tiny = packetize(&header, &[], 1200).unwrap();
        assert_eq!(tiny.len(), 1);
        assert!(matches!(packetize(&header, &[], 32), Err(TransportError::CapacityTooSmall(32))));
    }

    #[test]
    fn datagram_wire_layout_golden() {
        let buf = ao_buffer(vec![1, 2, 3, 4], 2, 2);
        let (header, bytes) = encode_frame(&buf, Codec::Identity);
        let packets = packetize(&header, &bytes, 1200).unwrap();
        let wire = packets[0].to_bytes();
        assert_eq!(&wire[0..4], b"DHRP");
        assert_eq!(u32::from_le_bytes(wire[4..8].try_into().unwrap()), 9); // frame id
        assert_eq!(wire[8], 1); // pass id ao
        assert_eq!(u16::from_le_bytes(wire[9..11].try_into().unwrap()), 0); // index
        assert_eq!(u16::from_le_bytes(wire[11..13].try_into().unwrap()), 1); // count
        assert_eq!(u16::from_le_bytes(wire[13..15].try_into().unwrap()), 4); // payload len
        assert_eq!(wire.len(), DATAGRAM_HEADER_LEN + FRAME_HEADER_LEN + 4);
        // frame header blob starts with the pose floats
        assert_eq!(f32::from_le_bytes(wire[15..19].try_into().unwrap()), 1.0);
        // dims at blob offset 48
        assert_eq!(u16::from_le_bytes(wire[15 + 48..15 + 50].try_into().unwrap()), 2);
        let parsed = Datagram::from_bytes(&wire).unwrap();
        assert_eq!(parsed.payload, packets[0].payload);
        assert!(parsed.frame_header.unwrap().pose.bits_eq(&header.pose));
    }

    #[test]
    fn camera_message_round_trip() {
        let msg = CameraMessage { frame_id: 77, pose: test_pose(), timestamp_ms: 1234 };
        let bytes = msg.to_bytes();
        assert_eq!(bytes.len(), CAMERA_MESSAGE_LEN);
        assert_eq!(&bytes[0..4], b"DHRC");
        let back = CameraMessage::from_bytes(&bytes).unwrap();
        assert_eq!(back.frame_id, 77);
        assert_eq!(back.timestamp_ms, 1234);
        assert!(back.pose.bits_eq(&msg.pose));
        assert!(CameraMessage::from_bytes(&bytes[..32]).is_err());
    }

    fn frame_datagrams(frame_id: u32, payload: &[u8]) -> Vec<Datagram> {
        let buf = PassBuffer::Ao(AoBuffer {
            width: payload.len() as u32,
            height: 1,
            frame_id,
            pose: test_pose(),
            rays_per_pixel: 32,
            radius: 1.0,
            counts: payload.to_vec(),
        });
        let (header, bytes) = encode_frame(&buf, Codec::Identity);
        packetize(&header, &bytes, 64).unwrap()
    }

    #[test]
    fn reverse_order_and_duplicates_complete_once() {
        let payload: Vec<u8> = (0..=255u8).cycle().take(400).collect();
        let mut packets = frame_datagrams(5, &payload);
        packets.reverse();
        let mut asm = Assembler::new(500.0);
        for p in packets.iter().chain(packets.iter()) {
            asm.ingest(p.clone(), 10.0);
        }
        let done = asm.advance(11.0);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].1, payload);
        assert_eq!(asm.status(PassId::Ao, 5), FrameStatus::Complete);
        // duplicates after completion change nothing
        asm.ingest(packets[0].clone(), 12.0);
        assert!(asm.advance(13.0).is_empty());
    }

    #[test]
    fn missing_packet_drops_whole_frame_at_expiry() {
        let payload = vec![9u8; 300];
        let mut packets = frame_datagrams(6, &payload);
        packets.remove(2);
        let mut asm = Assembler::new(500.0);
        for p in packets {
            asm.ingest(p, 0.0);
        }
        assert!(asm.advance(499.0).is_empty());
        assert_eq!(asm.status(PassId::Ao, 6), FrameStatus::Pending);
        assert!(asm.advance(500.0).is_empty());
        assert_eq!(asm.status(PassId::Ao, 6), FrameStatus::Dropped);
    }

    #[test]
    fn newer_completion_supersedes_older_pending() {
        let mut asm = Assembler::new(10_000.0);
        let old = frame_datagrams(1, &[1u8; 300]);
        let new = frame_datagrams(2, &[2u8; 300]);
        // old frame is missing a packet, new frame completes
        for p in old.iter().skip(1) {
            asm.ingest(p.clone(), 0.0);
        }
        for p in new {
            asm.ingest(p, 1.0);
        }
        let done = asm.advance(2.0);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].0.frame_id, 2);
        assert_eq!(asm.status(PassId::Ao, 1), FrameStatus::Dropped);
    }

    #[test]
    fn conflicting_shape_poisons_frame() {
        let a = frame_datagrams(3, &[1u8; 300]);
        let mut b = frame_datagrams(3, &[1u8; 300]);
        b[1].packet_count = 9;
        let mut asm = Assembler::new(500.0);
        asm.ingest(a[0].clone(), 0.0);
        asm.ingest(b[1].clone(), 0.0);
        asm.advance(1.0);
        assert_eq!(asm.status(PassId::Ao, 3), FrameStatus::Dropped);
    }

    #[test]
    fn pass_loss_independence() {
        // losing every AO packet must not stop a visibility frame
        let vis = PassBuffer::Visibility(VisibilityBuffer {
            width: 100,
            height: 1,
            frame_id: 4,
            pose: test_pose(),
            light_count: 1,
            mode: ShadowMode::Hard,
            bits: vec![1; 100],
        });
        let (header, bytes) = encode_frame(&vis, Codec::Identity);
        let packets = packetize(&header, &bytes, 64).unwrap();
        let mut asm = Assembler::new(500.0);
        for p in packets {
            asm.ingest(p, 0.0);
        }
        // AO frame of the same id never arrives at all
        let done = asm.advance(1.0);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].0.pass, PassId::Visibility);
    }

    proptest! {
        #[test]
        fn packetize_concat_identity(len in 1usize..20_000, cap in 64usize..4096) {
            let bytes: Vec<u8> = (0..len).map(|i| (i * 31 % 251) as u8).collect();
            let buf = ao_buffer(bytes.clone(), len as u32, 1);
            let (mut header, _) = encode_frame(&buf, Codec::Identity);
            header.compressed_size = len as u32;
            let packets = packetize(&header, &bytes, cap).unwrap();
            let mut glued = Vec::new();
            for p in &packets {
                prop_assert!(p.payload.len() <= cap);
                glued.extend_from_slice(&p.payload);
            }
            prop_assert_eq!(glued, bytes);
        }

        #[test]
        fn codec_round_trip(data in proptest::collection::vec(any::<u8>(), 1..4096)) {
            for codec in [Codec::Identity, Codec::Lz4] {
                let compressed = codec.compress(&data);
                let back = Codec::decompress(codec.id(), &compressed, data.len()).unwrap();
                prop_assert_eq!(&back, &data);
            }
        }
    }
}
