//! Counter-based deterministic sampling.
//!
//! Every random draw in the tracer comes from a stream keyed by
//! (seed, frame id, pixel index, stream tag). Identical keys yield
//! identical sequences, so tracing may be tiled or parallelized freely
//! without changing results, and reruns are bit-identical.

/// Stream tag for shadow rays toward light `i`: `TAG_SHADOW_BASE + i`.
pub const TAG_SHADOW_BASE: u32 = 0x5150;
/// Stream tag for ambient-occlusion hemisphere rays.
pub const TAG_AO: u32 = 0xA0;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One splitmix64 scramble of a key (used to combine key material).
#[inline]
pub fn hash64(x: u64) -> u64 {
    let mut s = x;
    splitmix64(&mut s)
}

/// Per-frame sampler root: seed plus the frame counter hashed together.
#[derive(Clone, Copy, Debug)]
pub struct SamplerState {
    seed: u64,
    frame_id: u64,
}

impl SamplerState {
    pub fn for_frame(seed: u64, frame_id: u64) -> Self {
        SamplerState { seed, frame_id }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frame_id(&self) -> u64 {
        self.frame_id
    }

    /// Deterministic stream for one pixel and purpose.
    pub fn pixel_stream(&self, pixel_index: u64, tag: u32) -> PixelRng {
        let mut k = hash64(self.seed ^ 0xD1F7_5E5E_5E5E_5E5Eu64);
        k = hash64(k ^ self.frame_id);
        k = hash64(k ^ pixel_index);
        k = hash64(k ^ u64::from(tag).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        PixelRng { state: k }
    }
}

/// Small counter-based generator; the state advances by a fixed stride so
/// the i-th draw is a pure function of (key, i).
#[derive(Clone, Copy, Debug)]
pub struct PixelRng {
    state: u64,
}

impl PixelRng {
    pub fn from_key(key: u64) -> Self {
        PixelRng { state: hash64(key) }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32) * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in [0, 1) with 53-bit mantissa.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn next_2d(&mut self) -> (f32, f32) {
        (self.next_f32(), self.next_f32())
    }
}
