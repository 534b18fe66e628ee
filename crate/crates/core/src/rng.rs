//! Seeded randomness helpers shared by the client stubs and the support-set
//! samplers.
//!
//! Caches and manifests must be reproducible byte for byte, so every source
//! of randomness in this crate goes through the generators below rather than
//! an OS or library RNG. The constructions are pinned exactly:
//!
//! * [`fnv1a64`] is the 64-bit FNV-1a hash (offset `0xcbf29ce484222325`,
//!   prime `0x100000001b3`).
//! * [`SplitMix64`] is the splitmix64 generator, advancing its state by
//!   `0x9e3779b97f4a7c15` per draw.
//! * [`SplitMix64::next_normal`] approximates a standard normal as the sum
//!   of twelve uniforms minus six. This uses only IEEE-754 additions and
//!   multiplications, so the draws are identical on every platform.

/// FNV-1a 64-bit offset basis.
pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
/// FNV-1a 64-bit prime.
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a hash of a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_continue(FNV_OFFSET, bytes)
}

/// Continue an FNV-1a hash from an existing state.
pub fn fnv1a64_continue(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 pseudo-random stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `[0, n)`. `n` must be nonzero.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Approximate standard normal draw: sum of twelve uniforms minus six.
    pub fn next_normal(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.next_f64();
        }
        acc - 6.0
    }
}

/// Derive an independent stream for subtask `key` of a run seeded by `base`.
///
/// The derived seed is one splitmix64 step of `base ^ (key * 0x9e3779b97f4a7c15)`,
/// so streams for different keys are decorrelated even for small seeds.
pub fn derive_stream(base: u64, key: u64) -> SplitMix64 {
    let mut mixer = SplitMix64::new(base ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let seed = mixer.next_u64();
    SplitMix64::new(seed)
}
