//! Counter-based pseudorandom numbers.
//!
//! Every random draw in the merge pipeline is a pure function of
//! `(seed, tensor name, flat index)`, so results never depend on the
//! order in which tensors or elements are visited.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Incremental 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::default();
    h.update(bytes);
    h.finish()
}

/// SplitMix64 output mix.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A keyed stream of uniform draws addressable by index.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    /// Stream for one tensor: the global seed XOR the FNV-1a hash of its name.
    pub fn for_tensor(seed: u64, name: &str) -> Self {
        CounterRng {
            key: mix64(seed ^ fnv1a64(name.as_bytes())),
        }
    }

    pub fn bits(&self, index: u64) -> u64 {
        mix64(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn uniform(&self, index: u64) -> f64 {
        (self.bits(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, 1) with 24 bits, exactly representable in f32.
    pub fn uniform_f32(&self, index: u64) -> f32 {
        (self.bits(index) >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }
}

/// Per-model seed used when one plan seed drives K independent streams.
pub fn model_seed(seed: u64, model: usize) -> u64 {
    seed.wrapping_add(model as u64)
}
