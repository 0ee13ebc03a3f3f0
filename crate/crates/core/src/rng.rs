//! Deterministic counter-based random streams.
//!
//! Every consumer (weight init, dropout, corpus synthesis) takes its own
//! labeled substream derived from the run seed. Substreams are derived from
//! the stream key, not from the draw position, so adding a new consumer or
//! drawing more values in one place never shifts the values seen elsewhere.
//! Output is a pure function of (key, counter) and therefore identical
//! across runs and platforms.

/// 64-bit finalizer with full avalanche (the splitmix64 output function).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Counter-based generator: `next` hashes an incrementing counter under a
/// fixed stream key.
#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng { key: mix64(seed), counter: 0 }
    }

    /// Independent stream for a named consumer. Derived from the key alone,
    /// so it is unaffected by how much this stream has already produced.
    pub fn substream(&self, label: &str) -> Rng {
        Rng { key: mix64(self.key ^ mix64(fnv1a(label.as_bytes()))), counter: 0 }
    }

    /// Indexed substream, for per-window or per-step streams.
    pub fn substream_n(&self, n: u64) -> Rng {
        Rng { key: mix64(self.key ^ mix64(n ^ 0x5851_F42D_4C95_7F2D)), counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key ^ self.counter.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        self.counter += 1;
        out
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, 1) with 24 random bits.
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    #[inline]
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Draws an index in [0, n).
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    pub fn fill_uniform(&mut self, out: &mut [f32], lo: f32, hi: f32) {
        for v in out {
            *v = self.uniform(lo, hi);
        }
    }
}
