//! Counter-based deterministic PRNG.
//!
//! Every draw is a pure function of (seed, stream, counter), so output is
//! bitwise identical across runs, platforms, and thread counts. Streams
//! keep independent consumers (latent noise, projection weights, word
//! embeddings) from colliding on the same counter range.

/// splitmix64 finalizer, the mixing core of the generator.
#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a over bytes, used to key streams by string (e.g. word text).
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Counter-based generator: state never mutates hidden entropy, only the
/// counter advances.
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        // Decorrelate seed and stream before they enter the counter mix.
        let key = splitmix64(seed ^ splitmix64(stream));
        Self { key, counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.key ^ splitmix64(self.counter));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in the open interval (0, 1), safe for log().
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        // 53 mantissa bits, then shift off zero.
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        u + f64::EPSILON
    }

    /// Standard normal via Box-Muller. One draw consumes two uniforms so
    /// the counter advances identically whether or not the pair partner
    /// is used.
    #[inline]
    pub fn next_normal(&mut self) -> f32 {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos()) as f32
    }

    /// Fill a vector with standard normals.
    pub fn normals(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.next_normal()).collect()
    }
}

/// Stream identifiers for the fixed consumers of the engine.
pub mod stream {
    pub const LATENT: u64 = 0x01;
    pub const EMBED_ROLE: u64 = 0x02;
    pub const EMBED_WORD: u64 = 0x03;
    pub const WEIGHTS: u64 = 0x04;
    pub const AUG_PROJ: u64 = 0x05;
}
