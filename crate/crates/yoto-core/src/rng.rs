//! Seeded, fully specified randomness.
//!
//! Every random choice in the crate flows through [`SeededRng`], a
//! xorshift64* generator. The update equations are fixed here rather than
//! delegated to a platform RNG so that identical seeds produce identical
//! streams on every build and platform:
//!
//! ```text
//! state ^= state >> 12
//! state ^= state << 25
//! state ^= state >> 27
//! output = state * 0x2545F4914F6CDD1D   (wrapping)
//! ```
//!
//! Seeds are first scrambled through one round of SplitMix64
//! (`z = (seed + 0x9E3779B97F4A7C15); z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
//! z = (z ^ z>>27) * 0x94D049BB133111EB; z ^= z>>31`) so that small seeds
//! like 0, 1, 2 still start from well-mixed state. A scrambled seed of zero
//! is replaced by the SplitMix64 increment, since xorshift state must be
//! nonzero.

const SPLITMIX_INC: u64 = 0x9E37_79B9_7F4A_7C15;

/// Deterministic pseudo-random generator (xorshift64*).
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

/// One round of SplitMix64; used for seed scrambling and stream derivation.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(SPLITMIX_INC);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a stream tag.
///
/// Used wherever one configured seed has to fan out into several
/// reproducible streams (per-epoch shuffles, per-task corpora, head init).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut state = splitmix64(seed);
        if state == 0 {
            state = SPLITMIX_INC;
        }
        SeededRng { state }
    }

    /// Next raw 64-bit value per the xorshift64* update above.
    pub fn next_u64(&mut self) -> u64 {
        self.state ^= self.state >> 12;
        self.state ^= self.state << 25;
        self.state ^= self.state >> 27;
        self.state.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in [0, 1) with 53 significant bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Uses 64-bit modulo; the bias is below
    /// n / 2^64 and irrelevant at the sizes used here.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Approximately standard-normal draw via the Irwin-Hall 12-sum:
    /// `z = (sum of 12 uniforms) - 6`. Zero mean and unit variance hold
    /// exactly; only +,* are involved, so the stream is bit-reproducible
    /// on every platform (a Box-Muller ln/cos would not be).
    pub fn next_normal(&mut self) -> f64 {
        let mut acc = 0.0f64;
        for _ in 0..12 {
            acc += self.next_f64();
        }
        acc - 6.0
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
