//! Deterministic, splittable random number streams.
//!
//! Replicates, subjects, bandwidth candidates, and optimizer restarts each
//! get their own stream derived from the run seed, so results are identical
//! no matter how work is scheduled across threads. The generator is
//! counter-based (SplitMix64 output function applied to `key + i*GAMMA`),
//! which makes derivation and jumping O(1) and keeps streams cheap to copy
//! into parallel tasks.
//!
//! Not cryptographically secure.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: strong 64-bit avalanche mix.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One independent random stream. `derive` produces a child stream whose
/// output is decorrelated from the parent and from siblings with other tags.
#[derive(Clone, Debug)]
pub struct Stream {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            key: mix64(seed ^ 0x6A09_E667_F3BC_C909),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Child stream for a tagged subtask (replicate index, subject index, ...).
    /// Children with distinct tags never share output with each other or with
    /// the parent's own draw sequence.
    pub fn derive(&self, tag: u64) -> Stream {
        Stream {
            key: mix64(self.key ^ mix64(tag.wrapping_mul(GAMMA) ^ 0xBB67_AE85_84CA_A73B)),
            counter: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform on (0, 1]; safe to pass to `ln`.
    #[inline]
    fn next_f64_pos(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        (((self.next_u64() >> 11) + 1) as f64) / DEN
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Exponential with the given rate (mean 1/rate).
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -self.next_f64_pos().ln() / rate
    }

    /// Standard normal via Box-Muller; the second value of each pair is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let r = (-2.0 * self.next_f64_pos().ln()).sqrt();
        let theta = std::f64::consts::TAU * self.next_f64();
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    /// Classical Laplace L(0, sigma2), parameterized by its variance:
    /// density (1/(sqrt(2) sigma)) exp(-sqrt(2)|x|/sigma). Sampled as the
    /// difference of two unit exponentials scaled to the target variance.
    pub fn laplace(&mut self, sigma2: f64) -> f64 {
        let e1 = self.exponential(1.0);
        let e2 = self.exponential(1.0);
        (e1 - e2) * (sigma2 / 2.0).sqrt()
    }
}
