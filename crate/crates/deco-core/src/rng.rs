//! Deterministic, splittable randomness.
//!
//! All randomness in the library flows from a single 64-bit seed through
//! [`RngState`]. Streams are derived by *name*, not by draw order, so adding a
//! parameter group to one model variant never shifts the draws of another —
//! this is what keeps non-FFN weights bit-identical across architecture
//! ablations that share a seed.
//!
//! The underlying generator is ChaCha8, a counter-based stream cipher with a
//! platform-independent output stream.

use crate::tensor::{NumericsError, Scalar, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed plus derivation path; cheap to copy, hands out independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child state from a label. Purely a function of
    /// (seed, label): derivation order does not matter.
    pub fn split(&self, label: &str) -> RngState {
        RngState {
            seed: splitmix64(self.seed ^ fnv1a(label.as_bytes())),
        }
    }

    pub fn stream(&self) -> RngStream {
        RngStream {
            chacha: ChaCha8Rng::seed_from_u64(self.seed),
        }
    }
}

/// A concrete draw stream; identical seed gives an identical stream.
pub struct RngStream {
    chacha: ChaCha8Rng,
}

impl RngStream {
    pub fn next_u64(&mut self) -> u64 {
        self.chacha.next_u64()
    }

    /// Uniform in (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; scaled by `std`.
    pub fn normal(&mut self, std: f64) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Samples a tensor with i.i.d. N(0, std^2) entries, deterministically per
/// state.
pub fn init_normal<T: Scalar>(
    shape: &[usize],
    std: f64,
    rng: &RngState,
) -> Result<Tensor<T>, NumericsError> {
    if std <= 0.0 {
        return Err(NumericsError::Invalid(format!(
            "init_normal std must be > 0, got {std}"
        )));
    }
    let mut stream = rng.stream();
    let len: usize = shape.iter().product();
    let data: Vec<T> = (0..len).map(|_| T::from_f64(stream.normal(std))).collect();
    Tensor::from_vec(shape, data)
}
