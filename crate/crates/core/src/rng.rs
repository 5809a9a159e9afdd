//! Seeded, counter-based random streams.
//!
//! Each stream is a ChaCha8 keystream keyed by `seed` with `stream_id` as the
//! nonce, so a draw depends only on `(seed, stream_id, position)` and never on
//! which other streams were consumed first.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// An independent stream derived from this one's identity and `key`.
    /// Does not advance `self`.
    pub fn substream(&self, key: u64) -> Self {
        let id = mix64(self.stream_id.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(31) ^ mix64(key));
        Self::new(self.seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Tensor of i.i.d. standard-normal draws.
    pub fn normal_tensor<E: Element>(&mut self, shape: &[usize]) -> Tensor<E> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| E::from_f64(self.normal())).collect();
        Tensor::from_vec(shape, data).expect("positive extents")
    }

    pub fn uniform_tensor<E: Element>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| E::from_f64(lo + (hi - lo) * self.uniform())).collect();
        Tensor::from_vec(shape, data).expect("positive extents")
    }
}
