//! Counter-based Gaussian increments.
//!
//! Every `(seed, path, step)` triple addresses a fixed block of the ChaCha8
//! keystream: the seed keys the cipher, the path selects the stream and the
//! step selects the word offset. Normals come from Box–Muller, which consumes
//! a fixed number of words per pair, so seeking and sequential generation
//! agree bit for bit.

use std::f64::consts::TAU;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words_per_step(m: usize) -> u128 {
    // two u64 (four u32 words) per Box–Muller pair
    4 * m.div_ceil(2) as u128
}

fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn fill_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for pair in out.chunks_mut(2) {
        let u1 = unit_open(rng.next_u64());
        let u2 = unit_open(rng.next_u64());
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        pair[0] = r * c;
        if pair.len() > 1 {
            pair[1] = r * s;
        }
    }
}

/// Standard normal `m`-vector for `(seed, path, step)`.
///
/// Stateless: the same triple always produces the same vector, independent
/// of how many paths exist or in which order they are generated. Scale by
/// `√dt` for a Brownian increment.
pub fn sample_increments(seed: u64, path: u64, step: u64, m: usize) -> Vec<f64> {
    let mut noise = PathNoise::new(seed, path, m);
    noise.seek(step);
    let mut out = vec![0.0; m];
    noise.next_into(&mut out);
    out
}

/// Sequential reader over the increments of one path.
pub(crate) struct PathNoise {
    rng: ChaCha8Rng,
    m: usize,
}

impl PathNoise {
    pub(crate) fn new(seed: u64, path: u64, m: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        rng.set_word_pos(0);
        Self { rng, m }
    }

    pub(crate) fn seek(&mut self, step: u64) {
        self.rng.set_word_pos(step as u128 * words_per_step(self.m));
    }

    pub(crate) fn next_into(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.m);
        fill_normals(&mut self.rng, out);
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for a labelled sub-stream.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x5EED)))
}
