//! Seeded randomness.
//!
//! Every random decision in the crate draws from [`Rng`], a ChaCha8 stream
//! generator (the 8-round ChaCha block function used as a counter-based
//! generator). A 64-bit seed is expanded to the 256-bit key with PCG32 as
//! specified by `rand_core::SeedableRng::seed_from_u64`. Outputs are
//! portable: only fixed-width draws are used, never `usize` ranges.

use std::collections::HashSet;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Result, RtaError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Resumable generator position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for a sub-task, keyed by `(seed, key)`: same key,
    /// same stream regardless of how much the parent has been consumed.
    pub fn derive(seed: u64, key: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(key);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng {
            seed: state.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        self.inner.random_range(0..n as u64) as usize
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    /// `rows × cols` matrix of `N(0, std²)` entries.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f32) -> Tensor {
        let data = (0..rows * cols).map(|_| self.normal() * std).collect();
        Tensor::matrix(rows, cols, data).expect("shape matches data")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Draws `count` distinct ids uniformly from `[0, catalog_size) ∖ exclude`.
pub fn sample_negatives(catalog_size: usize, exclude: &[usize], count: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let excluded: HashSet<usize> = exclude.iter().copied().filter(|&s| s < catalog_size).collect();
    let available = catalog_size - excluded.len();
    if count > available {
        return Err(RtaError::Domain(format!(
            "cannot sample {count} negatives: only {available} of {catalog_size} songs are eligible"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }

    if 2 * (count + excluded.len()) <= catalog_size {
        // sparse regime: rejection sampling accepts with probability ≥ 1/2
        let mut chosen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let s = rng.below(catalog_size);
            if !excluded.contains(&s) && chosen.insert(s) {
                out.push(s);
            }
        }
        Ok(out)
    } else {
        let mut pool: Vec<usize> = (0..catalog_size).filter(|s| !excluded.contains(s)).collect();
        for i in 0..count {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        Ok(pool)
    }
}
