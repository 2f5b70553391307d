use rand::distr::Open01;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Deterministic random stream with labelled, position-independent splits.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`RngState`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub word_pos: u128,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `(seed, label)`; unaffected by how much of the
    /// parent has been consumed.
    pub fn split(&self, label: &str) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(fnv1a(label))))
    }

    /// Child stream keyed by `(seed, label, index)`.
    pub fn split_indexed(&self, label: &str, index: u64) -> RngState {
        self.split(label).split(&index.to_string())
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(snap: RngSnapshot) -> Self {
        let mut state = Self::new(snap.seed);
        state.inner.set_word_pos(snap.word_pos);
        state
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        self.inner.sample(Open01)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..=hi)
    }

    /// Draw an index from a categorical distribution given by `probs`.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u: f64 = self.inner.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// The standard Gumbel transform `−ln(−ln u)`.
pub fn gumbel_transform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// I.i.d. standard Gumbel(0, 1) samples.
pub fn sample_gumbel(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| gumbel_transform(rng.uniform_open())).collect();
    Tensor::new(data, shape).expect("length matches shape")
}
