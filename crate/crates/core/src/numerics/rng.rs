use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded counter-based generator.
///
/// Every named stream is an independent ChaCha8 stream keyed by
/// `(seed, hash(name))`, so the draws a tensor receives do not depend on how
/// many draws other tensors made before it.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for the stream `name` under the same seed.
    pub fn stream(&self, name: &str) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(fnv1a(name.as_bytes()));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    /// Independent generator addressed by integer coordinates.
    pub fn indexed(&self, name: &str, index: &[u64]) -> Rng {
        let mut h = fnv1a(name.as_bytes());
        for &i in index {
            h = fnv1a_extend(h, &i.to_le_bytes());
        }
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(h);
        Rng {
            seed: self.seed,
            inner,
        }
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Standard normal conditioned on `|z| <= 2`.
    pub fn truncated_normal(&mut self) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z;
            }
        }
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(FNV_OFFSET, bytes)
}

fn fnv1a_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_ignore_interleaving() {
        let root = Rng::new(7);
        let mut a = root.stream("a");
        let first: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();

        let mut b = root.stream("b");
        for _ in 0..100 {
            b.next_u64();
        }
        let mut a2 = root.stream("a");
        let second: Vec<u64> = (0..4).map(|_| a2.next_u64()).collect();
        assert_eq!(first, second);
        assert_ne!(first[0], root.stream("b").next_u64());
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut r = Rng::new(3);
        assert!((0..5000).all(|_| r.truncated_normal().abs() <= 2.0));
    }
}
