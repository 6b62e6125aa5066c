//! Counter-based random numbers. Every draw is a pure function of
//! (seed, level, node key, stream), so trees can be grown in any order and to
//! any depth without changing the labels that were already drawn.

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Hash of a key tuple.
#[inline]
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &w in words {
        h = mix64(h.wrapping_add(GOLDEN) ^ w);
    }
    h
}

/// Key of child `letter` of the node with key `parent`.
#[inline]
pub fn child_key(parent: u64, letter: u32) -> u64 {
    mix64(parent.wrapping_mul(GOLDEN) ^ (letter as u64).wrapping_add(0x5851_f42d_4c95_7f2d))
}

/// Small splitmix stream started from a key.
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
}

impl Stream {
    pub fn new(seed: u64, level: u64, key: u64, stream: u64) -> Self {
        Stream {
            state: hash_words(&[seed, level, key, stream]),
        }
    }

    pub fn from_state(state: u64) -> Self {
        Stream { state }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Index drawn from a discrete distribution given by cumulative weights.
    pub fn pick(&mut self, cumulative: &[f64]) -> usize {
        let u = self.uniform() * cumulative.last().copied().unwrap_or(1.0);
        cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(cumulative.len() - 1)
    }

    /// Uniform integer in 0..n.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }
}

/// Seed of replicate `i` of a run.
pub fn replicate_seed(seed: u64, i: u64) -> u64 {
    hash_words(&[seed, 0x7265_706c, i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_key_sensitive() {
        let a = Stream::new(1, 2, 3, 0).next_u64();
        assert_eq!(a, Stream::new(1, 2, 3, 0).next_u64());
        assert_ne!(a, Stream::new(1, 2, 4, 0).next_u64());
        assert_ne!(a, Stream::new(1, 3, 3, 0).next_u64());
        assert_ne!(a, Stream::new(2, 2, 3, 0).next_u64());
        assert_ne!(child_key(7, 1), child_key(7, 2));
    }

    #[test]
    fn uniform_moments() {
        let mut s = Stream::new(9, 0, 0, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.uniform()).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.005);
        assert!((v - 1.0 / 12.0).abs() < 0.002);
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn pick_follows_weights() {
        let mut s = Stream::new(3, 0, 0, 0);
        let cum = [0.5, 0.75, 0.75, 1.0];
        let mut c = [0usize; 4];
        for _ in 0..100_000 {
            c[s.pick(&cum)] += 1;
        }
        assert_eq!(c[2], 0);
        assert!((c[0] as f64 / 1e5 - 0.5).abs() < 0.01);
        assert!((c[1] as f64 / 1e5 - 0.25).abs() < 0.01);
    }
}
