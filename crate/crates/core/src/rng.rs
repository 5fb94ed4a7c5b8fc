//! Per-trajectory random streams.
//!
//! Every trajectory gets its own ChaCha stream selected by its index, so the
//! noise it sees does not depend on which worker runs it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Wiener-increment source for one trajectory.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(master_seed: u64, trajectory: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(trajectory);
        Self { rng }
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Increment with variance `dt`.
    #[inline]
    pub fn wiener(&mut self, sqrt_dt: f64) -> f64 {
        self.normal() * sqrt_dt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<f64> = (0..5)
            .map({
                let mut s = NoiseStream::new(7, 3);
                move |_| s.normal()
            })
            .collect();
        let mut s = NoiseStream::new(7, 3);
        let b: Vec<f64> = (0..5).map(|_| s.normal()).collect();
        assert_eq!(a, b);
        let mut t = NoiseStream::new(7, 4);
        assert_ne!(a[0], t.normal());
    }

    #[test]
    fn wiener_variance() {
        let mut s = NoiseStream::new(1, 0);
        let n = 200_000;
        let dt: f64 = 1e-3;
        let var = (0..n).map(|_| s.wiener(dt.sqrt()).powi(2)).sum::<f64>() / n as f64;
        assert!((var / dt - 1.0).abs() < 0.02);
    }
}
