//! Hierarchical Brownian increments on a dyadic grid.
//!
//! A lattice stores, per particle, the `2^L` finest-level increments of a
//! `dim`-dimensional Brownian motion on `[0, horizon]`. Increments at any
//! coarser dyadic level are block sums of the finest ones, so every level of
//! a lattice sees the same underlying path: runs at different step sizes are
//! pathwise coupled by construction.
//!
//! Randomness is counter-based: the draw for (particle, step) comes from its
//! own ChaCha stream keyed by `(seed, particle, step)`, so the lattice is
//! reproducible for a fixed seed regardless of build order or threading.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Hard cap on the refinement depth; `2^26` increments per particle is the
/// largest lattice that fits comfortably in memory.
pub const MAX_LEVELS: u32 = 26;

/// Brownian increments for all particles at the finest dyadic level.
#[derive(Clone, Debug)]
pub struct NoiseLattice {
    seed: u64,
    horizon: f64,
    levels: u32,
    dim: usize,
    /// Per particle: `2^levels * dim` values, row-major by step.
    increments: Vec<Vec<f64>>,
}

impl NoiseLattice {
    /// Samples a lattice: `2^levels` i.i.d. `N(0, h_min I_dim)` increments
    /// per particle, `h_min = horizon / 2^levels`.
    pub fn build(
        seed: u64,
        horizon: f64,
        levels: u32,
        particles: usize,
        dim: usize,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise lattice: horizon {horizon} must be finite and > 0"
            )));
        }
        if levels > MAX_LEVELS {
            return Err(Error::InvalidArgument(format!(
                "noise lattice: level {levels} exceeds the cap {MAX_LEVELS}"
            )));
        }
        if particles == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "noise lattice: particles and dim must be >= 1".into(),
            ));
        }
        let steps = 1usize << levels;
        let scale = (horizon / steps as f64).sqrt();
        let mut increments = Vec::with_capacity(particles);
        for particle in 0..particles {
            let mut path = Vec::with_capacity(steps * dim);
            for step in 0..steps {
                let mut rng = cell_rng(seed, particle, step);
                for _ in 0..dim {
                    path.push(scale * rng.sample::<f64, _>(StandardNormal));
                }
            }
            increments.push(path);
        }
        Ok(Self {
            seed,
            horizon,
            levels,
            dim,
            increments,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Finest refinement level `L`.
    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn particles(&self) -> usize {
        self.increments.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of finest-level steps `2^L`.
    pub fn steps(&self) -> usize {
        1 << self.levels
    }

    /// Finest step size.
    pub fn h_min(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    /// Raw finest increments of one particle, row-major by step.
    pub fn finest(&self, particle: usize) -> &[f64] {
        &self.increments[particle]
    }

    /// Finest increment of one particle at one step.
    pub fn finest_increment(&self, particle: usize, step: usize) -> &[f64] {
        &self.increments[particle][step * self.dim..(step + 1) * self.dim]
    }

    /// Aggregates the finest increments to level `level` by block summation
    /// in index order. The same path, viewed at a coarser step size.
    pub fn increments_at_level(&self, level: u32) -> Result<LevelIncrements> {
        if level > self.levels {
            return Err(Error::InvalidArgument(format!(
                "increments_at_level: level {level} exceeds lattice level {}",
                self.levels
            )));
        }
        let block = 1usize << (self.levels - level);
        let coarse_steps = 1usize << level;
        let dim = self.dim;
        let mut data = Vec::with_capacity(self.particles());
        for path in &self.increments {
            let mut coarse = vec![0.0; coarse_steps * dim];
            for (n, chunk) in coarse.chunks_mut(dim).enumerate() {
                let base = n * block;
                for b in 0..block {
                    let fine = &path[(base + b) * dim..(base + b + 1) * dim];
                    for (acc, v) in chunk.iter_mut().zip(fine) {
                        *acc += v;
                    }
                }
            }
            data.push(coarse);
        }
        Ok(LevelIncrements { level, dim, data })
    }

    /// Brownian path value `W(t)` of one particle at a finest grid node,
    /// accumulated in index order from zero. Rejects off-grid times.
    pub fn path_value(&self, particle: usize, t: f64) -> Result<DVector<f64>> {
        if particle >= self.particles() {
            return Err(Error::InvalidArgument(format!(
                "path_value: particle {particle} out of range"
            )));
        }
        let node = self.grid_node(t)?;
        let mut w = DVector::zeros(self.dim);
        let path = &self.increments[particle];
        for step in 0..node {
            for (acc, v) in w.iter_mut().zip(&path[step * self.dim..(step + 1) * self.dim]) {
                *acc += v;
            }
        }
        Ok(w)
    }

    /// Maps a time to its finest grid index, rejecting off-grid values.
    pub fn grid_node(&self, t: f64) -> Result<usize> {
        let h = self.h_min();
        let k = (t / h).round();
        if k < 0.0 || k > self.steps() as f64 {
            return Err(Error::InvalidArgument(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        if (t - k * h).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "time {t} is not a finest grid node (h_min = {h})"
            )));
        }
        Ok(k as usize)
    }
}

/// One particle-indexed family of increments at a fixed dyadic level.
#[derive(Clone, Debug)]
pub struct LevelIncrements {
    level: u32,
    dim: usize,
    data: Vec<Vec<f64>>,
}

impl LevelIncrements {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn steps(&self) -> usize {
        1 << self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Increment of `particle` over coarse step `step`.
    pub fn increment(&self, particle: usize, step: usize) -> &[f64] {
        &self.data[particle][step * self.dim..(step + 1) * self.dim]
    }
}

fn cell_rng(seed: u64, particle: usize, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((particle as u64) << 32) | step as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = NoiseLattice::build(11, 1.0, 6, 3, 2).unwrap();
        let b = NoiseLattice::build(11, 1.0, 6, 3, 2).unwrap();
        assert_eq!(a.finest(0), b.finest(0));
        assert_eq!(a.finest(2), b.finest(2));
        let c = NoiseLattice::build(12, 1.0, 6, 3, 2).unwrap();
        assert_ne!(a.finest(0), c.finest(0));
    }

    #[test]
    fn particles_get_distinct_streams() {
        let l = NoiseLattice::build(5, 1.0, 8, 4, 1).unwrap();
        for j in 1..4 {
            assert_ne!(l.finest(0), l.finest(j));
        }
    }

    #[test]
    fn adjacent_pair_sums_are_exact() {
        let l = NoiseLattice::build(3, 2.0, 7, 2, 3).unwrap();
        let coarse = l.increments_at_level(6).unwrap();
        for j in 0..2 {
            for n in 0..coarse.steps() {
                let left = l.finest_increment(j, 2 * n);
                let right = l.finest_increment(j, 2 * n + 1);
                for d in 0..3 {
                    let expect = left[d] + right[d];
                    assert_eq!(coarse.increment(j, n)[d], expect);
                }
            }
        }
    }

    #[test]
    fn aggregation_telescopes_across_levels() {
        let l = NoiseLattice::build(9, 1.0, 10, 2, 2).unwrap();
        let mid = l.increments_at_level(6).unwrap();
        let coarse = l.increments_at_level(4).unwrap();
        // Re-aggregating the mid level reproduces the coarse level.
        for j in 0..2 {
            for n in 0..coarse.steps() {
                let mut acc = [0.0f64; 2];
                for b in 0..4 {
                    let inc = mid.increment(j, 4 * n + b);
                    acc[0] += inc[0];
                    acc[1] += inc[1];
                }
                let direct = coarse.increment(j, n);
                assert!((acc[0] - direct[0]).abs() < 1e-12);
                assert!((acc[1] - direct[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn endpoint_consistent_at_every_level() {
        let l = NoiseLattice::build(21, 1.5, 9, 2, 2).unwrap();
        let end = l.path_value(1, 1.5).unwrap();
        for level in [0u32, 3, 7, 9] {
            let inc = l.increments_at_level(level).unwrap();
            let mut acc = DVector::zeros(2);
            for n in 0..inc.steps() {
                for (a, v) in acc.iter_mut().zip(inc.increment(1, n)) {
                    *a += v;
                }
            }
            assert!((&acc - &end).amax() < 1e-12, "level {level}");
        }
    }

    #[test]
    fn path_value_prefix_sums() {
        let l = NoiseLattice::build(4, 1.0, 5, 1, 2).unwrap();
        assert_eq!(l.path_value(0, 0.0).unwrap(), DVector::zeros(2));
        let h = l.h_min();
        let w1 = l.path_value(0, h).unwrap();
        let inc0 = l.finest_increment(0, 0);
        assert_eq!(w1[0], inc0[0]);
        assert_eq!(w1[1], inc0[1]);
        let w2 = l.path_value(0, 2.0 * h).unwrap();
        let inc1 = l.finest_increment(0, 1);
        assert!((w2[0] - (inc0[0] + inc1[0])).abs() < 1e-15);
        assert!((w2[1] - (inc0[1] + inc1[1])).abs() < 1e-15);
    }

    #[test]
    fn off_grid_times_rejected() {
        let l = NoiseLattice::build(4, 1.0, 3, 1, 1).unwrap();
        assert!(l.path_value(0, 0.1).is_err());
        assert!(l.path_value(0, -0.125).is_err());
        assert!(l.path_value(0, 1.0 + 0.125).is_err());
        assert!(l.path_value(0, 0.125).is_ok());
    }

    #[test]
    fn increment_variance_matches_step_size() {
        // Statistical check with a fixed seed: the per-coordinate variance of
        // finest increments is h_min within a few relative standard errors.
        let l = NoiseLattice::build(77, 1.0, 12, 4, 1).unwrap();
        let n = l.steps() * 4;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for j in 0..4 {
            for v in l.finest(j) {
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let h = l.h_min();
        let rel_se = (2.0 / n as f64).sqrt();
        assert!(
            (var / h - 1.0).abs() < 5.0 * rel_se,
            "var/h = {}, rel_se = {rel_se}",
            var / h
        );
        assert!(mean.abs() < 5.0 * (h / n as f64).sqrt());
    }

    #[test]
    fn coarse_level_variance_scales() {
        let l = NoiseLattice::build(123, 1.0, 10, 2, 1).unwrap();
        let inc = l.increments_at_level(5).unwrap();
        let n = inc.steps() * 2;
        let mut sumsq = 0.0;
        for j in 0..2 {
            for s in 0..inc.steps() {
                sumsq += inc.increment(j, s)[0].powi(2);
            }
        }
        let var = sumsq / n as f64;
        let h_level = 1.0 / 32.0;
        assert!((var / h_level - 1.0).abs() < 0.6, "var = {var}");
    }

    #[test]
    fn build_validations() {
        assert!(NoiseLattice::build(0, 0.0, 4, 1, 1).is_err());
        assert!(NoiseLattice::build(0, 1.0, 27, 1, 1).is_err());
        assert!(NoiseLattice::build(0, 1.0, 4, 0, 1).is_err());
        assert!(NoiseLattice::build(0, 1.0, 4, 1, 0).is_err());
        let l = NoiseLattice::build(0, 1.0, 4, 1, 1).unwrap();
        assert!(l.increments_at_level(5).is_err());
    }
}
