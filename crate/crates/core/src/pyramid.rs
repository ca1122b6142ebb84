//! The hashed probability pyramid.
//!
//! A multiscale piecewise-constant density on `[0,1]^D` written as a product
//! of per-level factors. Level 0 is one softmax over `N0^D` bins; every finer
//! level is made of `2^D` blocks, each normalized to integrate to 1 over the
//! parent bin it subdivides, so the product integrates to exactly 1 with no
//! global constant. Fine levels own at most `budget` distinct blocks, tiled
//! over the parent grid by an XOR spatial hash.
//!
//! Storage is always unnormalized logits; masses are produced on demand by
//! per-block exp-normalization (see [`normalize_block`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial-hash multipliers shared with the attribute table. The first `D`
/// are used for a `D`-dimensional index.
pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Sparse gradient over global pyramid parameter indices.
pub type SparseGrad = Vec<(u32, f64)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    /// Spatial dimension, 1..=3.
    pub dims: usize,
    /// Number of levels L >= 1.
    pub levels: usize,
    /// Level-0 resolution per axis, >= 2. Level l has resolution `N0 << l`.
    pub base_resolution: u32,
    /// Maximum distinct child blocks per refinement level.
    pub budget: u64,
}

impl PyramidConfig {
    pub fn new(dims: usize, levels: usize, base_resolution: u32, budget: u64) -> Result<Self> {
        let cfg = PyramidConfig {
            dims,
            levels,
            base_resolution,
            budget,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dims) {
            return Err(Error::config(format!("dims must be 1..=3, got {}", self.dims)));
        }
        if self.levels < 1 {
            return Err(Error::config("levels must be >= 1"));
        }
        if self.base_resolution < 2 {
            return Err(Error::config("base_resolution must be >= 2"));
        }
        if self.budget < 1 {
            return Err(Error::config("budget must be >= 1"));
        }
        // Finest resolution and its D-th power must stay representable.
        let finest = (self.base_resolution as u64)
            .checked_shl(self.levels as u32 - 1)
            .filter(|&n| n <= u32::MAX as u64)
            .ok_or_else(|| Error::config("finest resolution overflows index type"))?;
        finest
            .checked_pow(self.dims as u32)
            .ok_or_else(|| Error::config("finest bin count overflows index type"))?;
        Ok(())
    }

    /// Per-axis resolution of level `level`.
    pub fn resolution(&self, level: usize) -> u32 {
        debug_assert!(level < self.levels);
        self.base_resolution << level
    }

    pub fn finest_resolution(&self) -> u32 {
        self.resolution(self.levels - 1)
    }

    /// Entries per refinement block (2^D).
    pub fn block_size(&self) -> usize {
        1 << self.dims
    }

    /// Number of parent bins feeding level `level` (level >= 1).
    pub fn parent_bins(&self, level: usize) -> u64 {
        (self.resolution(level - 1) as u64).pow(self.dims as u32)
    }

    /// Number of stored blocks at refinement level `level` (level >= 1).
    pub fn num_blocks(&self, level: usize) -> u64 {
        self.parent_bins(level).min(self.budget)
    }

    /// A level is dense when every parent bin owns its own block.
    pub fn is_dense(&self, level: usize) -> bool {
        self.parent_bins(level) <= self.budget
    }

    pub fn level0_bins(&self) -> usize {
        (self.base_resolution as u64).pow(self.dims as u32) as usize
    }

    pub fn finest_bins(&self) -> u64 {
        (self.finest_resolution() as u64).pow(self.dims as u32)
    }
}

/// A bin of the level-`level` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinIndex {
    pub level: usize,
    /// Only the first `dims` entries are meaningful; the rest are zero.
    pub coords: [u32; 3],
}

impl BinIndex {
    pub fn new(level: usize, coords: [u32; 3]) -> Self {
        BinIndex { level, coords }
    }

    /// x-fastest linear index at resolution `n`.
    pub fn linear(&self, n: u32, dims: usize) -> u64 {
        let mut idx = 0u64;
        for d in (0..dims).rev() {
            idx = idx * n as u64 + self.coords[d] as u64;
        }
        idx
    }

    pub fn from_linear(level: usize, n: u32, dims: usize, mut idx: u64) -> Self {
        let mut coords = [0u32; 3];
        for c in coords.iter_mut().take(dims) {
            *c = (idx % n as u64) as u32;
            idx /= n as u64;
        }
        BinIndex { level, coords }
    }

    /// The level-`level` ancestor of a finer bin.
    pub fn ancestor(&self, level: usize) -> BinIndex {
        debug_assert!(level <= self.level);
        let shift = (self.level - level) as u32;
        let mut coords = [0u32; 3];
        for d in 0..3 {
            coords[d] = self.coords[d] >> shift;
        }
        BinIndex { level, coords }
    }

    /// Child offset bits (one per axis) this bin selects within its parent.
    pub fn child_offset(&self, dims: usize) -> usize {
        let mut off = 0;
        for d in 0..dims {
            off |= ((self.coords[d] & 1) as usize) << d;
        }
        off
    }

    /// Center of the bin in `[0,1)^D`.
    pub fn center(&self, n: u32) -> [f64; 3] {
        let mut c = [0.0; 3];
        for d in 0..3 {
            c[d] = (self.coords[d] as f64 + 0.5) / n as f64;
        }
        c
    }
}

/// Exp-normalize one block of logits into masses summing to 1.
///
/// Invariant to adding a constant to all logits. Rejects non-finite input.
pub fn normalize_block(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {bad}")));
    }
    let mut masses = vec![0.0; logits.len()];
    normalize_block_into(logits, &mut masses);
    Ok(masses)
}

pub(crate) fn normalize_block_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Block id at refinement level `level` owned by `parent` (a level-1 bin
/// index). Identity when the level is dense, XOR-mod otherwise.
pub fn hash_block(config: &PyramidConfig, level: usize, parent: &BinIndex) -> u64 {
    debug_assert!(level >= 1 && level < config.levels);
    debug_assert_eq!(parent.level, level - 1);
    if config.is_dense(level) {
        parent.linear(config.resolution(level - 1), config.dims)
    } else {
        let mut h = 0u64;
        for d in 0..config.dims {
            h ^= (parent.coords[d] as u64).wrapping_mul(HASH_PRIMES[d]);
        }
        h % config.budget
    }
}

/// Free parameter count of the pyramid.
///
/// One softmax constraint per stored block: `(N0^D - 1)` at level 0 plus
/// `num_blocks(l) * (2^D - 1)` per refinement level. With an unlimited budget
/// this telescopes to `N_{L-1}^D - 1`.
pub fn dof_count(config: &PyramidConfig) -> u64 {
    let mut dof = config.level0_bins() as u64 - 1;
    for level in 1..config.levels {
        dof += config.num_blocks(level) * (config.block_size() as u64 - 1);
    }
    dof
}

/// Logit storage for the whole pyramid.
///
/// All parameters live in one flat vector: level-0 logits first, then each
/// refinement level's blocks in level order. Gradient code addresses
/// parameters by their flat index.
#[derive(Clone, Debug)]
pub struct HashedProbabilityPyramid {
    config: PyramidConfig,
    params: Vec<f64>,
    level_offsets: Vec<usize>,
}

impl HashedProbabilityPyramid {
    /// All-zero logits: the uniform density.
    pub fn new_uniform(config: PyramidConfig) -> Result<Self> {
        config.validate()?;
        let mut level_offsets = Vec::with_capacity(config.levels);
        let mut total = config.level0_bins();
        level_offsets.push(0);
        for level in 1..config.levels {
            level_offsets.push(total);
            total += config.num_blocks(level) as usize * config.block_size();
        }
        Ok(HashedProbabilityPyramid {
            config,
            params: vec![0.0; total],
            level_offsets,
        })
    }

    pub fn from_params(config: PyramidConfig, params: Vec<f64>) -> Result<Self> {
        let mut py = Self::new_uniform(config)?;
        if params.len() != py.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} pyramid parameters, got {}",
                py.params.len(),
                params.len()
            )));
        }
        py.params = params;
        Ok(py)
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.config
    }

    pub fn total_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Flat offset of the first parameter of `level`.
    pub fn level_offset(&self, level: usize) -> usize {
        self.level_offsets[level]
    }

    /// Flat index of logit `entry` in `block` of `level` (level >= 1), or of
    /// the linearized bin at level 0 (block ignored).
    pub fn param_index(&self, level: usize, block: u64, entry: usize) -> usize {
        if level == 0 {
            entry
        } else {
            self.level_offsets[level] + block as usize * self.config.block_size() + entry
        }
    }

    /// Normalize every block once, producing a read-only view for sampling,
    /// density evaluation, and scores.
    pub fn dist(&self) -> PyramidDist<'_> {
        let mut masses = vec![0.0; self.params.len()];
        let n0 = self.config.level0_bins();
        normalize_block_into(&self.params[..n0], &mut masses[..n0]);
        let bs = self.config.block_size();
        for level in 1..self.config.levels {
            let off = self.level_offsets[level];
            let nblocks = self.config.num_blocks(level) as usize;
            for b in 0..nblocks {
                let s = off + b * bs;
                normalize_block_into(&self.params[s..s + bs], &mut masses[s..s + bs]);
            }
        }
        PyramidDist {
            pyramid: self,
            masses,
        }
    }
}

/// Frozen normalized view of a pyramid. All reads are pure; share freely
/// across threads.
pub struct PyramidDist<'a> {
    pyramid: &'a HashedProbabilityPyramid,
    masses: Vec<f64>,
}

impl<'a> PyramidDist<'a> {
    pub fn config(&self) -> &PyramidConfig {
        &self.pyramid.config
    }

    pub fn pyramid(&self) -> &HashedProbabilityPyramid {
        self.pyramid
    }

    pub fn level0_masses(&self) -> &[f64] {
        &self.masses[..self.pyramid.config.level0_bins()]
    }

    /// Masses of one 2^D block at refinement level `level`.
    pub fn block_masses(&self, level: usize, block: u64) -> &[f64] {
        let bs = self.pyramid.config.block_size();
        let s = self.pyramid.level_offsets[level] + block as usize * bs;
        &self.masses[s..s + bs]
    }

    /// Finest-level bin containing `mu`.
    pub fn finest_bin_of(&self, mu: &[f64; 3]) -> BinIndex {
        let cfg = self.config();
        let n = cfg.finest_resolution();
        let mut coords = [0u32; 3];
        for d in 0..cfg.dims {
            coords[d] = ((mu[d] * n as f64).floor() as i64).clamp(0, n as i64 - 1) as u32;
        }
        BinIndex::new(cfg.levels - 1, coords)
    }

    /// Product density at `mu` in `[0,1)^D`.
    pub fn density(&self, mu: &[f64; 3]) -> Result<f64> {
        let cfg = self.config();
        for d in 0..cfg.dims {
            if !(0.0..1.0).contains(&mu[d]) {
                return Err(Error::Domain(format!("mu[{d}] = {} not in [0,1)", mu[d])));
            }
        }
        let finest = self.finest_bin_of(mu);
        Ok(self.bin_mass(&finest) * cfg.finest_bins() as f64)
    }

    /// Exact probability mass of a finest-level bin: the product of the
    /// block-normalized masses along its ancestor path.
    pub fn bin_mass(&self, finest: &BinIndex) -> f64 {
        let cfg = self.config();
        debug_assert_eq!(finest.level, cfg.levels - 1);
        let l0 = finest.ancestor(0);
        let mut mass = self.level0_masses()[l0.linear(cfg.base_resolution, cfg.dims) as usize];
        for level in 1..cfg.levels {
            let parent = finest.ancestor(level - 1);
            let block = hash_block(cfg, level, &parent);
            let child = finest.ancestor(level);
            mass *= self.block_masses(level, block)[child.child_offset(cfg.dims)];
        }
        mass
    }

    /// Log-probability of a finest bin plus the sparse score d(log p)/d(logits).
    ///
    /// The score touches exactly the blocks along the ancestor path. Within a
    /// block the selected entry gets `1 - mass(selected)` and every other
    /// entry `-mass(entry)`, so each block's entries sum to zero.
    pub fn log_prob_and_score(&self, finest: &BinIndex) -> (f64, SparseGrad) {
        let cfg = self.config();
        debug_assert_eq!(finest.level, cfg.levels - 1);
        let mut score = Vec::with_capacity(cfg.level0_bins() + (cfg.levels - 1) * cfg.block_size());
        let mut log_prob = 0.0;

        let l0 = finest.ancestor(0);
        let sel0 = l0.linear(cfg.base_resolution, cfg.dims) as usize;
        let m0 = self.level0_masses();
        log_prob += m0[sel0].ln();
        for (j, &m) in m0.iter().enumerate() {
            let g = if j == sel0 { 1.0 - m } else { -m };
            score.push((j as u32, g));
        }

        for level in 1..cfg.levels {
            let parent = finest.ancestor(level - 1);
            let block = hash_block(cfg, level, &parent);
            let sel = finest.ancestor(level).child_offset(cfg.dims);
            let masses = self.block_masses(level, block);
            log_prob += masses[sel].ln();
            for (j, &m) in masses.iter().enumerate() {
                let g = if j == sel { 1.0 - m } else { -m };
                score.push((self.pyramid.param_index(level, block, j) as u32, g));
            }
        }
        (log_prob, score)
    }

    /// Iterate every finest-level bin.
    pub fn finest_bin_iter(&self) -> impl Iterator<Item = BinIndex> + '_ {
        let cfg = self.config();
        let n = cfg.finest_resolution();
        let dims = cfg.dims;
        let level = cfg.levels - 1;
        (0..cfg.finest_bins()).map(move |i| BinIndex::from_linear(level, n, dims, i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(dims: usize, levels: usize, n0: u32, budget: u64) -> PyramidConfig {
        PyramidConfig::new(dims, levels, n0, budget).unwrap()
    }

    fn random_pyramid(config: PyramidConfig, seed: u64) -> HashedProbabilityPyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut py = HashedProbabilityPyramid::new_uniform(config).unwrap();
        for p in py.params_mut() {
            *p = rng.gen_range(-2.0..2.0);
        }
        py
    }

    #[test]
    fn normalize_uniform_block() {
        assert_eq!(normalize_block(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn normalize_hand_case() {
        let m = normalize_block(&[3f64.ln(), 1f64.ln()]).unwrap();
        assert_abs_diff_eq!(m[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn normalize_shift_invariant_and_sums_to_one() {
        let logits = [0.3, -1.2, 2.4, 0.0];
        let a = normalize_block(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|l| l + 7.0).collect();
        let b = normalize_block(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(a.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn normalize_rejects_non_finite() {
        assert!(normalize_block(&[0.0, f64::NAN]).is_err());
        assert!(normalize_block(&[0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn hash_zero_parent_is_zero() {
        let c = cfg(3, 4, 2, 3);
        for level in 1..4 {
            assert_eq!(hash_block(&c, level, &BinIndex::new(level - 1, [0, 0, 0])), 0);
        }
    }

    #[test]
    fn hash_dense_level_is_identity() {
        let c = cfg(3, 2, 4, 1 << 20);
        let parent = BinIndex::new(0, [2, 3, 1]);
        // x-fastest linearization at resolution 4.
        assert_eq!(hash_block(&c, 1, &parent), 2 + 3 * 4 + 16);
    }

    #[test]
    fn hash_single_term_xor() {
        let c = cfg(3, 2, 4, 3); // parent_bins = 64 > 3 => hashed
        assert!(!c.is_dense(1));
        assert_eq!(hash_block(&c, 1, &BinIndex::new(0, [1, 0, 0])), 1 % 3);
    }

    #[test]
    fn hash_is_deterministic() {
        let c = cfg(3, 3, 2, 5);
        let parent = BinIndex::new(1, [3, 1, 2]);
        let a = hash_block(&c, 2, &parent);
        for _ in 0..10 {
            assert_eq!(hash_block(&c, 2, &parent), a);
        }
    }

    #[test]
    fn density_uniform_is_one() {
        for config in [cfg(1, 3, 2, 1 << 20), cfg(2, 2, 3, 1 << 20), cfg(3, 3, 2, 4)] {
            let py = HashedProbabilityPyramid::new_uniform(config).unwrap();
            let dist = py.dist();
            for mu in [[0.01, 0.5, 0.77], [0.4, 0.9, 0.2], [0.99, 0.0, 0.3]] {
                assert_abs_diff_eq!(dist.density(&mu).unwrap(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn density_two_level_hand_case() {
        let config = cfg(1, 2, 2, 1 << 20);
        let mut py = HashedProbabilityPyramid::new_uniform(config).unwrap();
        py.params_mut()[0] = 3f64.ln();
        py.params_mut()[1] = 1f64.ln();
        let dist = py.dist();
        assert_abs_diff_eq!(dist.density(&[0.2, 0.0, 0.0]).unwrap(), 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dist.density(&[0.7, 0.0, 0.0]).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn density_rejects_out_of_domain() {
        let py = HashedProbabilityPyramid::new_uniform(cfg(2, 2, 2, 8)).unwrap();
        let dist = py.dist();
        assert!(dist.density(&[1.0, 0.5, 0.0]).is_err());
        assert!(dist.density(&[0.5, -0.1, 0.0]).is_err());
    }

    /// 12-bin pyramid: three levels (resolutions 3, 6, 12), budget 3, so the
    /// finest level tiles three blocks over six parents. Per-bin density must
    /// be the product of the three block masses times 12, and the per-bin
    /// masses must sum to 1.
    #[test]
    fn density_twelve_bin_hashed_config() {
        let config = cfg(1, 3, 3, 3);
        let py = random_pyramid(config, 42);
        let dist = py.dist();
        let n = config.finest_resolution();
        let mut total = 0.0;
        for bin in dist.finest_bin_iter() {
            let l0 = bin.ancestor(0);
            let m0 = dist.level0_masses()[l0.coords[0] as usize];
            let b1 = hash_block(&config, 1, &l0);
            let m1 = dist.block_masses(1, b1)[bin.ancestor(1).child_offset(1)];
            let b2 = hash_block(&config, 2, &bin.ancestor(1));
            let m2 = dist.block_masses(2, b2)[bin.child_offset(1)];
            let d = dist.density(&bin.center(n)).unwrap();
            assert_abs_diff_eq!(d, m0 * m1 * m2 * 12.0, epsilon = 1e-12);
            total += d / 12.0;
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dof_matches_hand_counts() {
        // 12-bin configuration above: (3-1) + 3*1 + 3*1 = 8.
        assert_eq!(dof_count(&cfg(1, 3, 3, 3)), 8);
        // Single level: one softmax over 8 bins.
        assert_eq!(dof_count(&cfg(3, 1, 2, 1)), 7);
        // Unlimited budget telescopes to finest bin count minus one.
        assert_eq!(dof_count(&cfg(1, 3, 2, u64::MAX)), 7);
        assert_eq!(dof_count(&cfg(3, 4, 2, u64::MAX)), 16u64.pow(3) - 1);
    }

    #[test]
    fn global_normalization_on_random_pyramids() {
        for seed in 0..50 {
            let config = match seed % 3 {
                0 => cfg(1, 4, 2, 3),
                1 => cfg(2, 3, 2, 5),
                _ => cfg(3, 2, 2, 7),
            };
            let py = random_pyramid(config, seed);
            let dist = py.dist();
            let total: f64 = dist.finest_bin_iter().map(|b| dist.bin_mass(&b)).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    /// Any 4-bin target distribution is exactly representable with D=1, L=2.
    #[test]
    fn completeness_four_bins() {
        let target = [0.4f64, 0.1, 0.2, 0.3];
        let config = cfg(1, 2, 2, u64::MAX);
        let mut py = HashedProbabilityPyramid::new_uniform(config).unwrap();
        let q = [target[0] + target[1], target[2] + target[3]];
        py.params_mut()[0] = q[0].ln();
        py.params_mut()[1] = q[1].ln();
        for b in 0..2 {
            let off = py.level_offset(1) + b * 2;
            py.params_mut()[off] = (target[2 * b] / q[b]).ln();
            py.params_mut()[off + 1] = (target[2 * b + 1] / q[b]).ln();
        }
        let dist = py.dist();
        for (i, bin) in dist.finest_bin_iter().enumerate() {
            assert_abs_diff_eq!(dist.bin_mass(&bin), target[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn score_uniform_block() {
        let py = HashedProbabilityPyramid::new_uniform(cfg(1, 1, 2, 1)).unwrap();
        let dist = py.dist();
        let (lp, score) = dist.log_prob_and_score(&BinIndex::new(0, [0, 0, 0]));
        assert_abs_diff_eq!(lp, 0.5f64.ln(), epsilon = 1e-15);
        assert_eq!(score, vec![(0, 0.5), (1, -0.5)]);
    }

    #[test]
    fn score_blocks_sum_to_zero_and_support_is_path() {
        let config = cfg(3, 3, 2, 6);
        let py = random_pyramid(config, 9);
        let dist = py.dist();
        let bin = BinIndex::new(2, [5, 1, 7]);
        let (_, score) = dist.log_prob_and_score(&bin);
        // level0 block + one block per refinement level
        assert_eq!(score.len(), 8 + 2 * 8);
        for chunk in score.chunks(8) {
            let s: f64 = chunk.iter().map(|(_, g)| g).sum();
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_prob_matches_density_times_volume() {
        let config = cfg(2, 3, 2, 4);
        let py = random_pyramid(config, 3);
        let dist = py.dist();
        for bin in dist.finest_bin_iter() {
            let (lp, _) = dist.log_prob_and_score(&bin);
            let n = config.finest_resolution();
            let d = dist.density(&bin.center(n)).unwrap();
            let vol = 1.0 / config.finest_bins() as f64;
            assert_abs_diff_eq!(lp, (d * vol).ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let config = cfg(2, 3, 2, 3);
        let py = random_pyramid(config, 17);
        let dist = py.dist();
        let bin = BinIndex::new(2, [3, 6, 0]);
        let (_, score) = dist.log_prob_and_score(&bin);
        let h = 1e-5;
        for &(idx, g) in &score {
            let mut plus = py.clone();
            plus.params_mut()[idx as usize] += h;
            let mut minus = py.clone();
            minus.params_mut()[idx as usize] -= h;
            let (lp_p, _) = plus.dist().log_prob_and_score(&bin);
            let (lp_m, _) = minus.dist().log_prob_and_score(&bin);
            let fd = (lp_p - lp_m) / (2.0 * h);
            assert!(
                (g - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "param {idx}: analytic {g} vs fd {fd}"
            );
        }
    }
}
