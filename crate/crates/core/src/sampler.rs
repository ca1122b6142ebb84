//! Hierarchical sampling from the pyramid.
//!
//! One root uniform drives the whole descent: each level's within-bin
//! residual is re-used as the next level's uniform (valid because every
//! conditional is piecewise constant, so the within-bin distribution is
//! uniform). A `2^D` block is sampled as D sequential binary inverse CDFs
//! over its marginal-then-conditional masses, which reproduces the exact
//! joint categorical distribution and keeps the chain differentiable.

use rand::distributions::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pyramid::{hash_block, BinIndex, PyramidDist};
use crate::rng::{rng_for, Stream};

/// Residuals this close to a CDF breakpoint mark the path as boundary-tainted
/// for pathwise differentiation.
const BREAKPOINT_EPS: f64 = 1e-12;

/// One sampled descent through the pyramid.
#[derive(Clone, Debug)]
pub struct SamplePath {
    /// Root uniform driving the descent.
    pub u0: [f64; 3],
    /// Continuous sample position in `[0,1)^D`.
    pub mu_continuous: [f64; 3],
    /// Position snapped to its finest-bin center.
    pub mu_rounded: [f64; 3],
    pub finest_bin: BinIndex,
    /// log p of the finest bin (density times bin volume).
    pub log_prob: f64,
    /// Within-bin residual per level; `residuals[l]` equals the `u^(l+1)` of
    /// the frac recursion.
    pub residuals: Vec<[f64; 3]>,
    /// Some residual landed on a CDF breakpoint; pathwise derivatives are
    /// undefined there and the caller should perturb `u0`.
    pub boundary: bool,
}

/// Masses of one axis-conditional slice of a block.
///
/// `sums[b]` is the unnormalized mass of choosing `b` on the current axis
/// given the already-selected coordinates on earlier axes.
fn axis_sums(masses: &[f64], n: usize, dims: usize, prefix: &[usize], axis: usize, out: &mut [f64]) {
    out[..n].iter_mut().for_each(|v| *v = 0.0);
    let mut base = 0usize;
    let mut stride = 1usize;
    for (d, &k) in prefix.iter().enumerate().take(axis) {
        base += k * stride;
        let _ = d;
        stride *= n;
    }
    let axis_stride = n.pow(axis as u32);
    // Free axes are those beyond `axis`.
    let free = dims - axis - 1;
    let free_count = n.pow(free as u32);
    for b in 0..n {
        let mut s = 0.0;
        for f in 0..free_count {
            // Decompose f over the free axes.
            let mut rem = f;
            let mut off = 0usize;
            let mut st = axis_stride * n;
            for _ in 0..free {
                off += (rem % n) * st;
                rem /= n;
                st *= n;
            }
            s += masses[base + b * axis_stride + off];
        }
        out[b] = s;
    }
}

/// Inverse-CDF selection over `probs[..n]` (must sum to ~1).
/// Returns (selected bin, cdf offset, bin mass, residual).
fn select_bin(probs: &[f64], n: usize, u: f64) -> (usize, f64, f64, f64) {
    let mut cum = 0.0;
    let mut k = n - 1;
    let mut offset = 0.0;
    for b in 0..n {
        if u < cum + probs[b] || b == n - 1 {
            k = b;
            offset = cum;
            break;
        }
        cum += probs[b];
    }
    let m = probs[k];
    let t = if m > 0.0 { ((u - offset) / m).clamp(0.0, 1.0 - 1e-9) } else { 0.0 };
    (k, offset, m, t)
}

/// Sample one block (level 0 uses `n = N0`, refinement levels `n = 2`)
/// given per-axis uniforms. Returns selected per-axis bins, residuals, and
/// the log of the selected joint mass.
fn sample_block(
    masses: &[f64],
    n: usize,
    dims: usize,
    u: &[f64; 3],
) -> ([usize; 3], [f64; 3], f64, bool) {
    let mut sums = vec![0.0; n];
    let mut prefix = [0usize; 3];
    let mut residuals = [0.0; 3];
    let mut log_mass = 0.0;
    let mut boundary = false;
    for d in 0..dims {
        axis_sums(masses, n, dims, &prefix, d, &mut sums);
        let total: f64 = sums.iter().sum();
        for s in sums.iter_mut() {
            *s /= total;
        }
        let (k, _off, m, t) = select_bin(&sums, n, u[d]);
        prefix[d] = k;
        residuals[d] = t;
        log_mass += m.ln();
        if t < BREAKPOINT_EPS || t > 1.0 - 1e-9 - BREAKPOINT_EPS {
            boundary = true;
        }
    }
    (prefix, residuals, log_mass, boundary)
}

/// Deterministic descent from a root uniform.
pub fn sample_one(dist: &PyramidDist<'_>, u0: [f64; 3]) -> SamplePath {
    let cfg = *dist.config();
    let dims = cfg.dims;
    let mut u = u0;
    let mut residuals = Vec::with_capacity(cfg.levels);
    let mut log_prob = 0.0;
    let mut boundary = false;

    let n0 = cfg.base_resolution as usize;
    let (sel0, res0, lm0, b0) = sample_block(dist.level0_masses(), n0, dims, &u);
    log_prob += lm0;
    boundary |= b0;
    residuals.push(res0);
    let mut coords = [0u32; 3];
    for d in 0..dims {
        coords[d] = sel0[d] as u32;
    }
    u = res0;

    for level in 1..cfg.levels {
        let parent = BinIndex::new(level - 1, coords);
        let block = hash_block(&cfg, level, &parent);
        let (sel, res, lm, bb) = sample_block(dist.block_masses(level, block), 2, dims, &u);
        log_prob += lm;
        boundary |= bb;
        residuals.push(res);
        for d in 0..dims {
            coords[d] = coords[d] * 2 + sel[d] as u32;
        }
        u = res;
    }

    let n = cfg.finest_resolution() as f64;
    let last = residuals[cfg.levels - 1];
    let mut mu_continuous = [0.0; 3];
    let mut mu_rounded = [0.0; 3];
    for d in 0..dims {
        mu_continuous[d] = (coords[d] as f64 + last[d]) / n;
        mu_rounded[d] = (coords[d] as f64 + 0.5) / n;
    }
    SamplePath {
        u0,
        mu_continuous,
        mu_rounded,
        finest_bin: BinIndex::new(cfg.levels - 1, coords),
        log_prob,
        residuals,
        boundary,
    }
}

/// `n` independent paths from counter-based per-sample generators; the result
/// does not depend on thread scheduling.
pub fn sample_batch(dist: &PyramidDist<'_>, n: usize, seed: u64) -> Vec<SamplePath> {
    let dims = dist.config().dims;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, Stream::Sample, i as u64);
            let mut u0 = [0.0; 3];
            for u in u0.iter_mut().take(dims) {
                *u = rng.gen::<f64>();
            }
            sample_one(dist, u0)
        })
        .collect()
}

/// Sparse derivative of the continuous sample position with respect to the
/// pyramid logits along its path.
#[derive(Clone, Debug)]
pub struct PathwiseJacobian {
    /// `(param index, d mu / d param)` with one vector entry per axis.
    pub entries: Vec<(u32, [f64; 3])>,
    /// Derivative undefined: a residual sat on a CDF breakpoint.
    pub boundary: bool,
}

/// Analytic derivative of the chained inverse CDFs.
///
/// Within one block, for axis `d` with prefix-restricted sums
/// `m = SA/SS` (selected-bin mass) and `C = SB/SS` (CDF offset), the softmax
/// adjoint collapses to
/// `dm/dw = (M_w/SS) (1[w in A] - m 1[w in S])` and likewise for `C`. The
/// residual `t = (u - C)/m` then chains into the next level through
/// `u' = t`, contributing a factor `1/m` per level.
pub fn pathwise_jacobian(dist: &PyramidDist<'_>, path: &SamplePath) -> PathwiseJacobian {
    let cfg = *dist.config();
    let dims = cfg.dims;
    // Running d t_d / d theta, one sparse map per axis.
    let mut dt: Vec<Vec<(u32, f64)>> = vec![Vec::new(); dims];

    for level in 0..cfg.levels {
        let (masses, n, base_param): (&[f64], usize, usize) = if level == 0 {
            (dist.level0_masses(), cfg.base_resolution as usize, 0)
        } else {
            let parent = path.finest_bin.ancestor(level - 1);
            let block = hash_block(&cfg, level, &parent);
            (
                dist.block_masses(level, block),
                2,
                dist.pyramid().param_index(level, block, 0),
            )
        };
        let sel = path.finest_bin.ancestor(level);
        let mut k = [0usize; 3];
        for d in 0..dims {
            k[d] = if level == 0 {
                sel.coords[d] as usize
            } else {
                ((sel.coords[d]) & 1) as usize
            };
        }
        let t = path.residuals[level];

        let mut prefix_stride = [0usize; 3];
        {
            let mut st = 1;
            for d in 0..dims {
                prefix_stride[d] = st;
                st *= n;
            }
        }
        for d in 0..dims {
            // Sums restricted to entries matching the selected prefix.
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut ss = 0.0;
            let total = masses.len();
            for (w, &mw) in masses.iter().enumerate().take(total) {
                let mut coords_w = [0usize; 3];
                let mut rem = w;
                for dd in 0..dims {
                    coords_w[dd] = rem % n;
                    rem /= n;
                }
                let in_prefix = (0..d).all(|dd| coords_w[dd] == k[dd]);
                if !in_prefix {
                    continue;
                }
                ss += mw;
                if coords_w[d] == k[d] {
                    sa += mw;
                }
                if coords_w[d] < k[d] {
                    sb += mw;
                }
                let _ = sa;
                let _ = sb;
            }
            let m = sa / ss;
            let c = sb / ss;

            // Propagate previous levels through u' = t: factor 1/m.
            for e in dt[d].iter_mut() {
                e.1 /= m;
            }
            // This block's own contribution.
            for (w, &mw) in masses.iter().enumerate() {
                let mut coords_w = [0usize; 3];
                let mut rem = w;
                for dd in 0..dims {
                    coords_w[dd] = rem % n;
                    rem /= n;
                }
                let in_prefix = (0..d).all(|dd| coords_w[dd] == k[dd]);
                if !in_prefix {
                    continue;
                }
                let ind_a = if coords_w[d] == k[d] { 1.0 } else { 0.0 };
                let ind_b = if coords_w[d] < k[d] { 1.0 } else { 0.0 };
                let dm = (mw / ss) * (ind_a - m);
                let dc = (mw / ss) * (ind_b - c);
                let g = (-dc - t[d] * dm) / m;
                if g != 0.0 {
                    dt[d].push(((base_param + w) as u32, g));
                }
            }
        }
    }

    // mu_d = (coord_d + t_d) / N.
    let scale = 1.0 / cfg.finest_resolution() as f64;
    let mut merged: std::collections::BTreeMap<u32, [f64; 3]> = std::collections::BTreeMap::new();
    for (d, per_axis) in dt.iter().enumerate() {
        for &(idx, g) in per_axis {
            merged.entry(idx).or_insert([0.0; 3])[d] += g * scale;
        }
    }
    PathwiseJacobian {
        entries: merged.into_iter().collect(),
        boundary: path.boundary,
    }
}

/// Unique rounded positions, sorted by finest-bin linear index.
#[derive(Clone, Debug, Default)]
pub struct DedupedBatch {
    pub bins: Vec<BinIndex>,
    pub centers: Vec<[f64; 3]>,
    pub multiplicities: Vec<u32>,
    /// For each input path, the index of its unique bin.
    pub path_to_unique: Vec<usize>,
}

impl DedupedBatch {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

/// Snap paths to bin centers and merge duplicates.
pub fn round_and_dedupe(dist: &PyramidDist<'_>, paths: &[SamplePath]) -> DedupedBatch {
    let cfg = dist.config();
    let n = cfg.finest_resolution();
    let mut keyed: Vec<(u64, usize)> = paths
        .iter()
        .enumerate()
        .map(|(i, p)| (p.finest_bin.linear(n, cfg.dims), i))
        .collect();
    keyed.sort_unstable();

    let mut out = DedupedBatch {
        path_to_unique: vec![0; paths.len()],
        ..Default::default()
    };
    let mut last: Option<u64> = None;
    for (key, path_idx) in keyed {
        if last != Some(key) {
            let bin = paths[path_idx].finest_bin;
            out.bins.push(bin);
            out.centers.push(bin.center(n));
            out.multiplicities.push(0);
            last = Some(key);
        }
        *out.multiplicities.last_mut().unwrap() += 1;
        out.path_to_unique[path_idx] = out.bins.len() - 1;
    }
    out
}

/// Annealed exploration noise applied to a fixed fraction of positions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma0: f64,
    pub fraction: f64,
    pub anneal_iters: u64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma0: 2e-3,
            fraction: 0.2,
            anneal_iters: 20_000,
        }
    }
}

impl NoiseSchedule {
    pub fn sigma_at(&self, iteration: u64) -> f64 {
        self.sigma0 * (1.0 - iteration as f64 / self.anneal_iters as f64).max(0.0)
    }
}

/// Perturb exactly `floor(fraction * n)` positions, chosen as the first
/// entries of a seeded permutation, with isotropic Gaussian noise in cube
/// coordinates. Returns the number of perturbed positions.
pub fn defensive_noise<R: Rng>(
    positions: &mut [[f64; 3]],
    dims: usize,
    iteration: u64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> usize {
    let n = positions.len();
    let k = (schedule.fraction * n as f64).floor() as usize;
    let sigma = schedule.sigma_at(iteration);
    if k == 0 || sigma == 0.0 {
        return if sigma == 0.0 { 0 } else { k };
    }
    let mut perm: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: only the first k entries are needed.
    for i in 0..k {
        let j = rng.gen_range(i..n);
        perm.swap(i, j);
    }
    for &idx in perm.iter().take(k) {
        for d in 0..dims {
            let z: f64 = StandardNormal.sample(rng);
            positions[idx][d] = (positions[idx][d] + sigma * z).clamp(0.0, 1.0 - 1e-9);
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{HashedProbabilityPyramid, PyramidConfig};
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
            *p = rng.gen_range(-1.5..1.5);
        }
        py
    }

    #[test]
    fn uniform_pyramid_is_identity_map() {
        let py = HashedProbabilityPyramid::new_uniform(cfg(3, 3, 2, 1 << 20)).unwrap();
        let dist = py.dist();
        let path = sample_one(&dist, [0.3, 0.62, 0.117]);
        for d in 0..3 {
            assert_abs_diff_eq!(path.mu_continuous[d], [0.3, 0.62, 0.117][d], epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_mass_always_hits_same_bin() {
        let config = cfg(1, 3, 2, 1 << 20);
        let mut py = HashedProbabilityPyramid::new_uniform(config).unwrap();
        // Push all mass toward finest bin 5 = path (1, 0, 1).
        py.params_mut()[1] = 30.0;
        let off1 = py.level_offset(1) + 1 * 2; // level-1 block of parent 1, child 0
        py.params_mut()[off1] = 30.0;
        let off2 = py.level_offset(2) + 2 * 2 + 1; // level-2 block of parent 2, child 1
        py.params_mut()[off2] = 30.0;
        let dist = py.dist();
        for u in [0.01, 0.3, 0.5, 0.77, 0.999] {
            let path = sample_one(&dist, [u, 0.0, 0.0]);
            assert_eq!(path.finest_bin.coords[0], 5);
        }
    }

    #[test]
    fn inverse_cdf_hand_case() {
        let config = cfg(1, 1, 2, 1);
        let mut py = HashedProbabilityPyramid::new_uniform(config).unwrap();
        py.params_mut()[0] = 3f64.ln();
        py.params_mut()[1] = 1f64.ln();
        let dist = py.dist();
        let path = sample_one(&dist, [0.9, 0.0, 0.0]);
        assert_abs_diff_eq!(path.mu_continuous[0], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn log_prob_matches_pyramid() {
        let config = cfg(2, 3, 2, 5);
        let py = random_pyramid(config, 21);
        let dist = py.dist();
        for i in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let path = sample_one(&dist, [rng.gen(), rng.gen(), 0.0]);
            let (lp, _) = dist.log_prob_and_score(&path.finest_bin);
            assert_abs_diff_eq!(path.log_prob, lp, epsilon = 1e-10);
        }
    }

    #[test]
    fn batch_empty_and_deterministic() {
        let py = random_pyramid(cfg(3, 2, 2, 8), 1);
        let dist = py.dist();
        assert!(sample_batch(&dist, 0, 7).is_empty());
        let a = sample_batch(&dist, 64, 7);
        let b = sample_batch(&dist, 64, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mu_continuous, y.mu_continuous);
            assert_eq!(x.finest_bin, y.finest_bin);
        }
        let c = sample_batch(&dist, 64, 8);
        assert!(a.iter().zip(&c).any(|(x, y)| x.finest_bin != y.finest_bin));
    }

    #[test]
    fn uniform_batch_frequencies_within_4_sigma() {
        let config = cfg(1, 3, 2, 1 << 20);
        let py = HashedProbabilityPyramid::new_uniform(config).unwrap();
        let dist = py.dist();
        let n = 1_000_000usize;
        let bins = config.finest_bins() as usize;
        let mut counts = vec![0u64; bins];
        for p in sample_batch(&dist, n, 3) {
            counts[p.finest_bin.coords[0] as usize] += 1;
        }
        let p = 1.0 / bins as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn histogram_matches_density_chi_square() {
        let config = cfg(2, 3, 2, 6);
        let py = random_pyramid(config, 33);
        let dist = py.dist();
        let n = 200_000usize;
        let paths = sample_batch(&dist, n, 5);
        let res = config.finest_resolution();
        let nbins = config.finest_bins() as usize;
        let mut counts = vec![0u64; nbins];
        for p in &paths {
            counts[p.finest_bin.linear(res, 2) as usize] += 1;
        }
        let mut chi2 = 0.0;
        for bin in dist.finest_bin_iter() {
            let expected = dist.bin_mass(&bin) * n as f64;
            let got = counts[bin.linear(res, 2) as usize] as f64;
            chi2 += (got - expected).powi(2) / expected;
        }
        let dof = (nbins - 1) as f64;
        let quantile = statrs::distribution::ContinuousCDF::inverse_cdf(
            &statrs::distribution::ChiSquared::new(dof).unwrap(),
            0.999,
        );
        assert!(chi2 < quantile, "chi2 {chi2} >= {quantile}");
    }

    #[test]
    fn residual_uniforms_pass_ks() {
        let config = cfg(2, 4, 2, 7);
        let py = random_pyramid(config, 13);
        let dist = py.dist();
        let n = 100_000usize;
        let paths = sample_batch(&dist, n, 11);
        // Asymptotic two-sided KS critical value at alpha = 0.001.
        let crit = (0.5 * (2.0f64 / 0.001).ln()).sqrt() / (n as f64).sqrt();
        for level in 0..config.levels {
            for d in 0..config.dims {
                let mut vals: Vec<f64> = paths.iter().map(|p| p.residuals[level][d]).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut dmax: f64 = 0.0;
                for (i, &v) in vals.iter().enumerate() {
                    let f_lo = i as f64 / n as f64;
                    let f_hi = (i + 1) as f64 / n as f64;
                    dmax = dmax.max((v - f_lo).abs()).max((v - f_hi).abs());
                }
                assert!(dmax < crit, "level {level} axis {d}: KS {dmax} >= {crit}");
            }
        }
    }

    #[test]
    fn rounding_never_changes_bin() {
        let config = cfg(3, 3, 2, 9);
        let py = random_pyramid(config, 77);
        let dist = py.dist();
        for p in sample_batch(&dist, 2000, 17) {
            assert_eq!(dist.finest_bin_of(&p.mu_continuous), p.finest_bin);
            assert_eq!(dist.finest_bin_of(&p.mu_rounded), p.finest_bin);
        }
    }

    #[test]
    fn dedupe_merges_and_counts() {
        let config = cfg(1, 2, 2, 1 << 20);
        let py = HashedProbabilityPyramid::new_uniform(config).unwrap();
        let dist = py.dist();
        let paths = vec![
            sample_one(&dist, [0.30, 0.0, 0.0]),
            sample_one(&dist, [0.26, 0.0, 0.0]), // same finest bin as 0.30
            sample_one(&dist, [0.9, 0.0, 0.0]),
        ];
        assert_eq!(paths[0].finest_bin, paths[1].finest_bin);
        let dd = round_and_dedupe(&dist, &paths);
        assert_eq!(dd.len(), 2);
        assert_eq!(dd.multiplicities.iter().sum::<u32>(), 3);
        assert_eq!(dd.multiplicities[0], 2);
        assert_eq!(dd.path_to_unique, vec![0, 0, 1]);
        // N = 4 here: mu = 0.3 rounds to (floor(1.2) + 0.5)/4 = 0.375.
        assert_abs_diff_eq!(dd.centers[0][0], 0.375, epsilon = 1e-15);
        // Sorted by bin index.
        assert!(dd.bins.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rounding_example_at_8_bins() {
        let config = cfg(1, 3, 2, 1 << 20);
        let py = HashedProbabilityPyramid::new_uniform(config).unwrap();
        let dist = py.dist();
        let path = sample_one(&dist, [0.3, 0.0, 0.0]);
        assert_abs_diff_eq!(path.mu_rounded[0], 0.3125, epsilon = 1e-15);
    }

    #[test]
    fn defensive_noise_counts_and_anneal() {
        let schedule = NoiseSchedule::default();
        assert_abs_diff_eq!(schedule.sigma_at(10_000), 1e-3, epsilon = 1e-18);
        assert_eq!(schedule.sigma_at(20_000), 0.0);
        assert_eq!(schedule.sigma_at(30_000), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = vec![[0.5, 0.5, 0.5]; 50];
        let mut pos = base.clone();
        let k = defensive_noise(&mut pos, 3, 0, &schedule, &mut rng);
        assert_eq!(k, 10);
        let moved = pos.iter().zip(&base).filter(|(a, b)| a != b).count();
        assert_eq!(moved, 10);

        let mut pos2 = base.clone();
        defensive_noise(&mut pos2, 3, 20_000, &schedule, &mut rng);
        assert_eq!(pos2, base);
    }

    #[test]
    fn pathwise_matches_finite_differences() {
        let config = cfg(2, 3, 2, 4);
        let py = random_pyramid(config, 4);
        let dist = py.dist();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut checked = 0;
        for _ in 0..40 {
            let u0 = [rng.gen(), rng.gen(), 0.0];
            let path = sample_one(&dist, u0);
            if path.boundary {
                continue;
            }
            let jac = pathwise_jacobian(&dist, &path);
            let h = 1e-6;
            for &(idx, g) in &jac.entries {
                let mut plus = py.clone();
                plus.params_mut()[idx as usize] += h;
                let mut minus = py.clone();
                minus.params_mut()[idx as usize] -= h;
                let pp = sample_one(&plus.dist(), u0);
                let pm = sample_one(&minus.dist(), u0);
                if pp.finest_bin != path.finest_bin || pm.finest_bin != path.finest_bin {
                    continue; // crossed a breakpoint; derivative comparison invalid
                }
                for d in 0..2 {
                    let fd = (pp.mu_continuous[d] - pm.mu_continuous[d]) / (2.0 * h);
                    assert!(
                        (g[d] - fd).abs() <= 1e-6 * fd.abs().max(1e-3),
                        "param {idx} axis {d}: analytic {} vs fd {fd}",
                        g[d]
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn pathwise_shift_invariance_and_sparsity() {
        let config = cfg(1, 3, 2, 1 << 20);
        let py = random_pyramid(config, 51);
        let dist = py.dist();
        let path = sample_one(&dist, [0.41, 0.0, 0.0]);
        let jac = pathwise_jacobian(&dist, &path);

        // Shift all logits by a constant: jacobian unchanged.
        let mut shifted = py.clone();
        for p in shifted.params_mut() {
            *p += 3.0;
        }
        let sdist = shifted.dist();
        let spath = sample_one(&sdist, [0.41, 0.0, 0.0]);
        let sjac = pathwise_jacobian(&sdist, &spath);
        assert_eq!(jac.entries.len(), sjac.entries.len());
        for (a, b) in jac.entries.iter().zip(&sjac.entries) {
            assert_eq!(a.0, b.0);
            assert_abs_diff_eq!(a.1[0], b.1[0], epsilon = 1e-9);
        }

        // Non-ancestor blocks receive nothing.
        let ancestors: Vec<u32> = {
            let (_, score) = dist.log_prob_and_score(&path.finest_bin);
            score.iter().map(|(i, _)| *i).collect()
        };
        for (idx, _) in &jac.entries {
            assert!(ancestors.contains(idx), "param {idx} is not on the path");
        }
    }
}
