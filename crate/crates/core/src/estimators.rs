//! Gradient estimators for the pyramid parameters, an exact enumeration
//! oracle for micro configurations, and the variance-measurement harness.
//!
//! All estimators target the loss-level gradient `d E[L] / d theta` for a
//! batch of independent samples. The score family weights each path's
//! score `d log p / d theta`; the estimators differ only in the weight:
//!
//! - joint: the full scalar loss multiplies every path's score;
//! - control variate: each path is weighted by the loss change from
//!   removing its own Gaussian, obtained from the renderer's opacity
//!   sensitivities at no extra rendering cost;
//! - marginal (1D additive model only): each path is weighted by its own
//!   kernel's contraction with the loss adjoint;
//! - pathwise: differentiates the sampling map itself and skips scores
//!   entirely; requires rounding disabled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{BinIndex, PyramidDist, SparseGrad};
use crate::render::Kernel1D;
use crate::sampler::{pathwise_jacobian, DedupedBatch, SamplePath};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    JointScore,
    Marginal1d,
    Pathwise,
    ControlVariate,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::JointScore => "joint_score",
            EstimatorKind::Marginal1d => "marginal_1d",
            EstimatorKind::Pathwise => "pathwise",
            EstimatorKind::ControlVariate => "control_variate",
        }
    }
}

/// How merged duplicates weight the shared bin's score in the control
/// variate estimator.
///
/// `SingletonOnly` is the exactly unbiased convention: a path whose bin
/// holds other paths contributes nothing, because deleting one copy leaves
/// the rendered unique set unchanged (`I - I_{-i} = 0`). Multiplying the
/// shared weight by the multiplicity instead couples the weight to the
/// path's own position through collisions and is biased; it is kept for
/// comparison because the enumeration oracle arbitrates between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupWeighting {
    SingletonOnly,
    MultiplicityWeighted,
}

/// One gradient estimate: dense over the pyramid's flat parameter vector.
#[derive(Clone, Debug)]
pub struct GradientSample {
    pub kind: EstimatorKind,
    /// Number of sampled paths that produced the estimate.
    pub sample_count: usize,
    pub seed: u64,
    pub grad: Vec<f64>,
}

fn accumulate(grad: &mut [f64], score: &SparseGrad, w: f64) {
    for &(idx, g) in score {
        grad[idx as usize] += w * g;
    }
}

/// Standard score-function estimator: the scalar loss multiplies the summed
/// score of every sampled path.
pub fn grad_joint(
    dist: &PyramidDist<'_>,
    paths: &[SamplePath],
    loss_value: f64,
    seed: u64,
) -> GradientSample {
    let mut grad = vec![0.0; dist.pyramid().total_params()];
    if loss_value != 0.0 {
        for p in paths {
            let (_, score) = dist.log_prob_and_score(&p.finest_bin);
            accumulate(&mut grad, &score, loss_value);
        }
    }
    GradientSample {
        kind: EstimatorKind::JointScore,
        sample_count: paths.len(),
        seed,
        grad,
    }
}

/// Leave-one-out control-variate estimator.
///
/// `weights[b]` is the loss change from removing the unique Gaussian of
/// `dedup.bins[b]` (the renderer's `opacity_loss_weights` for a graph built
/// from the deduped batch, in the same order).
pub fn grad_cv(
    dist: &PyramidDist<'_>,
    paths: &[SamplePath],
    dedup: &DedupedBatch,
    weights: &[f64],
    mode: DedupWeighting,
    seed: u64,
) -> Result<GradientSample> {
    if weights.len() != dedup.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} unique bins",
            weights.len(),
            dedup.len()
        )));
    }
    let mut grad = vec![0.0; dist.pyramid().total_params()];
    for (b, bin) in dedup.bins.iter().enumerate() {
        let mult = dedup.multiplicities[b];
        let w = match mode {
            DedupWeighting::SingletonOnly => {
                if mult == 1 {
                    weights[b]
                } else {
                    continue;
                }
            }
            DedupWeighting::MultiplicityWeighted => weights[b] * mult as f64,
        };
        if w != 0.0 {
            let (_, score) = dist.log_prob_and_score(bin);
            accumulate(&mut grad, &score, w);
        }
    }
    Ok(GradientSample {
        kind: EstimatorKind::ControlVariate,
        sample_count: paths.len(),
        seed,
        grad,
    })
}

/// Reparameterization estimator: chains the loss adjoint at each continuous
/// sample position through the sampling map's Jacobian.
///
/// Only valid when downstream rendering used the continuous (unrounded)
/// positions; rounding is piecewise constant and kills the signal.
pub fn grad_pathwise(
    dist: &PyramidDist<'_>,
    paths: &[SamplePath],
    d_mu: &[[f64; 3]],
    rounding_disabled: bool,
    seed: u64,
) -> Result<GradientSample> {
    if !rounding_disabled {
        return Err(Error::config(
            "pathwise estimator requires sample rounding disabled",
        ));
    }
    if d_mu.len() != paths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} adjoints for {} paths",
            d_mu.len(),
            paths.len()
        )));
    }
    let dims = dist.config().dims;
    let mut grad = vec![0.0; dist.pyramid().total_params()];
    for (p, adj) in paths.iter().zip(d_mu) {
        let jac = pathwise_jacobian(dist, p);
        for (idx, dmu) in jac.entries {
            let mut v = 0.0;
            for d in 0..dims {
                v += adj[d] * dmu[d];
            }
            grad[idx as usize] += v;
        }
    }
    Ok(GradientSample {
        kind: EstimatorKind::Pathwise,
        sample_count: paths.len(),
        seed,
        grad,
    })
}

/// Marginal score estimator for the additive 1D model: each path's score is
/// weighted by its own kernel's contraction with the loss adjoint `residual`
/// on the grid `xs`.
pub fn grad_marginal_1d(
    dist: &PyramidDist<'_>,
    paths: &[SamplePath],
    kernel: &Kernel1D,
    xs: &[f64],
    residual: &[f64],
    use_rounded: bool,
    seed: u64,
) -> Result<GradientSample> {
    if dist.config().dims != 1 {
        return Err(Error::config(
            "marginal estimator is only valid for the 1D additive model",
        ));
    }
    if residual.len() != xs.len() {
        return Err(Error::ShapeMismatch("residual/grid length mismatch".into()));
    }
    let mut grad = vec![0.0; dist.pyramid().total_params()];
    for p in paths {
        let center = if use_rounded {
            p.mu_rounded[0]
        } else {
            p.mu_continuous[0]
        };
        let w: f64 = xs
            .iter()
            .zip(residual)
            .map(|(&x, &r)| r * kernel.eval(x, center))
            .sum();
        let (_, score) = dist.log_prob_and_score(&p.finest_bin);
        accumulate(&mut grad, &score, w);
    }
    Ok(GradientSample {
        kind: EstimatorKind::Marginal1d,
        sample_count: paths.len(),
        seed,
        grad,
    })
}

/// Exact gradients on micro configurations by enumerating every ordered
/// assignment of finest bins to samples. Feasible for `bins^m` up to a few
/// thousand outcomes; the acceptance tests use it as the ground truth that
/// the stochastic estimators must reproduce in expectation.
pub mod enumeration {
    use super::*;

    fn for_each_outcome<G>(dist: &PyramidDist<'_>, m: usize, mut body: G)
    where
        G: FnMut(&[BinIndex], f64),
    {
        let bins: Vec<BinIndex> = dist.finest_bin_iter().collect();
        let total = bins.len().pow(m as u32);
        let masses: Vec<f64> = bins.iter().map(|b| dist.bin_mass(b)).collect();
        let mut tuple = vec![0usize; m];
        for outcome in 0..total {
            let mut rem = outcome;
            let mut prob = 1.0;
            for t in tuple.iter_mut() {
                *t = rem % bins.len();
                rem /= bins.len();
                prob *= masses[*t];
            }
            let chosen: Vec<BinIndex> = tuple.iter().map(|&t| bins[t]).collect();
            body(&chosen, prob);
        }
    }

    fn dedup_sorted(chosen: &[BinIndex], n: u32, dims: usize) -> (Vec<BinIndex>, Vec<u32>) {
        let mut keys: Vec<(u64, BinIndex)> =
            chosen.iter().map(|b| (b.linear(n, dims), *b)).collect();
        keys.sort_unstable_by_key(|(k, _)| *k);
        let mut bins = Vec::new();
        let mut mult = Vec::new();
        let mut last = None;
        for (k, b) in keys {
            if last != Some(k) {
                bins.push(b);
                mult.push(0);
                last = Some(k);
            }
            *mult.last_mut().unwrap() += 1;
        }
        (bins, mult)
    }

    /// `E[L]` for `m` iid samples through the rounded/deduped pipeline.
    pub fn exact_expected_loss<F>(dist: &PyramidDist<'_>, m: usize, loss: &F) -> f64
    where
        F: Fn(&[BinIndex], &[u32]) -> f64,
    {
        let cfg = dist.config();
        let (n, dims) = (cfg.finest_resolution(), cfg.dims);
        let mut expected = 0.0;
        for_each_outcome(dist, m, |chosen, prob| {
            let (bins, mult) = dedup_sorted(chosen, n, dims);
            expected += prob * loss(&bins, &mult);
        });
        expected
    }

    /// `d E[L] / d theta` via the score decomposition
    /// `sum_outcomes P * L * sum_i d log p(b_i) / d theta`.
    pub fn exact_gradient<F>(dist: &PyramidDist<'_>, m: usize, loss: &F) -> Vec<f64>
    where
        F: Fn(&[BinIndex], &[u32]) -> f64,
    {
        let cfg = dist.config();
        let (n, dims) = (cfg.finest_resolution(), cfg.dims);
        let mut grad = vec![0.0; dist.pyramid().total_params()];
        for_each_outcome(dist, m, |chosen, prob| {
            let (bins, mult) = dedup_sorted(chosen, n, dims);
            let l = loss(&bins, &mult);
            if l == 0.0 {
                return;
            }
            for b in chosen {
                let (_, score) = dist.log_prob_and_score(b);
                accumulate(&mut grad, &score, prob * l);
            }
        });
        grad
    }
}

/// Per-parameter mean/variance across replicates, one row per parameter.
#[derive(Clone, Debug)]
pub struct VarianceRow {
    pub estimator: &'static str,
    pub m: usize,
    pub param_id: usize,
    pub mean: f64,
    pub variance: f64,
    pub replicates: usize,
    pub seed_base: u64,
}

/// Aggregate of one (estimator, M) cell.
#[derive(Clone, Debug)]
pub struct VarianceTotal {
    pub estimator: &'static str,
    pub m: usize,
    pub total_variance: f64,
    pub mean_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct VarianceReport {
    pub rows: Vec<VarianceRow>,
    pub totals: Vec<VarianceTotal>,
    /// Least-squares slope of log total variance vs log M, per estimator.
    pub slopes: Vec<(&'static str, f64)>,
}

impl VarianceReport {
    pub fn total(&self, estimator: &str, m: usize) -> Option<f64> {
        self.totals
            .iter()
            .find(|t| t.estimator == estimator && t.m == m)
            .map(|t| t.total_variance)
    }

    pub fn slope(&self, estimator: &str) -> Option<f64> {
        self.slopes
            .iter()
            .find(|(e, _)| *e == estimator)
            .map(|(_, s)| *s)
    }
}

/// Sample mean and unbiased variance per parameter across replicate grads.
pub fn replicate_stats(grads: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let r = grads.len();
    let n = grads[0].len();
    let mut mean = vec![0.0; n];
    for g in grads {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= r as f64;
    }
    let mut var = vec![0.0; n];
    for g in grads {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(g) {
            let d = x - m;
            *v += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= (r - 1) as f64;
    }
    (mean, var)
}

/// Least-squares slope of log(y) against log(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Collect rows/totals for one (estimator, M) cell from replicate grads.
pub fn collect_cell(
    report: &mut VarianceReport,
    estimator: &'static str,
    m: usize,
    seed_base: u64,
    grads: &[Vec<f64>],
) {
    let (mean, var) = replicate_stats(grads);
    let total_variance: f64 = var.iter().sum();
    let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (param_id, (&mu, &v)) in mean.iter().zip(&var).enumerate() {
        report.rows.push(VarianceRow {
            estimator,
            m,
            param_id,
            mean: mu,
            variance: v,
            replicates: grads.len(),
            seed_base,
        });
    }
    report.totals.push(VarianceTotal {
        estimator,
        m,
        total_variance,
        mean_norm,
    });
}

/// Fit slopes for every estimator present in the totals.
pub fn fit_slopes(report: &mut VarianceReport) {
    let mut names: Vec<&'static str> = report.totals.iter().map(|t| t.estimator).collect();
    names.sort_unstable();
    names.dedup();
    for name in names {
        let pts: Vec<(f64, f64)> = report
            .totals
            .iter()
            .filter(|t| t.estimator == name)
            .map(|t| (t.m as f64, t.total_variance.max(1e-300)))
            .collect();
        if pts.len() >= 2 {
            report.slopes.push((name, loglog_slope(&pts)));
        }
    }
}

/// The 1D additive benchmark: a fixed target built from random kernels, a
/// frozen loss adjoint, and paired-seed replicates of the joint and marginal
/// estimators across sample counts.
pub mod bench1d {
    use super::*;
    use crate::pyramid::{HashedProbabilityPyramid, PyramidConfig};
    use crate::render::additive_render_1d;
    use crate::rng::{rng_for, Stream};
    use crate::sampler::sample_batch;
    use rand::Rng;

    #[derive(Clone, Debug)]
    pub struct Bench1dConfig {
        pub levels: usize,
        pub base_resolution: u32,
        pub grid_size: usize,
        pub target_kernels: usize,
        pub kernel: Kernel1D,
        pub m_values: Vec<usize>,
        pub repeats: usize,
        pub seed: u64,
    }

    impl Default for Bench1dConfig {
        fn default() -> Self {
            Bench1dConfig {
                levels: 4,
                base_resolution: 2,
                grid_size: 128,
                target_kernels: 15,
                kernel: Kernel1D {
                    amplitude: 0.6,
                    width: 0.03,
                },
                m_values: vec![4, 16, 64, 256],
                repeats: 100,
                seed: 0,
            }
        }
    }

    pub struct Bench1dSetup {
        pub pyramid: HashedProbabilityPyramid,
        pub xs: Vec<f64>,
        pub target: Vec<f64>,
        /// Frozen loss adjoint: expected one-kernel signal under the uniform
        /// density minus the target. Independent of M so per-path weights
        /// are identically distributed across sample counts.
        pub residual: Vec<f64>,
        pub kernel: Kernel1D,
    }

    pub fn setup(cfg: &Bench1dConfig) -> Bench1dSetup {
        let pc = PyramidConfig::new(1, cfg.levels, cfg.base_resolution, u64::MAX).unwrap();
        let pyramid = HashedProbabilityPyramid::new_uniform(pc).unwrap();
        let xs: Vec<f64> = (0..cfg.grid_size)
            .map(|i| (i as f64 + 0.5) / cfg.grid_size as f64)
            .collect();
        let mut rng = rng_for(cfg.seed, Stream::Scene, 0);
        let mut target = vec![0.0; xs.len()];
        for _ in 0..cfg.target_kernels {
            let k = Kernel1D {
                amplitude: rng.gen_range(0.3..1.0),
                width: rng.gen_range(0.02..0.08),
            };
            let c: f64 = rng.gen();
            for (t, &x) in target.iter_mut().zip(&xs) {
                *t += k.eval(x, c);
            }
        }
        // Expected one-kernel signal under the uniform density by quadrature.
        let quad = 4096;
        let mut expected = vec![0.0; xs.len()];
        for q in 0..quad {
            let mu = (q as f64 + 0.5) / quad as f64;
            for (e, &x) in expected.iter_mut().zip(&xs) {
                *e += cfg.kernel.eval(x, mu) / quad as f64;
            }
        }
        let residual: Vec<f64> = expected.iter().zip(&target).map(|(e, t)| e - t).collect();
        Bench1dSetup {
            pyramid,
            xs,
            target,
            residual,
            kernel: cfg.kernel,
        }
    }

    /// Run joint and marginal estimators on paired seeds.
    pub fn run(cfg: &Bench1dConfig) -> VarianceReport {
        let s = setup(cfg);
        let dist = s.pyramid.dist();
        let mut report = VarianceReport::default();
        for &m in &cfg.m_values {
            let cells: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.repeats)
                .into_par_iter()
                .map(|r| {
                    let seed = cfg
                        .seed
                        .wrapping_add(1 + r as u64)
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(m as u64);
                    let paths = sample_batch(&dist, m, seed);
                    let centers: Vec<f64> = paths.iter().map(|p| p.mu_rounded[0]).collect();
                    let rendered = additive_render_1d(&centers, &s.kernel, &s.xs);
                    let loss: f64 = rendered
                        .iter()
                        .zip(&s.residual)
                        .map(|(f, r)| f * r)
                        .sum();
                    let joint = grad_joint(&dist, &paths, loss, seed);
                    let marginal = grad_marginal_1d(
                        &dist, &paths, &s.kernel, &s.xs, &s.residual, true, seed,
                    )
                    .unwrap();
                    (joint.grad, marginal.grad)
                })
                .collect();
            let joint: Vec<Vec<f64>> = cells.iter().map(|c| c.0.clone()).collect();
            let marginal: Vec<Vec<f64>> = cells.iter().map(|c| c.1.clone()).collect();
            collect_cell(&mut report, "joint_score", m, cfg.seed, &joint);
            collect_cell(&mut report, "marginal_1d", m, cfg.seed, &marginal);
        }
        fit_slopes(&mut report);
        report
    }
}

/// The 3D single-view benchmark: a frozen dense single-level pyramid, fixed
/// attributes, one camera, and paired-seed replicates of the joint, control
/// variate, and pathwise estimators.
pub mod bench3d {
    use super::*;
    use crate::camera::Camera;
    use crate::contract::WorldMap;
    use crate::loss::{image_loss, LossConfig};
    use crate::pyramid::{HashedProbabilityPyramid, PyramidConfig};
    use crate::render::{render, Image, RenderGaussian, RenderOptions};
    use crate::rng::{rng_for, Stream};
    use crate::sampler::{round_and_dedupe, sample_batch};
    use nalgebra::Vector3;
    use rand::Rng;

    #[derive(Clone, Debug)]
    pub struct Bench3dConfig {
        pub grid: u32,
        pub image_size: u32,
        pub samples: usize,
        pub repeats: usize,
        pub seed: u64,
        pub target_primitives: usize,
        pub estimators: Vec<EstimatorKind>,
    }

    impl Default for Bench3dConfig {
        fn default() -> Self {
            Bench3dConfig {
                grid: 16,
                image_size: 32,
                samples: 10_000,
                repeats: 100,
                seed: 0,
                target_primitives: 48,
                estimators: vec![
                    EstimatorKind::ControlVariate,
                    EstimatorKind::JointScore,
                    EstimatorKind::Pathwise,
                ],
            }
        }
    }

    pub struct Bench3dSetup {
        pub pyramid: HashedProbabilityPyramid,
        pub camera: Camera,
        pub target: Image,
        pub map: WorldMap,
        pub opacity: f64,
        pub scale: f64,
        pub color: [f64; 3],
        pub loss_cfg: LossConfig,
        pub options: RenderOptions,
    }

    pub fn setup(cfg: &Bench3dConfig) -> Bench3dSetup {
        let pc = PyramidConfig::new(3, 1, cfg.grid, u64::MAX).unwrap();
        let pyramid = HashedProbabilityPyramid::new_uniform(pc).unwrap();
        let camera = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.2),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            cfg.image_size as f64 * 1.2,
            cfg.image_size,
            cfg.image_size,
            0.2,
        )
        .unwrap();
        let map = WorldMap::Cube { half_extent: 1.0 };
        let options = RenderOptions::default();
        // Target: a seeded random scene rendered by the same renderer.
        let mut rng = rng_for(cfg.seed, Stream::Scene, 1);
        let gt: Vec<RenderGaussian> = (0..cfg.target_primitives)
            .map(|_| RenderGaussian {
                position: [
                    rng.gen_range(-0.85..0.85),
                    rng.gen_range(-0.85..0.85),
                    rng.gen_range(-0.85..0.85),
                ],
                opacity: rng.gen_range(0.3..0.9),
                scale: rng.gen_range(0.08..0.25),
                color: [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
            })
            .collect();
        let (target, _) = render(&gt, &camera, [0.0; 3], &options);
        // Plain L1 keeps the adjoint cheap across many replicates.
        let loss_cfg = LossConfig {
            lambda1: 1.0,
            ..Default::default()
        };
        Bench3dSetup {
            pyramid,
            camera,
            target,
            map,
            opacity: 0.6,
            scale: 0.06,
            color: [0.65, 0.65, 0.65],
            loss_cfg,
            options,
        }
    }

    fn gaussian_at(s: &Bench3dSetup, mu: &[f64; 3]) -> RenderGaussian {
        RenderGaussian {
            position: s.map.world_point(mu, 3),
            opacity: s.opacity,
            scale: s.scale * s.map.jacobian_scale(mu, 3),
            color: s.color,
        }
    }

    /// One replicate of one estimator.
    pub fn replicate(s: &Bench3dSetup, kind: EstimatorKind, m: usize, seed: u64) -> Vec<f64> {
        let dist = s.pyramid.dist();
        let paths = sample_batch(&dist, m, seed);
        match kind {
            EstimatorKind::JointScore | EstimatorKind::ControlVariate => {
                let dedup = round_and_dedupe(&dist, &paths);
                let prims: Vec<RenderGaussian> =
                    dedup.centers.iter().map(|c| gaussian_at(s, c)).collect();
                let (img, graph) = render(&prims, &s.camera, [0.0; 3], &s.options);
                let (loss, d_image) = image_loss(&img, &s.target, &s.loss_cfg).unwrap();
                if kind == EstimatorKind::JointScore {
                    grad_joint(&dist, &paths, loss, seed).grad
                } else {
                    let weights = graph.opacity_loss_weights(&d_image);
                    grad_cv(
                        &dist,
                        &paths,
                        &dedup,
                        &weights,
                        DedupWeighting::SingletonOnly,
                        seed,
                    )
                    .unwrap()
                    .grad
                }
            }
            EstimatorKind::Pathwise => {
                let prims: Vec<RenderGaussian> = paths
                    .iter()
                    .map(|p| gaussian_at(s, &p.mu_continuous))
                    .collect();
                let (img, graph) = render(&prims, &s.camera, [0.0; 3], &s.options);
                let (_, d_image) = image_loss(&img, &s.target, &s.loss_cfg).unwrap();
                let grads = graph.backward(&d_image, false);
                let dims = 3;
                let d_mu: Vec<[f64; 3]> = paths
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let (jac, djs) = s.map.jacobian(&p.mu_continuous, dims);
                        let dw = grads.d_position[i];
                        let mut dm = [0.0; 3];
                        for col in 0..dims {
                            for row in 0..dims {
                                dm[col] += dw[row] * jac[row][col];
                            }
                            // Scale compensation chain (zero for cube maps).
                            dm[col] += grads.d_scale[i] * s.scale * djs[col];
                        }
                        dm
                    })
                    .collect();
                grad_pathwise(&dist, &paths, &d_mu, true, seed).unwrap().grad
            }
            EstimatorKind::Marginal1d => panic!("marginal estimator is 1D-only"),
        }
    }

    pub fn run(cfg: &Bench3dConfig) -> VarianceReport {
        let s = setup(cfg);
        let mut report = VarianceReport::default();
        for &kind in &cfg.estimators {
            let grads: Vec<Vec<f64>> = (0..cfg.repeats)
                .into_par_iter()
                .map(|r| {
                    let seed = cfg
                        .seed
                        .wrapping_add(1 + r as u64)
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    replicate(&s, kind, cfg.samples, seed)
                })
                .collect();
            collect_cell(&mut report, kind.name(), cfg.samples, cfg.seed, &grads);
        }
        fit_slopes(&mut report);
        report
    }
}
