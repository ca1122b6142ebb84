//! Hashed per-bin attribute storage and activation parameterizations.
//!
//! Attributes are keyed by the finest-level bin a sample rounds to, so the
//! queried values are constant inside each bin. The table reuses the
//! pyramid's XOR-mod hash; collisions mean two bins share an entry and are
//! accepted. Raw stored values are unconstrained; activations place them at
//! the documented initial operating point when the raw value is zero.

use serde::{Deserialize, Serialize};

use crate::contract::WorldMap;
use crate::error::{Error, Result};
use crate::pyramid::{BinIndex, HASH_PRIMES};

/// Real spherical harmonics constants for degrees 0 and 1.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_92;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationConfig {
    /// Opacity produced by a zero raw value.
    pub o0: f64,
    /// Scale produced by a zero raw value.
    pub s0: f64,
    /// Per-degree damping of spherical-harmonics terms (weight `alpha^l`).
    pub sh_alpha: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        ActivationConfig {
            o0: 0.05,
            s0: 0.0006,
            sh_alpha: 0.2,
        }
    }
}

impl ActivationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.o0 > 0.0 && self.o0 < 1.0) {
            return Err(Error::config("o0 must be in (0,1)"));
        }
        if self.s0 <= 0.0 {
            return Err(Error::config("s0 must be positive"));
        }
        Ok(())
    }

    pub fn opacity(&self, raw: f64) -> f64 {
        sigmoid(raw + sigmoid_inv(self.o0))
    }

    /// d(opacity)/d(raw).
    pub fn opacity_grad(&self, raw: f64) -> f64 {
        let o = self.opacity(raw);
        o * (1.0 - o)
    }

    pub fn scale(&self, raw: f64) -> f64 {
        softplus(raw + softplus_inv(self.s0))
    }

    /// d(scale)/d(raw).
    pub fn scale_grad(&self, raw: f64) -> f64 {
        sigmoid(raw + softplus_inv(self.s0))
    }

    /// Weight of SH basis function `basis`: 1 for the constant term,
    /// `sh_alpha` for degree-1 terms.
    pub fn sh_weight(&self, basis: usize) -> f64 {
        if basis == 0 {
            1.0
        } else {
            self.sh_alpha
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_inv(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Evaluate the real SH basis (degree <= 1) for a unit view direction.
pub fn sh_basis(view_dir: &[f64; 3]) -> [f64; 4] {
    let [x, y, z] = *view_dir;
    [SH_C0, -SH_C1 * y, SH_C1 * z, -SH_C1 * x]
}

/// Activated attributes of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianAttributes {
    pub opacity: f64,
    /// Isotropic scale before world-space compensation.
    pub scale: f64,
    pub color: [f64; 3],
}

/// World-space scale: activated scale times the square root of the world
/// map's Jacobian determinant at the pre-contraction position, so equal
/// stored scales project to similar footprints regardless of distance.
pub fn scale_to_world(scale: f64, mu: &[f64; 3], map: &WorldMap, dims: usize) -> f64 {
    scale * map.jacobian_scale(mu, dims)
}

/// Flat hashed table of raw attribute vectors.
#[derive(Clone, Debug)]
pub struct AttributeTable {
    capacity: usize,
    sh_degree: usize,
    config: ActivationConfig,
    /// Resolution of the finest pyramid level this table is keyed by.
    finest_resolution: u32,
    dims: usize,
    entries: Vec<f64>,
}

impl AttributeTable {
    /// Raw layout per slot: opacity, scale, then 3 channels x SH basis.
    pub fn stride(sh_degree: usize) -> usize {
        2 + 3 * Self::sh_basis_count(sh_degree)
    }

    pub fn sh_basis_count(sh_degree: usize) -> usize {
        match sh_degree {
            0 => 1,
            1 => 4,
            _ => panic!("sh degree {sh_degree} unsupported"),
        }
    }

    pub fn new(
        capacity: usize,
        sh_degree: usize,
        finest_resolution: u32,
        dims: usize,
        config: ActivationConfig,
    ) -> Result<Self> {
        config.validate()?;
        if sh_degree > 1 {
            return Err(Error::config("sh_degree must be 0 or 1"));
        }
        if capacity == 0 {
            return Err(Error::config("attribute capacity must be positive"));
        }
        Ok(AttributeTable {
            capacity,
            sh_degree,
            config,
            finest_resolution,
            dims,
            entries: vec![0.0; capacity * Self::stride(sh_degree)],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn activation(&self) -> &ActivationConfig {
        &self.config
    }

    pub fn finest_resolution(&self) -> u32 {
        self.finest_resolution
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    /// Slot for a finest-level bin: identity when the bin grid fits in the
    /// table, XOR-mod otherwise.
    pub fn slot(&self, bin: &BinIndex) -> usize {
        let total = (self.finest_resolution as u64).pow(self.dims as u32);
        if total <= self.capacity as u64 {
            bin.linear(self.finest_resolution, self.dims) as usize
        } else {
            let mut h = 0u64;
            for d in 0..self.dims {
                h ^= (bin.coords[d] as u64).wrapping_mul(HASH_PRIMES[d]);
            }
            (h % self.capacity as u64) as usize
        }
    }

    pub fn raw(&self, slot: usize) -> &[f64] {
        let s = Self::stride(self.sh_degree);
        &self.entries[slot * s..(slot + 1) * s]
    }

    /// Activated attributes of a bin. Without a view direction only the
    /// degree-0 color term contributes.
    pub fn query(&self, bin: &BinIndex, view_dir: Option<&[f64; 3]>) -> GaussianAttributes {
        let raw = self.raw(self.slot(bin));
        let basis_count = Self::sh_basis_count(self.sh_degree);
        let basis = match view_dir {
            Some(dir) => sh_basis(dir),
            None => [SH_C0, 0.0, 0.0, 0.0],
        };
        let mut color = [0.0; 3];
        for (ch, c) in color.iter_mut().enumerate() {
            for b in 0..basis_count {
                *c += self.config.sh_weight(b) * raw[2 + ch * basis_count + b] * basis[b];
            }
        }
        GaussianAttributes {
            opacity: self.config.opacity(raw[0]),
            scale: self.config.scale(raw[1]),
            color,
        }
    }

    /// Accumulate d(loss)/d(raw entries) for the slot of `bin` given upstream
    /// gradients with respect to the activated attributes. `grad` must have
    /// the same layout as `entries`.
    pub fn accumulate_grad(
        &self,
        bin: &BinIndex,
        view_dir: Option<&[f64; 3]>,
        d_opacity: f64,
        d_scale: f64,
        d_color: &[f64; 3],
        grad: &mut [f64],
    ) {
        let slot = self.slot(bin);
        let s = Self::stride(self.sh_degree);
        let raw = &self.entries[slot * s..(slot + 1) * s];
        let out = &mut grad[slot * s..(slot + 1) * s];
        out[0] += d_opacity * self.config.opacity_grad(raw[0]);
        out[1] += d_scale * self.config.scale_grad(raw[1]);
        let basis_count = Self::sh_basis_count(self.sh_degree);
        let basis = match view_dir {
            Some(dir) => sh_basis(dir),
            None => [SH_C0, 0.0, 0.0, 0.0],
        };
        for (ch, &dc) in d_color.iter().enumerate() {
            for b in 0..basis_count {
                out[2 + ch * basis_count + b] += dc * self.config.sh_weight(b) * basis[b];
            }
        }
    }
}

/// A free-standing Gaussian: position plus raw attributes, produced by
/// extraction and optimized directly during refinement.
#[derive(Clone, Debug)]
pub struct GaussianPrimitive {
    /// World-space position.
    pub position: [f64; 3],
    pub raw_opacity: f64,
    pub raw_scale: f64,
    /// 3 channels x SH basis, same layout as the table.
    pub raw_sh: Vec<f64>,
    /// Frozen world-scale multiplier from the sampling position.
    pub jacobian_scale: f64,
}

impl GaussianPrimitive {
    pub fn sh_degree(&self) -> usize {
        match self.raw_sh.len() {
            3 => 0,
            12 => 1,
            n => panic!("bad sh coefficient count {n}"),
        }
    }

    pub fn opacity(&self, cfg: &ActivationConfig) -> f64 {
        cfg.opacity(self.raw_opacity)
    }

    pub fn world_scale(&self, cfg: &ActivationConfig) -> f64 {
        cfg.scale(self.raw_scale) * self.jacobian_scale
    }

    pub fn color(&self, cfg: &ActivationConfig, view_dir: Option<&[f64; 3]>) -> [f64; 3] {
        let basis_count = self.raw_sh.len() / 3;
        let basis = match view_dir {
            Some(dir) => sh_basis(dir),
            None => [SH_C0, 0.0, 0.0, 0.0],
        };
        let mut color = [0.0; 3];
        for (ch, c) in color.iter_mut().enumerate() {
            for b in 0..basis_count {
                *c += cfg.sh_weight(b) * self.raw_sh[ch * basis_count + b] * basis[b];
            }
        }
        color
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table() -> AttributeTable {
        AttributeTable::new(1 << 12, 1, 64, 3, ActivationConfig::default()).unwrap()
    }

    #[test]
    fn zero_raw_hits_initial_operating_point() {
        let t = table();
        let a = t.query(&BinIndex::new(5, [3, 9, 30]), Some(&[0.0, 0.0, 1.0]));
        assert_abs_diff_eq!(a.opacity, 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(a.scale, 0.0006, epsilon = 1e-12);
        assert_eq!(a.color, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn opacity_saturates_at_limits() {
        let cfg = ActivationConfig::default();
        assert!(cfg.opacity(60.0) > 1.0 - 1e-9);
        assert!(cfg.opacity(-60.0) < 1e-9);
    }

    #[test]
    fn degree_zero_color_is_view_independent() {
        let mut t = AttributeTable::new(64, 0, 8, 3, ActivationConfig::default()).unwrap();
        let bin = BinIndex::new(2, [1, 2, 3]);
        let slot = t.slot(&bin);
        let s = AttributeTable::stride(0);
        t.entries_mut()[slot * s + 2] = 1.3;
        let a = t.query(&bin, Some(&[1.0, 0.0, 0.0]));
        let b = t.query(&bin, Some(&[0.0, -1.0, 0.0]));
        assert_eq!(a.color, b.color);
        assert_abs_diff_eq!(a.color[0], 1.3 * SH_C0, epsilon = 1e-15);
    }

    #[test]
    fn sh_constant_degree_zero() {
        assert_abs_diff_eq!(SH_C0, 0.2820948, epsilon = 1e-7);
        let b = sh_basis(&[0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(b[0], 0.2820948, epsilon = 1e-7);
        assert_abs_diff_eq!(b[2], 0.4886025, epsilon = 1e-7);
    }

    #[test]
    fn query_is_bin_pure() {
        let t = table();
        let bin = BinIndex::new(5, [10, 20, 30]);
        let dir = [0.3, -0.4, (1.0f64 - 0.25 - 0.16).sqrt()];
        assert_eq!(t.query(&bin, Some(&dir)), t.query(&bin, Some(&dir)));
    }

    #[test]
    fn world_scale_multiplier_inner_region() {
        let map = WorldMap::Contracted { a: 0.75 };
        let w = scale_to_world(1.0, &[0.5, 0.5, 0.5], &map, 3);
        assert_abs_diff_eq!(w, 0.75f64.powf(-1.5), epsilon = 1e-12);
        assert_abs_diff_eq!(w, 1.5396, epsilon = 1e-4);
        // Constant across the inner region.
        let w2 = scale_to_world(1.0, &[0.6, 0.4, 0.55], &map, 3);
        assert_abs_diff_eq!(w, w2, epsilon = 1e-15);
    }

    #[test]
    fn activation_grads_match_finite_differences() {
        let cfg = ActivationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-6;
        for _ in 0..100 {
            let x = rng.gen_range(-4.0..4.0);
            let fd_o = (cfg.opacity(x + h) - cfg.opacity(x - h)) / (2.0 * h);
            assert!((cfg.opacity_grad(x) - fd_o).abs() <= 1e-6 * fd_o.abs().max(1e-9));
            let fd_s = (cfg.scale(x + h) - cfg.scale(x - h)) / (2.0 * h);
            assert!((cfg.scale_grad(x) - fd_s).abs() <= 1e-6 * fd_s.abs().max(1e-9));
        }
    }

    #[test]
    fn accumulate_grad_matches_finite_differences() {
        let mut t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for e in t.entries_mut().iter_mut().take(4096) {
            *e = rng.gen_range(-1.0..1.0);
        }
        let bin = BinIndex::new(5, [7, 7, 7]);
        let dir = [0.6, 0.64, 0.48];
        let d_opacity = 0.7;
        let d_scale = -0.3;
        let d_color = [0.2, -0.5, 1.1];

        let mut grad = vec![0.0; t.entries().len()];
        t.accumulate_grad(&bin, Some(&dir), d_opacity, d_scale, &d_color, &mut grad);

        let loss = |t: &AttributeTable| {
            let a = t.query(&bin, Some(&dir));
            d_opacity * a.opacity
                + d_scale * a.scale
                + d_color.iter().zip(&a.color).map(|(g, c)| g * c).sum::<f64>()
        };
        let h = 1e-6;
        let slot = t.slot(&bin);
        let s = AttributeTable::stride(1);
        for k in 0..s {
            let idx = slot * s + k;
            let mut tp = t.clone();
            tp.entries_mut()[idx] += h;
            let mut tm = t.clone();
            tm.entries_mut()[idx] -= h;
            let fd = (loss(&tp) - loss(&tm)) / (2.0 * h);
            assert!(
                (grad[idx] - fd).abs() <= 1e-6 * fd.abs().max(1e-9),
                "entry {k}: {} vs {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn hashed_slots_collide_gracefully() {
        // 64^3 bins into 97 slots: collisions exist and are deterministic.
        let t = AttributeTable::new(97, 0, 64, 3, ActivationConfig::default()).unwrap();
        let a = t.slot(&BinIndex::new(5, [1, 2, 3]));
        let b = t.slot(&BinIndex::new(5, [1, 2, 3]));
        assert_eq!(a, b);
        assert!(a < 97);
    }
}
