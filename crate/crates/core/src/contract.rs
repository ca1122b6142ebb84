//! Mapping pyramid-cube coordinates to world space.
//!
//! Samples live in `[0,1]^D`. They are affinely re-centered to `[-1,1]^D` and
//! then pushed through a contraction with L-infinity symmetry: the inner cube
//! `|c|_inf <= a` expands linearly by `1/a`, and the shell beyond it stretches
//! out to all of space. Inputs are clamped just inside the cube boundary
//! because the map diverges at `|c|_inf = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin kept from the cube boundary where the contraction diverges.
pub const BOUNDARY_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionConfig {
    /// Fraction of the cube mapped linearly; controls capacity split between
    /// near and far content.
    pub a: f64,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        ContractionConfig { a: 0.75 }
    }
}

impl ContractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a < 1.0) {
            return Err(Error::config(format!("contraction factor a = {} not in (0,1)", self.a)));
        }
        Ok(())
    }
}

/// How `[0,1]^D` cube coordinates become world coordinates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum WorldMap {
    /// Plain affine map onto `[-h, h]^D`; used by bounded benchmark setups.
    Cube { half_extent: f64 },
    /// Affine to `[-1,1]^D` followed by the unbounded contraction.
    Contracted { a: f64 },
}

impl Default for WorldMap {
    fn default() -> Self {
        WorldMap::Contracted { a: ContractionConfig::default().a }
    }
}

fn linf(v: &[f64; 3], dims: usize) -> f64 {
    v[..dims].iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Clamp a centered point strictly inside the open cube.
fn clamp_centered(c: &mut [f64; 3], dims: usize) {
    let lim = 1.0 - BOUNDARY_CLAMP;
    for x in c.iter_mut().take(dims) {
        *x = x.clamp(-lim, lim);
    }
}

impl WorldMap {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WorldMap::Cube { half_extent } => {
                if half_extent <= 0.0 {
                    return Err(Error::config("half_extent must be positive"));
                }
            }
            WorldMap::Contracted { a } => ContractionConfig { a }.validate()?,
        }
        Ok(())
    }

    /// Map a `[0,1]^D` point to world space.
    pub fn world_point(&self, mu: &[f64; 3], dims: usize) -> [f64; 3] {
        let mut c = [0.0; 3];
        for d in 0..dims {
            c[d] = 2.0 * mu[d] - 1.0;
        }
        clamp_centered(&mut c, dims);
        match *self {
            WorldMap::Cube { half_extent } => {
                let mut out = [0.0; 3];
                for d in 0..dims {
                    out[d] = half_extent * c[d];
                }
                out
            }
            WorldMap::Contracted { a } => contract(&c, a, dims),
        }
    }

    /// `det(J)^(1/2)` of the cube-to-world map, excluding the affine
    /// recentering (the Jacobian is taken with respect to the centered
    /// `[-1,1]^D` point). Constant in the inner region.
    pub fn jacobian_scale(&self, mu: &[f64; 3], dims: usize) -> f64 {
        let mut c = [0.0; 3];
        for d in 0..dims {
            c[d] = 2.0 * mu[d] - 1.0;
        }
        clamp_centered(&mut c, dims);
        match *self {
            WorldMap::Cube { half_extent } => half_extent.powf(dims as f64 / 2.0),
            WorldMap::Contracted { a } => contraction_det_jacobian(&c, a, dims).sqrt(),
        }
    }

    /// Full Jacobian d(world)/d(mu) including the affine factor 2 per axis.
    /// Rows index world axes, columns index mu axes. Also returns
    /// d(jacobian_scale)/d(mu) for chaining scale compensation.
    pub fn jacobian(&self, mu: &[f64; 3], dims: usize) -> ([[f64; 3]; 3], [f64; 3]) {
        let mut c = [0.0; 3];
        for d in 0..dims {
            c[d] = 2.0 * mu[d] - 1.0;
        }
        clamp_centered(&mut c, dims);
        let mut jac = [[0.0; 3]; 3];
        let mut djs = [0.0; 3];
        match *self {
            WorldMap::Cube { half_extent } => {
                for d in 0..dims {
                    jac[d][d] = 2.0 * half_extent;
                }
            }
            WorldMap::Contracted { a } => {
                let n = linf(&c, dims);
                if n <= a {
                    for d in 0..dims {
                        jac[d][d] = 2.0 / a;
                    }
                } else {
                    // C(c) = h(n) * c with h(n) = (1-a) / (n (1-n)).
                    let h = (1.0 - a) / (n * (1.0 - n));
                    let dh = (1.0 - a) * (2.0 * n - 1.0) / (n * n * (1.0 - n) * (1.0 - n));
                    let (m, sign) = max_axis(&c, dims);
                    for r in 0..dims {
                        for col in 0..dims {
                            let mut v = if r == col { h } else { 0.0 };
                            if col == m {
                                v += dh * c[r] * sign;
                            }
                            jac[r][col] = 2.0 * v;
                        }
                    }
                    // det J = h^D * n/(1-n); js = sqrt(det).
                    let det = h.powi(dims as i32) * n / (1.0 - n);
                    let js = det.sqrt();
                    // d(log det)/dn = D h'/h + 1/n + 1/(1-n)
                    let dlogdet = dims as f64 * dh / h + 1.0 / n + 1.0 / (1.0 - n);
                    djs[m] = 0.5 * js * dlogdet * sign * 2.0;
                }
            }
        }
        (jac, djs)
    }

    /// Inverse of [`WorldMap::world_point`], returning a `[0,1]^D` point.
    pub fn cube_point(&self, world: &[f64; 3], dims: usize) -> [f64; 3] {
        let mut c = [0.0; 3];
        match *self {
            WorldMap::Cube { half_extent } => {
                for d in 0..dims {
                    c[d] = world[d] / half_extent;
                }
            }
            WorldMap::Contracted { a } => {
                let m = linf(world, dims);
                if m <= 1.0 {
                    for d in 0..dims {
                        c[d] = a * world[d];
                    }
                } else {
                    // Outer branch: |C|_inf = (1-a)/(1-n) = m  =>  n = 1 - (1-a)/m.
                    let n = 1.0 - (1.0 - a) / m;
                    for d in 0..dims {
                        c[d] = world[d] * n / m;
                    }
                }
            }
        }
        let mut mu = [0.0; 3];
        for d in 0..dims {
            mu[d] = (c[d] + 1.0) / 2.0;
        }
        mu
    }
}

fn max_axis(c: &[f64; 3], dims: usize) -> (usize, f64) {
    let mut m = 0;
    for d in 1..dims {
        if c[d].abs() > c[m].abs() {
            m = d;
        }
    }
    (m, c[m].signum())
}

/// The raw contraction on a centered point.
pub fn contract(c: &[f64; 3], a: f64, dims: usize) -> [f64; 3] {
    let n = linf(c, dims);
    let mut out = [0.0; 3];
    if n <= a {
        for d in 0..dims {
            out[d] = c[d] / a;
        }
    } else {
        let f = (1.0 - a) / (1.0 - n) / n;
        for d in 0..dims {
            out[d] = f * c[d];
        }
    }
    out
}

fn contraction_det_jacobian(c: &[f64; 3], a: f64, dims: usize) -> f64 {
    let n = linf(c, dims);
    if n <= a {
        a.powi(-(dims as i32))
    } else {
        let h = (1.0 - a) / (n * (1.0 - n));
        h.powi(dims as i32) * n / (1.0 - n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_is_fixed_point() {
        let map = WorldMap::Contracted { a: 0.75 };
        let w = map.world_point(&[0.5, 0.5, 0.5], 3);
        for d in 0..3 {
            assert_abs_diff_eq!(w[d], 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn continuous_at_seam() {
        let a = 0.75;
        // Both branches evaluated exactly at |c|_inf = a must agree.
        let c = [a, 0.3, -0.2];
        let inner: Vec<f64> = c.iter().map(|x| x / a).collect();
        let n: f64 = a;
        let f = (1.0 - a) / (1.0 - n) / n;
        let outer: Vec<f64> = c.iter().map(|x| f * x).collect();
        for d in 0..3 {
            assert_abs_diff_eq!(inner[d], outer[d], epsilon = 1e-12);
        }
    }

    #[test]
    fn outer_branch_hand_case_1d() {
        let out = contract(&[0.875, 0.0, 0.0], 0.75, 1);
        assert_abs_diff_eq!(out[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_scale_inner_constant() {
        let map = WorldMap::Contracted { a: 0.75 };
        let js0 = map.jacobian_scale(&[0.5, 0.5, 0.5], 3);
        assert_abs_diff_eq!(js0, 0.75f64.powf(-1.5), epsilon = 1e-12);
        let js1 = map.jacobian_scale(&[0.6, 0.45, 0.52], 3);
        assert_abs_diff_eq!(js0, js1, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_scale_increases_beyond_seam() {
        let map = WorldMap::Contracted { a: 0.75 };
        let mut prev = map.jacobian_scale(&[0.5 + 0.75 / 2.0, 0.5, 0.5], 3);
        for i in 1..100 {
            let x = 0.75 + (1.0 - 0.75 - 1e-3) * i as f64 / 100.0;
            let js = map.jacobian_scale(&[0.5 + x / 2.0, 0.5, 0.5], 3);
            assert!(js > prev, "jacobian scale must grow with the norm");
            prev = js;
        }
    }

    #[test]
    fn monotone_in_linf_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = WorldMap::Contracted { a: 0.75 };
        for _ in 0..1000 {
            let p1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let p2: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let c1 = [2.0 * p1[0] - 1.0, 2.0 * p1[1] - 1.0, 2.0 * p1[2] - 1.0];
            let c2 = [2.0 * p2[0] - 1.0, 2.0 * p2[1] - 1.0, 2.0 * p2[2] - 1.0];
            let (n1, n2) = (linf(&c1, 3), linf(&c2, 3));
            if (n1 - n2).abs() < 1e-12 {
                continue;
            }
            let w1 = linf(&map.world_point(&p1, 3), 3);
            let w2 = linf(&map.world_point(&p2, 3), 3);
            assert_eq!(n1 < n2, w1 < w2);
        }
    }

    #[test]
    fn cube_point_inverts_world_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for map in [WorldMap::Contracted { a: 0.75 }, WorldMap::Cube { half_extent: 2.0 }] {
            for _ in 0..500 {
                let mu = [rng.gen_range(0.01..0.99), rng.gen_range(0.01..0.99), rng.gen_range(0.01..0.99)];
                let w = map.world_point(&mu, 3);
                let back = map.cube_point(&w, 3);
                for d in 0..3 {
                    assert_abs_diff_eq!(back[d], mu[d], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = WorldMap::Contracted { a: 0.75 };
        let h = 1e-6;
        for _ in 0..200 {
            let mu: [f64; 3] = [rng.gen_range(0.02..0.98), rng.gen_range(0.02..0.98), rng.gen_range(0.02..0.98)];
            // Skip points straddling the seam or with ambiguous max axis.
            let c = [2.0 * mu[0] - 1.0, 2.0 * mu[1] - 1.0, 2.0 * mu[2] - 1.0];
            let n = linf(&c, 3);
            if (n - 0.75).abs() < 1e-3 {
                continue;
            }
            let sorted = {
                let mut v = [c[0].abs(), c[1].abs(), c[2].abs()];
                v.sort_by(|x, y| y.partial_cmp(x).unwrap());
                v
            };
            if sorted[0] - sorted[1] < 1e-3 {
                continue;
            }
            let (jac, djs) = map.jacobian(&mu, 3);
            for col in 0..3 {
                let mut p = mu;
                p[col] += h;
                let mut m = mu;
                m[col] -= h;
                let wp = map.world_point(&p, 3);
                let wm = map.world_point(&m, 3);
                for row in 0..3 {
                    let fd = (wp[row] - wm[row]) / (2.0 * h);
                    assert!(
                        (jac[row][col] - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                        "jac[{row}][{col}] {} vs fd {fd}",
                        jac[row][col]
                    );
                }
                let fd_js = (map.jacobian_scale(&p, 3) - map.jacobian_scale(&m, 3)) / (2.0 * h);
                assert!(
                    (djs[col] - fd_js).abs() <= 1e-4 * fd_js.abs().max(1.0),
                    "djs[{col}] {} vs fd {fd_js}",
                    djs[col]
                );
            }
        }
    }
}
