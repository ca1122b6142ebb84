//! CPU splat renderers.
//!
//! The 3D renderer projects isotropic Gaussians through a pinhole camera and
//! alpha-composites them per pixel in global depth order, keeping a full
//! per-pixel fragment graph so the backward pass and the per-Gaussian
//! opacity sensitivities are exact reverse-mode derivatives of the forward
//! expression. A side-channel 1D additive model replaces compositing with
//! summation for estimator analysis.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::rng::{rng_for, Stream};

/// Alpha ceiling; keeps the `1/(1-alpha)` leave-one-out correction finite.
pub const ALPHA_MAX: f64 = 0.999;

/// RGB image with f64 channels, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in 0..width * height {
            img.data[px * 3..px * 3 + 3].copy_from_slice(&color);
        }
        img
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One Gaussian as the splatter consumes it: world position, activated
/// opacity, world-space isotropic scale, view-evaluated color.
#[derive(Clone, Copy, Debug)]
pub struct RenderGaussian {
    pub position: [f64; 3],
    pub opacity: f64,
    pub scale: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub alpha_max: f64,
    /// Footprint and frustum-margin radius in units of the projected sigma.
    pub footprint_sigmas: f64,
    /// Parallelize rows in the forward pass and pixel chunks in backward.
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            alpha_max: ALPHA_MAX,
            footprint_sigmas: 3.0,
            parallel: false,
        }
    }
}

/// Projection of one Gaussian into a camera.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedSplat {
    /// Index into the input primitive list.
    pub prim_id: u32,
    /// Splat center in pixel coordinates.
    pub cx: f64,
    pub cy: f64,
    pub sigma2d: f64,
    pub depth: f64,
    /// Camera-frame position (needed for position adjoints).
    pub cam: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Project one Gaussian; `None` when culled by the near plane or when the
/// center falls `footprint_sigmas * sigma2d` beyond the image border.
pub fn project(
    camera: &Camera,
    world_pos: &[f64; 3],
    world_scale: f64,
    options: &RenderOptions,
) -> Option<ProjectedSplat> {
    let cam = camera.world_to_camera(&Vector3::new(world_pos[0], world_pos[1], world_pos[2]));
    if cam.z < camera.z_near {
        return None;
    }
    let (ppx, ppy) = camera.principal_point();
    let cx = camera.focal * cam.x / cam.z + ppx;
    let cy = camera.focal * cam.y / cam.z + ppy;
    let sigma2d = world_scale * camera.focal / cam.z;
    let margin = options.footprint_sigmas * sigma2d;
    if cx < -margin
        || cx > camera.width as f64 + margin
        || cy < -margin
        || cy > camera.height as f64 + margin
    {
        return None;
    }
    Some(ProjectedSplat {
        prim_id: 0,
        cx,
        cy,
        sigma2d,
        depth: cam.z,
        cam: [cam.x, cam.y, cam.z],
        opacity: 0.0,
        color: [0.0; 3],
    })
}

/// One splat's contribution to one pixel, stored front-to-back.
#[derive(Clone, Copy, Debug)]
struct Fragment {
    /// Index into `RenderGraph::splats`.
    splat: u32,
    /// Gaussian falloff G at the pixel center.
    gauss: f64,
    alpha: f64,
    /// Transmittance in front of this fragment.
    trans: f64,
}

/// Cached forward pass: everything the manual adjoints need.
pub struct RenderGraph {
    pub camera: Camera,
    pub background: [f64; 3],
    pub alpha_max: f64,
    /// Culled, projected splats sorted by (depth, primitive id).
    pub splats: Vec<ProjectedSplat>,
    /// Number of primitives in the input list (gradient vectors use it).
    pub num_primitives: usize,
    fragments: Vec<Vec<Fragment>>,
    /// Transmittance left behind all fragments, per pixel.
    pub final_trans: Vec<f64>,
}

/// Per-primitive gradients of a scalar loss through the compositing graph.
#[derive(Clone, Debug)]
pub struct RenderGrads {
    pub d_opacity: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
    pub d_scale: Vec<f64>,
    pub d_position: Vec<[f64; 3]>,
    pub d_background: [f64; 3],
}

impl RenderGrads {
    fn zeros(n: usize) -> Self {
        RenderGrads {
            d_opacity: vec![0.0; n],
            d_color: vec![[0.0; 3]; n],
            d_scale: vec![0.0; n],
            d_position: vec![[0.0; 3]; n],
            d_background: [0.0; 3],
        }
    }

    fn add(&mut self, other: &RenderGrads) {
        for (a, b) in self.d_opacity.iter_mut().zip(&other.d_opacity) {
            *a += b;
        }
        for (a, b) in self.d_scale.iter_mut().zip(&other.d_scale) {
            *a += b;
        }
        for (a, b) in self.d_color.iter_mut().zip(&other.d_color) {
            for ch in 0..3 {
                a[ch] += b[ch];
            }
        }
        for (a, b) in self.d_position.iter_mut().zip(&other.d_position) {
            for ch in 0..3 {
                a[ch] += b[ch];
            }
        }
        for ch in 0..3 {
            self.d_background[ch] += other.d_background[ch];
        }
    }
}

fn pixel_range(c: f64, r: f64, limit: usize) -> std::ops::Range<usize> {
    let lo = (c - r - 0.5).ceil().max(0.0) as usize;
    let hi = ((c + r - 0.5).floor() as i64).min(limit as i64 - 1);
    if hi < lo as i64 {
        return 0..0;
    }
    lo..(hi as usize + 1)
}

/// Render and cache the compositing graph.
///
/// Splats are composited per pixel strictly front to back in global
/// (depth, id) order; the background is composited behind everything with
/// the remaining transmittance.
pub fn render(
    primitives: &[RenderGaussian],
    camera: &Camera,
    background: [f64; 3],
    options: &RenderOptions,
) -> (Image, RenderGraph) {
    let mut splats: Vec<ProjectedSplat> = primitives
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            project(camera, &g.position, g.scale, options).map(|mut s| {
                s.prim_id = i as u32;
                s.opacity = g.opacity;
                s.color = g.color;
                s
            })
        })
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.prim_id.cmp(&b.prim_id))
    });

    let (w, h) = (camera.width as usize, camera.height as usize);
    // Row buckets preserve the global depth order within each row.
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (si, s) in splats.iter().enumerate() {
        let r = options.footprint_sigmas * s.sigma2d;
        for y in pixel_range(s.cy, r, h) {
            rows[y].push(si as u32);
        }
    }

    let render_row = |y: usize| {
        let mut frags: Vec<Vec<Fragment>> = vec![Vec::new(); w];
        let mut color = vec![[0.0f64; 3]; w];
        let mut trans = vec![1.0f64; w];
        for &si in &rows[y] {
            let s = &splats[si as usize];
            let r = options.footprint_sigmas * s.sigma2d;
            let dy = y as f64 + 0.5 - s.cy;
            for x in pixel_range(s.cx, r, w) {
                let dx = x as f64 + 0.5 - s.cx;
                let q = dx * dx + dy * dy;
                let gauss = (-q / (2.0 * s.sigma2d * s.sigma2d)).exp();
                let alpha = (s.opacity * gauss).min(options.alpha_max);
                let t = trans[x];
                frags[x].push(Fragment {
                    splat: si,
                    gauss,
                    alpha,
                    trans: t,
                });
                for ch in 0..3 {
                    color[x][ch] += s.color[ch] * alpha * t;
                }
                trans[x] = t * (1.0 - alpha);
            }
        }
        (frags, color, trans)
    };

    let per_row: Vec<_> = if options.parallel {
        (0..h).into_par_iter().map(render_row).collect()
    } else {
        (0..h).map(render_row).collect()
    };

    let mut image = Image::new(w, h);
    let mut fragments = Vec::with_capacity(w * h);
    let mut final_trans = Vec::with_capacity(w * h);
    for (y, (frags, color, trans)) in per_row.into_iter().enumerate() {
        for (x, f) in frags.into_iter().enumerate() {
            let t = trans[x];
            let mut c = color[x];
            for ch in 0..3 {
                c[ch] += background[ch] * t;
            }
            image.set(x, y, c);
            fragments.push(f);
            final_trans.push(t);
        }
    }

    let graph = RenderGraph {
        camera: camera.clone(),
        background,
        alpha_max: options.alpha_max,
        splats,
        num_primitives: primitives.len(),
        fragments,
        final_trans,
    };
    (image, graph)
}

impl RenderGraph {
    pub fn width(&self) -> usize {
        self.camera.width as usize
    }

    pub fn height(&self) -> usize {
        self.camera.height as usize
    }

    /// Backward sweep over one pixel. Calls `per_fragment(fragment, splat,
    /// d_alpha_contraction, suffix_before)` back to front, where the third
    /// argument is `dI/d alpha` contracted with the pixel adjoint.
    fn sweep_pixel<F>(&self, px: usize, r: [f64; 3], mut per_fragment: F)
    where
        F: FnMut(&Fragment, &ProjectedSplat, f64),
    {
        let t_final = self.final_trans[px];
        let mut suffix = [
            self.background[0] * t_final,
            self.background[1] * t_final,
            self.background[2] * t_final,
        ];
        for f in self.fragments[px].iter().rev() {
            let s = &self.splats[f.splat as usize];
            let one_minus = 1.0 - f.alpha;
            let mut d_alpha = 0.0;
            for ch in 0..3 {
                d_alpha += r[ch] * (s.color[ch] * f.trans - suffix[ch] / one_minus);
            }
            per_fragment(f, s, d_alpha);
            for ch in 0..3 {
                suffix[ch] += s.color[ch] * f.alpha * f.trans;
            }
        }
    }

    fn backward_range(&self, d_image: &Image, pixels: std::ops::Range<usize>) -> RenderGrads {
        let w = self.width();
        let mut grads = RenderGrads::zeros(self.num_primitives);
        let mut d_center = vec![[0.0f64; 2]; self.splats.len()];
        let mut d_sigma = vec![0.0f64; self.splats.len()];

        for px in pixels {
            let (x, y) = (px % w, px / w);
            let r = d_image.get(x, y);
            let t_final = self.final_trans[px];
            for ch in 0..3 {
                grads.d_background[ch] += r[ch] * t_final;
            }
            self.sweep_pixel(px, r, |f, s, d_alpha| {
                let id = s.prim_id as usize;
                for ch in 0..3 {
                    grads.d_color[id][ch] += r[ch] * f.alpha * f.trans;
                }
                // Through the clamp: alpha = min(o * G, alpha_max).
                if f.alpha < self.alpha_max {
                    grads.d_opacity[id] += d_alpha * f.gauss;
                    let d_gauss = d_alpha * s.opacity;
                    let dx = x as f64 + 0.5 - s.cx;
                    let dy = y as f64 + 0.5 - s.cy;
                    let sig2 = s.sigma2d * s.sigma2d;
                    d_center[f.splat as usize][0] += d_gauss * f.gauss * dx / sig2;
                    d_center[f.splat as usize][1] += d_gauss * f.gauss * dy / sig2;
                    d_sigma[f.splat as usize] +=
                        d_gauss * f.gauss * (dx * dx + dy * dy) / (sig2 * s.sigma2d);
                }
            });
        }

        // Chain pixel-space center and sigma to world position and scale.
        let focal = self.camera.focal;
        let rot = &self.camera.rotation;
        for (si, s) in self.splats.iter().enumerate() {
            let id = s.prim_id as usize;
            let [cam_x, cam_y, cam_z] = s.cam;
            let d_cx = d_center[si][0];
            let d_cy = d_center[si][1];
            let ds = d_sigma[si];
            let d_cam = [
                d_cx * focal / cam_z,
                d_cy * focal / cam_z,
                -(d_cx * cam_x + d_cy * cam_y) * focal / (cam_z * cam_z)
                    - ds * s.sigma2d / cam_z,
            ];
            for wq in 0..3 {
                grads.d_position[id][wq] +=
                    rot[(0, wq)] * d_cam[0] + rot[(1, wq)] * d_cam[1] + rot[(2, wq)] * d_cam[2];
            }
            grads.d_scale[id] += ds * focal / cam_z;
        }
        grads
    }

    /// Exact reverse-mode derivatives of the compositing expression,
    /// contracted with the per-pixel loss adjoint `d_image`.
    ///
    /// The parallel path reduces per-chunk partials in chunk order, so both
    /// paths are deterministic; they differ only by float regrouping.
    pub fn backward(&self, d_image: &Image, parallel: bool) -> RenderGrads {
        assert_eq!(d_image.width, self.width());
        assert_eq!(d_image.height, self.height());
        let total = self.width() * self.height();
        if !parallel {
            return self.backward_range(d_image, 0..total);
        }
        let chunk = (total / (4 * rayon::current_num_threads().max(1))).max(self.width());
        let ranges: Vec<_> = (0..total)
            .step_by(chunk)
            .map(|s| s..(s + chunk).min(total))
            .collect();
        let partials: Vec<RenderGrads> = ranges
            .into_par_iter()
            .map(|rg| self.backward_range(d_image, rg))
            .collect();
        let mut grads = RenderGrads::zeros(self.num_primitives);
        for p in &partials {
            grads.add(p);
        }
        grads
    }

    /// Per-primitive `o_i * dI/do_i` as sparse per-pixel images.
    ///
    /// Equals the exact per-pixel difference `I - I_{-i}` (always through
    /// `alpha * dI/d alpha`, which stays exact even at the alpha clamp).
    pub fn opacity_sensitivity(&self) -> Vec<Vec<(u32, [f64; 3])>> {
        let mut out = vec![Vec::new(); self.num_primitives];
        for px in 0..self.width() * self.height() {
            let t_final = self.final_trans[px];
            let mut suffix = [
                self.background[0] * t_final,
                self.background[1] * t_final,
                self.background[2] * t_final,
            ];
            for f in self.fragments[px].iter().rev() {
                let s = &self.splats[f.splat as usize];
                let one_minus = 1.0 - f.alpha;
                let mut v = [0.0; 3];
                for ch in 0..3 {
                    v[ch] = f.alpha * (s.color[ch] * f.trans - suffix[ch] / one_minus);
                }
                out[s.prim_id as usize].push((px as u32, v));
                for ch in 0..3 {
                    suffix[ch] += s.color[ch] * f.alpha * f.trans;
                }
            }
        }
        out
    }

    /// Per-primitive scalar `w_i = o_i * dL/do_i`, the loss-space change from
    /// removing the primitive, contracted with `d_image`.
    pub fn opacity_loss_weights(&self, d_image: &Image) -> Vec<f64> {
        let w = self.width();
        let mut weights = vec![0.0; self.num_primitives];
        for px in 0..w * self.height() {
            let (x, y) = (px % w, px / w);
            let r = d_image.get(x, y);
            self.sweep_pixel(px, r, |f, s, d_alpha| {
                weights[s.prim_id as usize] += f.alpha * d_alpha;
            });
        }
        weights
    }
}

/// Re-render with primitive `omit` removed: the brute-force leave-one-out
/// image the sensitivity identity is checked against.
pub fn leave_one_out(
    primitives: &[RenderGaussian],
    camera: &Camera,
    omit: usize,
    background: [f64; 3],
    options: &RenderOptions,
) -> Image {
    let rest: Vec<RenderGaussian> = primitives
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != omit)
        .map(|(_, g)| *g)
        .collect();
    render(&rest, camera, background, options).0
}

/// Deterministic seeded subset when the primitive count exceeds the cap.
pub fn apply_render_cap(
    primitives: Vec<RenderGaussian>,
    cap: usize,
    seed: u64,
) -> Vec<RenderGaussian> {
    if primitives.len() <= cap {
        return primitives;
    }
    let mut idx: Vec<usize> = (0..primitives.len()).collect();
    let mut rng = rng_for(seed, Stream::RenderCap, 0);
    for i in 0..cap {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut keep: Vec<usize> = idx[..cap].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| primitives[i]).collect()
}

/// Additive 1D model: the signal is a plain sum of kernel evaluations.
#[derive(Clone, Copy, Debug)]
pub struct Kernel1D {
    pub amplitude: f64,
    pub width: f64,
}

impl Kernel1D {
    pub fn eval(&self, x: f64, center: f64) -> f64 {
        let d = x - center;
        self.amplitude * (-d * d / (2.0 * self.width * self.width)).exp()
    }

    /// d eval / d center.
    pub fn grad_center(&self, x: f64, center: f64) -> f64 {
        let d = x - center;
        self.eval(x, center) * d / (self.width * self.width)
    }
}

/// Evaluate the summed signal on a grid of sample points.
pub fn additive_render_1d(centers: &[f64], kernel: &Kernel1D, xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    for &c in centers {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o += kernel.eval(x, c);
        }
    }
    out
}
