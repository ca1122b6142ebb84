//! Image loss, attribute regularizers, and quality metrics.
//!
//! The image term mixes mean absolute error with structural dissimilarity,
//! `lambda1 * L1 + (1 - lambda1) * (1 - SSIM)`, both with manual adjoints.
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) with per-pixel kernel
//! renormalization at the borders, standard constants, data range 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Image;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Mix between L1 (weight `lambda1`) and DSSIM (weight `1 - lambda1`).
    pub lambda1: f64,
    pub lambda_opacity: f64,
    pub lambda_scale: f64,
    pub lambda_color: f64,
    /// Opacity below this threshold escapes the opacity penalty.
    pub tau: f64,
    /// Per-degree weight on SH coefficients: 0 for degree 0, `decay^l` above.
    pub sh_weight_decay: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.8,
            lambda_opacity: 0.05,
            lambda_scale: 0.02,
            lambda_color: 1e-3,
            tau: 0.05,
            sh_weight_decay: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::config("lambda1 must be in [0,1]"));
        }
        if self.lambda_opacity < 0.0 || self.lambda_scale < 0.0 || self.lambda_color < 0.0 {
            return Err(Error::config("regularizer weights must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config("tau must be in (0,1)"));
        }
        Ok(())
    }

    /// Weight of SH basis function `b` in the color regularizer.
    pub fn sh_reg_weight(&self, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            self.sh_weight_decay
        }
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable same-size filter with border renormalization. `adjoint` divides
/// by the local weight before convolving instead of after, which is exactly
/// the transpose of the forward operator.
fn filter_axis(src: &[f64], w: usize, h: usize, horizontal: bool, adjoint: bool) -> Vec<f64> {
    let k = gaussian_kernel();
    let half = SSIM_WINDOW as i64 / 2;
    let mut out = vec![0.0; src.len()];
    let (outer, inner) = if horizontal { (h, w) } else { (w, h) };
    let idx = |o: usize, i: usize| if horizontal { o * w + i } else { i * w + o };
    // Local kernel mass for each inner position.
    let mut z = vec![0.0f64; inner];
    for (i, zi) in z.iter_mut().enumerate() {
        for (t, kv) in k.iter().enumerate() {
            let j = i as i64 + t as i64 - half;
            if j >= 0 && j < inner as i64 {
                *zi += kv;
            }
        }
    }
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let j = i as i64 + t as i64 - half;
                if j >= 0 && j < inner as i64 {
                    let ju = j as usize;
                    let v = src[idx(o, ju)];
                    acc += kv * if adjoint { v / z[ju] } else { v };
                }
            }
            out[idx(o, i)] = if adjoint { acc } else { acc / z[i] };
        }
    }
    out
}

fn filter2(src: &[f64], w: usize, h: usize, adjoint: bool) -> Vec<f64> {
    let tmp = filter_axis(src, w, h, true, adjoint);
    filter_axis(&tmp, w, h, false, adjoint)
}

fn channel_plane(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels, plus d(SSIM)/d(first image).
fn ssim_and_grad(img: &Image, reference: &Image) -> (f64, Image) {
    let (w, h) = (img.width, img.height);
    let n = w * h;
    let mut total = 0.0;
    let mut grad = Image::new(w, h);
    for ch in 0..3 {
        let x = channel_plane(img, ch);
        let y = channel_plane(reference, ch);
        let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
        let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter2(&x, w, h, false);
        let my = filter2(&y, w, h, false);
        let fx2 = filter2(&x2, w, h, false);
        let fy2 = filter2(&y2, w, h, false);
        let fxy = filter2(&xy, w, h, false);

        let mut g_mx = vec![0.0; n]; // total coefficient of d mx
        let mut g_x2 = vec![0.0; n]; // coefficient of d fx2
        let mut g_xy = vec![0.0; n]; // coefficient of d fxy
        for p in 0..n {
            let (mxp, myp) = (mx[p], my[p]);
            let sx = fx2[p] - mxp * mxp;
            let sy = fy2[p] - myp * myp;
            let sxy = fxy[p] - mxp * myp;
            let n1 = 2.0 * mxp * myp + SSIM_C1;
            let n2 = 2.0 * sxy + SSIM_C2;
            let d1 = mxp * mxp + myp * myp + SSIM_C1;
            let d2 = sx + sy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;

            let ds_dmx = 2.0 * myp * n2 / (d1 * d2) - s * 2.0 * mxp / d1;
            let ds_dsx = -s / d2;
            let ds_dsxy = 2.0 * n1 / (d1 * d2);
            g_mx[p] = ds_dmx + ds_dsx * (-2.0 * mxp) + ds_dsxy * (-myp);
            g_x2[p] = ds_dsx;
            g_xy[p] = ds_dsxy;
        }
        let a_mx = filter2(&g_mx, w, h, true);
        let a_x2 = filter2(&g_x2, w, h, true);
        let a_xy = filter2(&g_xy, w, h, true);
        let scale = 1.0 / (3.0 * n as f64);
        for p in 0..n {
            grad.data[p * 3 + ch] =
                scale * (a_mx[p] + 2.0 * x[p] * a_x2[p] + y[p] * a_xy[p]);
        }
    }
    (total / (3.0 * n as f64), grad)
}

/// `lambda1 * mean|I - GT| + (1 - lambda1) * (1 - SSIM)` and its adjoint
/// with respect to the rendered image.
pub fn image_loss(img: &Image, reference: &Image, cfg: &LossConfig) -> Result<(f64, Image)> {
    if img.width != reference.width || img.height != reference.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            img.width, img.height, reference.width, reference.height
        )));
    }
    let n = img.data.len() as f64;
    let mut l1 = 0.0;
    let mut grad = Image::new(img.width, img.height);
    for (i, (a, b)) in img.data.iter().zip(&reference.data).enumerate() {
        let d = a - b;
        l1 += d.abs();
        // L1 subgradient with 0 at the kink (f64::signum(0.0) is 1.0).
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.data[i] = cfg.lambda1 * sign / n;
    }
    l1 /= n;
    let mut loss = cfg.lambda1 * l1;
    if cfg.lambda1 < 1.0 {
        let (ssim, ssim_grad) = ssim_and_grad(img, reference);
        loss += (1.0 - cfg.lambda1) * (1.0 - ssim);
        for (g, sg) in grad.data.iter_mut().zip(&ssim_grad.data) {
            *g -= (1.0 - cfg.lambda1) * sg;
        }
    }
    Ok((loss, grad))
}

/// Attribute regularizers for one rendered batch of in-frustum Gaussians.
///
/// Inputs are activated opacity and scale plus raw SH coefficients (layout:
/// 3 channels x basis). Returns the penalty and its gradients with respect
/// to those quantities.
pub struct RegularizerGrads {
    pub value: f64,
    pub d_opacity: Vec<f64>,
    pub d_scale: Vec<f64>,
    pub d_sh: Vec<Vec<f64>>,
}

pub fn regularizers(
    opacity: &[f64],
    scale: &[f64],
    raw_sh: &[&[f64]],
    cfg: &LossConfig,
) -> RegularizerGrads {
    let n = opacity.len();
    let mut out = RegularizerGrads {
        value: 0.0,
        d_opacity: vec![0.0; n],
        d_scale: vec![0.0; n],
        d_sh: raw_sh.iter().map(|s| vec![0.0; s.len()]).collect(),
    };
    for i in 0..n {
        if opacity[i] > cfg.tau {
            out.value += cfg.lambda_opacity * opacity[i].abs();
            out.d_opacity[i] = cfg.lambda_opacity * opacity[i].signum();
        }
        out.value += cfg.lambda_scale * scale[i].abs();
        out.d_scale[i] = cfg.lambda_scale * scale[i].signum();
        let basis = raw_sh[i].len() / 3;
        for ch in 0..3 {
            for b in 0..basis {
                let wgt = cfg.sh_reg_weight(b);
                if wgt == 0.0 {
                    continue;
                }
                let c = raw_sh[i][ch * basis + b];
                out.value += cfg.lambda_color * wgt * c.abs();
                out.d_sh[i][ch * basis + b] = cfg.lambda_color * wgt * c.signum();
            }
        }
    }
    out
}

/// Peak signal-to-noise ratio in dB for images in [0,1]. Identical images
/// report `f64::INFINITY`.
pub fn psnr(img: &Image, reference: &Image) -> f64 {
    let mse: f64 = img
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / img.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Mean SSIM (same kernel as the loss).
pub fn ssim(img: &Image, reference: &Image) -> f64 {
    ssim_and_grad(img, reference).0
}
