//! Synthetic scene generation and scene-scale normalization.
//!
//! Synthetic datasets are the ground-truth oracle for end-to-end training:
//! random Gaussians rendered by this crate's own renderer from a ring of
//! cameras, split into training and held-out views.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{sh_basis, ActivationConfig, SH_C0};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::render::{render, Image, RenderGaussian, RenderOptions};
use crate::rng::{rng_for, Stream};

/// One ground-truth Gaussian in activated space; color is view-dependent
/// through the same damped SH basis the attribute table uses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub position: [f64; 3],
    pub opacity: f64,
    pub scale: f64,
    /// 3 channels x SH basis coefficients.
    pub sh: Vec<f64>,
}

impl ScenePrimitive {
    pub fn color(&self, cfg: &ActivationConfig, view_dir: &[f64; 3]) -> [f64; 3] {
        let basis_count = self.sh.len() / 3;
        let basis = sh_basis(view_dir);
        let mut color = [0.0; 3];
        for (ch, c) in color.iter_mut().enumerate() {
            for b in 0..basis_count {
                *c += cfg.sh_weight(b) * self.sh[ch * basis_count + b] * basis[b];
            }
        }
        color
    }

    pub fn to_render_gaussian(&self, cfg: &ActivationConfig, camera: &Camera) -> RenderGaussian {
        let p = Vector3::new(self.position[0], self.position[1], self.position[2]);
        RenderGaussian {
            position: self.position,
            opacity: self.opacity,
            scale: self.scale,
            color: self.color(cfg, &camera.view_direction(&p)),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: usize,
    pub train_cameras: usize,
    pub heldout_cameras: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub camera_radius: f64,
    /// Half extent of the box ground-truth positions are drawn from.
    pub position_extent: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub opacity_min: f64,
    pub opacity_max: f64,
    pub color_min: f64,
    pub color_max: f64,
    /// Ground-truth SH degree (0 or 1; degree-1 coefficients stay small).
    pub sh_degree: usize,
    pub z_near: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            primitives: 200,
            train_cameras: 16,
            heldout_cameras: 4,
            width: 64,
            height: 64,
            focal: 52.0,
            camera_radius: 1.8,
            position_extent: 0.8,
            scale_min: 0.08,
            scale_max: 0.22,
            opacity_min: 0.5,
            opacity_max: 0.95,
            color_min: 0.15,
            color_max: 1.0,
            sh_degree: 1,
            z_near: 0.2,
            seed: 0,
        }
    }
}

/// Ground truth plus rendered views.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub primitives: Vec<ScenePrimitive>,
    pub train_cameras: Vec<Camera>,
    pub train_images: Vec<Image>,
    pub heldout_cameras: Vec<Camera>,
    pub heldout_images: Vec<Image>,
}

fn ring_camera(spec: &SceneSpec, angle: f64, elevation: f64) -> Camera {
    let eye = Vector3::new(
        spec.camera_radius * angle.cos() * elevation.cos(),
        spec.camera_radius * elevation.sin(),
        spec.camera_radius * angle.sin() * elevation.cos(),
    );
    Camera::look_at(
        eye,
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        spec.focal,
        spec.width,
        spec.height,
        spec.z_near,
    )
    .expect("ring camera is valid")
}

/// Generate ground truth and render the dataset with a black background
/// (the evaluation convention).
pub fn synth_scene(spec: &SceneSpec) -> SyntheticScene {
    let mut rng = rng_for(spec.seed, Stream::Scene, 0);
    let act = ActivationConfig::default();
    let basis_count = if spec.sh_degree == 0 { 1 } else { 4 };
    let primitives: Vec<ScenePrimitive> = (0..spec.primitives)
        .map(|_| {
            let e = spec.position_extent;
            let mut sh = vec![0.0; 3 * basis_count];
            for ch in 0..3 {
                let v = rng.gen_range(spec.color_min..spec.color_max);
                sh[ch * basis_count] = v / SH_C0;
                for b in 1..basis_count {
                    sh[ch * basis_count + b] = rng.gen_range(-0.25..0.25) / SH_C0;
                }
            }
            ScenePrimitive {
                position: [
                    rng.gen_range(-e..e),
                    rng.gen_range(-e..e),
                    rng.gen_range(-e..e),
                ],
                opacity: rng.gen_range(spec.opacity_min..spec.opacity_max),
                scale: rng.gen_range(spec.scale_min..spec.scale_max),
                sh,
            }
        })
        .collect();

    // Train cameras on an evenly spaced ring with varying elevation;
    // held-out cameras interleave at offset angles.
    let mut train_cameras = Vec::with_capacity(spec.train_cameras);
    for k in 0..spec.train_cameras {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / spec.train_cameras.max(1) as f64;
        let elevation = 0.45 * ((k % 4) as f64 - 1.5) / 1.5;
        train_cameras.push(ring_camera(spec, angle, elevation));
    }
    let mut heldout_cameras = Vec::with_capacity(spec.heldout_cameras);
    for k in 0..spec.heldout_cameras {
        let angle = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / spec.heldout_cameras.max(1) as f64;
        let elevation = 0.3 * ((k % 3) as f64 - 1.0);
        heldout_cameras.push(ring_camera(spec, angle, elevation));
    }

    let options = RenderOptions::default();
    let render_view = |cam: &Camera| {
        let gaussians: Vec<RenderGaussian> = primitives
            .iter()
            .map(|p| p.to_render_gaussian(&act, cam))
            .collect();
        render(&gaussians, cam, [0.0; 3], &options).0
    };
    let train_images: Vec<Image> = train_cameras.iter().map(render_view).collect();
    let heldout_images: Vec<Image> = heldout_cameras.iter().map(render_view).collect();

    SyntheticScene {
        spec: spec.clone(),
        primitives,
        train_cameras,
        train_images,
        heldout_cameras,
        heldout_images,
    }
}

/// A posed dataset ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_cameras: Vec<Camera>,
    pub train_images: Vec<Image>,
    pub heldout_cameras: Vec<Camera>,
    pub heldout_images: Vec<Image>,
}

impl Dataset {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        Dataset {
            train_cameras: scene.train_cameras.clone(),
            train_images: scene.train_images.clone(),
            heldout_cameras: scene.heldout_cameras.clone(),
            heldout_images: scene.heldout_images.clone(),
        }
    }
}

/// Similarity transform `x' = scale * rotation * (x - center)` aligning the
/// training cameras' principal components with the world axes and fitting
/// their centers inside `[-1,1]^3`.
#[derive(Clone, Copy, Debug)]
pub struct SceneTransform {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub center: Vector3<f64>,
}

impl SceneTransform {
    pub fn identity() -> Self {
        SceneTransform {
            rotation: Matrix3::identity(),
            scale: 1.0,
            center: Vector3::zeros(),
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * (p - self.center))
    }

    /// Re-pose a camera into the normalized frame. Pinhole projection is
    /// invariant to a global similarity, so intrinsics are untouched.
    pub fn apply_camera(&self, cam: &Camera) -> Camera {
        let rotation = cam.rotation * self.rotation.transpose();
        let new_center = self.apply_point(&cam.center());
        let translation = -rotation * new_center;
        Camera {
            rotation,
            translation,
            ..cam.clone()
        }
    }

    pub fn apply_dataset(&self, ds: &Dataset) -> Dataset {
        Dataset {
            train_cameras: ds.train_cameras.iter().map(|c| self.apply_camera(c)).collect(),
            train_images: ds.train_images.clone(),
            heldout_cameras: ds
                .heldout_cameras
                .iter()
                .map(|c| self.apply_camera(c))
                .collect(),
            heldout_images: ds.heldout_images.clone(),
        }
    }
}

/// Estimate the normalization transform from camera centers.
///
/// Principal components align to the axes; degenerate clouds (fewer than 3
/// non-collinear centers) fall back to an axis-aligned bounding box, and a
/// single repeated center to identity rotation with pure scale/translate.
pub fn normalize_scene(centers: &[Vector3<f64>]) -> Result<SceneTransform> {
    if centers.is_empty() {
        return Err(Error::config("no camera centers"));
    }
    let n = centers.len() as f64;
    let mean: Vector3<f64> = centers.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for c in centers {
        let d = c - mean;
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = cov.symmetric_eigen();
    // Sort eigenpairs by descending eigenvalue.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let spread = eig.eigenvalues[order[0]].max(0.0);
    let planar = eig.eigenvalues[order[1]].max(0.0);

    let rotation = if spread <= 1e-24 {
        // All centers coincide: identity rotation.
        Matrix3::identity()
    } else if planar <= 1e-12 * spread {
        // Collinear: axis-aligned bounding box fallback.
        Matrix3::identity()
    } else {
        let mut rot = Matrix3::zeros();
        for (row, &o) in order.iter().enumerate() {
            let v = eig.eigenvectors.column(o);
            rot.set_row(row, &v.transpose());
        }
        if rot.determinant() < 0.0 {
            let r2 = -rot.row(2).clone_owned();
            rot.set_row(2, &r2);
        }
        rot
    };

    let mut max_abs: f64 = 0.0;
    for c in centers {
        let y = rotation * (c - mean);
        max_abs = max_abs.max(y.abs().max());
    }
    let scale = if max_abs > 0.0 { 1.0 / max_abs } else { 1.0 };
    Ok(SceneTransform {
        rotation,
        scale,
        center: mean,
    })
}
