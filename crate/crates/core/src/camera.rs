//! Pinhole camera with a world-to-camera rigid transform.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub const DEFAULT_Z_NEAR: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Camera {
    /// World-to-camera rotation; `x_cam = rotation * x_world + translation`.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Focal length in pixels (square pixels, principal point at center).
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub z_near: f64,
}

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
        z_near: f64,
    ) -> Result<Self> {
        let cam = Camera {
            rotation,
            translation,
            focal,
            width,
            height,
            z_near,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let gram = self.rotation * self.rotation.transpose();
        let err = (gram - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::config(format!(
                "camera rotation not orthonormal (max deviation {err:.3e})"
            )));
        }
        if self.focal <= 0.0 || self.width == 0 || self.height == 0 {
            return Err(Error::config("camera intrinsics must be positive"));
        }
        Ok(())
    }

    /// Camera looking from `eye` toward `target` with `up` roughly up
    /// (camera convention: +z forward, +x right, +y down).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
        z_near: f64,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&(-up)).normalize();
        let down = forward.cross(&right).normalize();
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * eye;
        Camera::new(rotation, translation, focal, width, height, z_near)
    }

    pub fn world_to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit vector from the camera center toward a world point.
    pub fn view_direction(&self, world: &Vector3<f64>) -> [f64; 3] {
        let v = (world - self.center()).normalize();
        [v.x, v.y, v.z]
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn look_at_maps_target_to_axis() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            50.0,
            32,
            32,
            0.2,
        )
        .unwrap();
        let p = cam.world_to_camera(&Vector3::zeros());
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.z, 3.0, epsilon = 1e-12);
        let c = cam.center();
        assert_abs_diff_eq!(c.z, -3.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut rot = Matrix3::identity();
        rot[(0, 0)] = 1.1;
        assert!(Camera::new(rot, Vector3::zeros(), 50.0, 8, 8, 0.2).is_err());
    }
}
