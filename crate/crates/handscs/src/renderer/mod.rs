//! Tile-based differentiable splatting of posed Gaussians to images.
//!
//! The forward pass projects 3D Gaussians to screen-space splats and
//! alpha-composites them front to back per 16x16 tile. The backward pass
//! replays the compositing per pixel and accumulates gradients for 2D means,
//! conics, colors, and opacities, then chains them through the projection to
//! the 3D attributes. A brute-force per-pixel reference implementation backs
//! the equivalence tests.

mod project;
mod rasterize;

pub use project::{project_backward, project_gaussian, ProjectedSplat};
pub use rasterize::{
    rasterize, rasterize_backward, rasterize_reference, RenderOutput, Splat, SplatGrads,
    ALPHA_CLAMP, ALPHA_MIN, TILE_SIZE, TRANSMITTANCE_MIN,
};

use crate::error::Error;
use crate::math::{real, Real};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Near-plane depth below which Gaussians are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Anti-aliasing floor added to both 2D covariance eigenvalues (px^2).
pub const COV2D_FLOOR: f64 = 0.3;

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rot: Matrix3<T>,
    /// World-to-camera translation.
    pub tr: Vector3<T>,
}

impl<T: Real> Camera<T> {
    /// Camera at `eye` looking at `target` (+z into the scene).
    pub fn look_at(
        eye: Vector3<T>,
        target: Vector3<T>,
        up: Vector3<T>,
        fx: T,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let tr = -(rot * eye);
        Self {
            fx,
            fy: fx,
            cx: real::<T>(width as f64) * real(0.5),
            cy: real::<T>(height as f64) * real(0.5),
            width,
            height,
            rot,
            tr,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.fx <= T::zero() || self.fy <= T::zero() {
            return Err(Error::Contract("camera focal lengths must be positive".into()));
        }
        let gram = self.rot * self.rot.transpose();
        let mut err = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { T::one() } else { T::zero() };
                err = err.max((gram[(i, j)] - want).abs());
            }
        }
        if err > real(1e-8) {
            return Err(Error::Contract("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rot * p + self.tr
    }

    /// Convert the scalar type (used when loading f64 descriptions).
    pub fn cast<U: Real>(&self) -> Camera<U> {
        Camera {
            fx: real(self.fx.to_f64().unwrap()),
            fy: real(self.fy.to_f64().unwrap()),
            cx: real(self.cx.to_f64().unwrap()),
            cy: real(self.cy.to_f64().unwrap()),
            width: self.width,
            height: self.height,
            rot: self.rot.map(|v| real(v.to_f64().unwrap())),
            tr: self.tr.map(|v| real(v.to_f64().unwrap())),
        }
    }
}

/// Dense row-major float image with `channels` interleaved values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF<T: Real> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> ImageF<T> {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![T::zero(); width * height * channels] }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn cast<U: Real>(&self) -> ImageF<U> {
        ImageF {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| real(v.to_f64().unwrap())).collect(),
        }
    }

    /// Quantize to 8-bit, round to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64().unwrap().clamp(0.0, 1.0);
                (x * 255.0).round() as u8
            })
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data: bytes.iter().map(|&b| real(b as f64 / 255.0)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_forward_at_target() {
        let cam: Camera<f64> = Camera::look_at(
            Vector3::new(0.0, 0.0, -0.5),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            400.0,
            256,
            256,
        );
        cam.validate().unwrap();
        let p = cam.world_to_camera(&Vector3::zeros());
        assert!((p.z - 0.5).abs() < 1e-12);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
    }

    #[test]
    fn invalid_focal_is_rejected() {
        let mut cam: Camera<f64> = Camera::look_at(
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            100.0,
            64,
            64,
        );
        cam.fx = -1.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn image_round_trips_through_bytes_within_quantization() {
        let mut img = ImageF::<f64>::zeros(4, 3, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.071) % 1.0;
        }
        let bytes = img.to_bytes();
        let back = ImageF::<f64>::from_bytes(4, 3, 3, &bytes);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
