//! Perspective projection of 3D Gaussians with first-order covariance
//! propagation, and its backward pass.
//!
//! The 3D covariance arrives factored as `Sigma = F F^T` so the projected
//! covariance is `(J R F)(J R F)^T + floor`, with `J` the pinhole Jacobian
//! and `R` the world-to-camera rotation.

use super::{Camera, COV2D_FLOOR, NEAR_PLANE};
use crate::math::{real, Real};
use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedSplat<T: Real> {
    pub mean: Vector2<T>,
    /// Inverse 2D covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [T; 3],
    pub depth: T,
    /// 3-sigma extent in pixels (square bound).
    pub radius: T,
}

/// Project one Gaussian; `None` when culled by the near plane.
pub fn project_gaussian<T: Real>(
    camera: &Camera<T>,
    x_world: &Vector3<T>,
    f_world: &Matrix3<T>,
) -> Option<ProjectedSplat<T>> {
    let xc = camera.world_to_camera(x_world);
    if xc.z <= real(NEAR_PLANE) {
        return None;
    }
    let z_inv = T::one() / xc.z;
    let mean = Vector2::new(camera.fx * xc.x * z_inv + camera.cx, camera.fy * xc.y * z_inv + camera.cy);

    let j = pinhole_jacobian(camera, &xc);
    let f_cam = camera.rot * f_world;
    let b = j * f_cam;
    let floor = real::<T>(COV2D_FLOOR);
    let sxx = b.row(0).dot(&b.row(0)) + floor;
    let sxy = b.row(0).dot(&b.row(1));
    let syy = b.row(1).dot(&b.row(1)) + floor;

    let det = sxx * syy - sxy * sxy;
    let conic = [syy / det, -sxy / det, sxx / det];

    let half = real::<T>(0.5);
    let mid = half * (sxx + syy);
    let disc = (mid * mid - det).max(T::zero()).sqrt();
    let lambda_max = mid + disc;
    let radius = real::<T>(3.0) * lambda_max.sqrt();

    Some(ProjectedSplat { mean, conic, depth: xc.z, radius })
}

fn pinhole_jacobian<T: Real>(camera: &Camera<T>, xc: &Vector3<T>) -> Matrix2x3<T> {
    let z_inv = T::one() / xc.z;
    let z_inv2 = z_inv * z_inv;
    Matrix2x3::new(
        camera.fx * z_inv,
        T::zero(),
        -camera.fx * xc.x * z_inv2,
        T::zero(),
        camera.fy * z_inv,
        -camera.fy * xc.y * z_inv2,
    )
}

/// Backward of [`project_gaussian`]: cotangents on the 2D mean and conic to
/// cotangents on the world position and the covariance factor.
pub fn project_backward<T: Real>(
    camera: &Camera<T>,
    x_world: &Vector3<T>,
    f_world: &Matrix3<T>,
    d_mean: &Vector2<T>,
    d_conic: &[T; 3],
) -> (Vector3<T>, Matrix3<T>) {
    let xc = camera.world_to_camera(x_world);
    let z_inv = T::one() / xc.z;
    let z_inv2 = z_inv * z_inv;
    let z_inv3 = z_inv2 * z_inv;
    let j = pinhole_jacobian(camera, &xc);
    let f_cam = camera.rot * f_world;
    let b = j * f_cam;
    let floor = real::<T>(COV2D_FLOOR);
    let u = b.row(0).dot(&b.row(0)) + floor;
    let w = b.row(0).dot(&b.row(1));
    let v = b.row(1).dot(&b.row(1)) + floor;
    let det = u * v - w * w;
    let det2_inv = T::one() / (det * det);

    // Conic entries (v/det, -w/det, u/det): exact partials in (u, v, w).
    let (da, db, dc) = (d_conic[0], d_conic[1], d_conic[2]);
    let two = real::<T>(2.0);
    let du = (-da * v * v + db * w * v - dc * w * w) * det2_inv;
    let dv = (-da * w * w + db * w * u - dc * u * u) * det2_inv;
    let dw = (da * two * v * w - db * (u * v + w * w) + dc * two * u * w) * det2_inv;

    // u = |B0|^2, v = |B1|^2, w = <B0, B1>.
    let mut d_b = Matrix2x3::zeros();
    for k in 0..3 {
        d_b[(0, k)] = two * du * b[(0, k)] + dw * b[(1, k)];
        d_b[(1, k)] = two * dv * b[(1, k)] + dw * b[(0, k)];
    }

    // B = J F_cam.
    let d_j = d_b * f_cam.transpose();
    let d_f_cam = j.transpose() * d_b;
    let d_f_world = camera.rot.transpose() * d_f_cam;

    // Mean path.
    let mut d_xc = Vector3::new(
        d_mean.x * camera.fx * z_inv,
        d_mean.y * camera.fy * z_inv,
        -(d_mean.x * camera.fx * xc.x + d_mean.y * camera.fy * xc.y) * z_inv2,
    );
    // Jacobian dependence on the camera-space position.
    d_xc.x += d_j[(0, 2)] * (-camera.fx * z_inv2);
    d_xc.y += d_j[(1, 2)] * (-camera.fy * z_inv2);
    d_xc.z += d_j[(0, 0)] * (-camera.fx * z_inv2)
        + d_j[(0, 2)] * (two * camera.fx * xc.x * z_inv3)
        + d_j[(1, 1)] * (-camera.fy * z_inv2)
        + d_j[(1, 2)] * (two * camera.fy * xc.y * z_inv3);

    let d_x_world = camera.rot.transpose() * d_xc;
    (d_x_world, d_f_world)
}
