//! Scalar abstraction and small numeric helpers shared across the crate.
//!
//! The whole pipeline is generic over [`Real`] so that training runs in f32
//! while gradient verification runs in f64.

use nalgebra::{Matrix3, RealField, Vector3};

/// Scalar type the pipeline is generic over. Implemented for `f32` and `f64`.
pub trait Real:
    RealField
    + Copy
    + Default
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` literal into the active scalar type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// d sigmoid / dx expressed through the already-computed output.
#[inline]
pub fn sigmoid_grad_from_output<T: Real>(y: T) -> T {
    y * (T::one() - y)
}

#[inline]
pub fn inverse_sigmoid<T: Real>(y: T) -> T {
    (y / (T::one() - y)).ln()
}

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat<T> = [T; 4];

pub fn quat_identity<T: Real>() -> Quat<T> {
    [T::one(), T::zero(), T::zero(), T::zero()]
}

pub fn quat_norm<T: Real>(q: &Quat<T>) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize<T: Real>(q: &Quat<T>) -> Quat<T> {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Backward of `q_hat = q / ||q||`: maps a cotangent on `q_hat` to one on `q`.
pub fn quat_normalize_backward<T: Real>(q: &Quat<T>, d_qhat: &Quat<T>) -> Quat<T> {
    let n = quat_norm(q);
    let inv = T::one() / n;
    let qh = [q[0] * inv, q[1] * inv, q[2] * inv, q[3] * inv];
    let dot = d_qhat[0] * qh[0] + d_qhat[1] * qh[1] + d_qhat[2] * qh[2] + d_qhat[3] * qh[3];
    [
        (d_qhat[0] - dot * qh[0]) * inv,
        (d_qhat[1] - dot * qh[1]) * inv,
        (d_qhat[2] - dot * qh[2]) * inv,
        (d_qhat[3] - dot * qh[3]) * inv,
    ]
}

/// Hamilton product `a * b`.
pub fn quat_mul<T: Real>(a: &Quat<T>, b: &Quat<T>) -> Quat<T> {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Backward of the Hamilton product: cotangent on `a*b` to cotangents on `a` and `b`.
pub fn quat_mul_backward<T: Real>(a: &Quat<T>, b: &Quat<T>, d: &Quat<T>) -> (Quat<T>, Quat<T>) {
    let da = [
        d[0] * b[0] + d[1] * b[1] + d[2] * b[2] + d[3] * b[3],
        -d[0] * b[1] + d[1] * b[0] - d[2] * b[3] + d[3] * b[2],
        -d[0] * b[2] + d[1] * b[3] + d[2] * b[0] - d[3] * b[1],
        -d[0] * b[3] - d[1] * b[2] + d[2] * b[1] + d[3] * b[0],
    ];
    let db = [
        d[0] * a[0] + d[1] * a[1] + d[2] * a[2] + d[3] * a[3],
        -d[0] * a[1] + d[1] * a[0] + d[2] * a[3] - d[3] * a[2],
        -d[0] * a[2] - d[1] * a[3] + d[2] * a[0] + d[3] * a[1],
        -d[0] * a[3] + d[1] * a[2] - d[2] * a[1] + d[3] * a[0],
    ];
    (da, db)
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn quat_to_matrix<T: Real>(q: &Quat<T>) -> Matrix3<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = real::<T>(2.0);
    Matrix3::new(
        T::one() - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        T::one() - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        T::one() - two * (x * x + y * y),
    )
}

/// Backward of `quat_to_matrix`: cotangent on R to cotangent on the (unit) quaternion.
pub fn quat_to_matrix_backward<T: Real>(q: &Quat<T>, d_r: &Matrix3<T>) -> Quat<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = real::<T>(2.0);
    let g = d_r;
    // Entry-wise chain rule over the nine quadratic matrix entries.
    let dw = two
        * (-g[(0, 1)] * z + g[(0, 2)] * y + g[(1, 0)] * z - g[(1, 2)] * x - g[(2, 0)] * y
            + g[(2, 1)] * x);
    let dx = two
        * (g[(0, 1)] * y + g[(0, 2)] * z + g[(1, 0)] * y
            - two * g[(1, 1)] * x
            - g[(1, 2)] * w
            + g[(2, 0)] * z
            + g[(2, 1)] * w
            - two * g[(2, 2)] * x);
    let dy = two
        * (-two * g[(0, 0)] * y + g[(0, 1)] * x + g[(0, 2)] * w + g[(1, 0)] * x + g[(1, 2)] * z
            - g[(2, 0)] * w
            + g[(2, 1)] * z
            - two * g[(2, 2)] * y);
    let dz = two
        * (-two * g[(0, 0)] * z - g[(0, 1)] * w + g[(0, 2)] * x + g[(1, 0)] * w
            - two * g[(1, 1)] * z
            + g[(1, 2)] * y
            + g[(2, 0)] * x
            + g[(2, 1)] * y);
    [dw, dx, dy, dz]
}

/// Unit quaternion from an unconstrained 3-vector: `(1, v) / sqrt(1 + |v|^2)`.
///
/// Exactly the identity at `v = 0`, which keeps gate-zero deformation a no-op.
pub fn quat_from_vec<T: Real>(v: &Vector3<T>) -> Quat<T> {
    let s = (T::one() + v.norm_squared()).sqrt();
    let inv = T::one() / s;
    [inv, v.x * inv, v.y * inv, v.z * inv]
}

/// Backward of [`quat_from_vec`].
pub fn quat_from_vec_backward<T: Real>(v: &Vector3<T>, d_q: &Quat<T>) -> Vector3<T> {
    let n2 = v.norm_squared();
    let s = (T::one() + n2).sqrt();
    let inv = T::one() / s;
    let inv3 = inv * inv * inv;
    // q = (1, v) * inv, d inv/d v = -v * inv^3
    let raw = [T::one(), v.x, v.y, v.z];
    let mut d = Vector3::new(d_q[1] * inv, d_q[2] * inv, d_q[3] * inv);
    let dot = d_q[0] * raw[0] + d_q[1] * raw[1] + d_q[2] * raw[2] + d_q[3] * raw[3];
    d -= v.scale(dot * inv3);
    d
}

/// Rotate a symmetric cotangent identity: for `C = F F^T` and `G = dL/dC`,
/// returns `dL/dF = (G + G^T) F`.
pub fn gram_backward<T: Real>(f: &Matrix3<T>, g: &Matrix3<T>) -> Matrix3<T> {
    (g + g.transpose()) * f
}
