//! Quaternion helpers in (w, x, y, z) order, each paired with its reverse pass.

use nalgebra::Matrix3;

pub type Quat = [f64; 4];

pub const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn dot(a: &Quat, b: &Quat) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

#[inline]
pub fn norm(q: &Quat) -> f64 {
    dot(q, q).sqrt()
}

/// Returns `q / |q|` together with `|q|`.
#[inline]
pub fn normalize(q: &Quat) -> (Quat, f64) {
    let n = norm(q);
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

/// Reverse pass of [`normalize`]: maps a gradient on the unit quaternion to the raw one.
#[inline]
pub fn normalize_backward(q_hat: &Quat, n: f64, grad_hat: &Quat) -> Quat {
    let d = dot(q_hat, grad_hat);
    [
        (grad_hat[0] - q_hat[0] * d) / n,
        (grad_hat[1] - q_hat[1] * d) / n,
        (grad_hat[2] - q_hat[2] * d) / n,
        (grad_hat[3] - q_hat[3] * d) / n,
    ]
}

/// Hamilton product `a ⊗ b`.
#[inline]
pub fn mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Reverse pass of [`mul`]: returns `(dL/da, dL/db)`.
#[inline]
pub fn mul_backward(a: &Quat, b: &Quat, g: &Quat) -> (Quat, Quat) {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    let [gw, gx, gy, gz] = *g;
    let da = [
        gw * bw + gx * bx + gy * by + gz * bz,
        -gw * bx + gx * bw - gy * bz + gz * by,
        -gw * by + gx * bz + gy * bw - gz * bx,
        -gw * bz - gx * by + gy * bx + gz * bw,
    ];
    let db = [
        gw * aw + gx * ax + gy * ay + gz * az,
        -gw * ax + gx * aw + gy * az - gz * ay,
        -gw * ay - gx * az + gy * aw + gz * ax,
        -gw * az + gx * ay - gy * ax + gz * aw,
    ];
    (da, db)
}

/// Rotation matrix of a unit quaternion.
pub fn to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Reverse pass of [`to_matrix`] (treating the entries of `q` as free variables).
pub fn to_matrix_backward(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
        + w * g[(2, 1)]
        - 2.0 * x * g[(2, 2)]);
    let gy = 2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
        + z * g[(2, 1)]
        - 2.0 * y * g[(2, 2)]);
    let gz = 2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
        + y * g[(1, 2)]
        + x * g[(2, 0)]
        + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Unit quaternion for a rotation of `angle` radians about `axis` (need not be normalized).
pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&Quat) -> f64, q: Quat, analytic: Quat) {
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-7 * (1.0 + fd.abs()), "k={k} fd={fd} an={}", analytic[k]);
        }
    }

    #[test]
    fn matrix_is_orthonormal() {
        let (q, _) = normalize(&[0.3, -0.5, 0.7, 0.2]);
        let r = to_matrix(&q);
        let e = r * r.transpose() - Matrix3::identity();
        assert!(e.abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_gradient_matches_fd() {
        let q = [0.4, -0.2, 0.6, 0.1];
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.7, -0.4, 0.9, 0.1, -0.6);
        let f = |q: &Quat| to_matrix(q).component_mul(&g).sum();
        fd_check(f, q, to_matrix_backward(&q, &g));
    }

    #[test]
    fn normalize_and_mul_gradients_match_fd() {
        let q = [0.4, -0.2, 0.6, 0.1];
        let b = [0.1, 0.8, -0.3, 0.5];
        let g = [0.7, -0.1, 0.3, 0.9];
        let f = |q: &Quat| dot(&normalize(q).0, &g);
        let (qh, n) = normalize(&q);
        fd_check(f, q, normalize_backward(&qh, n, &g));

        let (da, db) = mul_backward(&q, &b, &g);
        fd_check(|a| dot(&mul(a, &b), &g), q, da);
        fd_check(|bb| dot(&mul(&q, bb), &g), b, db);
    }

    #[test]
    fn product_composes_rotations() {
        let a = from_axis_angle([0.0, 0.0, 1.0], 0.7);
        let b = from_axis_angle([1.0, 1.0, 0.0], -0.3);
        let lhs = to_matrix(&mul(&a, &b));
        let rhs = to_matrix(&a) * to_matrix(&b);
        assert!((lhs - rhs).abs().max() < 1e-12);
    }
}
