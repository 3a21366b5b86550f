//! Rotation-vector parametrization of orientations.
//!
//! A rotation vector `theta` encodes the angle `|theta|` (radians) about the
//! axis `theta / |theta|`. Orientations are kept in the closed ball of radius
//! pi via [`rewrap`].

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

const SMALL_ANGLE: f64 = 1e-6;

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues map from rotation vector to rotation matrix.
pub fn rotation_matrix(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let k = skew(theta);
    if angle < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Matrix3::identity() + a * k + b * k * k
}

/// Partial derivatives `dR/dtheta_a`, `a = 0, 1, 2`.
pub fn rotation_derivatives(theta: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let angle2 = theta.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if angle2.sqrt() < SMALL_ANGLE {
        let k = skew(theta);
        return basis.map(|e| {
            let ea = skew(&e);
            ea + 0.5 * (ea * k + k * ea)
        });
    }
    let r = rotation_matrix(theta);
    let k = skew(theta);
    let i_minus_r = Matrix3::identity() - r;
    basis.map(|e| {
        let a = theta.dot(&e);
        let w = theta.cross(&(i_minus_r * e));
        (a * k + skew(&w)) * r / angle2
    })
}

/// Equivalent rotation vector with norm at most pi.
pub fn rewrap(theta: &Vector3<f64>) -> Vector3<f64> {
    let angle = theta.norm();
    if angle <= PI {
        return *theta;
    }
    let axis = theta / angle;
    let a = angle.rem_euclid(2.0 * PI);
    if a <= PI {
        axis * a
    } else {
        -axis * (2.0 * PI - a)
    }
}

/// Inverse of [`rotation_matrix`] on rotations, returning `|theta| <= pi`.
pub fn rotation_vector(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if angle < 1e-8 {
        return 0.5 * w;
    }
    if PI - angle > 1e-4 {
        return w * (angle / (2.0 * angle.sin()));
    }
    // near pi: axis from the symmetric part R + I = 2 a a^T (approximately)
    let s = (r + Matrix3::identity()) / 2.0;
    let col = (0..3).max_by(|&i, &j| s[(i, i)].total_cmp(&s[(j, j)])).unwrap();
    let mut axis: Vector3<f64> = s.column(col).into();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

/// Geodesic angle (radians) between two rotations.
pub fn geodesic_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Closest rotation (Frobenius sense) to an arbitrary 3x3 matrix.
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Uniformly distributed random rotation (normalized Gaussian quaternion).
pub fn random_rotation_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (w, v) = (q[0] / norm, Vector3::new(q[1], q[2], q[3]) / norm);
    let (w, v) = if w < 0.0 { (-w, -v) } else { (w, v) };
    let vn = v.norm();
    if vn < 1e-15 {
        return Vector3::zeros();
    }
    v * (2.0 * vn.atan2(w) / vn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_is_identity() {
        assert_eq!(rotation_matrix(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_x() {
        let r = rotation_matrix(&Vector3::new(PI / 2.0, 0.0, 0.0));
        assert!((r * Vector3::y() - Vector3::z()).norm() < 1e-15);
        assert!((r * Vector3::z() + Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn matches_quaternion_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t = random_rotation_vector(&mut rng);
            let r = rotation_matrix(&t);
            let axis = if t.norm() > 0.0 { t / t.norm() } else { Vector3::x() };
            // build from two half-angle quaternions composed
            let half = nalgebra::Unit::new_normalize(axis);
            let q = UnitQuaternion::from_axis_angle(&half, t.norm() / 2.0)
                * UnitQuaternion::from_axis_angle(&half, t.norm() / 2.0);
            let oracle = q.to_rotation_matrix().into_inner();
            assert!((r - oracle).abs().max() < 1e-12);
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((r * axis - axis).norm() < 1e-12);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cases: Vec<Vector3<f64>> = (0..50).map(|_| random_rotation_vector(&mut rng) * 0.9).collect();
        cases.push(Vector3::new(1e-8, -2e-8, 3e-9));
        cases.push(Vector3::zeros());
        for t in cases {
            let d = rotation_derivatives(&t);
            for (a, da) in d.iter().enumerate() {
                let h = 1e-6;
                let mut tp = t;
                let mut tm = t;
                tp[a] += h;
                tm[a] -= h;
                let fd = (rotation_matrix(&tp) - rotation_matrix(&tm)) / (2.0 * h);
                assert!((fd - da).abs().max() < 1e-8, "axis {a} at {t:?}");
            }
        }
    }

    #[test]
    fn rewrap_preserves_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let t = Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
            let w = rewrap(&t);
            assert!(w.norm() <= PI + 1e-12);
            assert!((rotation_matrix(&t) - rotation_matrix(&w)).abs().max() < 1e-10);
        }
    }

    #[test]
    fn rotation_vector_inverts_rodrigues() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let t = random_rotation_vector(&mut rng);
            let back = rotation_vector(&rotation_matrix(&t));
            assert!(geodesic_distance(&rotation_matrix(&back), &rotation_matrix(&t)) < 1e-7);
        }
        let near_pi = Vector3::new(0.0, PI - 1e-9, 0.0);
        let back = rotation_vector(&rotation_matrix(&near_pi));
        assert!(geodesic_distance(&rotation_matrix(&back), &rotation_matrix(&near_pi)) < 1e-6);
    }
}
