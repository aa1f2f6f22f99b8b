//! Planar pose representation, angle arithmetic, and the quaternion-to-yaw
//! conversion used to produce ground truth.
//!
//! All angles are stored in radians and wrapped into `(-pi, pi]`; degrees
//! appear only in reported metrics.

use std::f64::consts::PI;
use std::fmt;

/// Errors from pose / angle construction and conversion.
#[derive(Debug, Clone, PartialEq)]
pub enum GeomError {
    /// An input component was NaN or infinite.
    NonFinite { what: &'static str },
    /// A direction vector was too close to zero to define an angle.
    DegenerateOrientation { norm: f64 },
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeomError::NonFinite { what } => write!(f, "non-finite value in {what}"),
            GeomError::DegenerateOrientation { norm } => {
                write!(f, "direction vector norm {norm:e} too small to define an angle")
            }
        }
    }
}

impl std::error::Error for GeomError {}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI); // [0, 2*pi)
    if t > PI {
        t -= 2.0 * PI;
    }
    // rem_euclid can return exactly 2*pi for tiny negative inputs; fold again.
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// A planar robot pose: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    /// Heading, always wrapped into `(-pi, pi]`.
    theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Result<Self, GeomError> {
        if !(x.is_finite() && y.is_finite() && theta.is_finite()) {
            return Err(GeomError::NonFinite { what: "Pose2D" });
        }
        Ok(Self { x, y, theta: wrap_angle(theta) })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Position as `[x, y]`.
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Heading as the unit vector `[cos theta, sin theta]`.
    pub fn heading_vec(&self) -> [f64; 2] {
        yaw_to_vec(self.theta).expect("stored theta is finite")
    }

    /// Map a point from the sensor frame into the map frame.
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }
}

/// A unit quaternion `[qx, qy, qz, qw]`, normalized on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub qw: f64,
}

impl Quaternion {
    /// Build a quaternion, normalizing to unit length.
    pub fn new(qx: f64, qy: f64, qz: f64, qw: f64) -> Result<Self, GeomError> {
        if !(qx.is_finite() && qy.is_finite() && qz.is_finite() && qw.is_finite()) {
            return Err(GeomError::NonFinite { what: "Quaternion" });
        }
        let norm = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
        if norm < 1e-12 {
            return Err(GeomError::DegenerateOrientation { norm });
        }
        Ok(Self { qx: qx / norm, qy: qy / norm, qz: qz / norm, qw: qw / norm })
    }

    /// Quaternion for a pure yaw rotation of `theta` radians.
    pub fn from_yaw(theta: f64) -> Result<Self, GeomError> {
        if !theta.is_finite() {
            return Err(GeomError::NonFinite { what: "yaw angle" });
        }
        let half = 0.5 * theta;
        Self::new(0.0, 0.0, half.sin(), half.cos())
    }
}

/// Yaw angle of a quaternion, wrapped into `(-pi, pi]`.
pub fn quat_to_yaw(q: Quaternion) -> f64 {
    let siny = 2.0 * (q.qx * q.qy + q.qw * q.qz);
    let cosy = 1.0 - 2.0 * (q.qy * q.qy + q.qz * q.qz);
    wrap_angle(siny.atan2(cosy))
}

/// Heading angle to the unit vector `[cos theta, sin theta]`.
pub fn yaw_to_vec(theta: f64) -> Result<[f64; 2], GeomError> {
    if !theta.is_finite() {
        return Err(GeomError::NonFinite { what: "yaw angle" });
    }
    Ok([theta.cos(), theta.sin()])
}

/// Heading angle of a direction vector via `atan2`; the vector need not be
/// unit length (the regression head's raw output is unconstrained).
pub fn vec_to_yaw(v: [f64; 2]) -> Result<f64, GeomError> {
    if !(v[0].is_finite() && v[1].is_finite()) {
        return Err(GeomError::NonFinite { what: "direction vector" });
    }
    let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if norm <= 1e-8 {
        return Err(GeomError::DegenerateOrientation { norm });
    }
    Ok(wrap_angle(v[1].atan2(v[0])))
}

/// Absolute angular difference in degrees, minimized over full turns; always
/// in `[0, 180]`.
pub fn angular_error_deg(theta_pred: f64, theta_gt: f64) -> f64 {
    let d = wrap_angle(theta_pred - theta_gt).abs();
    d.to_degrees()
}

/// Euclidean distance between two planar positions, in meters.
pub fn position_error_m(p_pred: [f64; 2], p_gt: [f64; 2]) -> f64 {
    let dx = p_pred[0] - p_gt[0];
    let dy = p_pred[1] - p_gt[1];
    (dx * dx + dy * dy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quat_to_yaw_examples() {
        let id = Quaternion::new(0.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(quat_to_yaw(id), 0.0);

        let quarter = Quaternion::new(0.0, 0.0, 0.7071068, 0.7071068).unwrap();
        assert_abs_diff_eq!(quat_to_yaw(quarter), PI / 2.0, epsilon = 1e-7);

        let half = Quaternion::new(0.0, 0.0, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(quat_to_yaw(half), PI, epsilon = 1e-12);
    }

    #[test]
    fn quat_rejects_non_finite() {
        assert!(Quaternion::new(f64::NAN, 0.0, 0.0, 1.0).is_err());
        assert!(Quaternion::new(0.0, f64::INFINITY, 0.0, 1.0).is_err());
    }

    #[test]
    fn quat_normalized_on_construction() {
        let q = Quaternion::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let norm2 = q.qx * q.qx + q.qy * q.qy + q.qz * q.qz + q.qw * q.qw;
        assert_abs_diff_eq!(norm2, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn pure_yaw_quaternion_roundtrip() {
        let n = 10_000;
        for i in 0..n {
            // theta in (-pi, pi]; sweep excludes the open end.
            let theta = -PI + (i + 1) as f64 * (2.0 * PI / n as f64);
            let q = Quaternion::from_yaw(theta).unwrap();
            assert_abs_diff_eq!(quat_to_yaw(q), theta, epsilon = 1e-9);
        }
    }

    #[test]
    fn yaw_to_vec_examples() {
        assert_eq!(yaw_to_vec(0.0).unwrap(), [1.0, 0.0]);
        let v = yaw_to_vec(PI / 2.0).unwrap();
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-12);
        let v = yaw_to_vec(PI).unwrap();
        assert_abs_diff_eq!(v[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn vec_to_yaw_examples() {
        assert_eq!(vec_to_yaw([1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(vec_to_yaw([0.0, -1.0]).unwrap(), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vec_to_yaw([0.5, 0.5]).unwrap(), PI / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn vec_to_yaw_rejects_near_zero() {
        match vec_to_yaw([1e-9, -1e-9]) {
            Err(GeomError::DegenerateOrientation { .. }) => {}
            other => panic!("expected degenerate-orientation error, got {other:?}"),
        }
    }

    #[test]
    fn yaw_vec_roundtrip_10k() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let theta: f64 = rng.gen_range(-PI..PI) + f64::EPSILON; // avoid the open end
            let theta = wrap_angle(theta);
            let v = yaw_to_vec(theta).unwrap();
            assert_abs_diff_eq!(vec_to_yaw(v).unwrap(), theta, epsilon = 1e-9);
        }
    }

    #[test]
    fn heading_vec_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = Pose2D::new(0.0, 0.0, rng.gen_range(-10.0..10.0)).unwrap();
            let v = p.heading_vec();
            assert_abs_diff_eq!((v[0] * v[0] + v[1] * v[1]).sqrt(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn angular_error_examples() {
        assert_eq!(angular_error_deg(0.0, 0.0), 0.0);
        assert_abs_diff_eq!(angular_error_deg(PI / 2.0, 0.0), 90.0, epsilon = 1e-9);
        let a = 179.0_f64.to_radians();
        let b = (-179.0_f64).to_radians();
        // Brute-force minimum over 2*pi shifts.
        let brute = (-3..=3)
            .map(|k| (a - b + 2.0 * PI * k as f64).abs().to_degrees())
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(brute, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(angular_error_deg(a, b), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn angular_error_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5000 {
            let a: f64 = rng.gen_range(-20.0..20.0);
            let b: f64 = rng.gen_range(-20.0..20.0);
            let e = angular_error_deg(a, b);
            assert!((0.0..=180.0).contains(&e));
            assert_abs_diff_eq!(e, angular_error_deg(b, a), epsilon = 1e-9);
            assert_abs_diff_eq!(e, angular_error_deg(a + 2.0 * PI, b), epsilon = 1e-8);
            assert_abs_diff_eq!(e, angular_error_deg(a, b + 2.0 * PI), epsilon = 1e-8);
        }
    }

    #[test]
    fn position_error_examples() {
        assert_eq!(position_error_m([0.0, 0.0], [0.0, 0.0]), 0.0);
        assert_eq!(position_error_m([3.0, 4.0], [0.0, 0.0]), 5.0);
        assert_abs_diff_eq!(position_error_m([1.0, 1.0], [2.0, 2.0]), 2.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn wrap_angle_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let t = wrap_angle(rng.gen_range(-100.0..100.0));
            assert!(t > -PI && t <= PI, "wrapped angle {t} out of (-pi, pi]");
        }
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(3.0 * PI), PI);
    }
}
