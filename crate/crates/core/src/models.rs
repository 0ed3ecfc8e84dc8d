//! Continuous-time measurement and process models.
//!
//! The full state is `x = [q, r, ṙ, b]` (attitude, position, velocity, gyro bias). Filtering is
//! done on the 12-dimensional error `δx = [δq_v, δr, δṙ, δb]`, where the attitude error is
//! multiplicative: `q = δq ⊗ q̂`, so that `A(q) = Â A(δq)`.

use nalgebra::{SMatrix, SVector, Vector4, Vector6};

use crate::error::{Error, Result};
use crate::quat::{cross_matrix, quat_from_error, Mat3, Quaternion, Vec3};

pub type Vec12 = SVector<f64, 12>;
pub type Mat12 = SMatrix<f64, 12, 12>;
pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat6x12 = SMatrix<f64, 6, 12>;
pub type Mat3x12 = SMatrix<f64, 3, 12>;
pub type Mat12x9 = SMatrix<f64, 12, 9>;

/// Offsets of the blocks inside the error-state vector.
pub const ATT: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BIAS: usize = 9;

/// Standard gravity used by the default geometry, m/s².
pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateEstimate {
    /// Body-to-inertial attitude.
    pub q: Quaternion,
    /// Position of the IMU origin, m.
    pub r: Vec3,
    /// Velocity, m/s.
    pub v: Vec3,
    /// Gyro bias, rad/s. The angular rate is `ω = u_g + b`.
    pub b: Vec3,
}

impl Default for StateEstimate {
    fn default() -> Self {
        StateEstimate {
            q: Quaternion::identity(),
            r: Vec3::zeros(),
            v: Vec3::zeros(),
            b: Vec3::zeros(),
        }
    }
}

impl StateEstimate {
    pub fn is_finite(&self) -> bool {
        self.q.v.iter().all(|x| x.is_finite())
            && self.q.s.is_finite()
            && self.r.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.b.iter().all(|x| x.is_finite())
    }

    /// Applies an error-state correction: additive for `r, ṙ, b`, multiplicative for `q`.
    pub fn apply_error(&self, dx: &Vec12) -> Result<StateEstimate> {
        let dq = quat_from_error(&dx.fixed_rows::<3>(ATT).into_owned())?;
        Ok(StateEstimate {
            q: dq.multiply(&self.q).normalize(),
            r: self.r + dx.fixed_rows::<3>(POS),
            v: self.v + dx.fixed_rows::<3>(VEL),
            b: self.b + dx.fixed_rows::<3>(BIAS),
        })
    }

    /// Error of `self` (the estimate) relative to `truth`, in error-state coordinates.
    ///
    /// The attitude part is the vector part of `q_true ⊗ q̂*`, taken with a non-negative scalar.
    pub fn error_to(&self, truth: &StateEstimate) -> Vec12 {
        let dq = truth.q.multiply(&self.q.conjugate()).canonicalize();
        let mut e = Vec12::zeros();
        e.fixed_rows_mut::<3>(ATT).copy_from(&dq.v);
        e.fixed_rows_mut::<3>(POS).copy_from(&(truth.r - self.r));
        e.fixed_rows_mut::<3>(VEL).copy_from(&(truth.v - self.v));
        e.fixed_rows_mut::<3>(BIAS).copy_from(&(truth.b - self.b));
        e
    }
}

/// One IMU record: gyro output (rad/s) and specific force (m/s²) in the body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vec3, accel: Vec3) -> Self {
        ImuSample { t, gyro, accel }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.gyro.iter().all(|x| x.is_finite())
            && self.accel.iter().all(|x| x.is_finite())
    }

    /// Linear interpolation between two samples at time `t`.
    pub fn lerp(&self, other: &ImuSample, t: f64) -> ImuSample {
        let span = other.t - self.t;
        let w = if span > 0.0 { (t - self.t) / span } else { 0.0 };
        ImuSample {
            t,
            gyro: self.gyro + (other.gyro - self.gyro) * w,
            accel: self.accel + (other.accel - self.accel) * w,
        }
    }
}

/// Positions reported by both antennas at one epoch, m, inertial frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsFix {
    pub t: f64,
    pub p1: Vec3,
    pub p2: Vec3,
    pub valid1: bool,
    pub valid2: bool,
}

impl GpsFix {
    pub fn dual(t: f64, p1: Vec3, p2: Vec3) -> Self {
        GpsFix {
            t,
            p1,
            p2,
            valid1: true,
            valid2: true,
        }
    }

    pub fn both_valid(&self) -> bool {
        self.valid1 && self.valid2
    }

    pub fn any_valid(&self) -> bool {
        self.valid1 || self.valid2
    }

    /// Stacked `[p1; p2]`.
    pub fn stacked(&self) -> Vector6<f64> {
        let mut z = Vector6::zeros();
        z.fixed_rows_mut::<3>(0).copy_from(&self.p1);
        z.fixed_rows_mut::<3>(3).copy_from(&self.p2);
        z
    }
}

/// Antenna lever arms in the body frame and the inertial gravity vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorGeometry {
    pub e1: Vec3,
    pub e2: Vec3,
    pub gravity: Vec3,
}

impl Default for SensorGeometry {
    /// 1 m horizontal baseline along body x, gravity `(0, 0, 9.81)`.
    fn default() -> Self {
        SensorGeometry {
            e1: Vec3::new(0.5, 0.0, 0.0),
            e2: Vec3::new(-0.5, 0.0, 0.0),
            gravity: Vec3::new(0.0, 0.0, STANDARD_GRAVITY),
        }
    }
}

impl SensorGeometry {
    pub fn new(e1: Vec3, e2: Vec3, gravity: Vec3) -> Result<Self> {
        let g = gravity.norm();
        if !(9.7..=9.9).contains(&g) {
            return Err(Error::invalid(format!(
                "|g| = {g} outside [9.7, 9.9] m/s²; use SensorGeometry::with_any_gravity"
            )));
        }
        Self::with_any_gravity(e1, e2, gravity)
    }

    /// Same as [`SensorGeometry::new`] without the gravity-magnitude check.
    pub fn with_any_gravity(e1: Vec3, e2: Vec3, gravity: Vec3) -> Result<Self> {
        if (e1 - e2).norm() < 1e-3 {
            return Err(Error::invalid("antenna baseline shorter than 1 mm"));
        }
        if !(e1.iter().chain(e2.iter()).chain(gravity.iter())).all(|x| x.is_finite()) {
            return Err(Error::invalid("geometry contains non-finite values"));
        }
        Ok(SensorGeometry { e1, e2, gravity })
    }

    /// Baseline `Δe = e1 − e2`.
    pub fn baseline(&self) -> Vec3 {
        self.e1 - self.e2
    }
}

/// IMU noise densities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Gyro angle random walk, rad/s/√Hz.
    pub sigma_g: f64,
    /// Accelerometer velocity random walk, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyro bias rate random walk, rad/s²/√Hz.
    pub sigma_b: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma_g: 1e-3,
            sigma_a: 2e-2,
            sigma_b: 1e-5,
        }
    }
}

impl NoiseSpec {
    pub fn new(sigma_g: f64, sigma_a: f64, sigma_b: f64) -> Result<Self> {
        for (name, s) in [("sigma_g", sigma_g), ("sigma_a", sigma_a), ("sigma_b", sigma_b)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {s}")));
            }
        }
        Ok(NoiseSpec {
            sigma_g,
            sigma_a,
            sigma_b,
        })
    }

    pub fn zero() -> Self {
        NoiseSpec {
            sigma_g: 0.0,
            sigma_a: 0.0,
            sigma_b: 0.0,
        }
    }
}

/// Time derivative of the full state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateDerivative {
    /// `q̇` as `[v; s]`.
    pub q_dot: Vector4<f64>,
    pub r_dot: Vec3,
    pub v_dot: Vec3,
    pub b_dot: Vec3,
}

/// Predicted antenna positions `[r + A(q) e1; r + A(q) e2]`.
pub fn predict_measurement(x: &StateEstimate, geom: &SensorGeometry) -> Vector6<f64> {
    let a = x.q.rotation();
    let mut h = Vector6::zeros();
    h.fixed_rows_mut::<3>(0).copy_from(&(x.r + a * geom.e1));
    h.fixed_rows_mut::<3>(3).copy_from(&(x.r + a * geom.e2));
    h
}

/// Sensitivity of one antenna position, `[−2Â[e×], I, 0, 0]`.
pub fn antenna_jacobian(x: &StateEstimate, lever_arm: &Vec3) -> Mat3x12 {
    let mut h = Mat3x12::zeros();
    h.fixed_view_mut::<3, 3>(0, ATT)
        .copy_from(&(x.q.rotation() * cross_matrix(lever_arm) * -2.0));
    h.fixed_view_mut::<3, 3>(0, POS).copy_from(&Mat3::identity());
    h
}

/// Sensitivity of both antenna positions to the error state.
pub fn measurement_jacobian(x: &StateEstimate, geom: &SensorGeometry) -> Mat6x12 {
    let mut h = Mat6x12::zeros();
    h.fixed_view_mut::<3, 12>(0, 0)
        .copy_from(&antenna_jacobian(x, &geom.e1));
    h.fixed_view_mut::<3, 12>(3, 0)
        .copy_from(&antenna_jacobian(x, &geom.e2));
    h
}

/// Noise-free state derivative `f(x, u, 0)`.
pub fn continuous_dynamics(x: &StateEstimate, u: &ImuSample, geom: &SensorGeometry) -> StateDerivative {
    let omega = u.gyro + x.b;
    let omega_q = Quaternion { v: omega, s: 0.0 };
    StateDerivative {
        q_dot: omega_q.multiply(&x.q).to_vector4() * 0.5,
        r_dot: x.v,
        v_dot: x.q.rotation() * u.accel - geom.gravity,
        b_dot: Vec3::zeros(),
    }
}

/// Error-state dynamics matrix evaluated at `ω̂ = u_g + b̂`, `â = u_a`.
pub fn linearized_f(x: &StateEstimate, u: &ImuSample) -> Mat12 {
    let omega = u.gyro + x.b;
    let mut f = Mat12::zeros();
    f.fixed_view_mut::<3, 3>(ATT, ATT)
        .copy_from(&(-cross_matrix(&omega)));
    f.fixed_view_mut::<3, 3>(ATT, BIAS)
        .copy_from(&(Mat3::identity() * 0.5));
    f.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&Mat3::identity());
    f.fixed_view_mut::<3, 3>(VEL, ATT)
        .copy_from(&(x.q.rotation() * cross_matrix(&u.accel) * -2.0));
    f
}

/// Process-noise input matrix for `w = [w_g, w_a, w_b]`.
pub fn noise_jacobian_g(x: &StateEstimate) -> Mat12x9 {
    let mut g = Mat12x9::zeros();
    g.fixed_view_mut::<3, 3>(ATT, 0)
        .copy_from(&(Mat3::identity() * 0.5));
    g.fixed_view_mut::<3, 3>(VEL, 3).copy_from(&x.q.rotation());
    g.fixed_view_mut::<3, 3>(BIAS, 6).copy_from(&Mat3::identity());
    g
}

/// Continuous noise covariance `diag(σ_g² I, σ_a² I, σ_b² I)`.
pub fn imu_noise_covariance(n: &NoiseSpec) -> SMatrix<f64, 9, 9> {
    let mut d = SVector::<f64, 9>::zeros();
    d.fixed_rows_mut::<3>(0).fill(n.sigma_g * n.sigma_g);
    d.fixed_rows_mut::<3>(3).fill(n.sigma_a * n.sigma_a);
    d.fixed_rows_mut::<3>(6).fill(n.sigma_b * n.sigma_b);
    SMatrix::from_diagonal(&d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn random_state(rng: &mut ChaCha8Rng) -> StateEstimate {
        let q = Quaternion::new(random_vec(rng, 1.0), rng.random_range(-1.0..1.0)).unwrap();
        StateEstimate {
            q,
            r: random_vec(rng, 100.0),
            v: random_vec(rng, 5.0),
            b: random_vec(rng, 0.05),
        }
    }

    fn random_imu(rng: &mut ChaCha8Rng) -> ImuSample {
        ImuSample::new(0.0, random_vec(rng, 2.0), random_vec(rng, 12.0))
    }

    fn random_geometry(rng: &mut ChaCha8Rng) -> SensorGeometry {
        SensorGeometry::new(random_vec(rng, 1.0), random_vec(rng, 1.0), Vec3::new(0.0, 0.0, 9.81))
            .unwrap()
    }

    /// Time derivative of the error state when the truth is `x̂ ⊕ δx`, assembled from the
    /// nonlinear dynamics through the product rule on `δq = q ⊗ q̂*`.
    fn error_rate(xh: &StateEstimate, dx: &Vec12, u: &ImuSample, g: &SensorGeometry) -> Vec12 {
        let x = xh.apply_error(dx).unwrap();
        let fx = continuous_dynamics(&x, u, g);
        let fh = continuous_dynamics(xh, u, g);
        let raw = |v: &Vector4<f64>| Quaternion { v: Vec3::new(v[0], v[1], v[2]), s: v[3] };
        let dq_dot = raw(&fx.q_dot).multiply(&xh.q.conjugate())
            + x.q.multiply(&raw(&fh.q_dot).conjugate());
        let mut out = Vec12::zeros();
        out.fixed_rows_mut::<3>(ATT).copy_from(&dq_dot.v);
        out.fixed_rows_mut::<3>(POS).copy_from(&(fx.r_dot - fh.r_dot));
        out.fixed_rows_mut::<3>(VEL).copy_from(&(fx.v_dot - fh.v_dot));
        out
    }

    impl std::ops::Add for Quaternion {
        type Output = Quaternion;
        fn add(self, o: Quaternion) -> Quaternion {
            Quaternion { v: self.v + o.v, s: self.s + o.s }
        }
    }

    fn relative_error<const R: usize>(a: &SMatrix<f64, R, 12>, b: &SMatrix<f64, R, 12>) -> f64 {
        (a - b).abs().max() / b.abs().max().max(1.0)
    }

    #[test]
    fn measurement_identity_and_offset() {
        let geom = SensorGeometry::default();
        let mut x = StateEstimate::default();
        let h = predict_measurement(&x, &geom);
        assert_eq!(h.fixed_rows::<3>(0).into_owned(), geom.e1);
        assert_eq!(h.fixed_rows::<3>(3).into_owned(), geom.e2);
        x.r = Vec3::new(1.0, 2.0, 3.0);
        let h = predict_measurement(&x, &geom);
        assert_eq!(h.fixed_rows::<3>(0).into_owned(), geom.e1 + x.r);
        assert_eq!(h.fixed_rows::<3>(3).into_owned(), geom.e2 + x.r);
    }

    #[test]
    fn antenna_difference_is_rotated_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let g = random_geometry(&mut rng);
            let h = predict_measurement(&x, &g);
            let d = h.fixed_rows::<3>(0) - h.fixed_rows::<3>(3);
            assert!((d - x.q.rotation() * g.baseline()).abs().max() <= 1e-12);
            assert!((d.norm() - g.baseline().norm()).abs() <= 1e-12);
        }
    }

    #[test]
    fn jacobian_block_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_state(&mut rng);
        let mut g = random_geometry(&mut rng);
        let h = measurement_jacobian(&x, &g);
        for row in [0, 3] {
            assert_eq!(h.fixed_view::<3, 3>(row, POS).into_owned(), Mat3::identity());
            assert_eq!(h.fixed_view::<3, 3>(row, VEL).into_owned(), Mat3::zeros());
            assert_eq!(h.fixed_view::<3, 3>(row, BIAS).into_owned(), Mat3::zeros());
        }
        g.e1 = Vec3::zeros();
        let h = measurement_jacobian(&x, &g);
        assert_eq!(h.fixed_view::<3, 3>(0, ATT).into_owned(), Mat3::zeros());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let step = 1e-6;
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let g = random_geometry(&mut rng);
            let mut fd = Mat6x12::zeros();
            for j in 0..12 {
                let mut dx = Vec12::zeros();
                dx[j] = step;
                let plus = predict_measurement(&x.apply_error(&dx).unwrap(), &g);
                let minus = predict_measurement(&x.apply_error(&-dx).unwrap(), &g);
                fd.set_column(j, &((plus - minus) / (2.0 * step)));
            }
            assert!(relative_error(&measurement_jacobian(&x, &g), &fd) <= 1e-5);
        }
    }

    #[test]
    fn dynamics_equilibrium_and_free_fall() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = SensorGeometry::default();
        let mut x = random_state(&mut rng);
        x.v = Vec3::zeros();
        let u = ImuSample::new(0.0, -x.b, x.q.rotation().transpose() * g.gravity);
        let d = continuous_dynamics(&x, &u, &g);
        assert!(d.q_dot.abs().max() <= 1e-15);
        assert!(d.v_dot.abs().max() <= 1e-13);
        assert_eq!(d.r_dot, Vec3::zeros());
        assert_eq!(d.b_dot, Vec3::zeros());

        let free = ImuSample::new(0.0, Vec3::zeros(), Vec3::zeros());
        assert_eq!(continuous_dynamics(&x, &free, &g).v_dot, -g.gravity);
    }

    #[test]
    fn quaternion_rate_is_tangent_to_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = SensorGeometry::default();
        for _ in 0..50 {
            let x = random_state(&mut rng);
            let d = continuous_dynamics(&x, &random_imu(&mut rng), &g);
            assert!(d.q_dot.dot(&x.q.to_vector4()).abs() <= 1e-14);
        }
    }

    #[test]
    fn f_zero_motion_structure() {
        let x = StateEstimate::default();
        let u = ImuSample::new(0.0, Vec3::zeros(), Vec3::zeros());
        let f = linearized_f(&x, &u);
        let mut expected = Mat12::zeros();
        expected.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&Mat3::identity());
        expected.fixed_view_mut::<3, 3>(ATT, BIAS).copy_from(&(Mat3::identity() * 0.5));
        assert_eq!(f, expected);
    }

    #[test]
    fn f_matches_finite_differences_of_error_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let step = 1e-6;
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let u = random_imu(&mut rng);
            let g = random_geometry(&mut rng);
            let mut fd = Mat12::zeros();
            for j in 0..12 {
                let mut dx = Vec12::zeros();
                dx[j] = step;
                let col = (error_rate(&x, &dx, &u, &g) - error_rate(&x, &-dx, &u, &g)) / (2.0 * step);
                fd.set_column(j, &col);
            }
            assert!(relative_error(&linearized_f(&x, &u), &fd) <= 1e-5);
        }
    }

    #[test]
    fn velocity_block_reproduces_linearised_acceleration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_state(&mut rng);
        let u = random_imu(&mut rng);
        let f = linearized_f(&x, &u);
        let a_hat = x.q.rotation();
        for _ in 0..10 {
            let dq = random_vec(&mut rng, 1.0);
            let direct = -2.0 * a_hat * u.accel.cross(&dq);
            let via_f = f.fixed_view::<3, 3>(VEL, ATT) * dq;
            assert_relative_eq!(via_f, direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn noise_jacobian_structure() {
        let g = noise_jacobian_g(&StateEstimate::default());
        assert_eq!(g.fixed_view::<3, 3>(VEL, 3).into_owned(), Mat3::identity());

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_state(&mut rng);
        let g = noise_jacobian_g(&x);
        let gtg = g.transpose() * g;
        let mut expected = SMatrix::<f64, 9, 9>::identity();
        expected.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Mat3::identity() * 0.25));
        assert!((gtg - expected).abs().max() <= 1e-14);

        let q = g * imu_noise_covariance(&NoiseSpec::default()) * g.transpose();
        assert!((q - q.transpose()).abs().max() == 0.0);
        let eig = q.symmetric_eigenvalues();
        assert!(eig.min() >= -1e-18);
    }

    #[test]
    fn error_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_state(&mut rng);
        let mut dx = Vec12::zeros();
        for i in 0..12 {
            dx[i] = rng.random_range(-0.05..0.05);
        }
        let truth = x.apply_error(&dx).unwrap();
        assert!((x.error_to(&truth) - dx).abs().max() <= 1e-12);
    }

    #[test]
    fn geometry_validation() {
        let g = Vec3::new(0.0, 0.0, 9.81);
        assert!(SensorGeometry::new(Vec3::x(), Vec3::x() * 0.9995, g).is_err());
        assert!(SensorGeometry::new(Vec3::x(), -Vec3::x(), Vec3::new(0.0, 0.0, 3.7)).is_err());
        assert!(SensorGeometry::with_any_gravity(Vec3::x(), -Vec3::x(), Vec3::new(0.0, 0.0, 3.7)).is_ok());
        assert!(NoiseSpec::new(0.0, 1.0, 1.0).is_err());
    }
}
