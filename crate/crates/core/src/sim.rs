//! Ground-truth trajectories and synthetic sensor streams.
//!
//! Truth is analytic for the built-in shapes and RK4-integrated (at ten times the output rate)
//! for scripted profiles. Attitude is a constant body tilt followed by a heading rotation,
//! `A = R_z(ψ) R₀`, so the body rate is `ψ̇ R₀ᵀ ẑ`.
//!
//! Sensor noise comes from [`ChaCha8Rng`] streams keyed by seed, one stream per sensor, so a
//! seed reproduces bit-identical data on every platform.

use nalgebra::Vector6;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::{predict_measurement, GpsFix, ImuSample, Mat6, NoiseSpec, SensorGeometry, StateEstimate};
use crate::quat::{Quaternion, Vec3};

const IMU_STREAM: u64 = 1;
const GPS_STREAM: u64 = 2;
const SCRIPT_OVERSAMPLE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScriptSegment {
    pub duration: f64,
    /// Body angular rate, rad/s.
    pub omega: Vec3,
    /// Inertial acceleration expressed in the body frame, m/s².
    pub accel_body: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrajectoryKind {
    Static,
    /// Constant velocity along the initial heading.
    Straight,
    /// Constant-speed circle, turning left.
    Circle,
    /// Gerono lemniscate `(L sin φ, ½L sin 2φ)` started from rest with a quintic speed ramp.
    Figure8,
    Scripted(Vec<ScriptSegment>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub duration: f64,
    /// Nominal speed, m/s. For the figure-8 this is `L φ̇` at full rate.
    pub speed: f64,
    /// Circle radius or figure-8 half-width `L`, m.
    pub radius: f64,
    /// Initial heading, rad.
    pub heading: f64,
    /// Constant body tilt `R₀` as a rotation vector, rad.
    pub tilt: Vec3,
    pub origin: Vec3,
    /// Figure-8 only: initial rest period and speed-ramp duration, s.
    pub hold: f64,
    pub ramp: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            kind: TrajectoryKind::Static,
            duration: 60.0,
            speed: 2.0,
            radius: 15.0,
            heading: 0.0,
            tilt: Vec3::zeros(),
            origin: Vec3::zeros(),
            hold: 1.0,
            ramp: 10.0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return Err(Error::invalid(format!("speed must be non-negative, got {}", self.speed)));
        }
        if matches!(self.kind, TrajectoryKind::Circle | TrajectoryKind::Figure8) && !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.hold >= 0.0 && self.ramp > 0.0) {
            return Err(Error::invalid("hold must be non-negative and ramp positive"));
        }
        if let TrajectoryKind::Scripted(segments) = &self.kind {
            if segments.is_empty() || segments.iter().any(|s| !(s.duration > 0.0)) {
                return Err(Error::invalid("script needs segments of positive duration"));
            }
        }
        Ok(())
    }

    fn tilt_quat(&self) -> Quaternion {
        Quaternion::from_rotation_vector(&self.tilt)
    }

    /// `A = R_z(ψ) R₀`; with the crate's product order that is `q₀ ⊗ q_z`.
    fn attitude(&self, psi: f64) -> Quaternion {
        let qz = Quaternion::from_rotation_vector(&(Vec3::z() * psi));
        self.tilt_quat().multiply(&qz)
    }

    fn body_rate(&self, psi_dot: f64) -> Vec3 {
        self.tilt_quat().rotation().transpose() * Vec3::z() * psi_dot
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub q: Quaternion,
    pub r: Vec3,
    pub v: Vec3,
    /// Inertial acceleration, m/s².
    pub a: Vec3,
    /// Body angular rate, rad/s.
    pub omega: Vec3,
}

impl TruthSample {
    pub fn state(&self, bias: Vec3) -> StateEstimate {
        StateEstimate { q: self.q, r: self.r, v: self.v, b: bias }
    }
}

fn smoothstep(u: f64) -> (f64, f64, f64) {
    // Integral, value and derivative of 6u⁵ − 15u⁴ + 10u³ on [0, 1].
    let u = u.clamp(0.0, 1.0);
    let s = u.powi(6) - 3.0 * u.powi(5) + 2.5 * u.powi(4);
    let h = 6.0 * u.powi(5) - 15.0 * u.powi(4) + 10.0 * u.powi(3);
    let dh = 30.0 * u.powi(4) - 60.0 * u.powi(3) + 30.0 * u.powi(2);
    (s, h, dh)
}

fn analytic_sample(spec: &TrajectorySpec, t: f64) -> TruthSample {
    let rz = |v: Vec3| {
        let (s, c) = spec.heading.sin_cos();
        Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
    };
    match spec.kind {
        TrajectoryKind::Static => TruthSample {
            t,
            q: spec.attitude(spec.heading),
            r: spec.origin,
            v: Vec3::zeros(),
            a: Vec3::zeros(),
            omega: Vec3::zeros(),
        },
        TrajectoryKind::Straight => {
            let d = rz(Vec3::x());
            TruthSample {
                t,
                q: spec.attitude(spec.heading),
                r: spec.origin + d * (spec.speed * t),
                v: d * spec.speed,
                a: Vec3::zeros(),
                omega: Vec3::zeros(),
            }
        }
        TrajectoryKind::Circle => {
            let rho = spec.radius;
            let w = spec.speed / rho;
            let (s, c) = (w * t).sin_cos();
            TruthSample {
                t,
                q: spec.attitude(spec.heading + w * t),
                r: spec.origin + rz(Vec3::new(rho * s, rho * (1.0 - c), 0.0)),
                v: rz(Vec3::new(c, s, 0.0) * spec.speed),
                a: rz(Vec3::new(-s, c, 0.0) * (spec.speed * w)),
                omega: spec.body_rate(w),
            }
        }
        TrajectoryKind::Figure8 => {
            let l = spec.radius;
            let w = spec.speed / l;
            let tr = spec.ramp;
            let tm = (t - spec.hold).max(0.0);
            let (big_s, h, dh) = smoothstep(tm / tr);
            let (s, s_dot, s_ddot) = if tm < tr {
                (tr * big_s, h, if tm > 0.0 { dh / tr } else { 0.0 })
            } else {
                (0.5 * tr + (tm - tr), 1.0, 0.0)
            };
            let (phi, phi_dot, phi_ddot) = (w * s, w * s_dot, w * s_ddot);
            let (sp, cp) = phi.sin_cos();
            let (s2, c2) = (2.0 * phi).sin_cos();
            let d1 = Vec3::new(l * cp, l * c2, 0.0);
            let d2 = Vec3::new(-l * sp, -2.0 * l * s2, 0.0);
            let psi = d1.y.atan2(d1.x);
            let psi_dot = phi_dot * (d1.x * d2.y - d1.y * d2.x) / (d1.x * d1.x + d1.y * d1.y);
            TruthSample {
                t,
                q: spec.attitude(spec.heading + psi),
                r: spec.origin + rz(Vec3::new(l * sp, 0.5 * l * s2, 0.0)),
                v: rz(d1 * phi_dot),
                a: rz(d1 * phi_ddot + d2 * (phi_dot * phi_dot)),
                omega: spec.body_rate(psi_dot),
            }
        }
        TrajectoryKind::Scripted(_) => unreachable!("scripted profiles are integrated"),
    }
}

fn scripted(spec: &TrajectorySpec, segments: &[ScriptSegment], rate: f64, n_out: usize) -> Vec<TruthSample> {
    let mut q = spec.attitude(spec.heading);
    let mut r = spec.origin;
    let mut v = Vec3::zeros();
    let h = 1.0 / (rate * SCRIPT_OVERSAMPLE as f64);
    let segment_at = |t: f64| {
        let mut end = 0.0;
        for s in segments {
            end += s.duration;
            if t < end {
                return *s;
            }
        }
        ScriptSegment { duration: f64::INFINITY, omega: Vec3::zeros(), accel_body: Vec3::zeros() }
    };
    let deriv = |q: &Quaternion, seg: &ScriptSegment| {
        let qd = Quaternion { v: seg.omega, s: 0.0 }.multiply(q).to_vector4() * 0.5;
        (qd, q.rotation() * seg.accel_body)
    };
    let shift = |q: &Quaternion, d: &nalgebra::Vector4<f64>, k: f64| {
        let x = q.to_vector4() + d * k;
        Quaternion { v: Vec3::new(x[0], x[1], x[2]), s: x[3] }.normalize()
    };

    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let t = i as f64 / rate;
        let seg = segment_at(t);
        out.push(TruthSample { t, q, r, v, a: q.rotation() * seg.accel_body, omega: seg.omega });
        for j in 0..SCRIPT_OVERSAMPLE {
            // Inputs are piecewise constant, so each substep uses the segment at its start.
            let seg = segment_at(t + j as f64 * h);
            let (q1, v1) = deriv(&q, &seg);
            let (q2, v2) = deriv(&shift(&q, &q1, 0.5 * h), &seg);
            let (q3, v3) = deriv(&shift(&q, &q2, 0.5 * h), &seg);
            let (q4, v4) = deriv(&shift(&q, &q3, h), &seg);
            let qd = (q1 + (q2 + q3) * 2.0 + q4) / 6.0;
            r += (v + (v + v1 * 0.5 * h) * 2.0 + (v + v2 * 0.5 * h) * 2.0 + (v + v3 * h)) * (h / 6.0);
            v += (v1 + (v2 + v3) * 2.0 + v4) * (h / 6.0);
            q = shift(&q, &qd, h);
        }
    }
    out
}

/// Truth sampled at `rate` on `t = i / rate`, `i = 0 … ⌊duration · rate⌋`.
pub fn generate_truth(spec: &TrajectorySpec, rate: f64) -> Result<Vec<TruthSample>> {
    spec.validate()?;
    if !(rate >= 10.0 && rate.is_finite()) {
        return Err(Error::invalid(format!("truth rate must be at least 10 Hz, got {rate}")));
    }
    let n = (spec.duration * rate + 1e-9).floor() as usize + 1;
    Ok(match &spec.kind {
        TrajectoryKind::Scripted(segments) => scripted(spec, segments, rate, n),
        _ => (0..n).map(|i| analytic_sample(spec, i as f64 / rate)).collect(),
    })
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::from_fn(|_, _| StandardNormal.sample(rng))
}

/// `u_a = Aᵀ(a + g) + w_a`, `u_g = ω − b + w_g`, with per-sample standard deviation `σ √rate`.
pub fn synthesize_imu(truth: &[TruthSample], n: &NoiseSpec, bias_true: &Vec3, geom: &SensorGeometry, rate: f64, seed: u64) -> Vec<ImuSample> {
    let mut rng = stream(seed, IMU_STREAM);
    let (sg, sa) = (n.sigma_g * rate.sqrt(), n.sigma_a * rate.sqrt());
    truth
        .iter()
        .map(|s| {
            let wg = gaussian3(&mut rng) * sg;
            let wa = gaussian3(&mut rng) * sa;
            ImuSample {
                t: s.t,
                gyro: s.omega - bias_true + wg,
                accel: s.q.rotation().transpose() * (s.a + geom.gravity) + wa,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AntennaSelect {
    One,
    Two,
    Both,
}

/// GPS loss on `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outage {
    pub start: f64,
    pub end: f64,
    pub antenna: AntennaSelect,
}

/// Multiplies the GPS noise standard deviation by `scale` on `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseBurst {
    pub start: f64,
    pub end: f64,
    pub scale: f64,
}

pub fn validate_outages(outages: &[Outage]) -> Result<()> {
    for o in outages {
        if !(o.end > o.start) {
            return Err(Error::invalid(format!("outage [{}, {}) is empty", o.start, o.end)));
        }
    }
    for ant in [AntennaSelect::One, AntennaSelect::Two] {
        let mut spans: Vec<_> = outages
            .iter()
            .filter(|o| o.antenna == ant || o.antenna == AntennaSelect::Both)
            .map(|o| (o.start, o.end))
            .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::invalid("outages overlap on the same antenna"));
        }
    }
    Ok(())
}

/// Antenna fixes `r + A e_i + n`, `n ~ N(0, R_true)`, taken from every truth sample on the GPS grid.
///
/// Invalid antennas report the zero vector.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_gps(
    truth: &[TruthSample],
    geom: &SensorGeometry,
    r_true: &Mat6,
    rate: f64,
    outages: &[Outage],
    bursts: &[NoiseBurst],
    seed: u64,
) -> Result<Vec<GpsFix>> {
    validate_outages(outages)?;
    if truth.len() < 2 {
        return Err(Error::MissingData("truth needs at least two samples".into()));
    }
    let dt = truth[1].t - truth[0].t;
    let ratio = 1.0 / (rate * dt);
    let stride = ratio.round();
    if !(stride >= 1.0) || (ratio - stride).abs() > 1e-6 {
        return Err(Error::invalid(format!("GPS rate {rate} Hz must divide the truth rate {} Hz", 1.0 / dt)));
    }
    let chol = r_true
        .cholesky()
        .ok_or_else(|| Error::invalid("R_true must be positive definite"))?;
    let l = chol.l();
    let mut rng = stream(seed, GPS_STREAM);
    let mut out = Vec::new();
    for s in truth.iter().step_by(stride as usize) {
        let n = Vector6::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let scale: f64 = bursts
            .iter()
            .filter(|b| s.t >= b.start && s.t < b.end)
            .map(|b| b.scale)
            .product();
        let z = predict_measurement(&s.state(Vec3::zeros()), geom) + l * n * scale;
        let lost = |ant: AntennaSelect| {
            outages
                .iter()
                .any(|o| s.t >= o.start && s.t < o.end && (o.antenna == ant || o.antenna == AntennaSelect::Both))
        };
        let (valid1, valid2) = (!lost(AntennaSelect::One), !lost(AntennaSelect::Two));
        out.push(GpsFix {
            t: s.t,
            p1: if valid1 { z.fixed_rows::<3>(0).into() } else { Vec3::zeros() },
            p2: if valid2 { z.fixed_rows::<3>(3).into() } else { Vec3::zeros() },
            valid1,
            valid2,
        });
    }
    Ok(out)
}

/// Everything needed to produce one synthetic data set.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub trajectory: TrajectorySpec,
    pub imu_rate: f64,
    pub gps_rate: f64,
    pub noise: NoiseSpec,
    pub bias: Vec3,
    pub geom: SensorGeometry,
    /// Per-axis GPS standard deviation, m.
    pub gps_sigma: f64,
    pub outages: Vec<Outage>,
    pub bursts: Vec<NoiseBurst>,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            trajectory: TrajectorySpec::default(),
            imu_rate: 100.0,
            gps_rate: 5.0,
            noise: NoiseSpec::default(),
            bias: Vec3::zeros(),
            geom: SensorGeometry::default(),
            gps_sigma: 0.02,
            outages: Vec::new(),
            bursts: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimData {
    pub truth: Vec<TruthSample>,
    pub imu: Vec<ImuSample>,
    pub gps: Vec<GpsFix>,
    pub bias: Vec3,
}

impl SimData {
    /// Truth sample stamped within 1 µs of `t`.
    pub fn truth_at(&self, t: f64) -> Option<&TruthSample> {
        let i = self.truth.partition_point(|s| s.t < t - 1e-6);
        self.truth.get(i).filter(|s| (s.t - t).abs() <= 1e-6)
    }
}

impl Scenario {
    pub fn r_true(&self) -> Mat6 {
        Mat6::identity() * (self.gps_sigma * self.gps_sigma)
    }

    pub fn generate(&self) -> Result<SimData> {
        if !(self.gps_sigma > 0.0) {
            return Err(Error::invalid(format!("gps_sigma must be positive, got {}", self.gps_sigma)));
        }
        let truth = generate_truth(&self.trajectory, self.imu_rate)?;
        let imu = synthesize_imu(&truth, &self.noise, &self.bias, &self.geom, self.imu_rate, self.seed);
        let gps = synthesize_gps(&truth, &self.geom, &self.r_true(), self.gps_rate, &self.outages, &self.bursts, self.seed)?;
        Ok(SimData { truth, imu, gps, bias: self.bias })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::continuous_dynamics;

    fn spec(kind: TrajectoryKind) -> TrajectorySpec {
        TrajectorySpec { kind, duration: 20.0, tilt: Vec3::new(0.02, -0.03, 0.01), heading: 0.4, ..Default::default() }
    }

    #[test]
    fn static_truth_is_constant() {
        let truth = generate_truth(&spec(TrajectoryKind::Static), 50.0).unwrap();
        assert_eq!(truth.len(), 1001);
        for s in &truth {
            assert_eq!(s.q, truth[0].q);
            assert_eq!(s.r, truth[0].r);
            assert_eq!(s.v + s.a + s.omega, Vec3::zeros());
        }
    }

    #[test]
    fn straight_line_example() {
        let s = TrajectorySpec { kind: TrajectoryKind::Straight, speed: 1.0, duration: 5.0, ..Default::default() };
        for x in generate_truth(&s, 10.0).unwrap() {
            assert!((x.r - Vec3::new(x.t, 0.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let s = TrajectorySpec { kind: TrajectoryKind::Circle, speed: 2.0, radius: 10.0, ..spec(TrajectoryKind::Static) };
        for x in generate_truth(&s, 20.0).unwrap() {
            assert!((x.a.norm() - 0.4).abs() < 1e-12);
            assert!((x.v.norm() - 2.0).abs() < 1e-12);
        }
    }

    fn check_kinematics(truth: &[TruthSample], tol: f64) {
        for w in truth.windows(3) {
            let h = w[2].t - w[0].t;
            let v_fd = (w[2].r - w[0].r) / h;
            assert!((v_fd - w[1].v).norm() <= tol, "velocity at t = {}", w[1].t);
            let a_fd = (w[2].v - w[0].v) / h;
            assert!((a_fd - w[1].a).norm() <= tol, "acceleration at t = {}", w[1].t);
            // Ȧ = A [ω×]
            let a_dot = (w[2].q.rotation() - w[0].q.rotation()) / h;
            let expected = w[1].q.rotation() * crate::quat::cross_matrix(&w[1].omega);
            assert!((a_dot - expected).abs().max() <= tol, "attitude rate at t = {}", w[1].t);
        }
    }

    #[test]
    fn analytic_kinematics_are_consistent() {
        for kind in [TrajectoryKind::Circle, TrajectoryKind::Figure8, TrajectoryKind::Straight] {
            let s = TrajectorySpec { duration: 60.0, ..spec(kind) };
            check_kinematics(&generate_truth(&s, 1000.0).unwrap(), 1e-4);
        }
    }

    #[test]
    fn figure8_starts_at_rest() {
        let s = spec(TrajectoryKind::Figure8);
        let truth = generate_truth(&s, 100.0).unwrap();
        for x in truth.iter().take_while(|x| x.t <= s.hold) {
            assert_eq!(x.v, Vec3::zeros());
            assert_eq!(x.a, Vec3::zeros());
            assert_eq!(x.omega, Vec3::zeros());
        }
        assert!(truth.last().unwrap().v.norm() > 0.5);
    }

    #[test]
    fn scripted_profile_is_integrated() {
        let segs = vec![
            ScriptSegment { duration: 2.0, omega: Vec3::zeros(), accel_body: Vec3::new(1.0, 0.0, 0.0) },
            ScriptSegment { duration: 3.0, omega: Vec3::new(0.0, 0.0, 0.2), accel_body: Vec3::zeros() },
        ];
        let s = TrajectorySpec { kind: TrajectoryKind::Scripted(segs), duration: 5.0, ..Default::default() };
        let truth = generate_truth(&s, 50.0).unwrap();
        let at2 = &truth[100];
        assert!((at2.v - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-10);
        assert!((at2.r - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-10);
        let end = truth.last().unwrap();
        let yaw = Quaternion::from_axis_angle(&Vec3::z(), 0.6).unwrap();
        assert!((end.q.rotation() - yaw.rotation()).abs().max() < 1e-10);
        assert!((end.r - Vec3::new(8.0, 0.0, 0.0)).norm() < 1e-10);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_truth(&TrajectorySpec { duration: 0.0, ..Default::default() }, 100.0).is_err());
        assert!(generate_truth(&TrajectorySpec { kind: TrajectoryKind::Circle, radius: 0.0, ..Default::default() }, 100.0).is_err());
        assert!(generate_truth(&TrajectorySpec::default(), 5.0).is_err());
        let s = TrajectorySpec { kind: TrajectoryKind::Scripted(vec![]), ..Default::default() };
        assert!(generate_truth(&s, 100.0).is_err());
    }

    #[test]
    fn noise_free_imu_at_rest() {
        let s = spec(TrajectoryKind::Static);
        let g = SensorGeometry::default();
        let truth = generate_truth(&s, 100.0).unwrap();
        let imu = synthesize_imu(&truth, &NoiseSpec::zero(), &Vec3::zeros(), &g, 100.0, 1);
        for (u, x) in imu.iter().zip(&truth) {
            assert_eq!(u.gyro, Vec3::zeros());
            assert!((u.accel - x.q.rotation().transpose() * g.gravity).norm() < 1e-15);
        }
    }

    #[test]
    fn noise_free_imu_reproduces_truth_derivatives() {
        let g = SensorGeometry::default();
        let bias = Vec3::new(0.01, -0.02, 0.005);
        for kind in [TrajectoryKind::Circle, TrajectoryKind::Figure8] {
            let truth = generate_truth(&spec(kind), 100.0).unwrap();
            let imu = synthesize_imu(&truth, &NoiseSpec::zero(), &bias, &g, 100.0, 1);
            for (u, x) in imu.iter().zip(&truth) {
                let d = continuous_dynamics(&x.state(bias), u, &g);
                assert!((d.v_dot - x.a).norm() <= 1e-10);
                assert!((d.r_dot - x.v).norm() <= 1e-10);
                let qd = Quaternion { v: x.omega, s: 0.0 }.multiply(&x.q).to_vector4() * 0.5;
                assert!((d.q_dot - qd).norm() <= 1e-10);
            }
        }
    }

    #[test]
    fn imu_noise_variance() {
        let truth = generate_truth(&TrajectorySpec { duration: 1000.0, ..Default::default() }, 100.0).unwrap();
        let g = SensorGeometry::default();
        let n = NoiseSpec::default();
        let imu = synthesize_imu(&truth, &n, &Vec3::zeros(), &g, 100.0, 7);
        let expected = n.sigma_a * n.sigma_a * 100.0;
        let m = imu.len() as f64;
        for axis in 0..3 {
            let dev: Vec<f64> = imu.iter().zip(&truth).map(|(u, x)| u.accel[axis] - (x.q.rotation().transpose() * g.gravity)[axis]).collect();
            let mean = dev.iter().sum::<f64>() / m;
            let var = dev.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
            assert!((var / expected - 1.0).abs() < 0.05, "axis {axis}: {var} vs {expected}");
        }
    }

    #[test]
    fn gps_without_noise_matches_model() {
        let g = SensorGeometry::default();
        let truth = generate_truth(&spec(TrajectoryKind::Figure8), 100.0).unwrap();
        let fixes = synthesize_gps(&truth, &g, &(Mat6::identity() * 1e-300), 5.0, &[], &[], 3).unwrap();
        assert_eq!(fixes.len(), 101);
        for f in &fixes {
            let x = truth.iter().find(|s| s.t == f.t).unwrap();
            assert!((f.stacked() - predict_measurement(&x.state(Vec3::zeros()), &g)).norm() < 1e-12);
        }
    }

    #[test]
    fn gps_noise_covariance() {
        let g = SensorGeometry::default();
        let truth = generate_truth(&TrajectorySpec { duration: 999.9, ..Default::default() }, 10.0).unwrap();
        let mut r = Mat6::identity() * 4e-4;
        r[(0, 3)] = 1e-4;
        r[(3, 0)] = 1e-4;
        let fixes = synthesize_gps(&truth, &g, &r, 10.0, &[], &[], 11).unwrap();
        assert_eq!(fixes.len(), 10_000);
        let clean = predict_measurement(&truth[0].state(Vec3::zeros()), &g);
        let cov = fixes.iter().fold(Mat6::zeros(), |acc, f| {
            let d = f.stacked() - clean;
            acc + d * d.transpose()
        }) / fixes.len() as f64;
        assert!((cov - r).norm() / r.norm() < 0.1);
    }

    #[test]
    fn outages_and_bursts() {
        let g = SensorGeometry::default();
        let truth = generate_truth(&TrajectorySpec { duration: 20.0, ..Default::default() }, 100.0).unwrap();
        let outages = [Outage { start: 5.0, end: 10.0, antenna: AntennaSelect::Both }, Outage { start: 12.0, end: 13.0, antenna: AntennaSelect::Two }];
        let fixes = synthesize_gps(&truth, &g, &(Mat6::identity() * 1e-6), 5.0, &outages, &[], 3).unwrap();
        for f in &fixes {
            let both = f.t >= 5.0 && f.t < 10.0;
            let second = f.t >= 12.0 && f.t < 13.0;
            assert_eq!(f.valid1, !both);
            assert_eq!(f.valid2, !(both || second));
        }
        let overlapping = [Outage { start: 0.0, end: 2.0, antenna: AntennaSelect::One }, Outage { start: 1.0, end: 3.0, antenna: AntennaSelect::Both }];
        assert!(synthesize_gps(&truth, &g, &Mat6::identity(), 5.0, &overlapping, &[], 3).is_err());
        assert!(synthesize_gps(&truth, &g, &Mat6::identity(), 3.0, &[], &[], 3).is_err());

        let bursts = [NoiseBurst { start: 10.0, end: 20.0, scale: 10.0 }];
        let fixes = synthesize_gps(&truth, &g, &(Mat6::identity() * 1e-4), 5.0, &[], &bursts, 3).unwrap();
        let clean = predict_measurement(&truth[0].state(Vec3::zeros()), &g);
        let spread = |lo: f64, hi: f64| {
            let d: Vec<f64> = fixes.iter().filter(|f| f.t >= lo && f.t < hi).map(|f| (f.stacked() - clean).norm_squared()).collect();
            d.iter().sum::<f64>() / d.len() as f64
        };
        assert!(spread(10.0, 20.0) > 30.0 * spread(0.0, 10.0));
    }

    #[test]
    fn seeds_are_deterministic() {
        let sc = Scenario { trajectory: spec(TrajectoryKind::Figure8), seed: 99, ..Default::default() };
        let a = sc.generate().unwrap();
        let b = sc.generate().unwrap();
        assert_eq!(a, b);
        let c = Scenario { seed: 100, ..sc.clone() }.generate().unwrap();
        assert_ne!(a.imu, c.imu);
        assert!(a.truth_at(3.0).is_some());
        assert!(a.truth_at(3.0005).is_none());
    }
}
