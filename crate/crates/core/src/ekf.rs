//! Adaptive error-state EKF.
//!
//! The full state is integrated at IMU rate; the covariance is propagated once per GPS interval
//! with `Φ` and `Q` evaluated at the interval-averaged inputs. Corrections are multiplicative for
//! the attitude and additive elsewhere. The GPS noise covariance is re-estimated from a sliding
//! window of dual-antenna residuals. The default posterior form uses `R̂ = Ŝ + H P⁺ Hᵀ`, which
//! stays consistent when the prior `P` is conservative; the innovation form `R̂ = Ŝ − H P⁻ Hᵀ` is
//! kept as an option. Either result is floored to stay positive definite.

use std::collections::VecDeque;

use nalgebra::{SMatrix, SVector, Vector6};

use crate::discretize::{process_noise_closed, process_noise_quadrature, state_transition};
use crate::error::{Error, Result};
use crate::models::{
    antenna_jacobian, continuous_dynamics, measurement_jacobian, predict_measurement, GpsFix, ImuSample, Mat12, Mat6,
    Mat6x12, NoiseSpec, SensorGeometry, StateDerivative, StateEstimate, Vec12, ATT, BIAS, POS, VEL,
};
use crate::quat::{Mat3, Quaternion, Vec3};

/// Smallest angle between `Δp` and `g` accepted by [`initialize`], rad.
pub const MIN_INIT_ANGLE: f64 = 0.05;

/// Innovation covariances with a larger condition number are not inverted.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// Smallest accepted warm-up count for the residual window.
pub const MIN_ADAPT_RESIDUALS: usize = 6;

const QUADRATURE_STEPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProcessNoiseModel {
    /// First-order block formula.
    Closed,
    /// Simpson quadrature of the exact integral.
    Quadrature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub noise: NoiseSpec,
    pub geom: SensorGeometry,
    /// Residual window length, GPS epochs.
    pub window_w: usize,
    pub imu_rate: f64,
    pub gps_rate: f64,
    /// Eigenvalue floor for `R̂`, m².
    pub r_floor: f64,
    pub adapt_enabled: bool,
    pub adapt_form: AdaptiveForm,
    /// Dual residuals needed before the estimated `R̂` replaces `r_init`; `None` means a full window.
    pub adapt_warmup: Option<usize>,
    /// `R` used until enough residuals exist, and throughout when adaptation is off.
    pub r_init: Mat6,
    /// Initial standard deviations: attitude (error-quaternion units), position, velocity, bias.
    pub p0_sigma: [f64; 4],
    pub process_noise: ProcessNoiseModel,
    pub theta_warning: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            noise: NoiseSpec::default(),
            geom: SensorGeometry::default(),
            window_w: 60,
            imu_rate: 100.0,
            gps_rate: 5.0,
            r_floor: 1e-6,
            adapt_enabled: true,
            adapt_form: AdaptiveForm::Posterior,
            adapt_warmup: None,
            r_init: Mat6::identity() * (0.02 * 0.02),
            p0_sigma: [0.05, 0.05, 0.1, 0.01],
            process_noise: ProcessNoiseModel::Closed,
            theta_warning: crate::observability::DEFAULT_THETA_WARNING,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_w < MIN_ADAPT_RESIDUALS {
            return Err(Error::Config(format!("window_w must be at least {MIN_ADAPT_RESIDUALS}, got {}", self.window_w)));
        }
        if !(self.gps_rate >= 0.1 && self.imu_rate >= self.gps_rate && self.imu_rate.is_finite()) {
            return Err(Error::Config(format!(
                "rates must satisfy imu_rate >= gps_rate >= 0.1 Hz, got {} and {}",
                self.imu_rate, self.gps_rate
            )));
        }
        if self.warmup() < MIN_ADAPT_RESIDUALS {
            return Err(Error::Config(format!("adapt_warmup must be at least {MIN_ADAPT_RESIDUALS}, got {}", self.warmup())));
        }
        if !(self.r_floor > 0.0 && self.r_floor.is_finite()) {
            return Err(Error::Config(format!("r_floor must be positive, got {}", self.r_floor)));
        }
        if !self.p0_sigma.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Config("initial standard deviations must be positive".into()));
        }
        let ev = self.r_init.symmetric_eigenvalues();
        if (self.r_init - self.r_init.transpose()).abs().max() > 0.0 || ev.min() <= 0.0 {
            return Err(Error::Config("r_init must be symmetric positive definite".into()));
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.adapt_warmup.unwrap_or(self.window_w)
    }

    pub fn initial_covariance(&self) -> Mat12 {
        let mut d = Vec12::zeros();
        for (k, off) in [ATT, POS, VEL, BIAS].into_iter().enumerate() {
            d.fixed_rows_mut::<3>(off).fill(self.p0_sigma[k] * self.p0_sigma[k]);
        }
        Mat12::from_diagonal(&d)
    }
}

/// Residual used for covariance matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptiveForm {
    /// Prior residuals `z − h(x̂⁻)`, `R̂ = Ŝ − H P⁻ Hᵀ`.
    Innovation,
    /// Posterior residuals `z − h(x̂⁺)`, `R̂ = Ŝ + H P⁺ Hᵀ`.
    Posterior,
}

/// Sliding-window residual statistics `Ŝ`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseAdapter {
    window: VecDeque<Vector6<f64>>,
    s_hat: Mat6,
    k: usize,
    w: usize,
}

impl NoiseAdapter {
    pub fn new(w: usize) -> Self {
        NoiseAdapter {
            window: VecDeque::with_capacity(w + 1),
            s_hat: Mat6::zeros(),
            k: 0,
            w: w.max(1),
        }
    }

    /// Recursive update: running mean while `k ≤ w`, then add-newest / drop-oldest.
    pub fn push(&mut self, rho: &Vector6<f64>) {
        self.k += 1;
        let outer = rho * rho.transpose();
        if self.k <= self.w {
            let k = self.k as f64;
            self.s_hat = self.s_hat * ((k - 1.0) / k) + outer / k;
        } else if let Some(old) = self.window.pop_front() {
            self.s_hat += (outer - old * old.transpose()) / self.w as f64;
        }
        self.window.push_back(*rho);
    }

    pub fn s_hat(&self) -> &Mat6 {
        &self.s_hat
    }

    /// Number of residuals pushed so far.
    pub fn count(&self) -> usize {
        self.k
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Direct mean of `ϱϱᵀ` over the residuals currently held.
    pub fn batch_s(&self) -> Mat6 {
        if self.window.is_empty() {
            return Mat6::zeros();
        }
        let sum = self.window.iter().fold(Mat6::zeros(), |acc, r| acc + r * r.transpose());
        sum / self.window.len() as f64
    }
}

/// `R̂ = Ŝ − H P⁻ Hᵀ`, symmetrised, with eigenvalues raised to at least `r_floor`.
pub fn adapt_noise(s_hat: &Mat6, h: &Mat6x12, p_prior: &Mat12, r_floor: f64) -> Mat6 {
    let r = s_hat - h * p_prior * h.transpose();
    floor_eigenvalues(&((r + r.transpose()) * 0.5), r_floor)
}

/// `R̂ = Ŝ + H P⁺ Hᵀ` from posterior residual statistics, floored as in [`adapt_noise`].
pub fn adapt_noise_posterior(s_hat: &Mat6, h: &Mat6x12, p_post: &Mat12, r_floor: f64) -> Mat6 {
    let r = s_hat + h * p_post * h.transpose();
    floor_eigenvalues(&((r + r.transpose()) * 0.5), r_floor)
}

fn floor_eigenvalues(m: &Mat6, floor: f64) -> Mat6 {
    let eig = m.symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(floor));
    let out = eig.eigenvectors * Mat6::from_diagonal(&d) * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}

/// Orthogonalised attitude matrix from one static dual-antenna fix.
///
/// Solves `A N = M` with `M = [Δp, g, Δp × g]` and `N = [Δe, u_a, Δe × u_a]`, then replaces the
/// result by the nearest rotation `U diag(1, 1, det(UVᵀ)) Vᵀ`.
pub fn initial_attitude(fix0: &GpsFix, imu0: &ImuSample, geom: &SensorGeometry) -> Result<Mat3> {
    if !fix0.both_valid() {
        return Err(Error::MissingData(format!("initialization needs both antennas at t = {}", fix0.t)));
    }
    let dp = fix0.p1 - fix0.p2;
    let de = geom.baseline();
    let g = geom.gravity;
    let ua = imu0.accel;
    for (name, a, b) in [("antenna baseline and gravity", dp, g), ("lever-arm baseline and specific force", de, ua)] {
        let denom = a.norm() * b.norm();
        let angle = if denom > 0.0 { (a.dot(&b).abs() / denom).min(1.0).acos() } else { 0.0 };
        if angle < MIN_INIT_ANGLE {
            return Err(Error::DegenerateInitialization(format!("{name} are {angle:.4} rad from collinear")));
        }
    }
    let m = Mat3::from_columns(&[dp, g, dp.cross(&g)]);
    let n = Mat3::from_columns(&[de, ua, de.cross(&ua)]);
    let n_inv = n
        .try_inverse()
        .ok_or_else(|| Error::DegenerateInitialization("body-frame reference matrix is singular".into()))?;
    let svd = (m * n_inv).svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateInitialization("SVD did not converge".into())),
    };
    let d = (u * v_t).determinant().signum();
    Ok(u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t)
}

/// Static initial state: attitude from [`initial_attitude`], `r = ½(p₁ + p₂) − ½A(e₁ + e₂)`,
/// zero velocity and bias.
pub fn initialize(fix0: &GpsFix, imu0: &ImuSample, geom: &SensorGeometry) -> Result<StateEstimate> {
    let a = initial_attitude(fix0, imu0, geom)?;
    Ok(StateEstimate {
        q: Quaternion::from_rotation(&a),
        r: (fix0.p1 + fix0.p2) * 0.5 - a * (geom.e1 + geom.e2) * 0.5,
        v: Vec3::zeros(),
        b: Vec3::zeros(),
    })
}

/// Time-weighted mean of samples covering `(t_start, t_last]`; each sample holds back to its
/// predecessor. The result is stamped `t_start`.
pub fn average_inputs(samples: &[ImuSample], t_start: f64) -> Result<ImuSample> {
    let first = samples.first().ok_or_else(|| Error::MissingData("no IMU samples in interval".into()))?;
    if samples.len() == 1 {
        return Ok(ImuSample { t: t_start, ..*first });
    }
    let mut prev = t_start;
    let (mut wg, mut wa, mut total) = (Vec3::zeros(), Vec3::zeros(), 0.0);
    for s in samples {
        let dt = s.t - prev;
        if !(dt >= 0.0) {
            return Err(Error::NonMonotonicTime { t: s.t });
        }
        wg += s.gyro * dt;
        wa += s.accel * dt;
        total += dt;
        prev = s.t;
    }
    if total <= 0.0 {
        let n = samples.len() as f64;
        let g = samples.iter().fold(Vec3::zeros(), |a, s| a + s.gyro) / n;
        let acc = samples.iter().fold(Vec3::zeros(), |a, s| a + s.accel) / n;
        return Ok(ImuSample::new(t_start, g, acc));
    }
    Ok(ImuSample::new(t_start, wg / total, wa / total))
}

fn advance(x: &StateEstimate, d: &StateDerivative, h: f64) -> StateEstimate {
    let q = x.q.to_vector4() + d.q_dot * h;
    StateEstimate {
        q: Quaternion { v: Vec3::new(q[0], q[1], q[2]), s: q[3] }.normalize(),
        r: x.r + d.r_dot * h,
        v: x.v + d.v_dot * h,
        b: x.b + d.b_dot * h,
    }
}

/// One classical Runge–Kutta step with inputs linear between `u0` and `u1`.
pub fn rk4_step(x: &StateEstimate, u0: &ImuSample, u1: &ImuSample, geom: &SensorGeometry) -> StateEstimate {
    let h = u1.t - u0.t;
    let um = u0.lerp(u1, u0.t + 0.5 * h);
    let k1 = continuous_dynamics(x, u0, geom);
    let k2 = continuous_dynamics(&advance(x, &k1, 0.5 * h), &um, geom);
    let k3 = continuous_dynamics(&advance(x, &k2, 0.5 * h), &um, geom);
    let k4 = continuous_dynamics(&advance(x, &k3, h), u1, geom);
    let d = StateDerivative {
        q_dot: (k1.q_dot + (k2.q_dot + k3.q_dot) * 2.0 + k4.q_dot) / 6.0,
        r_dot: (k1.r_dot + (k2.r_dot + k3.r_dot) * 2.0 + k4.r_dot) / 6.0,
        v_dot: (k1.v_dot + (k2.v_dot + k3.v_dot) * 2.0 + k4.v_dot) / 6.0,
        b_dot: (k1.b_dot + (k2.b_dot + k3.b_dot) * 2.0 + k4.b_dot) / 6.0,
    };
    advance(x, &d, h)
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpdateOutcome {
    Applied {
        /// `z − h(x̂⁻)` for the antennas used; zero rows for the others.
        residual: Vector6<f64>,
        rows: usize,
    },
    /// Innovation covariance too ill-conditioned to invert.
    Skipped { reason: String },
    /// No antenna valid.
    Coasted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub x: StateEstimate,
    pub p: Mat12,
    pub r_hat: Mat6,
    pub adapter: NoiseAdapter,
    pub t: f64,
    /// Input at time `t`, the left end of the next integration interval.
    pub last_imu: ImuSample,
}

impl FilterState {
    pub fn new(x: StateEstimate, imu: ImuSample, cfg: &FilterConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(FilterState {
            x,
            p: cfg.initial_covariance(),
            r_hat: cfg.r_init,
            adapter: NoiseAdapter::new(cfg.window_w),
            t: imu.t,
            last_imu: imu,
        })
    }

    /// Integrates to `t_end` and adds one `ΦPΦᵀ + Q` step for the whole interval.
    ///
    /// `samples` are the IMU records after `self.t`; those up to `t_end` are integrated, a later
    /// one (if given) is interpolated at `t_end`, otherwise the last input is held.
    pub fn propagate(&mut self, samples: &[ImuSample], t_end: f64, cfg: &FilterConfig) -> Result<()> {
        if !(t_end >= self.t) {
            return Err(Error::NonMonotonicTime { t: t_end });
        }
        let mut prev_t = self.t;
        for s in samples {
            if !(s.t > prev_t) {
                return Err(Error::NonMonotonicTime { t: s.t });
            }
            prev_t = s.t;
        }
        if t_end == self.t {
            return Ok(());
        }
        let x0 = self.x;
        let mut nodes = Vec::with_capacity(samples.len() + 1);
        let mut prev = self.last_imu;
        for s in samples {
            if s.t < t_end {
                self.x = rk4_step(&self.x, &prev, s, &cfg.geom);
                nodes.push(*s);
                prev = *s;
            } else {
                let end = prev.lerp(s, t_end);
                self.x = rk4_step(&self.x, &prev, &end, &cfg.geom);
                nodes.push(end);
                prev = end;
                break;
            }
        }
        if prev.t < t_end {
            let end = ImuSample { t: t_end, ..prev };
            self.x = rk4_step(&self.x, &prev, &end, &cfg.geom);
            nodes.push(end);
            prev = end;
        }
        if !self.x.is_finite() {
            return Err(Error::Diverged { t: t_end, reason: "non-finite state after integration".into() });
        }

        let tau = t_end - self.t;
        let u_avg = average_inputs(&nodes, self.t)?;
        let phi = state_transition(&x0, &u_avg, tau).phi;
        let q = match cfg.process_noise {
            ProcessNoiseModel::Closed => process_noise_closed(&x0, &u_avg, tau, &cfg.noise).0,
            ProcessNoiseModel::Quadrature => process_noise_quadrature(&x0, &u_avg, tau, &cfg.noise, QUADRATURE_STEPS)?.0,
        };
        let p = phi * self.p * phi.transpose() + q;
        self.p = (p + p.transpose()) * 0.5;
        self.t = t_end;
        self.last_imu = prev;
        Ok(())
    }

    /// `z − h(x̂)` for both antennas, ignoring validity flags.
    pub fn residual(&self, fix: &GpsFix, geom: &SensorGeometry) -> Vector6<f64> {
        fix.stacked() - predict_measurement(&self.x, geom)
    }

    /// Corrects with the valid antennas of `fix`, then refreshes `R̂` from dual residuals.
    pub fn update(&mut self, fix: &GpsFix, cfg: &FilterConfig) -> Result<UpdateOutcome> {
        let geom = &cfg.geom;
        let rho = self.residual(fix, geom);
        let p_prior = self.p;
        let h_prior = measurement_jacobian(&self.x, geom);
        let outcome = match (fix.valid1, fix.valid2) {
            (false, false) => return Ok(UpdateOutcome::Coasted),
            (true, true) => correct(&mut self.x, &mut self.p, &rho, &h_prior, &self.r_hat, fix.t)?,
            (v1, _) => {
                let (off, e) = if v1 { (0, geom.e1) } else { (3, geom.e2) };
                let h = antenna_jacobian(&self.x, &e);
                let r = self.r_hat.fixed_view::<3, 3>(off, off).into_owned();
                let z = rho.fixed_rows::<3>(off).into_owned();
                correct(&mut self.x, &mut self.p, &z, &h, &r, fix.t)?
            }
        };
        if let Some(reason) = outcome {
            return Ok(UpdateOutcome::Skipped { reason });
        }

        let mut used = rho;
        if fix.both_valid() {
            match cfg.adapt_form {
                AdaptiveForm::Innovation => {
                    self.adapter.push(&rho);
                    if cfg.adapt_enabled && self.adapter.count() >= cfg.warmup() {
                        self.r_hat = adapt_noise(self.adapter.s_hat(), &h_prior, &p_prior, cfg.r_floor);
                    }
                }
                AdaptiveForm::Posterior => {
                    self.adapter.push(&self.residual(fix, geom));
                    if cfg.adapt_enabled && self.adapter.count() >= cfg.warmup() {
                        let h = measurement_jacobian(&self.x, geom);
                        self.r_hat = adapt_noise_posterior(self.adapter.s_hat(), &h, &self.p, cfg.r_floor);
                    }
                }
            }
        } else if fix.valid1 {
            used.fixed_rows_mut::<3>(3).fill(0.0);
        } else {
            used.fixed_rows_mut::<3>(0).fill(0.0);
        }
        Ok(UpdateOutcome::Applied { residual: used, rows: if fix.both_valid() { 6 } else { 3 } })
    }
}

/// Kalman gain `K = P Hᵀ (H P Hᵀ + R)⁻¹`, or the reason it could not be formed.
pub fn kalman_gain<const M: usize>(
    p: &Mat12,
    h: &SMatrix<f64, M, 12>,
    r: &SMatrix<f64, M, M>,
) -> std::result::Result<SMatrix<f64, 12, M>, String> {
    let s = h * p * h.transpose() + r;
    let s = (s + s.transpose()) * 0.5;
    let ev = nalgebra::DMatrix::from_column_slice(M, M, s.as_slice()).symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if !(lo > 0.0) || hi / lo > MAX_INNOVATION_CONDITION {
        return Err(format!("innovation covariance condition {:.3e} exceeds limit", hi / lo));
    }
    let chol = s.cholesky().ok_or_else(|| "innovation covariance not positive definite".to_string())?;
    Ok((chol.solve(&(h * p))).transpose())
}

/// Returns `Some(reason)` when the update is skipped.
fn correct<const M: usize>(
    x: &mut StateEstimate,
    p: &mut Mat12,
    rho: &SVector<f64, M>,
    h: &SMatrix<f64, M, 12>,
    r: &SMatrix<f64, M, M>,
    t: f64,
) -> Result<Option<String>> {
    let k = match kalman_gain(p, h, r) {
        Ok(k) => k,
        Err(reason) => return Ok(Some(reason)),
    };
    let dx: Vec12 = k * rho;
    let dq_norm = dx.fixed_rows::<3>(ATT).norm();
    if dq_norm > 1.0 {
        return Err(Error::DivergentUpdate { norm: dq_norm });
    }
    *x = x.apply_error(&dx)?;
    let pn = (Mat12::identity() - k * h) * *p;
    *p = (pn + pn.transpose()) * 0.5;
    if !x.is_finite() || !p.iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged { t, reason: "non-finite correction".into() });
    }
    Ok(None)
}

/// `eᵀ P⁻¹ e`; `None` if `P` is not positive definite.
pub fn nees(error: &Vec12, p: &Mat12) -> Option<f64> {
    let chol = p.cholesky()?;
    Some(error.dot(&chol.solve(error)))
}
