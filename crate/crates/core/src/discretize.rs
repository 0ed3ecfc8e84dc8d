//! Discrete-time transition matrix and process-noise covariance.
//!
//! For constant `ω̂` and `â` over an interval, the error dynamics are linear and time invariant,
//! so `Φ(τ) = e^{Fτ}` has a closed form built from `e^{−[ω̂×]s}` and its repeated integrals
//!
//! ```text
//! Λ(τ)   = I − sin(nτ)/n K + (1 − cos nτ)/n² K²           K = [ω̂×], n = |ω̂|
//! Λ′(τ)  = ∫₀^τ Λ,   Λ″(τ) = ∫₀^τ Λ′,   Λ‴(τ) = ∫₀^τ Λ″
//! ```
//!
//! With `C = −2Â[â×]` the exponential is
//!
//! ```text
//! ⎡ Λ      0  0   ½Λ′   ⎤
//! ⎢ CΛ″    I  τI  ½CΛ‴  ⎥
//! ⎢ CΛ′    0  I   ½CΛ″  ⎥
//! ⎣ 0      0  0   I     ⎦
//! ```
//!
//! The often-quoted sparse form (zero position/velocity diagonal blocks, `−Â[â×]Λ′` in the
//! velocity row and no position or bias couplings) does not satisfy `Φ = e^{Fτ}` and is not used.
//!
//! The process noise has two implementations: the first-order block formula
//! ([`process_noise_closed`]) and a Simpson-rule evaluation of `∫ Φ G Σ Gᵀ Φᵀ` using the exact
//! `Φ` ([`process_noise_quadrature`]).

use crate::error::{Error, Result};
use crate::models::{imu_noise_covariance, noise_jacobian_g, ImuSample, Mat12, NoiseSpec, StateEstimate, ATT, BIAS, POS, VEL};
use crate::quat::{cross_matrix, Mat3, Vec3};

/// Below this value of `|ω̂|τ` the `Λ` and `Λ′` closed forms switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-4;

/// Below this value of `|ω̂|τ` the higher integrals are summed as power series.
const SERIES_ANGLE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub phi: Mat12,
    pub tau: f64,
}

/// Symmetric positive semi-definite discrete process-noise covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessNoiseMatrix(pub Mat12);

impl ProcessNoiseMatrix {
    pub fn matrix(&self) -> &Mat12 {
        &self.0
    }
}

/// `Λ(τ) = e^{−[ω×]τ}`.
pub fn lambda_matrix(omega: &Vec3, tau: f64) -> Mat3 {
    let k = cross_matrix(omega);
    let k2 = k * k;
    let n = omega.norm();
    let x = n * tau;
    if x < SMALL_ANGLE {
        return Mat3::identity() - k * tau + k2 * (0.5 * tau * tau);
    }
    Mat3::identity() - k * (x.sin() / n) + k2 * ((1.0 - x.cos()) / (n * n))
}

/// `Λ′(τ) = ∫₀^τ Λ(s) ds`.
pub fn lambda_prime(omega: &Vec3, tau: f64) -> Mat3 {
    let k = cross_matrix(omega);
    let k2 = k * k;
    let n = omega.norm();
    let x = n * tau;
    if x < SMALL_ANGLE {
        return Mat3::identity() * tau - k * (0.5 * tau * tau) + k2 * (tau * tau * tau / 6.0);
    }
    Mat3::identity() * tau + k * ((x.cos() - 1.0) / (n * n)) + k2 * ((x - x.sin()) / (n * n * n))
}

/// Coefficients `(a, c)` of the `order`-fold integral of `Λ`, written as
/// `τ^order/order! I − a K + c K²`.
fn integral_coefficients(n: f64, tau: f64, order: u32) -> (f64, f64) {
    let x = n * tau;
    if x < SERIES_ANGLE {
        // a = τ^{k+1} Σ_j (−x²)^j / (2j+1+k)!,  c = τ^{k+2} Σ_j (−x²)^j / (2j+2+k)!
        let k = order as f64;
        let mut a = 0.0;
        let mut c = 0.0;
        let mut ta = 1.0 / factorial(order + 1);
        let mut tc = 1.0 / factorial(order + 2);
        for j in 0..30 {
            a += ta;
            c += tc;
            if ta.abs() < 1e-18 * a.abs() && tc.abs() < 1e-18 * c.abs() {
                break;
            }
            let jf = j as f64;
            ta *= -x * x / ((2.0 * jf + 2.0 + k) * (2.0 * jf + 3.0 + k));
            tc *= -x * x / ((2.0 * jf + 3.0 + k) * (2.0 * jf + 4.0 + k));
        }
        return (a * tau.powi(order as i32 + 1), c * tau.powi(order as i32 + 2));
    }
    let (s, co) = (x.sin(), x.cos());
    match order {
        0 => (s / n, (1.0 - co) / n.powi(2)),
        1 => ((1.0 - co) / n.powi(2), (x - s) / n.powi(3)),
        2 => ((x - s) / n.powi(3), (0.5 * x * x - 1.0 + co) / n.powi(4)),
        3 => ((0.5 * x * x - 1.0 + co) / n.powi(4), (x * x * x / 6.0 - x + s) / n.powi(5)),
        _ => unreachable!("only integrals up to third order are used"),
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// `order`-fold integral of `Λ` over `[0, τ]`.
fn lambda_integral(omega: &Vec3, tau: f64, order: u32) -> Mat3 {
    let k = cross_matrix(omega);
    let (a, c) = integral_coefficients(omega.norm(), tau, order);
    Mat3::identity() * (tau.powi(order as i32) / factorial(order)) - k * a + k * k * c
}

fn transition_blocks(a_hat: &Mat3, omega: &Vec3, accel: &Vec3, tau: f64) -> Mat12 {
    let c = a_hat * cross_matrix(accel) * -2.0;
    let l0 = lambda_matrix(omega, tau);
    let l1 = lambda_prime(omega, tau);
    let l2 = lambda_integral(omega, tau, 2);
    let l3 = lambda_integral(omega, tau, 3);
    let i3 = Mat3::identity();

    let mut phi = Mat12::zeros();
    phi.fixed_view_mut::<3, 3>(ATT, ATT).copy_from(&l0);
    phi.fixed_view_mut::<3, 3>(ATT, BIAS).copy_from(&(l1 * 0.5));
    phi.fixed_view_mut::<3, 3>(POS, ATT).copy_from(&(c * l2));
    phi.fixed_view_mut::<3, 3>(POS, POS).copy_from(&i3);
    phi.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&(i3 * tau));
    phi.fixed_view_mut::<3, 3>(POS, BIAS).copy_from(&(c * l3 * 0.5));
    phi.fixed_view_mut::<3, 3>(VEL, ATT).copy_from(&(c * l1));
    phi.fixed_view_mut::<3, 3>(VEL, VEL).copy_from(&i3);
    phi.fixed_view_mut::<3, 3>(VEL, BIAS).copy_from(&(c * l2 * 0.5));
    phi.fixed_view_mut::<3, 3>(BIAS, BIAS).copy_from(&i3);
    phi
}

/// `Φ = e^{Fτ}` with `F` linearised at `x` and the interval-averaged input `u_avg`.
pub fn state_transition(x: &StateEstimate, u_avg: &ImuSample, tau: f64) -> TransitionMatrix {
    let omega = u_avg.gyro + x.b;
    TransitionMatrix {
        phi: transition_blocks(&x.q.rotation(), &omega, &u_avg.accel, tau),
        tau,
    }
}

fn symmetrize(m: &Mat12) -> Mat12 {
    (m + m.transpose()) * 0.5
}

/// First-order block formula for the discrete process noise.
///
/// The blocks are
///
/// ```text
/// Q₁₁ = (σ_b²τ³/12 + σ_g²τ/6) I − σ_g²τ³/12 K²
/// Q₃₁ = σ_g²τ/4 I + σ_g²τ²/8 (K − 2Â[â×]) − σ_g²τ³/6 Â[â×] K
/// Q₃₃ = (σ_a² + σ_g²/4) τ I − σ_g²τ³/3 Â[â×]Âᵀ + σ_g²τ²/4 ([â×]Âᵀ − Â[â×])
/// Q₄₁ = σ_b²τ²/4 I,   Q₄₄ = σ_b²τ I
/// ```
///
/// with the position rows zero; the upper triangle mirrors the lower one. Its relative error
/// against the exact integral shrinks linearly with `τ` (mainly the omitted position-velocity
/// cross term, `σ_a²τ²/2`).
pub fn process_noise_closed(
    x: &StateEstimate,
    u_avg: &ImuSample,
    tau: f64,
    n: &NoiseSpec,
) -> ProcessNoiseMatrix {
    let sg2 = n.sigma_g * n.sigma_g;
    let sa2 = n.sigma_a * n.sigma_a;
    let sb2 = n.sigma_b * n.sigma_b;
    let (t, t2, t3) = (tau, tau * tau, tau * tau * tau);
    let i3 = Mat3::identity();
    let k = cross_matrix(&(u_avg.gyro + x.b));
    let a_hat = x.q.rotation();
    let ax = cross_matrix(&u_avg.accel);
    let a_ax = a_hat * ax;

    let q11 = i3 * (sb2 * t3 / 12.0 + sg2 * t / 6.0) - k * k * (sg2 * t3 / 12.0);
    let q31 = i3 * (sg2 * t / 4.0) + (k - a_ax * 2.0) * (sg2 * t2 / 8.0) - a_ax * k * (sg2 * t3 / 6.0);
    let q33 = i3 * ((sa2 + sg2 / 4.0) * t) - a_ax * a_hat.transpose() * (sg2 * t3 / 3.0)
        + (ax * a_hat.transpose() - a_ax) * (sg2 * t2 / 4.0);
    let q41 = i3 * (0.25 * sb2 * t2);
    let q44 = i3 * (sb2 * t);

    let mut q = Mat12::zeros();
    q.fixed_view_mut::<3, 3>(ATT, ATT).copy_from(&q11);
    q.fixed_view_mut::<3, 3>(VEL, ATT).copy_from(&q31);
    q.fixed_view_mut::<3, 3>(VEL, VEL).copy_from(&q33);
    q.fixed_view_mut::<3, 3>(BIAS, ATT).copy_from(&q41);
    q.fixed_view_mut::<3, 3>(BIAS, BIAS).copy_from(&q44);
    // Mirror the strictly lower blocks, then symmetrise the diagonal blocks.
    q.fixed_view_mut::<3, 3>(ATT, VEL).copy_from(&q31.transpose());
    q.fixed_view_mut::<3, 3>(ATT, BIAS).copy_from(&q41.transpose());
    ProcessNoiseMatrix(symmetrize(&q))
}

/// Composite Simpson evaluation of `∫₀^τ Φ(s) G Σ Gᵀ Φ(s)ᵀ ds` with the exact `Φ(s)`.
///
/// `steps` must be at least 16; odd counts are rounded up to the next even number.
pub fn process_noise_quadrature(
    x: &StateEstimate,
    u_avg: &ImuSample,
    tau: f64,
    n: &NoiseSpec,
    steps: usize,
) -> Result<ProcessNoiseMatrix> {
    if steps < 16 {
        return Err(Error::invalid(format!("quadrature needs at least 16 steps, got {steps}")));
    }
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("interval must be non-negative, got {tau}")));
    }
    let steps = steps + steps % 2;
    let g = noise_jacobian_g(x);
    let gsg = g * imu_noise_covariance(n) * g.transpose();
    let a_hat = x.q.rotation();
    let omega = u_avg.gyro + x.b;
    let h = tau / steps as f64;

    let mut acc = Mat12::zeros();
    for i in 0..=steps {
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let phi = transition_blocks(&a_hat, &omega, &u_avg.accel, h * i as f64);
        acc += phi * gsg * phi.transpose() * w;
    }
    Ok(ProcessNoiseMatrix(symmetrize(&(acc * (h / 3.0)))))
}
