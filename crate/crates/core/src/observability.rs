//! Observability of the piecewise-constant linearised system.
//!
//! Within one GPS interval `ω̂` and `â` are treated as constant, so the pair `(H, F)` is LTI and
//! the error state is observable iff `O = [H; HF; HF²; …]` has rank 12. With both antennas this
//! holds whenever the baseline `Δe` is not parallel to the measured specific force `â`; with one
//! antenna the vector `η = [â; 2Â(e₁ × â); 0; 2ω̂ × â]` is always in the kernel.
//!
//! [`mro_reduction`] reproduces the row-operation argument that reduces `O` to a block form
//! built on `Π = ΔeΔeᵀ[â×] + [â×]`. Note that `Π â = 0` for every `â`, so `Π` is never
//! invertible, and the operations that premultiply rows by `Δe` discard information; the
//! reduced matrices are therefore reported with their own ranks rather than assumed equivalent.

use nalgebra::{DMatrix, SMatrix};

use crate::error::{Error, Result};
use crate::models::{antenna_jacobian, linearized_f, measurement_jacobian, ImuSample, Mat12, SensorGeometry, StateEstimate, Vec12, ATT, BIAS, POS, VEL};
use crate::quat::{cross_matrix, Mat3, Vec3};

/// Default singular-value threshold, relative to the largest singular value.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-8;

/// Alignment angle below which observability is reported as degraded, rad.
pub const DEFAULT_THETA_WARNING: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AntennaMode {
    Dual,
    /// Only antenna 1 is used.
    Single,
}

impl std::fmt::Display for AntennaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AntennaMode::Dual => write!(f, "dual"),
            AntennaMode::Single => write!(f, "single"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservabilityReport {
    pub rank: usize,
    pub full_rank: bool,
    /// Folded angle between `Δe` and `â`, in `[0, π/2]`.
    pub theta: f64,
    pub smallest_singular_value: f64,
    pub mode: AntennaMode,
    /// `theta` fell below the warning threshold.
    pub degraded: bool,
}

fn measurement_rows(x: &StateEstimate, geom: &SensorGeometry, mode: AntennaMode) -> DMatrix<f64> {
    match mode {
        AntennaMode::Dual => {
            let h = measurement_jacobian(x, geom);
            DMatrix::from_fn(6, 12, |i, j| h[(i, j)])
        }
        AntennaMode::Single => {
            let h = antenna_jacobian(x, &geom.e1);
            DMatrix::from_fn(3, 12, |i, j| h[(i, j)])
        }
    }
}

/// Stacks `[H; HF; …; HF^order]`.
pub fn observability_matrix(
    x: &StateEstimate,
    u: &ImuSample,
    geom: &SensorGeometry,
    mode: AntennaMode,
    order: usize,
) -> Result<DMatrix<f64>> {
    if order < 3 {
        return Err(Error::invalid(format!("order must be at least 3, got {order}")));
    }
    let h = measurement_rows(x, geom, mode);
    let f = linearized_f(x, u);
    let f = DMatrix::from_fn(12, 12, |i, j| f[(i, j)]);
    let m = h.nrows();
    let mut o = DMatrix::zeros(m * (order + 1), 12);
    let mut block = h;
    for k in 0..=order {
        o.view_mut((k * m, 0), (m, 12)).copy_from(&block);
        block = &block * &f;
    }
    Ok(o)
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Err(Error::invalid("empty matrix has no rank"));
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Number of singular values at least `rel_tol · σ_max`.
pub fn numeric_rank(m: &DMatrix<f64>, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::invalid(format!("rank tolerance must lie in (0, 1), got {rel_tol}")));
    }
    let s = singular_values(m)?;
    if s[0] == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v >= rel_tol * s[0]).count())
}

/// `Π = Δe Δeᵀ [â×] + [â×]`.
pub fn pi_matrix(geom: &SensorGeometry, a_hat: &Vec3) -> Mat3 {
    let de = geom.baseline();
    let ax = cross_matrix(a_hat);
    de * de.transpose() * ax + ax
}

/// `θ = acos(|Δe·â| / (|Δe| |â|))`.
pub fn alignment_angle(geom: &SensorGeometry, a_hat: &Vec3) -> Result<f64> {
    let de = geom.baseline();
    let denom = de.norm() * a_hat.norm();
    if !(denom > 0.0) {
        return Err(Error::invalid("alignment angle needs non-zero baseline and acceleration"));
    }
    Ok((de.dot(a_hat).abs() / denom).min(1.0).acos())
}

/// The single-antenna unobservable direction `η = [â; 2Â(e₁ × â); 0; 2ω̂ × â]`.
pub fn single_gps_null_vector(x: &StateEstimate, u: &ImuSample, geom: &SensorGeometry) -> Result<Vec12> {
    let a = u.accel;
    if a.norm() == 0.0 {
        return Err(Error::invalid("null vector is undefined for zero specific force"));
    }
    let omega = u.gyro + x.b;
    let mut eta = Vec12::zeros();
    eta.fixed_rows_mut::<3>(ATT).copy_from(&a);
    eta.fixed_rows_mut::<3>(POS)
        .copy_from(&(x.q.rotation() * geom.e1.cross(&a) * 2.0));
    eta.fixed_rows_mut::<3>(BIAS).copy_from(&(omega.cross(&a) * 2.0));
    Ok(eta)
}

/// Rank and conditioning summary at one linearisation point.
pub fn analyze(
    x: &StateEstimate,
    u: &ImuSample,
    geom: &SensorGeometry,
    mode: AntennaMode,
    rank_tol: f64,
    theta_warning: f64,
) -> Result<ObservabilityReport> {
    let o = observability_matrix(x, u, geom, mode, 3)?;
    let s = singular_values(&o)?;
    let rank = numeric_rank(&o, rank_tol)?;
    let theta = alignment_angle(geom, &u.accel).unwrap_or(0.0);
    Ok(ObservabilityReport {
        rank,
        full_rank: rank == 12,
        theta,
        smallest_singular_value: s.get(11).copied().unwrap_or(0.0),
        mode,
        degraded: theta < theta_warning,
    })
}

/// Closed forms of `HF`, `HF²` and `HF³` for the dual-antenna sensitivity matrix.
pub fn hf_closed_forms(x: &StateEstimate, u: &ImuSample, geom: &SensorGeometry) -> [SMatrix<f64, 6, 12>; 3] {
    let a_hat = x.q.rotation();
    let w = cross_matrix(&(u.gyro + x.b));
    let ax = cross_matrix(&u.accel);
    let w2 = w * w;
    let w3 = w2 * w;
    let mut out = [SMatrix::<f64, 6, 12>::zeros(); 3];
    for (row, e) in [(0usize, geom.e1), (3usize, geom.e2)] {
        let ex = cross_matrix(&e);
        out[0].fixed_view_mut::<3, 3>(row, ATT).copy_from(&(a_hat * ex * w * 2.0));
        out[0].fixed_view_mut::<3, 3>(row, VEL).copy_from(&Mat3::identity());
        out[0].fixed_view_mut::<3, 3>(row, BIAS).copy_from(&(-a_hat * ex));

        out[1].fixed_view_mut::<3, 3>(row, ATT).copy_from(&(a_hat * (ex * w2 + ax) * -2.0));
        out[1].fixed_view_mut::<3, 3>(row, BIAS).copy_from(&(a_hat * ex * w));

        out[2].fixed_view_mut::<3, 3>(row, ATT).copy_from(&(a_hat * (ex * w3 + ax * w) * 2.0));
        out[2].fixed_view_mut::<3, 3>(row, BIAS).copy_from(&(-a_hat * (ex * w2 + ax)));
    }
    out
}

/// Matrices produced by the row-operation reduction of the dual-antenna `O`, with their ranks.
#[derive(Clone, Debug)]
pub struct MroReduction {
    /// Sixteen rows obtained by premultiplying rows of `H … HF³` by `Âᵀ`, `±½(Âeᵢ)ᵀ`, `±(Âeᵢ)ᵀ`.
    pub intermediate: DMatrix<f64>,
    /// Eighteen rows after summing the scalar rows and premultiplying them by `Δe`.
    pub stacked: DMatrix<f64>,
    /// Twelve rows after the final block additions.
    pub reduced: DMatrix<f64>,
    pub rank_o: usize,
    pub rank_intermediate: usize,
    pub rank_stacked: usize,
    pub rank_reduced: usize,
    pub rank_pi: usize,
}

impl MroReduction {
    /// Every reduction keeps the rank of `O`.
    pub fn rank_equivalent(&self) -> bool {
        self.rank_intermediate == self.rank_o
            && self.rank_stacked == self.rank_o
            && self.rank_reduced == self.rank_o
    }
}

fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |i, j| m[(i, j)])
}

/// Applies the row operations literally and reports the resulting ranks.
pub fn mro_reduction(x: &StateEstimate, u: &ImuSample, geom: &SensorGeometry, rank_tol: f64) -> Result<MroReduction> {
    let a_hat = x.q.rotation();
    let at = a_hat.transpose();
    let de = geom.baseline();
    let h = measurement_jacobian(x, geom);
    let f: Mat12 = linearized_f(x, u);
    let hf = h * f;
    let hf2 = hf * f;
    let hf3 = hf2 * f;
    let top = |m: &SMatrix<f64, 6, 12>| m.fixed_rows::<3>(0).into_owned();
    let bottom = |m: &SMatrix<f64, 6, 12>| m.fixed_rows::<3>(3).into_owned();
    let ae1 = (a_hat * geom.e1).transpose();
    let ae2 = (a_hat * geom.e2).transpose();

    let r1 = at * (top(&h) - bottom(&h));
    let r2 = ae1 * top(&hf2) * -0.5;
    let r3 = ae2 * bottom(&hf2) * 0.5;
    let r4 = at * top(&h);
    let r5 = at * top(&hf);
    let r6 = at * (top(&hf) - bottom(&hf));
    let r7 = ae1 * top(&hf3);
    let r8 = ae2 * bottom(&hf3) * -1.0;

    let mut intermediate = DMatrix::zeros(16, 12);
    let mut row = 0;
    for block in [to_dmatrix(&r1), to_dmatrix(&r2), to_dmatrix(&r3), to_dmatrix(&r4), to_dmatrix(&r5), to_dmatrix(&r6), to_dmatrix(&r7), to_dmatrix(&r8)] {
        let n = block.nrows();
        intermediate.view_mut((row, 0), (n, 12)).copy_from(&block);
        row += n;
    }

    let t2 = de * (r2 + r3);
    let t6 = de * (r7 + r8);
    let mut stacked = DMatrix::zeros(18, 12);
    for (k, block) in [r1, t2, r4, r5, r6, t6].iter().enumerate() {
        stacked.view_mut((3 * k, 0), (3, 12)).copy_from(&to_dmatrix(block));
    }

    let mut reduced = DMatrix::zeros(12, 12);
    for (k, block) in [r1 + t2, r4, r5, r6 + t6].iter().enumerate() {
        reduced.view_mut((3 * k, 0), (3, 12)).copy_from(&to_dmatrix(block));
    }

    let o = observability_matrix(x, u, geom, AntennaMode::Dual, 3)?;
    let pi = to_dmatrix(&pi_matrix(geom, &u.accel));
    Ok(MroReduction {
        rank_o: numeric_rank(&o, rank_tol)?,
        rank_intermediate: numeric_rank(&intermediate, rank_tol)?,
        rank_stacked: numeric_rank(&stacked, rank_tol)?,
        rank_reduced: numeric_rank(&reduced, rank_tol)?,
        rank_pi: numeric_rank(&pi, rank_tol)?,
        intermediate,
        stacked,
        reduced,
    })
}

/// `true` when every row-reduced matrix has the same numeric rank as `O`.
pub fn mro_reduced_rank_check(x: &StateEstimate, u: &ImuSample, geom: &SensorGeometry) -> Result<bool> {
    Ok(mro_reduction(x, u, geom, DEFAULT_RANK_TOLERANCE)?.rank_equivalent())
}
