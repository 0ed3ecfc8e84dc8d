//! End-to-end fusion runs: initialisation, the propagate/update loop, per-epoch records and
//! summary statistics.

use std::io::Write;

use nalgebra::Vector6;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::ekf::{average_inputs, initialize, nees, FilterConfig, FilterState, UpdateOutcome};
use crate::error::{Error, Result};
use crate::io::{truth_at, TruthRecord};
use crate::models::{GpsFix, ImuSample, StateEstimate, Vec12, ATT, POS, VEL};
use crate::observability::{alignment_angle, analyze, AntennaMode, DEFAULT_RANK_TOLERANCE};
use crate::sim::{Scenario, SimData};

/// A dual fix must arrive this soon after the first IMU sample.
pub const INIT_DEADLINE: f64 = 5.0;
/// IMU history averaged for the static initialisation, s.
pub const INIT_AVERAGE: f64 = 0.5;
/// Epochs earlier than this after the first IMU sample are left out of summaries, s.
pub const SUMMARY_SKIP: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FuseOptions {
    /// Use only this antenna (1 or 2).
    pub single_antenna: Option<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub t: f64,
    pub x: StateEstimate,
    pub truth: Option<StateEstimate>,
    /// Prior residual; zero rows for antennas not used.
    pub residual: Vector6<f64>,
    /// Measurement rows used (0 when coasting or skipped).
    pub rows: usize,
    pub trace_p: f64,
    /// Position standard deviations from `P`, m.
    pub sigma_pos: [f64; 3],
    pub r_diag: [f64; 6],
    pub theta: f64,
    pub full_rank: bool,
    /// `truth ⊖ estimate` in error-state coordinates.
    pub error: Option<Vec12>,
    pub nees: Option<f64>,
}

impl EpochRecord {
    /// Rotation angle between estimated and true attitude, rad.
    pub fn attitude_error(&self) -> Option<f64> {
        self.error
            .map(|e| 2.0 * e.fixed_rows::<3>(ATT).norm().min(1.0).asin())
    }

    pub fn position_error(&self) -> Option<f64> {
        self.error.map(|e| e.fixed_rows::<3>(POS).norm())
    }

    pub fn velocity_error(&self) -> Option<f64> {
        self.error.map(|e| e.fixed_rows::<3>(VEL).norm())
    }

    pub fn bias_error(&self) -> Option<f64> {
        Some((self.truth?.b - self.x.b).norm())
    }
}

/// Summary over epochs after the start-up transient. Truth-based entries are `None` without truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub epochs: usize,
    pub skipped_updates: usize,
    pub rmse_attitude: Option<f64>,
    pub rmse_position: Option<f64>,
    pub rmse_velocity: Option<f64>,
    /// `|b̂ − b|` at the last epoch, rad/s.
    pub bias_final_error: Option<f64>,
    /// `bias_final_error / |b|`; `None` when the true bias is zero.
    pub bias_final_relative: Option<f64>,
    pub nees_in_bounds: Option<f64>,
    pub mean_r_diag: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub summary: Summary,
    pub t_start: f64,
    pub initial: StateEstimate,
}

/// Two-sided 95% bounds of χ² with `dof` degrees of freedom.
pub fn chi2_bounds(dof: f64) -> (f64, f64) {
    let d = ChiSquared::new(dof).expect("positive degrees of freedom");
    (d.inverse_cdf(0.025), d.inverse_cdf(0.975))
}

fn rms(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v * v;
        n += 1;
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// Statistics over epochs at or after `t_from`.
pub fn summarize(epochs: &[EpochRecord], t_from: f64) -> Summary {
    let kept: Vec<&EpochRecord> = epochs.iter().filter(|e| e.t >= t_from).collect();
    let (lo, hi) = chi2_bounds(12.0);
    let nees: Vec<f64> = kept.iter().filter_map(|e| e.nees).collect();
    let last = epochs.last();
    let bias_final_error = last.and_then(|e| e.bias_error());
    let bias_final_relative = last.and_then(|e| {
        let b = e.truth?.b.norm();
        (b > 0.0).then(|| e.bias_error().unwrap_or(0.0) / b)
    });
    let mean_r_diag = last.map_or(0.0, |e| e.r_diag.iter().sum::<f64>() / 6.0);
    Summary {
        epochs: kept.len(),
        skipped_updates: epochs.iter().filter(|e| e.rows == 0).count(),
        rmse_attitude: rms(kept.iter().filter_map(|e| e.attitude_error())),
        rmse_position: rms(kept.iter().filter_map(|e| e.position_error())),
        rmse_velocity: rms(kept.iter().filter_map(|e| e.velocity_error())),
        bias_final_error,
        bias_final_relative,
        nees_in_bounds: (!nees.is_empty())
            .then(|| nees.iter().filter(|&&v| v >= lo && v <= hi).count() as f64 / nees.len() as f64),
        mean_r_diag,
    }
}

fn mask(fix: &GpsFix, opts: &FuseOptions) -> GpsFix {
    let mut f = *fix;
    match opts.single_antenna {
        Some(1) => f.valid2 = false,
        Some(2) => f.valid1 = false,
        _ => {}
    }
    f
}

/// Input at `t`, interpolated between the neighbouring samples.
fn imu_at(imu: &[ImuSample], t: f64) -> ImuSample {
    let j = imu.partition_point(|s| s.t < t);
    match (j.checked_sub(1).and_then(|i| imu.get(i)), imu.get(j)) {
        (_, Some(b)) if b.t == t => *b,
        (Some(a), Some(b)) => a.lerp(b, t),
        (Some(a), None) => ImuSample { t, ..*a },
        (None, Some(b)) => ImuSample { t, ..*b },
        (None, None) => unreachable!("caller checks for samples"),
    }
}

/// Picks the initialisation fix: the first dual fix within [`INIT_DEADLINE`] that has at least
/// [`INIT_AVERAGE`] of IMU history, else the first dual fix within the deadline.
fn init_fix(imu: &[ImuSample], gps: &[GpsFix], opts: &FuseOptions) -> Result<usize> {
    let t0 = imu[0].t;
    let candidates: Vec<usize> = gps
        .iter()
        .enumerate()
        .filter(|(_, f)| f.both_valid() && f.t >= t0 && f.t <= t0 + INIT_DEADLINE)
        .map(|(i, _)| i)
        .collect();
    if opts.single_antenna.is_some() && candidates.is_empty() {
        return Err(Error::MissingData("single-antenna runs still need one dual fix to initialise".into()));
    }
    candidates
        .iter()
        .copied()
        .find(|&i| gps[i].t >= t0 + INIT_AVERAGE)
        .or_else(|| candidates.first().copied())
        .ok_or_else(|| Error::MissingData(format!("no valid dual GPS fix within {INIT_DEADLINE} s of the first IMU sample")))
}

/// Runs the filter over time-ordered logs. `truth`, if given, is matched to GPS epochs by time.
pub fn run_fuse(
    imu: &[ImuSample],
    gps: &[GpsFix],
    cfg: &FilterConfig,
    truth: Option<&[TruthRecord]>,
    opts: &FuseOptions,
) -> Result<RunReport> {
    cfg.validate()?;
    if imu.is_empty() {
        return Err(Error::MissingData("IMU log is empty".into()));
    }
    if let Some(a) = opts.single_antenna {
        if a != 1 && a != 2 {
            return Err(Error::invalid(format!("antenna must be 1 or 2, got {a}")));
        }
    }
    let k0 = init_fix(imu, gps, opts)?;
    let fix0 = gps[k0];
    let history: Vec<ImuSample> = imu
        .iter()
        .filter(|s| s.t > fix0.t - INIT_AVERAGE && s.t <= fix0.t)
        .copied()
        .collect();
    let mean = if history.is_empty() {
        imu_at(imu, fix0.t)
    } else {
        average_inputs(&history, fix0.t - INIT_AVERAGE)?
    };
    let x0 = initialize(&fix0, &mean, &cfg.geom)?;
    let mut f = FilterState::new(x0, imu_at(imu, fix0.t), cfg)?;
    let mode = if opts.single_antenna.is_some() { AntennaMode::Single } else { AntennaMode::Dual };

    let mut epochs = Vec::with_capacity(gps.len() - k0);
    let mut i = imu.partition_point(|s| s.t <= fix0.t);
    for fix in &gps[k0 + 1..] {
        let j = imu[i..].partition_point(|s| s.t < fix.t) + i;
        let end = (j + 1).min(imu.len());
        f.propagate(&imu[i..end], fix.t, cfg)?;
        i = imu[i..].partition_point(|s| s.t <= fix.t) + i;

        let fix = mask(fix, opts);
        let (residual, rows) = match f.update(&fix, cfg).map_err(|e| match e {
            Error::DivergentUpdate { norm } => Error::Diverged { t: fix.t, reason: format!("attitude correction of norm {norm}") },
            other => other,
        })? {
            UpdateOutcome::Applied { residual, rows } => (residual, rows),
            UpdateOutcome::Skipped { .. } | UpdateOutcome::Coasted => (Vector6::zeros(), 0),
        };
        if !f.p.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { t: fix.t, reason: "non-finite covariance".into() });
        }

        let report = analyze(&f.x, &f.last_imu, &cfg.geom, mode, DEFAULT_RANK_TOLERANCE, cfg.theta_warning)?;
        let truth_x = truth.and_then(|log| truth_at(log, fix.t)).map(|r| r.x);
        let error = truth_x.map(|tx| f.x.error_to(&tx));
        epochs.push(EpochRecord {
            t: fix.t,
            x: f.x,
            truth: truth_x,
            residual,
            rows,
            trace_p: f.p.trace(),
            sigma_pos: [f.p[(POS, POS)].sqrt(), f.p[(POS + 1, POS + 1)].sqrt(), f.p[(POS + 2, POS + 2)].sqrt()],
            r_diag: std::array::from_fn(|k| f.r_hat[(k, k)]),
            theta: alignment_angle(&cfg.geom, &f.last_imu.accel).unwrap_or(0.0),
            full_rank: report.full_rank,
            nees: error.and_then(|e| nees(&e, &f.p)),
            error,
        });
    }
    let t_start = imu[0].t;
    let t_first = epochs.first().map_or(fix0.t, |e| e.t);
    Ok(RunReport { summary: summarize(&epochs, t_first + SUMMARY_SKIP), epochs, t_start, initial: x0 })
}

/// Truth log for a simulated data set.
pub fn truth_log(data: &SimData) -> Vec<TruthRecord> {
    data.truth.iter().map(|s| TruthRecord { t: s.t, x: s.state(data.bias) }).collect()
}

/// Simulates and fuses one scenario.
pub fn run_scenario(scenario: &Scenario, cfg: &FilterConfig, opts: &FuseOptions) -> Result<RunReport> {
    let data = scenario.generate()?;
    run_fuse(&data.imu, &data.gps, cfg, Some(&truth_log(&data)), opts)
}

/// Independent runs with seeds `seed0, seed0 + 1, …`, executed in parallel and returned in seed order.
pub fn monte_carlo(scenario: &Scenario, cfg: &FilterConfig, opts: &FuseOptions, runs: usize, seed0: u64) -> Vec<Result<RunReport>> {
    (0..runs as u64)
        .into_par_iter()
        .map(|k| {
            let sc = Scenario { seed: seed0.wrapping_add(k), ..scenario.clone() };
            run_scenario(&sc, cfg, opts)
        })
        .collect()
}

/// Summary over several runs: RMSEs and the NEES fraction are pooled over all kept epochs,
/// final bias errors are averaged.
pub fn pooled_summary(reports: &[RunReport]) -> Summary {
    let kept: Vec<&EpochRecord> = reports
        .iter()
        .flat_map(|r| {
            let t_from = r.epochs.first().map_or(f64::INFINITY, |e| e.t) + SUMMARY_SKIP;
            r.epochs.iter().filter(move |e| e.t >= t_from)
        })
        .collect();
    let (lo, hi) = chi2_bounds(12.0);
    let nees: Vec<f64> = kept.iter().filter_map(|e| e.nees).collect();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Summary {
        epochs: kept.len(),
        skipped_updates: reports.iter().map(|r| r.summary.skipped_updates).sum(),
        rmse_attitude: rms(kept.iter().filter_map(|e| e.attitude_error())),
        rmse_position: rms(kept.iter().filter_map(|e| e.position_error())),
        rmse_velocity: rms(kept.iter().filter_map(|e| e.velocity_error())),
        bias_final_error: mean(reports.iter().filter_map(|r| r.summary.bias_final_error).collect()),
        bias_final_relative: mean(reports.iter().filter_map(|r| r.summary.bias_final_relative).collect()),
        nees_in_bounds: (!nees.is_empty())
            .then(|| nees.iter().filter(|&&v| v >= lo && v <= hi).count() as f64 / nees.len() as f64),
        mean_r_diag: mean(reports.iter().map(|r| r.summary.mean_r_diag).collect()).unwrap_or(0.0),
    }
}

pub const EPOCH_HEADER: [&str; 33] = [
    "t", "qx", "qy", "qz", "qs", "rx", "ry", "rz", "vx", "vy", "vz", "bx", "by", "bz", "res1x", "res1y", "res1z",
    "res2x", "res2y", "res2z", "rows", "trace_p", "r11", "r22", "r33", "r44", "r55", "r66", "theta", "full_rank",
    "att_err", "pos_err", "nees",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Per-epoch CSV; truth-based columns are empty when no truth was available.
pub fn write_epochs<W: Write>(writer: W, epochs: &[EpochRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(EPOCH_HEADER)?;
    for e in epochs {
        let x = &e.x;
        let mut rec: Vec<String> = [
            e.t, x.q.v.x, x.q.v.y, x.q.v.z, x.q.s, x.r.x, x.r.y, x.r.z, x.v.x, x.v.y, x.v.z, x.b.x, x.b.y, x.b.z,
        ]
        .iter()
        .chain(e.residual.iter())
        .map(|v| v.to_string())
        .collect();
        rec.push(e.rows.to_string());
        rec.push(e.trace_p.to_string());
        rec.extend(e.r_diag.iter().map(|v| v.to_string()));
        rec.push(e.theta.to_string());
        rec.push(u8::from(e.full_rank).to_string());
        rec.push(opt(e.attitude_error()));
        rec.push(opt(e.position_error()));
        rec.push(opt(e.nees));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<epochs>", e))?;
    Ok(())
}

/// Summary statistics recomputed from a per-epoch CSV written by [`write_epochs`].
pub fn summarize_epoch_csv<R: std::io::Read>(reader: R, name: &str, skip: f64) -> Result<Summary> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(EPOCH_HEADER.iter().copied()) {
        return Err(Error::Parse { path: name.into(), line: 1, message: "not a per-epoch report".into() });
    }
    let col = |n: &str| EPOCH_HEADER.iter().position(|h| *h == n).expect("known column");
    let (mut t0, mut n, mut skipped, mut r_mean) = (None, 0usize, 0usize, 0.0);
    let (mut att, mut pos, mut nees_all) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |c: usize| -> Result<Option<f64>> {
            let s = rec.get(c).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| Error::Parse { path: name.into(), line, message: format!("bad number `{s}`") })
        };
        let t = num(0)?.ok_or_else(|| Error::Parse { path: name.into(), line, message: "missing time".into() })?;
        let start = *t0.get_or_insert(t);
        if num(col("rows"))? == Some(0.0) {
            skipped += 1;
        }
        r_mean = (col("r11")..=col("r66")).map(num).collect::<Result<Vec<_>>>()?.iter().flatten().sum::<f64>() / 6.0;
        if t < start + skip {
            continue;
        }
        n += 1;
        att.extend(num(col("att_err"))?);
        pos.extend(num(col("pos_err"))?);
        nees_all.extend(num(col("nees"))?);
    }
    let (lo, hi) = chi2_bounds(12.0);
    Ok(Summary {
        epochs: n,
        skipped_updates: skipped,
        rmse_attitude: rms(att.into_iter()),
        rmse_position: rms(pos.into_iter()),
        rmse_velocity: None,
        bias_final_error: None,
        bias_final_relative: None,
        nees_in_bounds: (!nees_all.is_empty())
            .then(|| nees_all.iter().filter(|&&v| v >= lo && v <= hi).count() as f64 / nees_all.len() as f64),
        mean_r_diag: r_mean,
    })
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        writeln!(f, "epochs             {}", self.epochs)?;
        writeln!(f, "skipped updates    {}", self.skipped_updates)?;
        writeln!(f, "rmse attitude rad  {}", show(self.rmse_attitude))?;
        writeln!(f, "rmse position m    {}", show(self.rmse_position))?;
        writeln!(f, "rmse velocity m/s  {}", show(self.rmse_velocity))?;
        writeln!(f, "bias error rad/s   {}", show(self.bias_final_error))?;
        writeln!(f, "bias error rel     {}", show(self.bias_final_relative))?;
        writeln!(f, "nees in bounds     {}", show(self.nees_in_bounds))?;
        write!(f, "mean R diag m^2    {:.6e}", self.mean_r_diag)
    }
}
