//! CSV logs and the flat `key = value` configuration file.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parse(write(x)) == x.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::ekf::{AdaptiveForm, FilterConfig, ProcessNoiseModel};
use crate::error::{Error, Result};
use crate::models::{GpsFix, ImuSample, Mat6, NoiseSpec, SensorGeometry, StateEstimate};
use crate::quat::{Quaternion, Vec3};
use crate::sim::{AntennaSelect, NoiseBurst, Outage, Scenario, TrajectoryKind};

pub const IMU_HEADER: [&str; 7] = ["t", "gx", "gy", "gz", "ax", "ay", "az"];
pub const GPS_HEADER: [&str; 9] = ["t", "p1x", "p1y", "p1z", "v1", "p2x", "p2y", "p2z", "v2"];
/// Quaternion columns are vector part first, then scalar.
pub const TRUTH_HEADER: [&str; 14] = ["t", "qx", "qy", "qz", "qs", "rx", "ry", "rz", "vx", "vy", "vz", "bx", "by", "bz"];

/// One ground-truth state with its timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRecord {
    pub t: f64,
    pub x: StateEstimate,
}

/// Looks up the record stamped within 1 µs of `t` in a time-sorted log.
pub fn truth_at(log: &[TruthRecord], t: f64) -> Option<&TruthRecord> {
    let i = log.partition_point(|r| r.t < t - 1e-6);
    log.get(i).filter(|r| (r.t - t).abs() <= 1e-6)
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_string(), line, message: message.into() }
}

/// Reads a headed CSV stream, checking the header and time ordering, and maps each row.
fn read_rows<R: Read, T>(
    reader: R,
    name: &str,
    header: &[&str],
    mut row: impl FnMut(&[f64]) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let found = rdr.headers().map_err(|e| parse_error(name, 1, e.to_string()))?.clone();
    for (i, want) in header.iter().enumerate() {
        match found.get(i) {
            Some(got) if got == *want => {}
            Some(got) => {
                return Err(parse_error(name, 1, format!("column {} is `{got}`, expected `{want}`", i + 1)));
            }
            None => return Err(parse_error(name, 1, format!("missing column `{want}`"))),
        }
    }
    if found.len() > header.len() {
        return Err(parse_error(name, 1, format!("unexpected column `{}`", &found[header.len()])));
    }

    let mut out = Vec::new();
    let mut prev_t = f64::NEG_INFINITY;
    let mut values = Vec::with_capacity(header.len());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(name, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_error(name, line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        values.clear();
        for (field, col) in rec.iter().zip(header) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(name, line, format!("`{field}` in column `{col}` is not a number")))?;
            values.push(v);
        }
        let t = values[0];
        if !t.is_finite() {
            return Err(parse_error(name, line, "timestamp is not finite"));
        }
        if t <= prev_t {
            return Err(parse_error(name, line, format!("timestamp {t} does not increase")));
        }
        prev_t = t;
        out.push(row(&values).map_err(|m| parse_error(name, line, m))?);
    }
    Ok(out)
}

fn v3(x: &[f64]) -> Vec3 {
    Vec3::new(x[0], x[1], x[2])
}

fn flag(x: f64, col: &str) -> std::result::Result<bool, String> {
    match x {
        v if v == 0.0 => Ok(false),
        v if v == 1.0 => Ok(true),
        v => Err(format!("validity `{col}` must be 0 or 1, got {v}")),
    }
}

pub fn read_imu<R: Read>(reader: R, name: &str) -> Result<Vec<ImuSample>> {
    read_rows(reader, name, &IMU_HEADER, |x| {
        let s = ImuSample::new(x[0], v3(&x[1..4]), v3(&x[4..7]));
        if s.is_finite() {
            Ok(s)
        } else {
            Err("non-finite IMU value".into())
        }
    })
}

pub fn read_gps<R: Read>(reader: R, name: &str) -> Result<Vec<GpsFix>> {
    read_rows(reader, name, &GPS_HEADER, |x| {
        let (valid1, valid2) = (flag(x[4], "v1")?, flag(x[8], "v2")?);
        let p1 = if valid1 { v3(&x[1..4]) } else { Vec3::zeros() };
        let p2 = if valid2 { v3(&x[5..8]) } else { Vec3::zeros() };
        if !(p1.iter().chain(p2.iter()).all(|v| v.is_finite())) {
            return Err("non-finite antenna position".into());
        }
        Ok(GpsFix { t: x[0], p1, p2, valid1, valid2 })
    })
}

pub fn read_truth<R: Read>(reader: R, name: &str) -> Result<Vec<TruthRecord>> {
    read_rows(reader, name, &TRUTH_HEADER, |x| {
        let q = Quaternion::new(v3(&x[1..4]), x[4]).map_err(|e| e.to_string())?;
        Ok(TruthRecord { t: x[0], x: StateEstimate { q, r: v3(&x[5..8]), v: v3(&x[8..11]), b: v3(&x[11..14]) } })
    })
}

pub fn parse_imu_log(path: &Path) -> Result<Vec<ImuSample>> {
    read_imu(open(path)?, &path_str(path))
}

pub fn parse_gps_log(path: &Path) -> Result<Vec<GpsFix>> {
    read_gps(open(path)?, &path_str(path))
}

pub fn parse_truth_log(path: &Path) -> Result<Vec<TruthRecord>> {
    read_truth(open(path)?, &path_str(path))
}

fn write_rows<W: Write>(writer: W, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn fields(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}

pub fn write_imu<W: Write>(writer: W, samples: &[ImuSample]) -> Result<()> {
    write_rows(
        writer,
        &IMU_HEADER,
        samples.iter().map(|s| fields(&[s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z])),
    )
}

pub fn write_gps<W: Write>(writer: W, fixes: &[GpsFix]) -> Result<()> {
    let b = |v: bool| if v { 1.0 } else { 0.0 };
    write_rows(
        writer,
        &GPS_HEADER,
        fixes.iter().map(|f| {
            fields(&[f.t, f.p1.x, f.p1.y, f.p1.z, b(f.valid1), f.p2.x, f.p2.y, f.p2.z, b(f.valid2)])
        }),
    )
}

pub fn write_truth<W: Write>(writer: W, log: &[TruthRecord]) -> Result<()> {
    write_rows(
        writer,
        &TRUTH_HEADER,
        log.iter().map(|r| {
            let x = &r.x;
            fields(&[r.t, x.q.v.x, x.q.v.y, x.q.v.z, x.q.s, x.r.x, x.r.y, x.r.z, x.v.x, x.v.y, x.v.z, x.b.x, x.b.y, x.b.z])
        }),
    )
}

pub fn write_imu_log(path: &Path, samples: &[ImuSample]) -> Result<()> {
    write_imu(create(path)?, samples)
}

pub fn write_gps_log(path: &Path, fixes: &[GpsFix]) -> Result<()> {
    write_gps(create(path)?, fixes)
}

pub fn write_truth_log(path: &Path, log: &[TruthRecord]) -> Result<()> {
    write_truth(create(path)?, log)
}

/// Filter settings, the run seed and the simulation scenario read from one config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub filter: FilterConfig,
    pub scenario: Scenario,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { filter: FilterConfig::default(), scenario: Scenario::default(), seed: 0 }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: `{key}` expects a number, got `{value}`")))
}

fn parse_list(key: &str, value: &str, line: usize, n: usize) -> Result<Vec<f64>> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(Error::Config(format!("line {line}: `{key}` expects {n} comma-separated values")));
    }
    parts.iter().map(|p| parse_num(key, p, line)).collect()
}

fn parse_vec3(key: &str, value: &str, line: usize) -> Result<Vec3> {
    let v = parse_list(key, value, line, 3)?;
    Ok(Vec3::new(v[0], v[1], v[2]))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: `{key}` expects true or false, got `{value}`"))),
    }
}

/// Parses `key = value` lines; `#` starts a comment. `outage` and `burst` may repeat.
///
/// Filter keys: `sigma_g`, `sigma_a`, `sigma_b`, `e1`, `e2`, `gravity`, `window_w`, `r_floor`,
/// `adapt`, `adapt_form` (`posterior` or `innovation`), `adapt_warmup`, `gps_sigma` (the
/// configured GPS standard deviation), `imu_rate`, `gps_rate`, `process_noise` (`closed` or
/// `quadrature`), `seed`.
///
/// Scenario keys: `trajectory`, `duration`, `speed`, `radius`, `heading`, `tilt`, `hold`,
/// `ramp`, `bias`, `true_gps_sigma`, `outage = start, end, 1|2|both`, `burst = start, end, scale`.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut noise = cfg.filter.noise;
    let (mut e1, mut e2, mut gravity) = (cfg.filter.geom.e1, cfg.filter.geom.e2, cfg.filter.geom.gravity);
    let mut gps_sigma: Option<f64> = None;
    let mut true_sigma: Option<f64> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
        let f = &mut cfg.filter;
        let sc = &mut cfg.scenario;
        match key {
            "sigma_g" => noise.sigma_g = parse_num(key, value, line)?,
            "sigma_a" => noise.sigma_a = parse_num(key, value, line)?,
            "sigma_b" => noise.sigma_b = parse_num(key, value, line)?,
            "e1" => e1 = parse_vec3(key, value, line)?,
            "e2" => e2 = parse_vec3(key, value, line)?,
            "gravity" => gravity = parse_vec3(key, value, line)?,
            "window_w" => f.window_w = parse_num(key, value, line)?,
            "r_floor" => f.r_floor = parse_num(key, value, line)?,
            "adapt" => f.adapt_enabled = parse_bool(key, value, line)?,
            "adapt_form" => {
                f.adapt_form = match value {
                    "posterior" => AdaptiveForm::Posterior,
                    "innovation" => AdaptiveForm::Innovation,
                    _ => return Err(Error::Config(format!("line {line}: unknown adapt_form `{value}`"))),
                }
            }
            "adapt_warmup" => f.adapt_warmup = Some(parse_num(key, value, line)?),
            "seed" => cfg.seed = parse_num(key, value, line)?,
            "gps_sigma" => gps_sigma = Some(parse_num(key, value, line)?),
            "imu_rate" => f.imu_rate = parse_num(key, value, line)?,
            "gps_rate" => f.gps_rate = parse_num(key, value, line)?,
            "process_noise" => {
                f.process_noise = match value {
                    "closed" => ProcessNoiseModel::Closed,
                    "quadrature" => ProcessNoiseModel::Quadrature,
                    _ => return Err(Error::Config(format!("line {line}: unknown process_noise `{value}`"))),
                }
            }
            "trajectory" => {
                sc.trajectory.kind = match value {
                    "static" => TrajectoryKind::Static,
                    "straight" => TrajectoryKind::Straight,
                    "circle" => TrajectoryKind::Circle,
                    "figure8" => TrajectoryKind::Figure8,
                    _ => return Err(Error::Config(format!("line {line}: unknown trajectory `{value}`"))),
                }
            }
            "duration" => sc.trajectory.duration = parse_num(key, value, line)?,
            "speed" => sc.trajectory.speed = parse_num(key, value, line)?,
            "radius" => sc.trajectory.radius = parse_num(key, value, line)?,
            "heading" => sc.trajectory.heading = parse_num(key, value, line)?,
            "tilt" => sc.trajectory.tilt = parse_vec3(key, value, line)?,
            "hold" => sc.trajectory.hold = parse_num(key, value, line)?,
            "ramp" => sc.trajectory.ramp = parse_num(key, value, line)?,
            "bias" => sc.bias = parse_vec3(key, value, line)?,
            "true_gps_sigma" => true_sigma = Some(parse_num(key, value, line)?),
            "outage" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("line {line}: `outage` expects start, end, 1|2|both")));
                }
                let antenna = match parts[2] {
                    "1" => AntennaSelect::One,
                    "2" => AntennaSelect::Two,
                    "both" => AntennaSelect::Both,
                    other => return Err(Error::Config(format!("line {line}: unknown antenna `{other}`"))),
                };
                sc.outages.push(Outage { start: parse_num(key, parts[0], line)?, end: parse_num(key, parts[1], line)?, antenna });
            }
            "burst" => {
                let v = parse_list(key, value, line, 3)?;
                sc.bursts.push(NoiseBurst { start: v[0], end: v[1], scale: v[2] });
            }
            _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
        }
    }

    let noise = NoiseSpec::new(noise.sigma_g, noise.sigma_a, noise.sigma_b).map_err(|e| Error::Config(e.to_string()))?;
    let geom = SensorGeometry::new(e1, e2, gravity).map_err(|e| Error::Config(e.to_string()))?;
    cfg.filter.noise = noise;
    cfg.filter.geom = geom;
    if let Some(s) = gps_sigma {
        if !(s > 0.0) {
            return Err(Error::Config(format!("gps_sigma must be positive, got {s}")));
        }
        cfg.filter.r_init = Mat6::identity() * (s * s);
    }
    let sc = &mut cfg.scenario;
    sc.noise = noise;
    sc.geom = geom;
    sc.imu_rate = cfg.filter.imu_rate;
    sc.gps_rate = cfg.filter.gps_rate;
    sc.seed = cfg.seed;
    sc.gps_sigma = true_sigma.or(gps_sigma).unwrap_or(sc.gps_sigma);
    cfg.filter.validate()?;
    sc.trajectory.validate().map_err(|e| Error::Config(e.to_string()))?;
    crate::sim::validate_outages(&sc.outages).map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
