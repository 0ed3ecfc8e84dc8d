use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualfuse::io::{load_config, parse_gps_log, parse_imu_log, parse_truth_log, write_gps_log, write_imu_log, write_truth_log, RunConfig};
use dualfuse::observability::{analyze, mro_reduction, AntennaMode, DEFAULT_RANK_TOLERANCE};
use dualfuse::pipeline::{monte_carlo, pooled_summary, run_fuse, summarize_epoch_csv, truth_log, write_epochs, FuseOptions, SUMMARY_SKIP};
use dualfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "dualfuse", version, about = "IMU and dual-antenna GPS fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic imu.csv, gps.csv and truth.csv into a directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the filter on logs, or on `--runs` simulated scenarios when no logs are given.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// IMU log (`t,gx,gy,gz,ax,ay,az`).
        #[arg(long, requires = "gps")]
        imu: Option<PathBuf>,
        /// GPS log with per-antenna validity flags.
        #[arg(long, requires = "imu")]
        gps: Option<PathBuf>,
        /// Truth log used for error statistics.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Per-epoch CSV (single run) or per-run summary CSV (Monte Carlo).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Monte Carlo run count; seeds are `seed..seed+runs`.
        #[arg(long, conflicts_with = "imu")]
        runs: Option<usize>,
        /// Keep the configured `R` fixed.
        #[arg(long)]
        no_adapt: bool,
        /// Use only antenna 1 or 2.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        single_antenna: Option<u8>,
    },
    /// Rank, alignment angle and row-reduction ranks along the configured trajectory.
    AnalyzeObservability {
        #[command(flatten)]
        common: Common,
        /// Per-sample CSV; a summary is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Analyse the single-antenna system.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        single_antenna: Option<u8>,
    },
    /// Summarise a per-epoch CSV written by `fuse`.
    Report {
        /// Per-epoch CSV.
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.scenario.seed = s;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn simulate(common: &Common, out: &Path) -> Result<()> {
    let cfg = load(common)?;
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let data = cfg.scenario.generate()?;
    write_imu_log(&out.join("imu.csv"), &data.imu)?;
    write_gps_log(&out.join("gps.csv"), &data.gps)?;
    write_truth_log(&out.join("truth.csv"), &truth_log(&data))?;
    println!("wrote {} IMU samples and {} GPS fixes to {}", data.imu.len(), data.gps.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fuse(
    common: &Common,
    imu: Option<&Path>,
    gps: Option<&Path>,
    truth: Option<&Path>,
    out: Option<&Path>,
    runs: Option<usize>,
    no_adapt: bool,
    single_antenna: Option<u8>,
) -> Result<()> {
    let mut cfg = load(common)?;
    if no_adapt {
        cfg.filter.adapt_enabled = false;
    }
    let opts = FuseOptions { single_antenna };
    if let (Some(imu), Some(gps)) = (imu, gps) {
        let imu = parse_imu_log(imu)?;
        let gps = parse_gps_log(gps)?;
        let truth = truth.map(parse_truth_log).transpose()?;
        let report = run_fuse(&imu, &gps, &cfg.filter, truth.as_deref(), &opts)?;
        if let Some(out) = out {
            let mut w = create(out)?;
            write_epochs(&mut w, &report.epochs)?;
            w.flush().map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
        }
        println!("{}", report.summary);
        return Ok(());
    }

    let runs = runs.unwrap_or(1).max(1);
    let results = monte_carlo(&cfg.scenario, &cfg.filter, &opts, runs, cfg.seed);
    let mut reports = Vec::with_capacity(runs);
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => return Err(Error::Diverged { t: f64::NAN, reason: format!("run {k} (seed {}): {e}", cfg.seed + k as u64) }),
        }
    }
    if let Some(out) = out {
        let mut w = create(out)?;
        let io = |e| Error::Io { path: out.to_path_buf(), source: e };
        writeln!(w, "seed,rmse_att,rmse_pos,rmse_vel,bias_err,nees_in_bounds").map_err(io)?;
        for (k, r) in reports.iter().enumerate() {
            let s = &r.summary;
            let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
            writeln!(w, "{},{},{},{},{},{}", cfg.seed + k as u64, f(s.rmse_attitude), f(s.rmse_position), f(s.rmse_velocity), f(s.bias_final_error), f(s.nees_in_bounds)).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    println!("runs               {runs}");
    println!("{}", pooled_summary(&reports));
    Ok(())
}

fn analyze_observability(common: &Common, out: Option<&Path>, single_antenna: Option<u8>) -> Result<()> {
    let cfg = load(common)?;
    let mut scenario = cfg.scenario.clone();
    scenario.noise = dualfuse::NoiseSpec::zero();
    let data = scenario.generate()?;
    let geom = &cfg.filter.geom;
    let mode = if single_antenna.is_some() { AntennaMode::Single } else { AntennaMode::Dual };
    let stride = (cfg.filter.imu_rate / cfg.filter.gps_rate).round().max(1.0) as usize;
    let mut rows = Vec::new();
    let (mut full, mut degraded) = (0usize, 0usize);
    for (s, u) in data.truth.iter().zip(&data.imu).step_by(stride) {
        let x = s.state(data.bias);
        let r = analyze(&x, u, geom, mode, DEFAULT_RANK_TOLERANCE, cfg.filter.theta_warning)?;
        let m = mro_reduction(&x, u, geom, DEFAULT_RANK_TOLERANCE)?;
        full += usize::from(r.full_rank);
        degraded += usize::from(r.degraded);
        rows.push(format!(
            "{},{},{},{},{},{},{},{}",
            s.t, r.theta, r.rank, r.smallest_singular_value, m.rank_intermediate, m.rank_stacked, m.rank_reduced, m.rank_pi
        ));
    }
    if let Some(out) = out {
        let mut w = create(out)?;
        let io = |e| Error::Io { path: out.to_path_buf(), source: e };
        writeln!(w, "t,theta,rank,sigma_min,rank_mro16,rank_mro18,rank_mro12,rank_pi").map_err(io)?;
        for r in &rows {
            writeln!(w, "{r}").map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    println!("mode               {mode}");
    println!("epochs             {}", rows.len());
    println!("full rank          {full}");
    println!("degraded alignment {degraded}");
    Ok(())
}

fn report(input: &Path) -> Result<()> {
    let f = File::open(input).map_err(|e| Error::Io { path: input.to_path_buf(), source: e })?;
    let s = summarize_epoch_csv(f, &input.display().to_string(), SUMMARY_SKIP)?;
    println!("{s}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, out } => simulate(common, out),
        Command::Fuse { common, imu, gps, truth, out, runs, no_adapt, single_antenna } => fuse(
            common,
            imu.as_deref(),
            gps.as_deref(),
            truth.as_deref(),
            out.as_deref(),
            *runs,
            *no_adapt,
            *single_antenna,
        ),
        Command::AnalyzeObservability { common, out, single_antenna } => analyze_observability(common, out.as_deref(), *single_antenna),
        Command::Report { input } => report(input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
