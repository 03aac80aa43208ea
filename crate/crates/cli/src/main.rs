//! `isac-airspace` command line: end-to-end simulation, bandwidth/Pfa sweeps,
//! GDOP curves and coverage grids.
//!
//! Exit codes: 0 success, 1 configuration or usage error (nothing is
//! written), 2 runtime failure.

mod artifacts;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use isac_airspace::coverage::{snr_field, CoverageMode, GridSpec};
use isac_airspace::locate::{gdop_scan, half_circle_degrees, ErrorMix, MeasSigmas};
use isac_airspace::pipeline::{
    run_scenario, sweep, write_detections_csv, write_sweep_csv, write_tracks_csv, write_truth_csv, PipelineError,
};
use isac_airspace::scenario::{load_scenario, ScenarioConfig, Vec3};
use isac_airspace::track::TrackStatus;

use artifacts::Artifacts;

const SEED_ENV: &str = "ISAC_AIRSPACE_SEED";

#[derive(Parser)]
#[command(name = "isac-airspace", version, about = "Bistatic OFDM sensing simulator for cellular-connected UAVs")]
struct Cli {
    /// Worker threads for runs, sweeps and grids (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run synthesis, detection, localization and tracking for one scenario.
    Simulate {
        config: PathBuf,
        /// Overrides the scenario seed (and ISAC_AIRSPACE_SEED).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Median-RMSE sweep over bandwidths, false-alarm rates and seeds.
    Sweep {
        config: PathBuf,
        /// Bandwidths in Hz (default: the scenario bandwidth).
        #[arg(long, value_delimiter = ',')]
        bandwidths: Vec<f64>,
        /// CFAR false-alarm probabilities (default: the scenario value).
        #[arg(long, value_delimiter = ',')]
        pfas: Vec<f64>,
        /// Seeds (default: the scenario seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// GDOP against target bearing around the receiver, 0 to 180 degrees.
    Gdop {
        /// Error preset; both presets are written when omitted.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Horizontal target distance from the receiver, m.
        #[arg(long, default_value_t = 300.0)]
        range: f64,
        /// Target height above the receiver, m.
        #[arg(long, default_value_t = 100.0)]
        altitude: f64,
        /// Transmitter-receiver distance, m.
        #[arg(long, default_value_t = 500.0)]
        baseline: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// SNR field and covered cells around the station pair.
    Coverage {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Isotropic)]
        mode: Mode,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
        dim: u8,
        /// Grid side length, m (default 2000 for 2-D, 1000 for 3-D).
        #[arg(long)]
        extent: Option<f64>,
        /// Cell size, m (default 5 for 2-D, 10 for 3-D).
        #[arg(long)]
        spacing: Option<f64>,
        /// Coverage threshold, dB (default: isotropic SNR at the reference level).
        #[arg(long)]
        threshold_db: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Aoa,
    Tdoa,
}

impl Preset {
    fn mix(self) -> ErrorMix {
        match self {
            Preset::Aoa => ErrorMix::AoaDominant,
            Preset::Tdoa => ErrorMix::TdoaDominant,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Aoa => "aoa",
            Preset::Tdoa => "tdoa",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Isotropic,
    Beam,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { config, seed, out } => simulate(&config, seed, &out),
        Command::Sweep { config, bandwidths, pfas, seeds, out } => run_sweep(&config, bandwidths, pfas, seeds, &out),
        Command::Gdop { preset, range, altitude, baseline, out } => gdop(preset, range, altitude, baseline, &out),
        Command::Coverage { config, mode, dim, extent, spacing, threshold_db, out } => {
            coverage(&config, mode, dim, extent, spacing, threshold_db, &out)
        }
    }
}

/// Loads the scenario and applies the seed override (flag, then environment).
fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut scn = load_scenario(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| Failure::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    if let Some(s) = seed.or(env_seed) {
        scn.run.seed = s;
    }
    Ok(scn)
}

fn config_json(scn: &ScenarioConfig) -> serde_json::Value {
    serde_json::to_value(scn).unwrap_or(serde_json::Value::Null)
}

#[derive(Serialize)]
struct SimulationReport {
    seed: u64,
    bandwidth_hz: f64,
    pfa: f64,
    n_cpis: usize,
    n_uavs: usize,
    /// Confirmed tracks alive at the last CPI.
    confirmed_tracks: usize,
    first_complete_cpi: Option<usize>,
    rmse_median_m: Option<f64>,
    swap_count: usize,
    completeness: f64,
    rmse_series: Vec<Option<f64>>,
    swap_series: Vec<usize>,
    completeness_series: Vec<f64>,
    unmatched_series: Vec<usize>,
}

fn simulate(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let scn = load(config, seed)?;
    let start = Instant::now();
    let run = run_scenario(&scn)?;
    let r = &run.report;
    let report = SimulationReport {
        seed: scn.seed(),
        bandwidth_hz: scn.waveform.bandwidth(),
        pfa: run.pfa,
        n_cpis: scn.run.n_cpis,
        n_uavs: run.truth.first().map_or(0, Vec::len),
        confirmed_tracks: run
            .tracks
            .last()
            .map_or(0, |s| s.iter().filter(|t| t.status == TrackStatus::Confirmed).count()),
        first_complete_cpi: r.first_complete_cpi(),
        rmse_median_m: r.rmse_median,
        swap_count: r.swap_count,
        completeness: r.completeness,
        rmse_series: r.rmse_series.clone(),
        swap_series: r.swap_series.clone(),
        completeness_series: r.completeness_series.clone(),
        unmatched_series: r.unmatched_series.clone(),
    };

    let mut a = Artifacts::default();
    a.render("truth.csv", |w| write_truth_csv(&scn, &run.truth, w))?;
    a.render("detections.csv", |w| write_detections_csv(&run.detections, w))?;
    a.render("tracks.csv", |w| write_tracks_csv(&run.tracks, r, w))?;
    a.render("report.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &report).map_err(std::io::Error::other)?;
        w.push(b'\n');
        Ok(())
    })?;
    a.commit(out, "simulate", config_json(&scn), Some(scn.seed()), start.elapsed())?;
    eprintln!(
        "{} CPIs: {} confirmed tracks, swaps {}, median RMSE {}",
        scn.run.n_cpis,
        report.confirmed_tracks,
        report.swap_count,
        report.rmse_median_m.map_or("n/a".to_string(), |v| format!("{v:.2} m"))
    );
    Ok(())
}

fn run_sweep(config: &Path, bandwidths: Vec<f64>, pfas: Vec<f64>, seeds: Vec<u64>, out: &Path) -> Result<(), Failure> {
    let scn = load(config, None)?;
    let bandwidths = if bandwidths.is_empty() { vec![scn.waveform.bandwidth()] } else { bandwidths };
    let pfas = if pfas.is_empty() { vec![scn.run.processing.cfar.pfa] } else { pfas };
    let seeds = if seeds.is_empty() { vec![scn.seed()] } else { seeds };
    for &bw in &bandwidths {
        if !(bw.is_finite() && bw > 0.0) {
            return Err(Failure::Config(format!("bandwidth {bw} must be positive")));
        }
        let w = scn.waveform.with_bandwidth(bw);
        w.validate()
            .map_err(|e| Failure::Config(format!("bandwidth {bw}: {e}")))?;
    }
    for &p in &pfas {
        if !(p > 0.0 && p < 1.0) {
            return Err(Failure::Config(format!("pfa {p} must lie in (0, 1)")));
        }
    }
    let start = Instant::now();
    let rows = sweep(&scn, &bandwidths, &pfas, &seeds)?;
    let mut a = Artifacts::default();
    a.render("rmse.csv", |w| write_sweep_csv(&rows, w))?;
    let mut cfg = config_json(&scn);
    if let Some(obj) = cfg.as_object_mut() {
        obj.insert(
            "sweep".into(),
            serde_json::json!({ "bandwidths_hz": bandwidths, "pfas": pfas, "seeds": seeds }),
        );
    }
    a.commit(out, "sweep", cfg, None, start.elapsed())?;
    eprintln!("{} sweep rows", rows.len());
    Ok(())
}

fn gdop(preset: Option<Preset>, range: f64, altitude: f64, baseline: f64, out: &Path) -> Result<(), Failure> {
    for (name, v) in [("range", range), ("altitude", altitude), ("baseline", baseline)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Failure::Config(format!("--{name} must be a non-negative number")));
        }
    }
    let start = Instant::now();
    let (tx, rx) = (Vec3::zeros(), Vec3::new(baseline, 0.0, 0.0));
    let presets = preset.map_or_else(|| vec![Preset::Aoa, Preset::Tdoa], |p| vec![p]);
    let az = half_circle_degrees();
    let mut csv = String::from("azimuth_deg,gdop_m,preset\n");
    for p in &presets {
        let curve = gdop_scan(&tx, &rx, range, altitude, &az, &MeasSigmas::preset(p.mix()), p.mix())
            .map_err(|e| Failure::Runtime(format!("degenerate geometry: {e}")))?;
        for pt in &curve.points {
            if !pt.gdop_m.is_finite() {
                return Err(Failure::Runtime(format!("degenerate geometry at azimuth {}", pt.azimuth_deg)));
            }
            csv.push_str(&format!("{},{},{}\n", pt.azimuth_deg, pt.gdop_m, p.name()));
        }
    }
    let mut a = Artifacts::default();
    a.add("gdop.csv", csv.into_bytes());
    let cfg = serde_json::json!({
        "presets": presets.iter().map(|p| p.name()).collect::<Vec<_>>(),
        "range_m": range,
        "altitude_m": altitude,
        "baseline_m": baseline,
    });
    a.commit(out, "gdop", cfg, None, start.elapsed())?;
    Ok(())
}

fn coverage(
    config: &Path,
    mode: Mode,
    dim: u8,
    extent: Option<f64>,
    spacing: Option<f64>,
    threshold_db: Option<f64>,
    out: &Path,
) -> Result<(), Failure> {
    let scn = load(config, None)?;
    let (extent, spacing) = match dim {
        2 => (extent.unwrap_or(2000.0), spacing.unwrap_or(5.0)),
        _ => (extent.unwrap_or(1000.0), spacing.unwrap_or(10.0)),
    };
    if !(extent.is_finite() && spacing.is_finite() && extent > 0.0 && spacing > 0.0 && spacing <= extent) {
        return Err(Failure::Config("--extent and --spacing must be positive with spacing <= extent".into()));
    }
    if threshold_db.is_some_and(|t| !t.is_finite()) {
        return Err(Failure::Config("--threshold-db must be finite".into()));
    }
    let start = Instant::now();
    let mid = 0.5 * (scn.transmitter().position + scn.receiver().position);
    let spec = if dim == 2 {
        GridSpec::slice(mid.x, mid.y, mid.z, extent, spacing)
    } else {
        GridSpec::cube(mid.x, mid.y, extent, spacing)
    };
    let mode = match mode {
        Mode::Isotropic => CoverageMode::Isotropic,
        Mode::Beam => CoverageMode::Beam,
    };
    let grid = snr_field(&scn, mode, spec, threshold_db);
    let mut a = Artifacts::default();
    if dim == 2 {
        a.render("coverage.csv", |w| grid.write_csv(w))?;
    } else {
        a.render("coverage.bin", |w| grid.write_bin(w))?;
    }
    let mut cfg = config_json(&scn);
    if let Some(obj) = cfg.as_object_mut() {
        obj.insert(
            "coverage".into(),
            serde_json::json!({
                "mode": mode,
                "dim": dim,
                "extent_m": extent,
                "spacing_m": spacing,
                "threshold_db": grid.threshold_db,
                "grid": grid.spec,
            }),
        );
    }
    a.commit(out, "coverage", cfg, None, start.elapsed())?;
    let covered = grid.covered.iter().filter(|&&c| c).count();
    eprintln!("{covered}/{} cells covered at {:.2} dB", grid.covered.len(), grid.threshold_db);
    Ok(())
}
