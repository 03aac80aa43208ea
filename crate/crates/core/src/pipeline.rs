//! End-to-end runs: per-CPI echo synthesis, range-Doppler detection,
//! direction finding, bistatic fixes and tracking, plus bandwidth/Pfa sweeps
//! and the CSV/JSON writers used by the command line.

use std::collections::HashMap;
use std::io::{self, Write};

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::airlink::{direction_from_angles, geometry, synthesize_cpi, AirlinkError, TargetTruth};
use crate::aoa::{angle_sigmas, direction_cosine_sigma, estimate_single, profile_snapshots, AngleGrid, AoaError};
use crate::locate::{bistatic_jacobian, bistatic_solve, fix_covariance};
use crate::mobility::{sample_trajectory, TrajectoryState};
use crate::scenario::{spawn_rng, ConfigError, ScenarioConfig, Vec3};
use crate::sensefront::{ca_cfar_2d, cluster_detections, process_cpi, CfarConfig, CfarError, Detection, RangeProfiles};
use crate::track::{score, MeasurementFix, TrackError, TrackReport, TrackSnapshot, Tracker, MATCH_RADIUS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Airlink(#[from] AirlinkError),
    #[error(transparent)]
    Cfar(#[from] CfarError),
    #[error(transparent)]
    Aoa(#[from] AoaError),
    #[error(transparent)]
    Track(#[from] TrackError),
}

/// Coarse-search decimation of the angle grid used for per-detection MUSIC.
const AOA_COARSE: usize = 4;

/// Truth states of every UAV at each CPI start.
pub fn truth_series(scn: &ScenarioConfig) -> Vec<Vec<TargetTruth>> {
    let n = scn.run.n_cpis;
    let tracks: Vec<(u32, f64, _, Vec<TrajectoryState>)> = scn
        .uavs()
        .into_iter()
        .map(|u| {
            let states = sample_trajectory(&u, 0.0, scn.run.cpi_interval, n);
            (u.id, u.rcs_mean, u.rcs_fluctuation, states)
        })
        .collect();
    (0..n)
        .map(|k| {
            tracks
                .iter()
                .map(|(id, rcs, fl, states)| TargetTruth {
                    id: *id,
                    state: states[k].clone(),
                    rcs_mean: *rcs,
                    fluctuation: *fl,
                })
                .collect()
        })
        .collect()
}

/// One clustered CFAR detection with its direction and bistatic fix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub cpi: usize,
    pub range_bin: usize,
    pub doppler_bin: usize,
    pub range_sum: f64,
    pub doppler: f64,
    pub power: f64,
    pub snr_db: f64,
    pub azimuth: Option<f64>,
    pub elevation: Option<f64>,
    pub position: Option<[f64; 3]>,
    /// Whether the fix was handed to the tracker.
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub pfa: f64,
    pub truth: Vec<Vec<TargetTruth>>,
    pub detections: Vec<Vec<DetectionRecord>>,
    pub tracks: Vec<Vec<TrackSnapshot>>,
    pub report: TrackReport,
}

/// Direction estimate per (range, Doppler) bin, shared between Pfa values.
type AoaCache = HashMap<(usize, usize), Option<(f64, f64)>>;

struct FrontEnd<'a> {
    scn: &'a ScenarioConfig,
    grid: AngleGrid,
}

impl<'a> FrontEnd<'a> {
    fn new(scn: &'a ScenarioConfig) -> Self {
        let p = &scn.run.processing;
        Self {
            scn,
            grid: AngleGrid::forward(&scn.receiver().array, p.grid_step_deg),
        }
    }

    fn directions(&self, profiles: &RangeProfiles, bins: &[(usize, usize)]) -> AoaCache {
        let p = &self.scn.run.processing;
        bins.par_iter()
            .map(|&b| {
                let est = profile_snapshots(profiles, b, p.n_snapshots)
                    .and_then(|s| estimate_single(&s, &self.grid, p.diagonal_loading, AOA_COARSE))
                    .ok();
                (b, est)
            })
            .collect()
    }

    /// Builds the detection record and, when the geometry allows, the fix.
    fn locate(&self, cpi: usize, d: &Detection, aoa: Option<(f64, f64)>) -> (DetectionRecord, Option<MeasurementFix>) {
        let scn = self.scn;
        let (tx, rx) = (scn.transmitter(), scn.receiver());
        let mut rec = DetectionRecord {
            cpi,
            range_bin: d.i,
            doppler_bin: d.j,
            range_sum: d.range_sum,
            doppler: d.doppler,
            power: d.power,
            snr_db: d.snr_est,
            azimuth: aoa.map(|a| a.0),
            elevation: aoa.map(|a| a.1),
            position: None,
            used: false,
        };
        let Some((az, el)) = aoa else {
            return (rec, None);
        };
        let dir = direction_from_angles(az, el);
        let Ok(pos) = bistatic_solve(&tx.position, &rx.position, d.range_sum, &dir) else {
            return (rec, None);
        };
        rec.position = Some(pos.into());
        // fixes below the ground plane come from mirror-image or noise bearings
        if pos.z < 0.0 {
            return (rec, None);
        }
        let p = &scn.run.processing;
        let snr = 10f64.powf(d.snr_est / 10.0);
        let (su, sv) = direction_cosine_sigma(&rx.array, snr, p.direction_sigma_floor);
        let (s_az, s_el) = angle_sigmas(&rx.array, &dir, su, sv);
        let s_rs = crate::scenario::derived_waveform_params(&scn.waveform).range_sum_resolution / 12f64.sqrt();
        let meas = Matrix3::from_diagonal(&Vec3::new(s_rs * s_rs, s_az * s_az, s_el * s_el));
        let cov = bistatic_jacobian(&tx.position, &rx.position, &pos, None)
            .ok()
            .and_then(|j| fix_covariance(&j, &meas));
        match cov {
            Some(covariance) => {
                rec.used = true;
                (rec, Some(MeasurementFix { position: pos, covariance, snr_db: Some(d.snr_est) }))
            }
            None => (rec, None),
        }
    }
}

/// Ground-truth `(id, position)` lists in the form the scorer expects.
pub fn truth_positions(truth: &[Vec<TargetTruth>]) -> Vec<Vec<(u32, Vec3)>> {
    truth
        .iter()
        .map(|c| c.iter().map(|t| (t.id, t.state.position)).collect())
        .collect()
}

/// Runs the scenario once per CFAR false-alarm probability. Echo synthesis,
/// range-Doppler processing and direction estimates are shared, so every
/// output sees the same noise realisation.
pub fn run_multi(scn: &ScenarioConfig, pfas: &[f64]) -> Result<Vec<RunOutput>, PipelineError> {
    scn.validate()?;
    let cfars: Vec<CfarConfig> = pfas
        .iter()
        .map(|&pfa| CfarConfig { pfa, ..scn.run.processing.cfar.clone() })
        .collect();
    for c in &cfars {
        c.validate()?;
    }
    let truth = truth_series(scn);
    let front = FrontEnd::new(scn);
    let mut trackers: Vec<Tracker> = pfas.iter().map(|_| Tracker::new(scn.run.tracker.clone())).collect();
    let mut detections: Vec<Vec<Vec<DetectionRecord>>> = vec![Vec::new(); pfas.len()];
    let mut tracks: Vec<Vec<Vec<TrackSnapshot>>> = vec![Vec::new(); pfas.len()];
    let proc = &scn.run.processing;

    for (k, targets) in truth.iter().enumerate() {
        let time = k as f64 * scn.run.cpi_interval;
        let mut rng = spawn_rng(scn.seed(), &format!("cpi-{k}"));
        let tensor = synthesize_cpi(scn, targets, k, &mut rng)?;
        let pc = process_cpi(tensor, &scn.waveform, proc.window, proc.mti);
        let per_pfa: Vec<Vec<Detection>> = cfars
            .iter()
            .map(|c| ca_cfar_2d(&pc.map, c).map(|d| cluster_detections(&d)))
            .collect::<Result<_, _>>()?;
        let mut bins: Vec<(usize, usize)> = per_pfa.iter().flatten().map(|d| (d.i, d.j)).collect();
        bins.sort_unstable();
        bins.dedup();
        let cache = front.directions(&pc.profiles, &bins);
        for (s, dets) in per_pfa.iter().enumerate() {
            let mut recs = Vec::with_capacity(dets.len());
            let mut fixes = Vec::new();
            for d in dets {
                let (rec, fix) = front.locate(k, d, cache[&(d.i, d.j)]);
                recs.push(rec);
                fixes.extend(fix);
            }
            tracks[s].push(trackers[s].step(&fixes, time)?);
            detections[s].push(recs);
        }
    }

    let truth_pos = truth_positions(&truth);
    Ok(pfas
        .iter()
        .zip(detections)
        .zip(tracks)
        .map(|((&pfa, detections), tracks)| RunOutput {
            pfa,
            report: score(&tracks, &truth_pos, MATCH_RADIUS),
            truth: truth.clone(),
            detections,
            tracks,
        })
        .collect())
}

pub fn run_scenario(scn: &ScenarioConfig) -> Result<RunOutput, PipelineError> {
    let mut out = run_multi(scn, &[scn.run.processing.cfar.pfa])?;
    Ok(out.remove(0))
}

/// One (bandwidth, Pfa, seed) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub bandwidth_hz: f64,
    pub pfa: f64,
    pub seed: u64,
    pub rmse_m: Option<f64>,
    pub swap_count: usize,
    pub completeness: f64,
}

/// Copy of `scn` with a different bandwidth and seed.
pub fn variant(scn: &ScenarioConfig, bandwidth: f64, seed: u64) -> ScenarioConfig {
    let mut s = scn.clone();
    s.waveform = s.waveform.with_bandwidth(bandwidth);
    s.run.seed = seed;
    s
}

/// Full factorial sweep; each (bandwidth, seed) pair is one task and shares
/// its front end across all Pfa values. Rows are ordered by bandwidth, Pfa,
/// then seed, independently of scheduling.
pub fn sweep(
    scn: &ScenarioConfig,
    bandwidths: &[f64],
    pfas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, PipelineError> {
    let tasks: Vec<(usize, usize)> = (0..bandwidths.len())
        .flat_map(|b| (0..seeds.len()).map(move |s| (b, s)))
        .collect();
    let results: Vec<Vec<RunOutput>> = tasks
        .par_iter()
        .map(|&(b, s)| run_multi(&variant(scn, bandwidths[b], seeds[s]), pfas))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(tasks.len() * pfas.len());
    for (b, &bw) in bandwidths.iter().enumerate() {
        for (p, &pfa) in pfas.iter().enumerate() {
            for (s, &seed) in seeds.iter().enumerate() {
                let r = &results[b * seeds.len() + s][p].report;
                rows.push(SweepRow {
                    bandwidth_hz: bw,
                    pfa,
                    seed,
                    rmse_m: r.rmse_median,
                    swap_count: r.swap_count,
                    completeness: r.completeness,
                });
            }
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub fn write_truth_csv<W: Write>(scn: &ScenarioConfig, truth: &[Vec<TargetTruth>], mut w: W) -> io::Result<()> {
    let (tx, rx) = (scn.transmitter().position, scn.receiver().position);
    let lambda = scn.waveform.wavelength();
    writeln!(w, "cpi,time_s,uav_id,x,y,z,vx,vy,vz,range_sum_m,doppler_hz,azimuth_deg,elevation_deg")?;
    for (k, cpi) in truth.iter().enumerate() {
        for t in cpi {
            let (p, v) = (t.state.position, t.state.velocity);
            let g = geometry(&tx, &rx, &t.state, lambda).ok();
            writeln!(
                w,
                "{k},{},{},{},{},{},{},{},{},{},{},{},{}",
                t.state.time,
                t.id,
                p.x,
                p.y,
                p.z,
                v.x,
                v.y,
                v.z,
                opt(g.as_ref().map(|g| g.range_sum)),
                opt(g.as_ref().map(|g| g.doppler)),
                opt(g.as_ref().map(|g| g.azimuth)),
                opt(g.as_ref().map(|g| g.elevation)),
            )?;
        }
    }
    Ok(())
}

pub fn write_detections_csv<W: Write>(dets: &[Vec<DetectionRecord>], mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "cpi,range_bin,doppler_bin,range_sum_m,doppler_hz,power,snr_db,azimuth_deg,elevation_deg,x,y,z,used"
    )?;
    for d in dets.iter().flatten() {
        let p = d.position.map(|p| p.map(Some)).unwrap_or([None; 3]);
        writeln!(
            w,
            "{},{},{},{},{},{:e},{},{},{},{},{},{},{}",
            d.cpi,
            d.range_bin,
            d.doppler_bin,
            d.range_sum,
            d.doppler,
            d.power,
            d.snr_db,
            opt(d.azimuth),
            opt(d.elevation),
            opt(p[0]),
            opt(p[1]),
            opt(p[2]),
            d.used as u8,
        )?;
    }
    Ok(())
}

/// Track snapshots with the truth id each was matched to by the scorer.
pub fn write_tracks_csv<W: Write>(tracks: &[Vec<TrackSnapshot>], report: &TrackReport, mut w: W) -> io::Result<()> {
    writeln!(w, "cpi,time_s,track_id,status,x,y,z,vx,vy,vz,matched_uav")?;
    for (k, cpi) in tracks.iter().enumerate() {
        for (s, t) in cpi.iter().enumerate() {
            let m = report.matches.get(k).and_then(|r| r.get(s).copied().flatten());
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                t.cpi,
                t.time,
                t.id,
                t.status.as_str(),
                t.position[0],
                t.position[1],
                t.position[2],
                t.velocity[0],
                t.velocity[1],
                t.velocity[2],
                m.map_or_else(String::new, |id| id.to_string()),
            )?;
        }
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> io::Result<()> {
    writeln!(w, "bandwidth_hz,pfa,seed,rmse_m,swap_count,completeness")?;
    for r in rows {
        writeln!(
            w,
            "{},{:e},{},{},{},{}",
            r.bandwidth_hz,
            r.pfa,
            r.seed,
            opt(r.rmse_m),
            r.swap_count,
            r.completeness
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_scenario;

    fn small() -> ScenarioConfig {
        load_scenario(
            r#"{
            "waveform": {"n_subcarriers": 334, "n_symbols_per_cpi": 64, "tx_power": 1.0e5},
            "stations": [
              {"id": "tx", "position": [0, 0, 25], "role": "transmitter",
               "array": {"nx": 1, "ny": 1, "boresight_azimuth": 90}},
              {"id": "rx", "position": [500, 0, 25], "role": "receiver",
               "array": {"nx": 4, "ny": 4, "boresight_azimuth": 90, "boresight_elevation": 20}}
            ],
            "fleet": {"count": 0, "uavs": [
              {"id": 1, "initial_position": [400, 300, 150], "initial_velocity": [10, 5, 0], "motion_model": "cv"},
              {"id": 2, "initial_position": [650, 450, 200], "initial_velocity": [-8, 12, 0], "motion_model": "cv"}
            ]},
            "clutter": {"n_scatterers": 20},
            "run": {"n_cpis": 6, "cpi_interval": 0.25, "seed": 7}
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn truth_follows_trajectories() {
        let scn = small();
        let t = truth_series(&scn);
        assert_eq!(t.len(), 6);
        let p = t[4][0].state.position;
        assert!((p - Vec3::new(410.0, 305.0, 150.0)).norm() < 1e-9);
    }

    #[test]
    fn strong_targets_are_tracked() {
        let scn = small();
        let out = run_scenario(&scn).unwrap();
        assert_eq!(out.tracks.len(), 6);
        assert_eq!(out.report.completeness_series[5], 1.0);
        assert!(out.report.rmse_median.unwrap() < 10.0, "{:?}", out.report.rmse_median);
        // each fix lies near one of the truth positions
        let truth = truth_positions(&out.truth);
        for (k, dets) in out.detections.iter().enumerate() {
            let near = dets
                .iter()
                .filter_map(|d| d.position)
                .filter(|p| truth[k].iter().any(|(_, t)| (Vec3::from(*p) - t).norm() < 20.0))
                .count();
            assert!(near >= 2, "cpi {k}");
        }
    }

    #[test]
    fn shared_front_end_matches_single_runs() {
        let scn = small();
        let multi = run_multi(&scn, &[1e-4, 1e-2]).unwrap();
        let mut loose = scn.clone();
        loose.run.processing.cfar.pfa = 1e-2;
        let single = run_scenario(&loose).unwrap();
        assert_eq!(multi[1], single);
        assert!(multi[1].detections.iter().flatten().count() >= multi[0].detections.iter().flatten().count());
    }

    #[test]
    fn runs_are_reproducible() {
        let scn = small();
        assert_eq!(run_scenario(&scn).unwrap(), run_scenario(&scn).unwrap());
    }

    #[test]
    fn sweep_rows_are_ordered() {
        let scn = small();
        let rows = sweep(&scn, &[5e6, 10e6], &[1e-3, 1e-6], &[1, 2]).unwrap();
        assert_eq!(rows.len(), 8);
        let keys: Vec<(f64, f64, u64)> = rows.iter().map(|r| (r.bandwidth_hz, r.pfa, r.seed)).collect();
        assert_eq!(keys[0], (5e6, 1e-3, 1));
        assert_eq!(keys[3], (5e6, 1e-6, 2));
        assert_eq!(keys[7], (10e6, 1e-6, 2));
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 9);
    }
}
