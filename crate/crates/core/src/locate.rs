//! Position fixes from bistatic (range sum, azimuth, elevation)
//! measurements, TDOA multilateration, and GDOP analysis.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum LocateError {
    #[error("range sum {range_sum} m does not exceed the baseline {baseline} m")]
    Infeasible { range_sum: f64, baseline: f64 },
    #[error("direction has no forward intersection with the range-sum ellipsoid")]
    NoIntersection,
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("Gauss-Newton did not converge in {0} iterations")]
    Divergence(usize),
    #[error("rank-deficient TDOA Jacobian")]
    RankDeficient,
}

/// Position at which the ray `rx + r·direction` meets the ellipsoid
/// `‖p − tx‖ + ‖p − rx‖ = range_sum`.
pub fn bistatic_solve(tx: &Vec3, rx: &Vec3, range_sum: f64, direction: &Vec3) -> Result<Vec3, LocateError> {
    let d = tx - rx;
    let baseline = d.norm();
    if baseline > 0.0 && range_sum <= baseline {
        return Err(LocateError::Infeasible { range_sum, baseline });
    }
    if range_sum <= 0.0 {
        return Err(LocateError::Infeasible { range_sum, baseline });
    }
    let u = direction.normalize();
    let den = 2.0 * (range_sum - u.dot(&d));
    if den <= 0.0 {
        return Err(LocateError::NoIntersection);
    }
    let r = (range_sum * range_sum - baseline * baseline) / den;
    Ok(rx + u * r)
}

/// Rows: gradients of range sum, azimuth and elevation (radians) at `p`.
/// Angles are measured in `frame` (receiver-local axes as matrix rows);
/// `None` uses the global axes.
pub fn bistatic_jacobian(
    tx: &Vec3,
    rx: &Vec3,
    p: &Vec3,
    frame: Option<&Matrix3<f64>>,
) -> Result<Matrix3<f64>, LocateError> {
    let (et, er) = (p - tx, p - rx);
    if et.norm() < 1e-9 || er.norm() < 1e-9 {
        return Err(LocateError::Degenerate("target at a station"));
    }
    let rot = frame.copied().unwrap_or_else(Matrix3::identity);
    let d = rot * er;
    let rho2 = d.x * d.x + d.y * d.y;
    if rho2 < 1e-12 * d.norm_squared() {
        return Err(LocateError::Degenerate("azimuth undefined at zenith"));
    }
    let rho = rho2.sqrt();
    let dd = d.norm_squared();
    let g_az = Vec3::new(-d.y / rho2, d.x / rho2, 0.0);
    let g_el = Vec3::new(-d.z * d.x / rho, -d.z * d.y / rho, rho) / dd;
    // chain rule back to the global frame: ∂/∂p = Rᵀ ∂/∂d
    let g_az = rot.transpose() * g_az;
    let g_el = rot.transpose() * g_el;
    let g_rs = et.normalize() + er.normalize();
    Ok(Matrix3::from_rows(&[g_rs.transpose(), g_az.transpose(), g_el.transpose()]))
}

/// `sqrt(trace((Jᵀ R⁻¹ J)⁻¹))`, infinite when the information matrix is singular.
/// For a square `J` this equals `sqrt(trace(J⁻¹ R J⁻ᵀ))`, which is evaluated
/// instead because it avoids squaring the condition number.
pub fn gdop(j: &Matrix3<f64>, meas_cov: &Matrix3<f64>) -> f64 {
    match j.try_inverse() {
        Some(inv) => {
            let t = (inv * meas_cov * inv.transpose()).trace();
            if t.is_finite() && t >= 0.0 {
                t.sqrt()
            } else {
                f64::INFINITY
            }
        }
        None => f64::INFINITY,
    }
}

/// First-order position covariance `J⁻¹ R J⁻ᵀ`.
pub fn fix_covariance(j: &Matrix3<f64>, meas_cov: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let inv = j.try_inverse()?;
    let c = inv * meas_cov * inv.transpose();
    Some(0.5 * (c + c.transpose()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMix {
    TdoaDominant,
    AoaDominant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasSigmas {
    pub range_sum: f64,
    /// radians
    pub azimuth: f64,
    pub elevation: f64,
}

impl MeasSigmas {
    pub fn preset(mix: ErrorMix) -> Self {
        match mix {
            ErrorMix::AoaDominant => Self {
                range_sum: 0.1,
                azimuth: 1f64.to_radians(),
                elevation: 1f64.to_radians(),
            },
            ErrorMix::TdoaDominant => Self {
                range_sum: 15.0,
                azimuth: 0.05f64.to_radians(),
                elevation: 0.05f64.to_radians(),
            },
        }
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vec3::new(
            self.range_sum.powi(2),
            self.azimuth.powi(2),
            self.elevation.powi(2),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GdopPoint {
    pub azimuth_deg: f64,
    pub gdop_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GdopCurve {
    pub mix: ErrorMix,
    pub target_range_m: f64,
    pub altitude_m: f64,
    pub points: Vec<GdopPoint>,
}

/// Target at horizontal distance `range` from the receiver and height
/// `altitude` above it, at bearing `azimuth_deg` measured from the
/// transmitter-to-receiver direction (0° = far side, 180° = towards tx).
pub fn scan_target(tx: &Vec3, rx: &Vec3, range: f64, altitude: f64, azimuth_deg: f64) -> Vec3 {
    let b = rx - tx;
    let base_az = b.y.atan2(b.x);
    let a = base_az + azimuth_deg.to_radians();
    rx + Vec3::new(range * a.cos(), range * a.sin(), altitude)
}

pub fn gdop_scan(
    tx: &Vec3,
    rx: &Vec3,
    range: f64,
    altitude: f64,
    azimuths_deg: &[f64],
    sigmas: &MeasSigmas,
    mix: ErrorMix,
) -> Result<GdopCurve, LocateError> {
    let cov = sigmas.covariance();
    let points = azimuths_deg
        .par_iter()
        .map(|&az| {
            let p = scan_target(tx, rx, range, altitude, az);
            let j = bistatic_jacobian(tx, rx, &p, None)?;
            Ok(GdopPoint {
                azimuth_deg: az,
                gdop_m: gdop(&j, &cov),
            })
        })
        .collect::<Result<Vec<_>, LocateError>>()?;
    Ok(GdopCurve {
        mix,
        target_range_m: range,
        altitude_m: altitude,
        points,
    })
}

/// 0°, 1°, …, 180°.
pub fn half_circle_degrees() -> Vec<f64> {
    (0..=180).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdoaDiagnostics {
    pub iterations: usize,
    pub residual: f64,
    pub condition_number: f64,
    /// A mirrored solution with comparable residual exists.
    pub ghost: bool,
    pub ghost_position: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdoaFix {
    pub position: Vec3,
    pub covariance: Matrix3<f64>,
    pub diagnostics: TdoaDiagnostics,
}

fn tdoa_residuals(anchors: &[Vec3], rd: &[f64], p: &Vec3) -> DVector<f64> {
    let d0 = (p - anchors[0]).norm();
    DVector::from_iterator(
        rd.len(),
        rd.iter().enumerate().map(|(k, &delta)| (p - anchors[k + 1]).norm() - d0 - delta),
    )
}

fn tdoa_jacobian(anchors: &[Vec3], p: &Vec3) -> DMatrix<f64> {
    let u0 = (p - anchors[0]).normalize();
    let n = anchors.len() - 1;
    let mut j = DMatrix::zeros(n, 3);
    for k in 0..n {
        let g = (p - anchors[k + 1]).normalize() - u0;
        j.row_mut(k).copy_from(&g.transpose());
    }
    j
}

const GN_MAX_ITER: usize = 50;

fn gauss_newton(anchors: &[Vec3], rd: &[f64], start: &Vec3) -> Result<(Vec3, f64, usize), LocateError> {
    let mut p = *start;
    let mut cost = tdoa_residuals(anchors, rd, &p).norm_squared();
    for it in 1..=GN_MAX_ITER {
        let r = tdoa_residuals(anchors, rd, &p);
        let j = tdoa_jacobian(anchors, &p);
        let jtj = j.transpose() * &j;
        let step = jtj
            .clone()
            .cholesky()
            .ok_or(LocateError::RankDeficient)?
            .solve(&(-(j.transpose() * r)));
        let step = Vec3::new(step[0], step[1], step[2]);
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = p + step * lambda;
            let c = tdoa_residuals(anchors, rd, &cand).norm_squared();
            if c <= cost {
                p = cand;
                let done = cost - c <= 1e-30 + 1e-24 * cost || step.norm() * lambda < 1e-12;
                cost = c;
                accepted = true;
                if done {
                    return Ok((p, cost, it));
                }
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            // no descent along the Gauss-Newton direction: at a stationary point
            return Ok((p, cost, it));
        }
    }
    if cost.sqrt() < 1e-6 {
        return Ok((p, cost, GN_MAX_ITER));
    }
    Err(LocateError::Divergence(GN_MAX_ITER))
}

/// Best-fit plane through the anchors: (centroid, unit normal).
fn anchor_plane(anchors: &[Vec3]) -> (Vec3, Vec3) {
    let c = anchors.iter().sum::<Vec3>() / anchors.len() as f64;
    let mut m = DMatrix::zeros(anchors.len(), 3);
    for (k, a) in anchors.iter().enumerate() {
        m.row_mut(k).copy_from(&(a - c).transpose());
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let (kmin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::MAX), |b, (k, &s)| if s < b.1 { (k, s) } else { b });
    let n = Vec3::new(vt[(kmin, 0)], vt[(kmin, 1)], vt[(kmin, 2)]);
    (c, n.normalize())
}

/// Gauss-Newton TDOA solution; `range_differences[k]` is
/// `‖p − a_{k+1}‖ − ‖p − a_0‖`.
pub fn tdoa_multilaterate(
    anchors: &[Vec3],
    range_differences: &[f64],
    initial_guess: &Vec3,
    sigma: f64,
) -> Result<TdoaFix, LocateError> {
    if anchors.len() < 4 || range_differences.len() != anchors.len() - 1 {
        return Err(LocateError::Degenerate("need >= 4 anchors and one difference per extra anchor"));
    }
    let (p, cost, iterations) = gauss_newton(anchors, range_differences, initial_guess)?;
    let j = tdoa_jacobian(anchors, &p);
    let sv = j.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if smin <= 1e-12 * smax.max(1e-300) {
        return Err(LocateError::RankDeficient);
    }
    let jtj = j.transpose() * &j;
    let inv = jtj.try_inverse().ok_or(LocateError::RankDeficient)?;
    let covariance = Matrix3::from_fn(|r, c| inv[(r, c)] * sigma * sigma);

    let (c, n) = anchor_plane(anchors);
    let mirror = p - n * (2.0 * (p - c).dot(&n));
    let mut ghost_position = None;
    if (mirror - p).norm() > 1e-6 {
        if let Ok((q, qcost, _)) = gauss_newton(anchors, range_differences, &mirror) {
            if qcost <= 10.0 * cost + 1e-9 && (q - p).norm() > 1e-3 {
                ghost_position = Some(q);
            }
        }
    }
    Ok(TdoaFix {
        position: p,
        covariance,
        diagnostics: TdoaDiagnostics {
            iterations,
            residual: cost.sqrt(),
            condition_number: smax / smin,
            ghost: ghost_position.is_some(),
            ghost_position,
        },
    })
}

/// Rotation taking global axes into a receiver frame whose x axis points
/// along `boresight_azimuth`.
pub fn azimuth_frame(boresight_azimuth_deg: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vec3::z_axis(), -boresight_azimuth_deg.to_radians()).matrix()
}
