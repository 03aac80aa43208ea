//! MUSIC direction finding on receive-array snapshots taken at detected
//! range-Doppler bins.

use std::f64::consts::TAU;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::airlink::{direction_from_angles, element_offsets, steering_dir, ArrayFrame, EchoTensor};
use crate::scenario::{UpaConfig, Vec3};
use crate::sensefront::RangeProfiles;

#[derive(Debug, Error, PartialEq)]
pub enum AoaError {
    #[error("bin ({0}, {1}) outside the {2}x{3} map")]
    InvalidBin(usize, usize, usize, usize),
    #[error("{0} symbols cannot be split into {1} snapshot groups")]
    Grouping(usize, usize),
    #[error("need more than {n_sources} snapshots and fewer sources than {q} elements, got {k}")]
    Underdetermined { n_sources: usize, k: usize, q: usize },
    #[error("snapshot length {0} does not match array size {1}")]
    Length(usize, usize),
    #[error("sample covariance is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
}

pub type Snapshot = DVector<Complex64>;

/// Steering vector towards an (azimuth, elevation) in degrees. Element
/// spacing is expressed in wavelengths, so no wavelength argument is needed.
pub fn steering_vector(a: &UpaConfig, azimuth_deg: f64, elevation_deg: f64) -> Snapshot {
    DVector::from_vec(steering_dir(a, &direction_from_angles(azimuth_deg, elevation_deg)))
}

fn check_groups(m: usize, n_snapshots: usize) -> Result<usize, AoaError> {
    if n_snapshots == 0 || m % n_snapshots != 0 {
        return Err(AoaError::Grouping(m, n_snapshots));
    }
    Ok(m / n_snapshots)
}

/// Single-bin 2-D DFT of each symbol group, per element, computed directly
/// from the channel tensor (same transform signs as the range-Doppler map).
pub fn bin_snapshots(
    tensor: &EchoTensor,
    bin: (usize, usize),
    n_snapshots: usize,
) -> Result<Vec<Snapshot>, AoaError> {
    let (q, n, m) = (tensor.n_elements, tensor.n_subcarriers, tensor.n_symbols);
    let (i, j) = bin;
    if i >= n || j >= m {
        return Err(AoaError::InvalidBin(i, j, n, m));
    }
    let len = check_groups(m, n_snapshots)?;
    let rng_tw: Vec<Complex64> = (0..n)
        .map(|a| Complex64::from_polar(1.0, TAU * ((i * a) % n) as f64 / n as f64))
        .collect();
    let dop_tw: Vec<Complex64> = (0..m)
        .map(|b| Complex64::from_polar(1.0, -TAU * ((j * b) % m) as f64 / m as f64))
        .collect();
    Ok((0..n_snapshots)
        .map(|g| {
            DVector::from_iterator(
                q,
                (0..q).map(|e| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for a in 0..n {
                        for b in g * len..(g + 1) * len {
                            let z = tensor.get(e, a, b);
                            acc += Complex64::new(z.re as f64, z.im as f64) * rng_tw[a] * dop_tw[b];
                        }
                    }
                    acc
                }),
            )
        })
        .collect())
}

/// Same quantity as [`bin_snapshots`] but evaluated from retained range
/// profiles, which costs `Q·M` operations per bin.
pub fn profile_snapshots(
    p: &RangeProfiles,
    bin: (usize, usize),
    n_snapshots: usize,
) -> Result<Vec<Snapshot>, AoaError> {
    let (i, j) = bin;
    let m = p.n_symbols;
    if i >= p.n_range || j >= m {
        return Err(AoaError::InvalidBin(i, j, p.n_range, m));
    }
    let len = check_groups(m, n_snapshots)?;
    let tw: Vec<Complex64> = (0..m)
        .map(|b| Complex64::from_polar(1.0, -TAU * ((j * b) % m) as f64 / m as f64))
        .collect();
    Ok((0..n_snapshots)
        .map(|g| {
            DVector::from_iterator(
                p.n_elements,
                (0..p.n_elements).map(|e| {
                    (g * len..(g + 1) * len)
                        .map(|b| {
                            let z = p.get(e, b, i);
                            Complex64::new(z.re as f64, z.im as f64) * tw[b]
                        })
                        .sum()
                }),
            )
        })
        .collect())
}

/// Azimuth/elevation search grid over the array's forward hemisphere with
/// precomputed steering vectors.
#[derive(Debug, Clone)]
pub struct AngleGrid {
    pub array: UpaConfig,
    pub step: f64,
    pub azimuths: Vec<f64>,
    pub elevations: Vec<f64>,
    /// Steering vectors, elevation-major; `None` behind the array.
    steering: Vec<Option<Snapshot>>,
}

impl AngleGrid {
    pub fn forward(array: &UpaConfig, step_deg: f64) -> Self {
        let n_az = (180.0 / step_deg).round() as usize + 1;
        let n_el = (180.0 / step_deg).round() as usize + 1;
        let azimuths: Vec<f64> = (0..n_az)
            .map(|k| array.boresight_azimuth - 90.0 + k as f64 * step_deg)
            .collect();
        let elevations: Vec<f64> = (0..n_el).map(|k| -90.0 + k as f64 * step_deg).collect();
        let frame = ArrayFrame::of(array);
        let mut steering = Vec::with_capacity(n_az * n_el);
        for &el in &elevations {
            for &az in &azimuths {
                let d = direction_from_angles(az, el);
                steering.push((d.dot(&frame.boresight) > 1e-9).then(|| steering_vector(array, az, el)));
            }
        }
        Self {
            array: array.clone(),
            step: step_deg,
            azimuths,
            elevations,
            steering,
        }
    }

    pub fn len(&self) -> usize {
        self.steering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steering.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SpatialSpectrum {
    pub array: UpaConfig,
    pub step: f64,
    pub azimuths: Vec<f64>,
    pub elevations: Vec<f64>,
    /// Pseudo-spectrum, elevation-major with azimuth fastest; 0 behind the array.
    pub values: Vec<f64>,
    /// Signal-subspace eigenvectors, used to evaluate the spectrum off-grid.
    pub signal: Vec<Snapshot>,
}

impl SpatialSpectrum {
    #[inline]
    pub fn at(&self, ia: usize, ie: usize) -> f64 {
        self.values[ie * self.azimuths.len() + ia]
    }

    /// Noise-subspace projection `aᴴ E_n E_nᴴ a` of an arbitrary steering vector.
    pub fn null_distance(&self, a: &Snapshot) -> f64 {
        null_distance(a, &self.signal)
    }

    pub fn null_distance_at(&self, azimuth_deg: f64, elevation_deg: f64) -> f64 {
        self.null_distance(&steering_vector(&self.array, azimuth_deg, elevation_deg))
    }

    /// Azimuth columns, elevation rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "elevation_deg")?;
        for az in &self.azimuths {
            write!(w, ",{az}")?;
        }
        writeln!(w)?;
        for (ie, el) in self.elevations.iter().enumerate() {
            write!(w, "{el}")?;
            for ia in 0..self.azimuths.len() {
                write!(w, ",{:e}", self.at(ia, ie))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn null_distance(a: &Snapshot, signal: &[Snapshot]) -> f64 {
    let total = a.norm_squared();
    let sig: f64 = signal.iter().map(|e| e.dotc(a).norm_sqr()).sum();
    (total - sig).max(total * 1e-14)
}

/// Loaded sample covariance `(1/K)·Σ x xᴴ + ε·tr/Q·I`.
pub fn sample_covariance(snapshots: &[Snapshot], loading: f64) -> DMatrix<Complex64> {
    let q = snapshots[0].len();
    let mut r = DMatrix::<Complex64>::zeros(q, q);
    for x in snapshots {
        r += x * x.adjoint();
    }
    r /= Complex64::new(snapshots.len() as f64, 0.0);
    let tr = r.trace().re;
    for k in 0..q {
        r[(k, k)] += Complex64::new(loading * tr / q as f64, 0.0);
    }
    r
}

/// Eigenvalues (descending) and matching eigenvectors of a Hermitian matrix.
pub fn hermitian_eigen(r: &DMatrix<Complex64>) -> (Vec<f64>, Vec<Snapshot>) {
    let eig = r.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = order.iter().map(|&k| eig.eigenvectors.column(k).into_owned()).collect();
    (vals, vecs)
}

pub fn music_spectrum(
    snapshots: &[Snapshot],
    n_sources: usize,
    grid: &AngleGrid,
    loading: f64,
) -> Result<SpatialSpectrum, AoaError> {
    let q = grid.array.n_elements();
    let k = snapshots.len();
    if k < n_sources + 1 || n_sources >= q || n_sources == 0 {
        return Err(AoaError::Underdetermined { n_sources, k, q });
    }
    if let Some(s) = snapshots.iter().find(|s| s.len() != q) {
        return Err(AoaError::Length(s.len(), q));
    }
    let r = sample_covariance(snapshots, loading);
    let (vals, vecs) = hermitian_eigen(&r);
    let scale = vals[0].abs().max(f64::MIN_POSITIVE);
    if vals[q - 1] < -1e-9 * scale {
        return Err(AoaError::NotPsd(vals[q - 1]));
    }
    let signal: Vec<Snapshot> = vecs.into_iter().take(n_sources).collect();
    let values = grid
        .steering
        .iter()
        .map(|s| s.as_ref().map_or(0.0, |a| 1.0 / null_distance(a, &signal)))
        .collect();
    Ok(SpatialSpectrum {
        array: grid.array.clone(),
        step: grid.step,
        azimuths: grid.azimuths.clone(),
        elevations: grid.elevations.clone(),
        values,
        signal,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AoaEstimate {
    /// (azimuth, elevation) in degrees, strongest first.
    pub angles: Vec<(f64, f64)>,
    pub values: Vec<f64>,
    /// False when fewer local maxima than requested were found.
    pub complete: bool,
}

/// Least-squares quadratic through a 3x3 stencil sampled at unit spacing;
/// returns the stationary-point offset clamped to the stencil.
fn quadratic_vertex(f: &[[f64; 3]; 3]) -> (f64, f64) {
    // f[dy+1][dx+1]
    let mut gx = 0.0;
    let mut gy = 0.0;
    let mut hxx = 0.0;
    let mut hyy = 0.0;
    let mut hxy = 0.0;
    for (r, row) in f.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let (x, y) = (c as f64 - 1.0, r as f64 - 1.0);
            gx += v * x / 6.0;
            gy += v * y / 6.0;
            hxy += v * x * y / 4.0;
        }
    }
    let col = |c: usize| f[0][c] + f[1][c] + f[2][c];
    let row = |r: usize| f[r][0] + f[r][1] + f[r][2];
    hxx += (col(0) + col(2) - 2.0 * col(1)) / 3.0;
    hyy += (row(0) + row(2) - 2.0 * row(1)) / 3.0;
    let det = hxx * hyy - hxy * hxy;
    if !(det > 0.0 && hxx > 0.0) {
        return (0.0, 0.0);
    }
    let dx = -(hyy * gx - hxy * gy) / det;
    let dy = -(hxx * gy - hxy * gx) / det;
    (dx.clamp(-1.0, 1.0), dy.clamp(-1.0, 1.0))
}

/// Refines a grid maximum by repeated quadratic fits of the noise-subspace
/// distance on shrinking 3x3 stencils.
pub fn refine_peak(spec: &SpatialSpectrum, azimuth: f64, elevation: f64) -> (f64, f64) {
    refine_with(&spec.array, &spec.signal, spec.step, azimuth, elevation)
}

fn refine_with(array: &UpaConfig, signal: &[Snapshot], step: f64, azimuth: f64, elevation: f64) -> (f64, f64) {
    let (mut az, mut el) = (azimuth, elevation);
    let mut h = step;
    for _ in 0..6 {
        let mut f = [[0.0; 3]; 3];
        for (r, row) in f.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let e = (el + (r as f64 - 1.0) * h).clamp(-90.0, 90.0);
                *v = null_distance(&steering_vector(array, az + (c as f64 - 1.0) * h, e), signal);
            }
        }
        let (dx, dy) = quadratic_vertex(&f);
        az += dx * h;
        el = (el + dy * h).clamp(-90.0, 90.0);
        h *= 0.25;
    }
    (az, el)
}

/// Single-source MUSIC estimate without evaluating the whole grid: the
/// spectrum is searched on every `coarse`-th grid point, then at full grid
/// resolution around the best coarse point, then refined as in
/// [`estimate_aoa`]. A single-source pseudo-spectrum has one main lobe much
/// wider than the coarse step, so the result matches the full search.
pub fn estimate_single(
    snapshots: &[Snapshot],
    grid: &AngleGrid,
    loading: f64,
    coarse: usize,
) -> Result<(f64, f64), AoaError> {
    let q = grid.array.n_elements();
    if snapshots.len() < 2 || q < 2 {
        return Err(AoaError::Underdetermined { n_sources: 1, k: snapshots.len(), q });
    }
    if let Some(s) = snapshots.iter().find(|s| s.len() != q) {
        return Err(AoaError::Length(s.len(), q));
    }
    let (_, vecs) = hermitian_eigen(&sample_covariance(snapshots, loading));
    let signal = vec![vecs[0].clone()];
    let na = grid.azimuths.len();
    let ne = grid.elevations.len();
    let eval = |ia: usize, ie: usize| -> f64 {
        grid.steering[ie * na + ia]
            .as_ref()
            .map_or(f64::INFINITY, |a| null_distance(a, &signal))
    };
    let c = coarse.max(1);
    let mut best = (f64::INFINITY, 0, 0);
    for ie in (0..ne).step_by(c) {
        for ia in (0..na).step_by(c) {
            let d = eval(ia, ie);
            if d < best.0 {
                best = (d, ia, ie);
            }
        }
    }
    if c > 1 {
        let (ca, ce) = (best.1, best.2);
        for ie in ce.saturating_sub(c)..(ce + c + 1).min(ne) {
            for ia in ca.saturating_sub(c)..(ca + c + 1).min(na) {
                let d = eval(ia, ie);
                if d < best.0 {
                    best = (d, ia, ie);
                }
            }
        }
    }
    Ok(refine_with(
        &grid.array,
        &signal,
        grid.step,
        grid.azimuths[best.1],
        grid.elevations[best.2],
    ))
}

pub fn estimate_aoa(spec: &SpatialSpectrum, n_sources: usize) -> AoaEstimate {
    let (na, ne) = (spec.azimuths.len(), spec.elevations.len());
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for ie in 0..ne {
        for ia in 0..na {
            let v = spec.at(ia, ie);
            if v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for de in -1i64..=1 {
                for da in -1i64..=1 {
                    if de == 0 && da == 0 {
                        continue;
                    }
                    let (a, e) = (ia as i64 + da, ie as i64 + de);
                    if a < 0 || e < 0 || a >= na as i64 || e >= ne as i64 {
                        continue;
                    }
                    let w = spec.at(a as usize, e as usize);
                    // ties resolved towards the lower index so plateaus give one peak
                    let earlier = (e as usize, a as usize) < (ie, ia);
                    if w > v || (w == v && earlier) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((v, ia, ie));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let complete = peaks.len() >= n_sources;
    peaks.truncate(n_sources);
    let angles = peaks
        .iter()
        .map(|&(_, ia, ie)| refine_peak(spec, spec.azimuths[ia], spec.elevations[ie]))
        .collect();
    AoaEstimate {
        angles,
        values: peaks.iter().map(|p| p.0).collect(),
        complete,
    }
}

/// Root-mean-square element offset along each array axis, in wavelengths.
pub fn rms_aperture(a: &UpaConfig) -> (f64, f64) {
    let off = element_offsets(a);
    let n = off.len() as f64;
    (
        (off.iter().map(|o| o.0 * o.0).sum::<f64>() / n).sqrt(),
        (off.iter().map(|o| o.1 * o.1).sum::<f64>() / n).sqrt(),
    )
}

/// Approximate standard deviation of the estimated in-plane direction
/// cosines for a single source at per-element SNR `snr` (linear).
pub fn direction_cosine_sigma(a: &UpaConfig, snr: f64, floor: f64) -> (f64, f64) {
    let (dx, dy) = rms_aperture(a);
    let q = a.n_elements() as f64;
    let s = |d: f64| {
        if d > 0.0 && snr > 0.0 {
            (1.0 / (TAU * d * (2.0 * snr * q).sqrt())).max(floor)
        } else {
            1.0
        }
    };
    (s(dx), s(dy))
}

/// Maps direction-cosine sigmas to azimuth/elevation sigmas (radians) at a
/// given look direction.
pub fn angle_sigmas(a: &UpaConfig, dir: &Vec3, sigma_u: f64, sigma_v: f64) -> (f64, f64) {
    let f = ArrayFrame::of(a);
    let rho = dir.x.hypot(dir.y).max(1e-12);
    let d_az = Vec3::new(-dir.y, dir.x, 0.0);
    let d_el = Vec3::new(-dir.z * dir.x / rho, -dir.z * dir.y / rho, rho);
    let m = nalgebra::Matrix2::new(
        f.horizontal.dot(&d_az),
        f.horizontal.dot(&d_el),
        f.vertical.dot(&d_az),
        f.vertical.dot(&d_el),
    );
    match m.try_inverse() {
        Some(inv) => {
            let c = inv * nalgebra::Matrix2::new(sigma_u * sigma_u, 0.0, 0.0, sigma_v * sigma_v) * inv.transpose();
            (c[(0, 0)].sqrt(), c[(1, 1)].sqrt())
        }
        None => (std::f64::consts::PI, std::f64::consts::PI),
    }
}
