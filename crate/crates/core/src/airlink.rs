//! Bistatic geometry, planar-array gains, the bistatic radar equation and
//! synthesis of the per-element OFDM channel observations for one CPI.
//!
//! Synthesized tensors are expressed in units of the thermal noise power of a
//! single resource element, `k·T·F·B`: a target whose echo power is `P_r`
//! contributes samples of magnitude `sqrt(P_r / (k·T·F·B))`, and additive noise
//! has unit variance. Mean per-sample power of a noiseless single-target tensor
//! therefore equals `rx_echo_power / noise_power_per_sample` exactly.

use std::f64::consts::{PI, TAU};
use std::io::{self, Read, Write};

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::mobility::TrajectoryState;
use crate::scenario::{
    spawn_rng, ElementPattern, RcsFluctuation, ScenarioConfig, SimRng, UpaConfig, Vec3,
    WaveformConfig, BOLTZMANN, SPEED_OF_LIGHT,
};

#[derive(Debug, Error)]
pub enum AirlinkError {
    #[error("degenerate geometry: target coincides with a station")]
    Degenerate,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Unit vector for an azimuth (from +x towards +y) and elevation (above the
/// x-y plane), both in degrees.
pub fn direction_from_angles(azimuth_deg: f64, elevation_deg: f64) -> Vec3 {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Azimuth and elevation (degrees) of a non-zero vector.
pub fn angles_of(v: &Vec3) -> (f64, f64) {
    let rho = v.x.hypot(v.y);
    (v.y.atan2(v.x).to_degrees(), v.z.atan2(rho).to_degrees())
}

/// Orthonormal frame of a planar array: boresight plus the two in-plane axes
/// along which `nx` and `ny` elements are laid out.
#[derive(Debug, Clone, Copy)]
pub struct ArrayFrame {
    pub boresight: Vec3,
    pub horizontal: Vec3,
    pub vertical: Vec3,
}

impl ArrayFrame {
    pub fn of(a: &UpaConfig) -> Self {
        let boresight = direction_from_angles(a.boresight_azimuth, a.boresight_elevation);
        let az = a.boresight_azimuth.to_radians();
        let horizontal = Vec3::new(-az.sin(), az.cos(), 0.0);
        let vertical = boresight.cross(&horizontal);
        Self {
            boresight,
            horizontal,
            vertical,
        }
    }

    /// In-plane direction cosines `(u, v)` of a unit vector.
    pub fn direction_cosines(&self, dir: &Vec3) -> (f64, f64) {
        (dir.dot(&self.horizontal), dir.dot(&self.vertical))
    }
}

/// Element coordinates in wavelengths within the array plane, `q = iy·nx + ix`.
pub fn element_offsets(a: &UpaConfig) -> Vec<(f64, f64)> {
    let cx = (a.nx as f64 - 1.0) / 2.0;
    let cy = (a.ny as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(a.n_elements());
    for iy in 0..a.ny {
        for ix in 0..a.nx {
            out.push(((ix as f64 - cx) * a.spacing, (iy as f64 - cy) * a.spacing));
        }
    }
    out
}

pub fn element_gain(pattern: ElementPattern, cos_off_boresight: f64) -> f64 {
    match pattern {
        ElementPattern::Isotropic => 1.0,
        ElementPattern::CosinePower(p) => {
            if cos_off_boresight > 0.0 {
                cos_off_boresight.powf(p)
            } else {
                0.0
            }
        }
    }
}

/// Linear power gain of the array towards a direction, `|AF|²/(nx·ny)` times
/// the element pattern, so the boresight gain is `nx·ny` for unit elements.
pub fn upa_gain_dir(a: &UpaConfig, dir: &Vec3) -> f64 {
    let frame = ArrayFrame::of(a);
    let (u, v) = frame.direction_cosines(dir);
    let axis = |n: usize, c: f64| -> f64 {
        let mid = (n as f64 - 1.0) / 2.0;
        let s: Complex64 = (0..n)
            .map(|i| Complex64::from_polar(1.0, TAU * (i as f64 - mid) * a.spacing * c))
            .sum();
        s.norm_sqr()
    };
    let af = axis(a.nx, u) * axis(a.ny, v);
    af / a.n_elements() as f64 * element_gain(a.element, dir.dot(&frame.boresight))
}

pub fn upa_gain(a: &UpaConfig, azimuth_deg: f64, elevation_deg: f64) -> f64 {
    upa_gain_dir(a, &direction_from_angles(azimuth_deg, elevation_deg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BistaticGeometry {
    pub d_tx: f64,
    pub d_rx: f64,
    pub baseline: f64,
    pub range_sum: f64,
    /// Bistatic Doppler, Hz; positive for a shrinking range sum.
    pub doppler: f64,
    /// Direction of the target seen from the receiver, degrees.
    pub azimuth: f64,
    pub elevation: f64,
    /// Unit vector from the receiver to the target.
    pub rx_direction: Vec3,
    /// Unit vector from the transmitter to the target.
    pub tx_direction: Vec3,
}

pub fn geometry(
    tx: &Vec3,
    rx: &Vec3,
    target: &TrajectoryState,
    wavelength: f64,
) -> Result<BistaticGeometry, AirlinkError> {
    let to_t = target.position - tx;
    let from_r = target.position - rx;
    let (d_tx, d_rx) = (to_t.norm(), from_r.norm());
    if d_tx < 1e-9 || d_rx < 1e-9 {
        return Err(AirlinkError::Degenerate);
    }
    let (ut, ur) = (to_t / d_tx, from_r / d_rx);
    let range_rate = target.velocity.dot(&ut) + target.velocity.dot(&ur);
    let (azimuth, elevation) = angles_of(&ur);
    Ok(BistaticGeometry {
        d_tx,
        d_rx,
        baseline: (tx - rx).norm(),
        range_sum: d_tx + d_rx,
        doppler: -range_rate / wavelength,
        azimuth,
        elevation,
        rx_direction: ur,
        tx_direction: ut,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub rx_echo_power: f64,
    /// Thermal noise `k·T·F·B` of one resource element.
    pub noise_power_per_sample: f64,
    pub snr_single_sample: f64,
    pub integration_gain: f64,
    pub snr_post_integration: f64,
}

pub fn bistatic_snr(
    w: &WaveformConfig,
    g: &BistaticGeometry,
    gains: (f64, f64),
    rcs: f64,
) -> LinkBudget {
    let lambda = w.wavelength();
    let rx_echo_power = w.tx_power * gains.0 * gains.1 * lambda * lambda * rcs
        / ((4.0 * PI).powi(3) * g.d_tx.powi(2) * g.d_rx.powi(2));
    let noise_figure = 10f64.powf(w.noise_figure / 10.0);
    let noise_power_per_sample = BOLTZMANN * w.noise_temp * noise_figure * w.bandwidth();
    let snr_single_sample = 10.0 * (rx_echo_power / noise_power_per_sample).log10();
    let integration_gain =
        10.0 * ((w.n_subcarriers * w.n_symbols_per_cpi) as f64).log10();
    LinkBudget {
        rx_echo_power,
        noise_power_per_sample,
        snr_single_sample,
        integration_gain,
        snr_post_integration: snr_single_sample + integration_gain,
    }
}

/// Per-element channel observations of one CPI, stored element-major, then
/// subcarrier-major, symbols fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoTensor {
    pub n_elements: usize,
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub cpi: usize,
    pub data: Vec<Complex32>,
}

impl EchoTensor {
    pub fn zeros(q: usize, n: usize, m: usize, cpi: usize) -> Self {
        Self {
            n_elements: q,
            n_subcarriers: n,
            n_symbols: m,
            cpi,
            data: vec![Complex32::new(0.0, 0.0); q * n * m],
        }
    }

    #[inline]
    pub fn get(&self, q: usize, n: usize, m: usize) -> Complex32 {
        self.data[(q * self.n_subcarriers + n) * self.n_symbols + m]
    }

    pub fn element(&self, q: usize) -> &[Complex32] {
        let len = self.n_subcarriers * self.n_symbols;
        &self.data[q * len..(q + 1) * len]
    }

    pub fn mean_power(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr() as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Little-endian dump: `Q, N, M` as `u32`, then interleaved `f32` pairs.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for d in [self.n_elements, self.n_subcarriers, self.n_symbols] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for z in &self.data {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> io::Result<Self> {
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let len = dims[0] * dims[1] * dims[2];
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| {
                Complex32::new(
                    f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                    f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                )
            })
            .collect();
        Ok(Self {
            n_elements: dims[0],
            n_subcarriers: dims[1],
            n_symbols: dims[2],
            cpi: 0,
            data,
        })
    }
}

/// Ground-truth state of one UAV at a CPI start together with its RCS model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetTruth {
    pub id: u32,
    pub state: TrajectoryState,
    pub rcs_mean: f64,
    pub fluctuation: RcsFluctuation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    pub noise: bool,
    pub clutter: bool,
    /// Draw a uniformly random carrier phase per target and CPI.
    pub random_phase: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            noise: true,
            clutter: true,
            random_phase: true,
        }
    }
}

/// Point scatterer contribution `a · s_q · φ[n] · ψ[m]`.
#[derive(Debug, Clone)]
pub struct PointReturn {
    pub amplitude: Complex64,
    pub direction: Vec3,
    /// Two-way delay, s.
    pub delay: f64,
    pub doppler: f64,
}

/// Steering vector of a planar array towards a unit direction.
pub fn steering_dir(a: &UpaConfig, dir: &Vec3) -> Vec<Complex64> {
    let frame = ArrayFrame::of(a);
    let (u, v) = frame.direction_cosines(dir);
    element_offsets(a)
        .into_iter()
        .map(|(x, y)| Complex64::from_polar(1.0, TAU * (x * u + y * v)))
        .collect()
}

/// Echo amplitudes, delays and Dopplers of every target for one CPI.
pub fn target_returns(
    scn: &ScenarioConfig,
    truth: &[TargetTruth],
    rng: &mut SimRng,
    random_phase: bool,
) -> Result<Vec<PointReturn>, AirlinkError> {
    let (tx, rx) = (scn.transmitter(), scn.receiver());
    let w = &scn.waveform;
    truth
        .iter()
        .map(|t| {
            let g = geometry(&tx.position, &rx.position, &t.state, w.wavelength())?;
            let gt = upa_gain_dir(&tx.array, &g.tx_direction);
            let frame = ArrayFrame::of(&rx.array);
            let gr = element_gain(rx.array.element, g.rx_direction.dot(&frame.boresight));
            let rcs = match t.fluctuation {
                RcsFluctuation::None => t.rcs_mean,
                RcsFluctuation::Swerling1 => {
                    let e: f64 = Exp1.sample(rng);
                    t.rcs_mean * e
                }
            };
            let budget = bistatic_snr(w, &g, (gt, gr), rcs);
            let phase = if random_phase { rng.gen_range(0.0..TAU) } else { 0.0 };
            Ok(PointReturn {
                amplitude: Complex64::from_polar(
                    (budget.rx_echo_power / budget.noise_power_per_sample).sqrt(),
                    phase,
                ),
                direction: g.rx_direction,
                delay: g.range_sum / SPEED_OF_LIGHT,
                doppler: g.doppler,
            })
        })
        .collect()
}

/// Stationary ground scatterers with run-fixed positions and reflectivities,
/// scaled so their summed power sits `scr_target` dB below the strongest
/// target return.
pub fn clutter_returns(scn: &ScenarioConfig, targets: &[PointReturn]) -> Vec<PointReturn> {
    let n = scn.clutter.n_scatterers;
    let strongest = targets
        .iter()
        .map(|t| t.amplitude.norm_sqr())
        .fold(0.0, f64::max);
    if n == 0 || strongest == 0.0 {
        return Vec::new();
    }
    let mut rng = spawn_rng(scn.seed(), "clutter");
    let region = scn.clutter_region();
    let (tx, rx) = (scn.transmitter().position, scn.receiver().position);
    let mut raw = Vec::with_capacity(n);
    while raw.len() < n {
        let p = Vec3::new(
            rng.gen_range(region.x_min..=region.x_max),
            rng.gen_range(region.y_min..=region.y_max),
            0.0,
        );
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let (d_tx, d_rx) = ((p - tx).norm(), (p - rx).norm());
        if d_tx < 1.0 || d_rx < 1.0 {
            continue;
        }
        raw.push(((p - rx) / d_rx, d_tx + d_rx, Complex64::new(re, im)));
    }
    let total: f64 = raw.iter().map(|r| r.2.norm_sqr()).sum();
    let scale = (strongest / 10f64.powf(scn.clutter.scr_target / 10.0) / total).sqrt();
    raw.into_iter()
        .map(|(direction, range_sum, refl)| PointReturn {
            amplitude: refl * scale,
            direction,
            delay: range_sum / SPEED_OF_LIGHT,
            doppler: 0.0,
        })
        .collect()
}

/// Writes the superposition of point returns (and optionally unit-variance
/// complex noise) into a fresh tensor. Each element draws noise from its own
/// stream seeded from `rng`, so the result does not depend on thread count.
pub fn render_tensor(
    w: &WaveformConfig,
    rx_array: &UpaConfig,
    returns: &[PointReturn],
    cpi: usize,
    noise: Option<&mut SimRng>,
) -> EchoTensor {
    let (q_n, n_n, m_n) = (rx_array.n_elements(), w.n_subcarriers, w.n_symbols_per_cpi);
    let mut tensor = EchoTensor::zeros(q_n, n_n, m_n, cpi);

    let (moving, still): (Vec<&PointReturn>, Vec<&PointReturn>) =
        returns.iter().partition(|r| r.doppler != 0.0);
    let steer = |r: &PointReturn| steering_dir(rx_array, &r.direction);
    let phasor = |len: usize, cycles_per_step: f64| -> Vec<Complex64> {
        (0..len)
            .map(|k| Complex64::from_polar(1.0, TAU * (cycles_per_step * k as f64).fract()))
            .collect()
    };
    // Delay phase per subcarrier, Doppler phase per symbol.
    let delay_ph = |r: &PointReturn| phasor(n_n, -w.scs * r.delay);
    let doppler_ph = |r: &PointReturn| -> Vec<Complex32> {
        phasor(m_n, r.doppler / w.scs)
            .into_iter()
            .map(|z| Complex32::new(z.re as f32, z.im as f32))
            .collect()
    };

    let mv: Vec<_> = moving
        .iter()
        .map(|r| (steer(r), delay_ph(r), doppler_ph(r), r.amplitude))
        .collect();
    let st: Vec<_> = still
        .iter()
        .map(|r| (steer(r), delay_ph(r), r.amplitude))
        .collect();

    let seeds: Vec<[u8; 32]> = match noise {
        Some(rng) => (0..q_n).map(|_| rng.gen()).collect(),
        None => Vec::new(),
    };

    tensor
        .data
        .par_chunks_mut(n_n * m_n)
        .enumerate()
        .for_each(|(q, slab)| {
            if let Some(seed) = seeds.get(q) {
                let mut r = SimRng::from_seed(*seed);
                let sd = std::f32::consts::FRAC_1_SQRT_2;
                for z in slab.iter_mut() {
                    let re: f32 = r.sample(StandardNormal);
                    let im: f32 = r.sample(StandardNormal);
                    *z = Complex32::new(re * sd, im * sd);
                }
            }
            for (n, row) in slab.chunks_exact_mut(m_n).enumerate() {
                let mut constant = Complex64::new(0.0, 0.0);
                for (s, d, a) in &st {
                    constant += a * s[q] * d[n];
                }
                let constant = Complex32::new(constant.re as f32, constant.im as f32);
                for (s, d, dop, a) in &mv {
                    let b = a * s[q] * d[n];
                    let b = Complex32::new(b.re as f32, b.im as f32);
                    for (z, p) in row.iter_mut().zip(dop.iter()) {
                        *z += b * p;
                    }
                }
                if constant != Complex32::new(0.0, 0.0) {
                    for z in row.iter_mut() {
                        *z += constant;
                    }
                }
            }
        });
    tensor
}

/// Synthesizes the receive tensor of one CPI from the truth states at the CPI
/// start (delay and Doppler frozen across the CPI).
pub fn synthesize_cpi_with(
    scn: &ScenarioConfig,
    truth: &[TargetTruth],
    cpi: usize,
    rng: &mut SimRng,
    opts: SynthesisOptions,
) -> Result<EchoTensor, AirlinkError> {
    let mut returns = target_returns(scn, truth, rng, opts.random_phase)?;
    if opts.clutter {
        let clutter = clutter_returns(scn, &returns);
        returns.extend(clutter);
    }
    let rx = scn.receiver();
    let noise = if opts.noise { Some(rng) } else { None };
    Ok(render_tensor(&scn.waveform, &rx.array, &returns, cpi, noise))
}

pub fn synthesize_cpi(
    scn: &ScenarioConfig,
    truth: &[TargetTruth],
    cpi: usize,
    rng: &mut SimRng,
) -> Result<EchoTensor, AirlinkError> {
    synthesize_cpi_with(scn, truth, cpi, rng, SynthesisOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{load_scenario, MotionModel, StationRole};
    use proptest::prelude::*;

    fn still(p: Vec3, v: Vec3) -> TrajectoryState {
        TrajectoryState {
            time: 0.0,
            position: p,
            velocity: v,
            acceleration: Vec3::zeros(),
        }
    }

    #[test]
    fn stationary_target_has_no_doppler() {
        let g = geometry(
            &Vec3::zeros(),
            &Vec3::new(500.0, 0.0, 0.0),
            &still(Vec3::new(100.0, 300.0, 80.0), Vec3::zeros()),
            0.0857,
        )
        .unwrap();
        assert_eq!(g.doppler, 0.0);
        assert!(g.range_sum >= g.baseline);
    }

    #[test]
    fn monostatic_closing_doppler_matches_finite_difference() {
        let lambda = 0.0857;
        let p = Vec3::new(300.0, 400.0, 0.0);
        let v = -p.normalize() * 20.0;
        let g = geometry(&Vec3::zeros(), &Vec3::zeros(), &still(p, v), lambda).unwrap();
        // oracle: central difference of the range sum along the trajectory
        let rs = |t: f64| 2.0 * (p + v * t).norm();
        let h = 1e-4;
        let fd = -(rs(h) - rs(-h)) / (2.0 * h) / lambda;
        assert!((g.doppler - fd).abs() < 1e-6);
        assert!((g.doppler - 466.7).abs() < 0.1, "{}", g.doppler);
        assert!((g.doppler - 2.0 * 20.0 / lambda).abs() <= 1e-9 * g.doppler);
    }

    #[test]
    fn perpendicular_bisector_is_equidistant() {
        let g = geometry(
            &Vec3::zeros(),
            &Vec3::new(500.0, 0.0, 0.0),
            &still(Vec3::new(250.0, 321.0, 77.0), Vec3::zeros()),
            0.1,
        )
        .unwrap();
        assert!((g.d_tx - g.d_rx).abs() < 1e-9);
    }

    #[test]
    fn coincident_target_is_degenerate() {
        assert!(geometry(&Vec3::zeros(), &Vec3::x(), &still(Vec3::x(), Vec3::zeros()), 0.1).is_err());
    }

    #[test]
    fn isotropic_single_element_gain_is_one() {
        let a = UpaConfig::default();
        for az in [-170.0, -30.0, 0.0, 45.0, 135.0] {
            for el in [-60.0, 0.0, 30.0, 89.0] {
                assert!((upa_gain(&a, az, el) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_boresight_gain() {
        let a = UpaConfig {
            nx: 2,
            ny: 2,
            boresight_azimuth: 37.0,
            boresight_elevation: 12.0,
            ..Default::default()
        };
        assert!((upa_gain(&a, 37.0, 12.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn boresight_is_the_gain_maximum() {
        let a = UpaConfig {
            nx: 8,
            ny: 8,
            boresight_azimuth: 90.0,
            element: ElementPattern::CosinePower(1.0),
            ..Default::default()
        };
        let peak = upa_gain(&a, 90.0, 0.0);
        assert!((peak - 64.0).abs() < 1e-9);
        // oracle: exhaustive half-degree scan
        for i in 0..720 {
            for j in 0..=360 {
                let g = upa_gain(&a, -180.0 + 0.5 * i as f64, -90.0 + 0.5 * j as f64);
                assert!(g <= peak + 1e-9);
            }
        }
    }

    #[test]
    fn gain_symmetric_under_axis_swap() {
        // boresight +x: u = y-component, v = z-component of the direction
        let mk = |nx, ny| UpaConfig {
            nx,
            ny,
            spacing: 0.6,
            ..Default::default()
        };
        for (u, v) in [(0.1, 0.3), (-0.4, 0.2), (0.55, -0.6), (0.0, 0.9)] {
            let w: f64 = (1.0f64 - u * u - v * v).sqrt();
            let d1 = Vec3::new(w, u, v);
            let d2 = Vec3::new(w, v, u);
            let g1 = upa_gain_dir(&mk(3, 7), &d1);
            let g2 = upa_gain_dir(&mk(7, 3), &d2);
            assert!((g1 - g2).abs() < 1e-9 * g1.max(1.0));
        }
    }

    fn budget_geometry(d_tx: f64, d_rx: f64) -> BistaticGeometry {
        BistaticGeometry {
            d_tx,
            d_rx,
            baseline: 0.0,
            range_sum: d_tx + d_rx,
            doppler: 0.0,
            azimuth: 0.0,
            elevation: 0.0,
            rx_direction: Vec3::x(),
            tx_direction: Vec3::x(),
        }
    }

    #[test]
    fn radar_equation_scaling() {
        let w = WaveformConfig::default();
        let base = bistatic_snr(&w, &budget_geometry(500.0, 700.0), (1.0, 1.0), 0.01);
        let tx2 = bistatic_snr(&w, &budget_geometry(1000.0, 700.0), (1.0, 1.0), 0.01);
        let both = bistatic_snr(&w, &budget_geometry(1000.0, 1400.0), (1.0, 1.0), 0.01);
        assert!((base.snr_single_sample - tx2.snr_single_sample - 6.0206).abs() < 1e-3);
        assert!((base.snr_single_sample - both.snr_single_sample - 12.0412).abs() < 1e-3);
        assert!(
            (base.snr_post_integration - base.snr_single_sample - base.integration_gain).abs()
                < 1e-12
        );
    }

    #[test]
    fn radar_equation_reference_point() {
        let w = WaveformConfig {
            carrier_freq: SPEED_OF_LIGHT / 0.0857,
            tx_power: 1.0,
            ..Default::default()
        };
        let b = bistatic_snr(&w, &budget_geometry(500.0, 500.0), (1.0, 1.0), 0.01);
        // hand evaluation: Pr = λ²σ/((4π)³ d⁴) = 5.918e-19 W, N = kTFB = 4.005e-12 W
        let pr = 0.0857f64.powi(2) * 0.01 / ((4.0 * PI).powi(3) * 500f64.powi(4));
        let n = 1.380649e-23 * 290.0 * 10.0 * 3334.0 * 30e3;
        assert!((b.rx_echo_power / pr - 1.0).abs() < 1e-9);
        assert!((b.noise_power_per_sample / n - 1.0).abs() < 1e-9);
        assert!((b.snr_single_sample - (-68.29)).abs() < 0.02, "{}", b.snr_single_sample);
        assert!((b.integration_gain - 59.31).abs() < 0.01);
    }

    fn small_scenario() -> ScenarioConfig {
        load_scenario(
            r#"{
            "waveform": {"n_subcarriers": 64, "n_symbols_per_cpi": 32, "tx_power": 1e4},
            "stations": [
                {"id": "tx", "role": "transmitter", "position": [0, 0, 25]},
                {"id": "rx", "role": "receiver", "position": [500, 0, 25],
                 "array": {"nx": 2, "ny": 2, "boresight_azimuth": 90}}
            ],
            "fleet": {},
            "clutter": {"n_scatterers": 5, "region": {"x_min": 0, "x_max": 500, "y_min": 50, "y_max": 400}},
            "run": {"n_cpis": 1, "processing": {"n_snapshots": 4}}
        }"#,
        )
        .unwrap()
    }

    fn truth(id: u32, p: Vec3, v: Vec3) -> TargetTruth {
        TargetTruth {
            id,
            state: still(p, v),
            rcs_mean: 0.01,
            fluctuation: RcsFluctuation::None,
        }
    }

    const QUIET: SynthesisOptions = SynthesisOptions {
        noise: false,
        clutter: false,
        random_phase: false,
    };

    #[test]
    fn nothing_synthesizes_to_zero() {
        let scn = small_scenario();
        let t = synthesize_cpi_with(&scn, &[], 0, &mut spawn_rng(1, "x"), QUIET).unwrap();
        assert!(t.data.iter().all(|z| z.norm_sqr() == 0.0));
        assert_eq!(t.data.len(), 4 * 64 * 32);
    }

    #[test]
    fn stationary_target_columns_and_phase_slope() {
        let scn = small_scenario();
        let tgt = truth(0, Vec3::new(200.0, 300.0, 120.0), Vec3::zeros());
        let t = synthesize_cpi_with(&scn, &[tgt], 0, &mut spawn_rng(1, "x"), QUIET).unwrap();
        for q in 0..4 {
            for n in 0..64 {
                for m in 1..32 {
                    assert_eq!(t.get(q, n, m), t.get(q, n, 0));
                }
            }
        }
        let g = geometry(
            &scn.transmitter().position,
            &scn.receiver().position,
            &tgt.state,
            scn.waveform.wavelength(),
        )
        .unwrap();
        let tau = g.range_sum / SPEED_OF_LIGHT;
        let want = -TAU * scn.waveform.scs * tau;
        for n in 0..63 {
            let step = (t.get(0, n + 1, 0) * t.get(0, n, 0).conj()).arg() as f64;
            let diff = (step - want).rem_euclid(TAU);
            assert!(diff.min(TAU - diff) < 1e-4, "n={n}: {step} vs {want}");
        }
    }

    #[test]
    fn synthesis_is_linear_in_targets() {
        let scn = small_scenario();
        let a = truth(0, Vec3::new(200.0, 300.0, 120.0), Vec3::new(10.0, -3.0, 0.0));
        let b = truth(1, Vec3::new(650.0, 200.0, 60.0), Vec3::new(-20.0, 5.0, 0.0));
        let mut rng = spawn_rng(1, "x");
        let ta = synthesize_cpi_with(&scn, &[a], 0, &mut rng, QUIET).unwrap();
        let tb = synthesize_cpi_with(&scn, &[b], 0, &mut rng, QUIET).unwrap();
        let tab = synthesize_cpi_with(&scn, &[a, b], 0, &mut rng, QUIET).unwrap();
        let scale = ta.data.iter().map(|z| z.norm()).fold(0.0f32, f32::max);
        for k in 0..tab.data.len() {
            assert!((tab.data[k] - ta.data[k] - tb.data[k]).norm() <= 1e-5 * scale);
        }
    }

    #[test]
    fn energy_calibration() {
        let scn = small_scenario();
        let tgt = truth(0, Vec3::new(300.0, 250.0, 90.0), Vec3::new(12.0, 4.0, 0.0));
        let t = synthesize_cpi_with(&scn, &[tgt], 0, &mut spawn_rng(3, "x"), QUIET).unwrap();
        let g = geometry(
            &scn.transmitter().position,
            &scn.receiver().position,
            &tgt.state,
            scn.waveform.wavelength(),
        )
        .unwrap();
        let b = bistatic_snr(&scn.waveform, &g, (1.0, 1.0), 0.01);
        let want = b.rx_echo_power / b.noise_power_per_sample;
        let err_db = 10.0 * (t.mean_power() / want).log10();
        assert!(err_db.abs() < 0.1, "{err_db}");
    }

    #[test]
    fn noise_has_unit_variance_and_is_reproducible() {
        let scn = small_scenario();
        let opts = SynthesisOptions {
            noise: true,
            ..QUIET
        };
        let a = synthesize_cpi_with(&scn, &[], 0, &mut spawn_rng(9, "n"), opts).unwrap();
        let b = synthesize_cpi_with(&scn, &[], 0, &mut spawn_rng(9, "n"), opts).unwrap();
        assert_eq!(a, b);
        assert!((a.mean_power() - 1.0).abs() < 0.05);
    }

    #[test]
    fn clutter_is_calibrated_and_static() {
        let scn = small_scenario();
        let tgt = truth(0, Vec3::new(300.0, 250.0, 90.0), Vec3::new(12.0, 4.0, 0.0));
        let mut rng = spawn_rng(3, "x");
        let returns = target_returns(&scn, &[tgt], &mut rng, false).unwrap();
        let clutter = clutter_returns(&scn, &returns);
        assert_eq!(clutter.len(), 5);
        let total: f64 = clutter.iter().map(|c| c.amplitude.norm_sqr()).sum();
        assert!((total / returns[0].amplitude.norm_sqr() - 1.0).abs() < 1e-9);
        assert!(clutter.iter().all(|c| c.doppler == 0.0));
    }

    #[test]
    fn tensor_dump_round_trip() {
        let scn = small_scenario();
        let tgt = truth(0, Vec3::new(300.0, 250.0, 90.0), Vec3::new(12.0, 4.0, 0.0));
        let t = synthesize_cpi(&scn, &[tgt], 0, &mut spawn_rng(5, "x")).unwrap();
        let mut bytes = Vec::new();
        t.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 12 + t.data.len() * 8);
        assert_eq!(&bytes[0..4], &4u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &64u32.to_le_bytes());
        let back = EchoTensor::read_from(&bytes[..]).unwrap();
        assert_eq!(back.data, t.data);
        // second sample is (q=0, n=0, m=1)
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), t.get(0, 0, 1).re);
    }

    #[test]
    fn roles_resolve() {
        let scn = small_scenario();
        assert_eq!(scn.transmitter().role, StationRole::Transmitter);
        let _ = MotionModel::Cv;
    }

    proptest! {
        #[test]
        fn triangle_inequality(
            p in prop::array::uniform3(-2e3f64..2e3),
            tx in prop::array::uniform3(-500f64..500.0),
            rx in prop::array::uniform3(-500f64..500.0),
        ) {
            let s = still(Vec3::from(p), Vec3::zeros());
            if let Ok(g) = geometry(&Vec3::from(tx), &Vec3::from(rx), &s, 0.1) {
                prop_assert!(g.range_sum >= g.baseline - 1e-9);
                prop_assert!(g.d_tx > 0.0 && g.d_rx > 0.0);
            }
        }
    }
}
