//! Range-Doppler processing, zero-Doppler clutter cancellation, 2-D
//! cell-averaging CFAR and detection clustering.
//!
//! Channel matrices are `N x M` (subcarriers x symbols, symbols fastest).
//! The range axis is produced by an inverse DFT over subcarriers and the
//! Doppler axis by a forward DFT over symbols; neither transform is
//! normalized, so a unit-amplitude on-grid target peaks at `N²·M²`.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::{self, Write};
use std::sync::Arc;

use num_complex::Complex32;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airlink::EchoTensor;
use crate::scenario::{ConfigError, WaveformConfig, SPEED_OF_LIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Rectangular,
    Hann,
}

impl Window {
    /// Periodic window coefficients; on-grid peaks stay on their bin.
    pub fn coefficients(self, len: usize) -> Vec<f32> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann => (0..len)
                .map(|k| (0.5 - 0.5 * (TAU * k as f64 / len as f64).cos()) as f32)
                .collect(),
        }
    }
}

/// Range-Doppler power map with physical axes. Power is stored range-major
/// with Doppler bins in natural DFT order.
#[derive(Debug, Clone, PartialEq)]
pub struct RdMap {
    pub n_range: usize,
    pub n_doppler: usize,
    pub power: Vec<f64>,
    /// Bistatic range sum of each range bin, m.
    pub range_axis: Vec<f64>,
    /// Doppler of each bin, Hz, wrapped to `[-scs/2, scs/2)`.
    pub doppler_axis: Vec<f64>,
    /// Number of independent maps summed noncoherently into this one.
    pub looks: usize,
}

pub fn range_axis(w: &WaveformConfig, n: usize) -> Vec<f64> {
    let res = SPEED_OF_LIGHT / w.bandwidth();
    (0..n).map(|i| i as f64 * res).collect()
}

pub fn doppler_axis(w: &WaveformConfig, m: usize) -> Vec<f64> {
    let res = w.scs / m as f64;
    (0..m)
        .map(|j| {
            let s = if j >= m.div_ceil(2) { j as f64 - m as f64 } else { j as f64 };
            s * res
        })
        .collect()
}

impl RdMap {
    pub fn new(w: &WaveformConfig, power: Vec<f64>, looks: usize) -> Self {
        let (n, m) = (w.n_subcarriers, w.n_symbols_per_cpi);
        assert_eq!(power.len(), n * m);
        Self {
            n_range: n,
            n_doppler: m,
            power,
            range_axis: range_axis(w, n),
            doppler_axis: doppler_axis(w, m),
            looks,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.power[i * self.n_doppler + j]
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }

    pub fn argmax(&self) -> (usize, usize) {
        let k = self
            .power
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (k, &p)| if p > b.1 { (k, p) } else { b })
            .0;
        (k / self.n_doppler, k % self.n_doppler)
    }

    /// CSV with the (centered) Doppler axis as header row and the range-sum
    /// axis as first column.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let order: Vec<usize> = {
            let mut o: Vec<usize> = (0..self.n_doppler).collect();
            o.sort_by(|&a, &b| self.doppler_axis[a].total_cmp(&self.doppler_axis[b]));
            o
        };
        write!(w, "range_sum_m")?;
        for &j in &order {
            write!(w, ",{}", self.doppler_axis[j])?;
        }
        writeln!(w)?;
        for i in 0..self.n_range {
            write!(w, "{}", self.range_axis[i])?;
            for &j in &order {
                write!(w, ",{:e}", self.get(i, j))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Removes, per subcarrier, the mean over symbols (the zero-Doppler component).
pub fn mti_in_place(h: &mut [Complex32], n_symbols: usize) {
    for row in h.chunks_exact_mut(n_symbols) {
        let mut mean = (0.0f64, 0.0f64);
        for z in row.iter() {
            mean.0 += z.re as f64;
            mean.1 += z.im as f64;
        }
        let mean = Complex32::new(
            (mean.0 / n_symbols as f64) as f32,
            (mean.1 / n_symbols as f64) as f32,
        );
        for z in row.iter_mut() {
            *z -= mean;
        }
    }
}

pub fn mti_filter(h: &[Complex32], n_symbols: usize) -> Vec<Complex32> {
    let mut out = h.to_vec();
    mti_in_place(&mut out, n_symbols);
    out
}

/// FFT plans and windows shared by every element of a CPI.
pub struct RdProcessor {
    n: usize,
    m: usize,
    range_ifft: Arc<dyn Fft<f32>>,
    doppler_fft: Arc<dyn Fft<f32>>,
    range_window: Vec<f32>,
    doppler_window: Vec<f32>,
    mti: bool,
}

impl RdProcessor {
    pub fn new(n: usize, m: usize, window: Window, mti: bool) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            m,
            range_ifft: planner.plan_fft_inverse(n),
            doppler_fft: planner.plan_fft_forward(m),
            range_window: window.coefficients(n),
            doppler_window: window.coefficients(m),
            mti,
        }
    }

    /// Transforms one `N x M` channel matrix in place into its range profiles
    /// (`M x N`, range bins fastest) and returns the `N x M` power map.
    pub fn process_element(&self, slab: &mut [Complex32]) -> Vec<f32> {
        let (n, m) = (self.n, self.m);
        if self.mti {
            mti_in_place(slab, m);
        }
        let mut t = vec![Complex32::new(0.0, 0.0); n * m];
        for (i, row) in slab.chunks_exact(m).enumerate() {
            let w = self.range_window[i];
            for (j, z) in row.iter().enumerate() {
                t[j * n + i] = z * w;
            }
        }
        let mut scratch =
            vec![Complex32::new(0.0, 0.0); self.range_ifft.get_inplace_scratch_len().max(self.doppler_fft.get_inplace_scratch_len())];
        self.range_ifft.process_with_scratch(&mut t, &mut scratch);
        slab.copy_from_slice(&t);

        // back to range-major for the Doppler transform
        for (j, row) in slab.chunks_exact(n).enumerate() {
            let w = self.doppler_window[j];
            for (i, z) in row.iter().enumerate() {
                t[i * m + j] = z * w;
            }
        }
        self.doppler_fft.process_with_scratch(&mut t, &mut scratch);
        t.iter().map(|z| z.norm_sqr()).collect()
    }
}

/// Range-Doppler power map of a single channel matrix.
pub fn range_doppler_map(h: &[Complex32], w: &WaveformConfig, window: Window) -> RdMap {
    let proc = RdProcessor::new(w.n_subcarriers, w.n_symbols_per_cpi, window, false);
    let mut slab = h.to_vec();
    let p = proc.process_element(&mut slab);
    RdMap::new(w, p.into_iter().map(f64::from).collect(), 1)
}

/// Per-element range profiles retained after range processing, laid out
/// element-major, then symbol-major, range bins fastest.
#[derive(Debug, Clone)]
pub struct RangeProfiles {
    pub n_elements: usize,
    pub n_range: usize,
    pub n_symbols: usize,
    pub data: Vec<Complex32>,
}

impl RangeProfiles {
    #[inline]
    pub fn get(&self, q: usize, m: usize, i: usize) -> Complex32 {
        self.data[(q * self.n_symbols + m) * self.n_range + i]
    }
}

pub struct ProcessedCpi {
    /// Noncoherent sum of the per-element maps.
    pub map: RdMap,
    pub profiles: RangeProfiles,
}

/// Range-Doppler processing of every receive element; the per-element maps
/// are summed noncoherently in element order.
pub fn process_cpi(
    tensor: EchoTensor,
    w: &WaveformConfig,
    window: Window,
    mti: bool,
) -> ProcessedCpi {
    let (q, n, m) = (tensor.n_elements, tensor.n_subcarriers, tensor.n_symbols);
    assert_eq!((n, m), (w.n_subcarriers, w.n_symbols_per_cpi));
    let proc = RdProcessor::new(n, m, window, mti);
    let mut data = tensor.data;
    let maps: Vec<Vec<f32>> = data
        .par_chunks_mut(n * m)
        .map(|slab| proc.process_element(slab))
        .collect();
    let mut power = vec![0.0f64; n * m];
    for map in &maps {
        for (acc, p) in power.iter_mut().zip(map) {
            *acc += *p as f64;
        }
    }
    ProcessedCpi {
        map: RdMap::new(w, power, q),
        profiles: RangeProfiles {
            n_elements: q,
            n_range: n,
            n_symbols: m,
            data,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfarConfig {
    pub guard_range: usize,
    pub guard_doppler: usize,
    pub train_range: usize,
    pub train_doppler: usize,
    pub pfa: f64,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            guard_range: 2,
            guard_doppler: 2,
            train_range: 8,
            train_doppler: 8,
            pfa: 1e-4,
        }
    }
}

impl CfarConfig {
    pub fn n_train(&self) -> usize {
        let outer = (2 * (self.guard_range + self.train_range) + 1)
            * (2 * (self.guard_doppler + self.train_doppler) + 1);
        let inner = (2 * self.guard_range + 1) * (2 * self.guard_doppler + 1);
        outer - inner
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.pfa > 0.0 && self.pfa < 1.0) {
            return Err(ConfigError::invalid("run.processing.cfar.pfa", "must lie in (0, 1)"));
        }
        if self.n_train() == 0 {
            return Err(ConfigError::invalid(
                "run.processing.cfar",
                "training window is empty",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CfarError {
    #[error("CFAR window {window:?} exceeds map {map:?}")]
    WindowTooLarge {
        window: (usize, usize),
        map: (usize, usize),
    },
}

/// Single-look CA-CFAR threshold multiplier on the training-cell mean,
/// `N_t·(pfa^(-1/N_t) - 1)`.
pub fn cfar_alpha(n_train: usize, pfa: f64) -> f64 {
    let nt = n_train as f64;
    nt * (pfa.powf(-1.0 / nt) - 1.0)
}

fn log_binomial(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// False-alarm probability of the CA-CFAR test `X > β·S` when the cell
/// under test and each training cell are sums of `looks` unit exponentials
/// and `S` is the sum of the `n_train` training cells.
pub fn cfar_pfa_multilook(n_train: usize, looks: usize, beta: f64) -> f64 {
    let a = (n_train * looks) as f64;
    let lb = beta.ln();
    let l1b = beta.ln_1p();
    (0..looks)
        .map(|k| {
            let k = k as f64;
            (log_binomial(a + k - 1.0, k) + k * lb - (a + k) * l1b).exp()
        })
        .sum()
}

/// Threshold multiplier on the training-cell mean for a noncoherently
/// integrated map; reduces to [`cfar_alpha`] for one look.
pub fn cfar_alpha_multilook(n_train: usize, pfa: f64, looks: usize) -> f64 {
    if looks <= 1 {
        return cfar_alpha(n_train, pfa);
    }
    // bisection on log β; the false-alarm probability falls monotonically in β
    let (mut lo, mut hi) = (-30.0f64, 10.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cfar_pfa_multilook(n_train, looks, mid.exp()) > pfa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp() * n_train as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub i: usize,
    pub j: usize,
    pub power: f64,
    pub range_sum: f64,
    pub doppler: f64,
    /// Estimated per-look SNR, `power / mean(training) - 1`, dB.
    pub snr_est: f64,
    pub noise_mean: f64,
}

/// 2-D CA-CFAR with toroidal wrap at the map edges.
pub fn ca_cfar_2d(map: &RdMap, cfg: &CfarConfig) -> Result<Vec<Detection>, CfarError> {
    let (n, m) = (map.n_range, map.n_doppler);
    let (rr, rd) = (
        cfg.guard_range + cfg.train_range,
        cfg.guard_doppler + cfg.train_doppler,
    );
    if 2 * rr + 1 > n || 2 * rd + 1 > m {
        return Err(CfarError::WindowTooLarge {
            window: (2 * rr + 1, 2 * rd + 1),
            map: (n, m),
        });
    }
    let nt = cfg.n_train();
    let alpha = cfar_alpha_multilook(nt, cfg.pfa, map.looks);

    // summed-area table over the wrap-padded map
    let (pn, pm) = (n + 2 * rr, m + 2 * rd);
    let mut sat = vec![0.0f64; (pn + 1) * (pm + 1)];
    for a in 0..pn {
        let i = (a + n - rr % n) % n;
        let mut row_sum = 0.0;
        for b in 0..pm {
            let j = (b + m - rd % m) % m;
            row_sum += map.get(i, j);
            sat[(a + 1) * (pm + 1) + b + 1] = sat[a * (pm + 1) + b + 1] + row_sum;
        }
    }
    // sum over padded rows [a0, a1) x cols [b0, b1)
    let rect = |a0: usize, a1: usize, b0: usize, b1: usize| -> f64 {
        sat[a1 * (pm + 1) + b1] - sat[a0 * (pm + 1) + b1] - sat[a1 * (pm + 1) + b0]
            + sat[a0 * (pm + 1) + b0]
    };

    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let p = map.get(i, j);
            if p <= 0.0 {
                continue;
            }
            let (a, b) = (i + rr, j + rd);
            let outer = rect(a - rr, a + rr + 1, b - rd, b + rd + 1);
            let inner = rect(
                a - cfg.guard_range,
                a + cfg.guard_range + 1,
                b - cfg.guard_doppler,
                b + cfg.guard_doppler + 1,
            );
            let mean = (outer - inner) / nt as f64;
            if p > alpha * mean {
                let ratio = if mean > 0.0 { p / mean - 1.0 } else { f64::INFINITY };
                out.push(Detection {
                    i,
                    j,
                    power: p,
                    range_sum: map.range_axis[i],
                    doppler: map.doppler_axis[j],
                    snr_est: 10.0 * ratio.max(1e-12).log10(),
                    noise_mean: mean,
                });
            }
        }
    }
    Ok(out)
}

/// Collapses 8-connected groups of flagged bins to their strongest member.
pub fn cluster_detections(dets: &[Detection]) -> Vec<Detection> {
    let index: HashMap<(usize, usize), usize> =
        dets.iter().enumerate().map(|(k, d)| ((d.i, d.j), k)).collect();
    let mut parent: Vec<usize> = (0..dets.len()).collect();
    fn root(p: &mut [usize], mut k: usize) -> usize {
        while p[k] != k {
            p[k] = p[p[k]];
            k = p[k];
        }
        k
    }
    for (k, d) in dets.iter().enumerate() {
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (ni, nj) = (d.i as i64 + di, d.j as i64 + dj);
                if ni < 0 || nj < 0 {
                    continue;
                }
                if let Some(&o) = index.get(&(ni as usize, nj as usize)) {
                    let (ra, rb) = (root(&mut parent, k), root(&mut parent, o));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
        }
    }
    let mut best: HashMap<usize, usize> = HashMap::new();
    for k in 0..dets.len() {
        let r = root(&mut parent, k);
        let e = best.entry(r).or_insert(k);
        if dets[k].power > dets[*e].power {
            *e = k;
        }
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|k| dets[k]).collect()
}
