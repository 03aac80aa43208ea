//! Bistatic sensing coverage: Cassini ovals under isotropic radiation and
//! deformed coverage regions when the station beampatterns are applied.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::airlink::{bistatic_snr, upa_gain_dir, BistaticGeometry};
use crate::scenario::{ScenarioConfig, Vec3};

/// Product of the distances from `p` to both stations.
pub fn cassini_level(tx: &Vec3, rx: &Vec3, p: &Vec3) -> f64 {
    (p - tx).norm() * (p - rx).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CassiniTopology {
    Connected,
    TwoLobes,
    Lemniscate,
}

/// Shape of the level set `d_tx·d_rx = level` for stations `baseline` apart.
pub fn cassini_topology(baseline: f64, level: f64) -> CassiniTopology {
    let critical = (baseline / 2.0).powi(2);
    if (level - critical).abs() <= 1e-12 * critical {
        CassiniTopology::Lemniscate
    } else if level > critical {
        CassiniTopology::Connected
    } else {
        CassiniTopology::TwoLobes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    Isotropic,
    Beam,
}

/// Axis-aligned grid of cell centres; `nz == 1` for a horizontal slice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub origin: Vec3,
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl GridSpec {
    /// Square horizontal slice of side `extent` centred at `(cx, cy)`.
    pub fn slice(cx: f64, cy: f64, z: f64, extent: f64, spacing: f64) -> Self {
        let n = (extent / spacing).round().max(1.0) as usize;
        let half = 0.5 * n as f64 * spacing;
        Self {
            origin: Vec3::new(cx - half + 0.5 * spacing, cy - half + 0.5 * spacing, z),
            spacing,
            nx: n,
            ny: n,
            nz: 1,
        }
    }

    /// Cube of side `extent` centred horizontally at `(cx, cy)`, from the
    /// ground upwards.
    pub fn cube(cx: f64, cy: f64, extent: f64, spacing: f64) -> Self {
        let mut g = Self::slice(cx, cy, 0.5 * spacing, extent, spacing);
        g.nz = g.nx;
        g
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        if self.nz > 1 {
            3
        } else {
            2
        }
    }

    pub fn cell_measure(&self) -> f64 {
        self.spacing.powi(self.dim() as i32)
    }

    /// Cell centre of the flat index (x fastest, then y, then z).
    pub fn point(&self, k: usize) -> Vec3 {
        let ix = k % self.nx;
        let iy = (k / self.nx) % self.ny;
        let iz = k / (self.nx * self.ny);
        self.origin + Vec3::new(ix as f64, iy as f64, iz as f64) * self.spacing
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.ny + iy) * self.nx + ix
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageGrid {
    pub spec: GridSpec,
    pub snr_db: Vec<f32>,
    pub threshold_db: f64,
    pub covered: Vec<bool>,
}

impl CoverageGrid {
    pub fn from_fn<F: Fn(&Vec3) -> f64 + Sync>(spec: GridSpec, threshold_db: f64, f: F) -> Self {
        let snr_db: Vec<f32> = (0..spec.len())
            .into_par_iter()
            .map(|k| f(&spec.point(k)) as f32)
            .collect();
        let covered = snr_db.iter().map(|&s| s as f64 >= threshold_db).collect();
        Self {
            spec,
            snr_db,
            threshold_db,
            covered,
        }
    }

    /// Covered cells whose 4-/6-neighbourhood contains an uncovered cell.
    pub fn boundary_cells(&self) -> Vec<usize> {
        let s = &self.spec;
        (0..s.len())
            .filter(|&k| {
                if !self.covered[k] {
                    return false;
                }
                let (ix, iy, iz) = (k % s.nx, (k / s.nx) % s.ny, k / (s.nx * s.ny));
                let mut nb = Vec::with_capacity(6);
                if ix > 0 {
                    nb.push(s.index(ix - 1, iy, iz));
                }
                if ix + 1 < s.nx {
                    nb.push(s.index(ix + 1, iy, iz));
                }
                if iy > 0 {
                    nb.push(s.index(ix, iy - 1, iz));
                }
                if iy + 1 < s.ny {
                    nb.push(s.index(ix, iy + 1, iz));
                }
                if iz > 0 {
                    nb.push(s.index(ix, iy, iz - 1));
                }
                if iz + 1 < s.nz {
                    nb.push(s.index(ix, iy, iz + 1));
                }
                nb.into_iter().any(|n| !self.covered[n])
            })
            .collect()
    }

    /// `x, y, snr_db, covered` for a 2-D slice.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,y,snr_db,covered")?;
        for k in 0..self.spec.len() {
            let p = self.spec.point(k);
            writeln!(w, "{},{},{},{}", p.x, p.y, self.snr_db[k], u8::from(self.covered[k]))?;
        }
        Ok(())
    }

    /// Little-endian `u32 nx, ny, nz; f32 spacing; f32 origin[3]` followed by
    /// the f32 SNR array (dB), x fastest.
    pub fn write_bin<W: Write>(&self, mut w: W) -> io::Result<()> {
        let s = &self.spec;
        for n in [s.nx, s.ny, s.nz] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        w.write_all(&(s.spacing as f32).to_le_bytes())?;
        for c in s.origin.iter() {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        for v in &self.snr_db {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Header and samples of a `coverage.bin` file.
pub fn read_bin<R: Read>(mut r: R) -> io::Result<(GridSpec, Vec<f32>)> {
    let mut b4 = [0u8; 4];
    let mut u = || -> io::Result<u32> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let (nx, ny, nz) = (u()? as usize, u()? as usize, u()? as usize);
    let f = |x: u32| f32::from_bits(x) as f64;
    let spacing = f(u()?);
    let origin = Vec3::new(f(u()?), f(u()?), f(u()?));
    let mut data = vec![0f32; nx * ny * nz];
    for v in data.iter_mut() {
        *v = f32::from_bits(u()?);
    }
    Ok((
        GridSpec {
            origin,
            spacing,
            nx,
            ny,
            nz,
        },
        data,
    ))
}

/// Reference Cassini level of the coverage threshold, m².
pub const REFERENCE_LEVEL: f64 = 250_000.0;

/// Post-integration SNR (dB) of a target at `p` for the scenario's stations.
pub fn cell_snr_db(scn: &ScenarioConfig, mode: CoverageMode, p: &Vec3) -> f64 {
    let (tx, rx) = (scn.transmitter(), scn.receiver());
    let (ut, ur) = (p - tx.position, p - rx.position);
    let (d_tx, d_rx) = (ut.norm().max(1e-6), ur.norm().max(1e-6));
    let gains = match mode {
        CoverageMode::Isotropic => (1.0, 1.0),
        CoverageMode::Beam => (upa_gain_dir(&tx.array, &(ut / d_tx)), upa_gain_dir(&rx.array, &(ur / d_rx))),
    };
    let g = BistaticGeometry {
        d_tx,
        d_rx,
        baseline: (tx.position - rx.position).norm(),
        range_sum: d_tx + d_rx,
        doppler: 0.0,
        azimuth: 0.0,
        elevation: 0.0,
        rx_direction: ur / d_rx,
        tx_direction: ut / d_tx,
    };
    // nulls of a directional element give zero gain; keep the field finite
    bistatic_snr(&scn.waveform, &g, gains, coverage_rcs(scn))
        .snr_post_integration
        .max(-300.0)
}

fn coverage_rcs(scn: &ScenarioConfig) -> f64 {
    scn.fleet.rcs_mean
}

/// Isotropic SNR (dB) at a given distance product.
pub fn isotropic_snr_at_level(scn: &ScenarioConfig, level: f64) -> f64 {
    let d = level.sqrt();
    let g = BistaticGeometry {
        d_tx: d,
        d_rx: d,
        baseline: 0.0,
        range_sum: 2.0 * d,
        doppler: 0.0,
        azimuth: 0.0,
        elevation: 0.0,
        rx_direction: Vec3::x(),
        tx_direction: Vec3::x(),
    };
    bistatic_snr(&scn.waveform, &g, (1.0, 1.0), coverage_rcs(scn)).snr_post_integration
}

pub fn snr_field(scn: &ScenarioConfig, mode: CoverageMode, spec: GridSpec, threshold_db: Option<f64>) -> CoverageGrid {
    let thr = threshold_db.unwrap_or_else(|| isotropic_snr_at_level(scn, REFERENCE_LEVEL));
    CoverageGrid::from_fn(spec, thr, |p| cell_snr_db(scn, mode, p))
}

/// Covered cell count times cell area (2-D) or volume (3-D).
pub fn coverage_volume(g: &CoverageGrid) -> f64 {
    g.covered.iter().filter(|&&c| c).count() as f64 * g.spec.cell_measure()
}

/// Fraction of cells whose covered flag differs between two grids.
pub fn coverage_difference(a: &CoverageGrid, b: &CoverageGrid) -> f64 {
    let n = a.covered.len().min(b.covered.len());
    if n == 0 {
        return 0.0;
    }
    a.covered.iter().zip(&b.covered).filter(|(x, y)| x != y).count() as f64 / n as f64
}
