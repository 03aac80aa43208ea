//! Multi-target tracking on Cartesian position fixes: Kalman filtering,
//! chi-square gating, GNN (Hungarian) and JPDA association, track
//! lifecycle and scoring against truth.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};
use thiserror::Error;

use crate::scenario::{ConfigError, MotionModel, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    Gnn,
    Jpda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub model: MotionModel,
    /// White-acceleration process noise, m/s².
    pub sigma_a: f64,
    pub gate_probability: f64,
    pub confirm_m: usize,
    pub confirm_n: usize,
    pub delete_after_misses: usize,
    pub association: Association,
    pub p_detection: f64,
    /// Expected false fixes per m³, used by JPDA.
    pub clutter_density: f64,
    pub max_jpda_events: usize,
    /// Prior velocity standard deviation for a new track, m/s.
    pub initial_velocity_sigma: f64,
    pub initial_accel_sigma: f64,
    /// Fixes inside this (wider) gate of a live track never start a new track.
    pub birth_exclusion_probability: f64,
    /// Minimum detection SNR (dB) for a fix to start a track; weaker fixes
    /// may only update existing tracks. `None` lets every fix start one.
    /// The default keeps noise-only births below 1e-10 per cell for a
    /// 16-look map, independently of the CFAR false-alarm setting.
    pub birth_snr_db: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            model: MotionModel::Cv,
            sigma_a: 2.0,
            gate_probability: 0.99,
            confirm_m: 2,
            confirm_n: 3,
            delete_after_misses: 5,
            association: Association::Gnn,
            p_detection: 0.9,
            clutter_density: 1e-8,
            max_jpda_events: 100_000,
            initial_velocity_sigma: 30.0,
            initial_accel_sigma: 3.0,
            birth_exclusion_probability: 0.99999,
            birth_snr_db: Some(4.0),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = |name: &str| format!("run.tracker.{name}");
        if !(self.sigma_a.is_finite() && self.sigma_a >= 0.0) {
            return Err(ConfigError::invalid(f("sigma_a"), "must be >= 0"));
        }
        if !(self.gate_probability > 0.0 && self.gate_probability < 1.0) {
            return Err(ConfigError::invalid(f("gate_probability"), "must lie in (0, 1)"));
        }
        if self.confirm_m == 0 || self.confirm_m > self.confirm_n {
            return Err(ConfigError::invalid(f("confirm_m"), "need 1 <= M <= N"));
        }
        if self.delete_after_misses == 0 {
            return Err(ConfigError::invalid(f("delete_after_misses"), "must be >= 1"));
        }
        if !(self.p_detection > 0.0 && self.p_detection <= 1.0) {
            return Err(ConfigError::invalid(f("p_detection"), "must lie in (0, 1]"));
        }
        if !(self.clutter_density > 0.0) {
            return Err(ConfigError::invalid(f("clutter_density"), "must be > 0"));
        }
        if !(self.birth_exclusion_probability >= self.gate_probability && self.birth_exclusion_probability < 1.0) {
            return Err(ConfigError::invalid(
                f("birth_exclusion_probability"),
                "must lie in [gate_probability, 1)",
            ));
        }
        if self.birth_snr_db.is_some_and(|v| !v.is_finite()) {
            return Err(ConfigError::invalid(f("birth_snr_db"), "must be finite"));
        }
        if !(self.initial_velocity_sigma > 0.0 && self.initial_accel_sigma > 0.0) {
            return Err(ConfigError::invalid(f("initial_velocity_sigma"), "must be > 0"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        match self.model {
            MotionModel::Cv => 6,
            MotionModel::Ca => 9,
        }
    }

    pub fn gate_threshold(&self) -> f64 {
        chi2_quantile(self.gate_probability, 3)
    }
}

pub fn chi2_quantile(p: f64, dof: usize) -> f64 {
    let d = ChiSquared::new(dof as f64).expect("dof > 0");
    // the library inverse is only good to ~1e-6; polish with Newton steps
    let mut x = d.inverse_cdf(p);
    for _ in 0..4 {
        let f = d.pdf(x);
        if f <= 0.0 {
            break;
        }
        x -= (d.cdf(x) - p) / f;
    }
    x
}

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("innovation covariance is not positive definite")]
    NotSpd,
    #[error("JPDA cluster needs more than {0} joint events; use GNN association")]
    EventExplosion(usize),
}

/// Position measurement with its covariance, as produced by localization.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFix {
    pub position: Vec3,
    pub covariance: Matrix3<f64>,
    /// Per-element SNR estimate of the underlying detection, dB.
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Coasting,
    Deleted,
}

impl TrackStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackStatus::Tentative => "tentative",
            TrackStatus::Confirmed => "confirmed",
            TrackStatus::Coasting => "coasting",
            TrackStatus::Deleted => "deleted",
        }
    }

    /// Confirmed or coasting.
    pub fn is_established(self) -> bool {
        matches!(self, TrackStatus::Confirmed | TrackStatus::Coasting)
    }
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u32,
    pub model: MotionModel,
    pub time: f64,
    pub state: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub status: TrackStatus,
    /// Hit/miss record over the confirmation window, oldest first.
    pub window: VecDeque<bool>,
    pub consecutive_misses: usize,
    pub hits: usize,
    pub last_innovation: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl Track {
    pub fn new(id: u32, fix: &MeasurementFix, time: f64, cfg: &TrackerConfig) -> Self {
        let n = cfg.state_dim();
        let mut state = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        for r in 0..3 {
            state[r] = fix.position[r];
            for c in 0..3 {
                cov[(r, c)] = fix.covariance[(r, c)];
            }
            cov[(3 + r, 3 + r)] = cfg.initial_velocity_sigma.powi(2);
            if n == 9 {
                cov[(6 + r, 6 + r)] = cfg.initial_accel_sigma.powi(2);
            }
        }
        Self {
            id,
            model: cfg.model,
            time,
            state,
            covariance: cov,
            status: TrackStatus::Tentative,
            window: VecDeque::from([true]),
            consecutive_misses: 0,
            hits: 1,
            last_innovation: None,
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.state[0], self.state[1], self.state[2])
    }

    pub fn velocity(&self) -> Vec3 {
        Vec3::new(self.state[3], self.state[4], self.state[5])
    }

    pub fn position_covariance(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.covariance[(r, c)])
    }

    pub fn is_alive(&self) -> bool {
        self.status != TrackStatus::Deleted
    }
}

/// Transition matrix and discrete white-noise acceleration covariance.
pub fn transition(model: MotionModel, dt: f64, sigma_a: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (order, n) = match model {
        MotionModel::Cv => (2, 6),
        MotionModel::Ca => (3, 9),
    };
    let mut f = DMatrix::identity(n, n);
    let mut q = DMatrix::zeros(n, n);
    let g: Vec<f64> = match model {
        MotionModel::Cv => vec![0.5 * dt * dt, dt],
        MotionModel::Ca => vec![0.5 * dt * dt, dt, 1.0],
    };
    for ax in 0..3 {
        for a in 0..order {
            for b in a + 1..order {
                let k = b - a;
                let coeff = dt.powi(k as i32) / (1..=k).product::<usize>() as f64;
                f[(3 * a + ax, 3 * b + ax)] = coeff;
            }
            for b in 0..order {
                q[(3 * a + ax, 3 * b + ax)] = sigma_a * sigma_a * g[a] * g[b];
            }
        }
    }
    (f, q)
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p = (&*p + t) * 0.5;
}

pub fn kf_predict(t: &Track, dt: f64, cfg: &TrackerConfig) -> Track {
    let (f, q) = transition(t.model, dt, cfg.sigma_a);
    let mut out = t.clone();
    out.state = &f * &t.state;
    out.covariance = &f * &t.covariance * f.transpose() + q;
    symmetrize(&mut out.covariance);
    out.time = t.time + dt;
    out
}

fn observation(n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(3, n);
    for r in 0..3 {
        h[(r, r)] = 1.0;
    }
    h
}

fn r_matrix(fix: &MeasurementFix) -> DMatrix<f64> {
    DMatrix::from_fn(3, 3, |r, c| fix.covariance[(r, c)])
}

/// Innovation `z − Hx` and its covariance `H P Hᵀ + R`.
pub fn innovation(t: &Track, fix: &MeasurementFix) -> (DVector<f64>, DMatrix<f64>) {
    let y = DVector::from_fn(3, |r, _| fix.position[r] - t.state[r]);
    let s = t.covariance.view((0, 0), (3, 3)).into_owned() + r_matrix(fix);
    (y, s)
}

/// Linear update with position-only observation, Joseph-form covariance.
pub fn kf_update(t: &Track, fix: &MeasurementFix) -> Result<Track, TrackError> {
    let n = t.state.len();
    let h = observation(n);
    let (y, mut s) = innovation(t, fix);
    symmetrize(&mut s);
    let chol = s.clone().cholesky().ok_or(TrackError::NotSpd)?;
    let pht = &t.covariance * h.transpose();
    let k = chol.solve(&pht.transpose()).transpose();
    let ikh = DMatrix::identity(n, n) - &k * &h;
    let mut out = t.clone();
    out.state = &t.state + &k * &y;
    out.covariance = &ikh * &t.covariance * ikh.transpose() + &k * r_matrix(fix) * k.transpose();
    symmetrize(&mut out.covariance);
    out.last_innovation = Some((y, s));
    Ok(out)
}

/// Squared Mahalanobis distance of the innovation; `None` when S is singular.
pub fn mahalanobis2(t: &Track, fix: &MeasurementFix) -> Option<f64> {
    let (y, s) = innovation(t, fix);
    let chol = s.cholesky()?;
    Some(y.dot(&chol.solve(&y)))
}

pub fn gate(t: &Track, fix: &MeasurementFix, cfg: &TrackerConfig) -> (bool, f64) {
    match mahalanobis2(t, fix) {
        Some(d2) => (d2 <= cfg.gate_threshold(), d2),
        None => (false, f64::INFINITY),
    }
}

/// Minimum-cost assignment on a rectangular matrix; `None` entries are
/// forbidden. Returns `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &[Vec<Option<f64>>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let finite_max = cost
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let big = (finite_max + 1.0) * (n as f64 + 1.0) * 1e3;
    let a = |i: usize, j: usize| -> f64 {
        let c = if transpose { cost[j][i] } else { cost[i][j] };
        c.unwrap_or(big)
    };
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| if transpose { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .filter(|&(r, c)| cost[r][c].is_some())
        .collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// (track index, fix index, Mahalanobis²)
    pub pairs: Vec<(usize, usize, f64)>,
    pub unassigned_tracks: Vec<usize>,
    pub unassigned_fixes: Vec<usize>,
}

/// Necessary condition for `y'S⁻¹y <= thr`: since the largest eigenvalue of
/// S is at most its trace, a squared distance above `thr·tr(S)` cannot gate.
fn may_gate(t: &Track, f: &MeasurementFix, thr: f64) -> bool {
    let d2 = (f.position - t.position()).norm_squared();
    let tr = t.position_covariance().trace() + f.covariance.trace();
    d2 <= thr * tr
}

fn gated_d2(t: &Track, f: &MeasurementFix, thr: f64) -> Option<f64> {
    if !may_gate(t, f, thr) {
        return None;
    }
    mahalanobis2(t, f).filter(|&d2| d2 <= thr)
}

/// Gated squared-Mahalanobis cost matrix (tracks x fixes).
pub fn gated_costs(tracks: &[Track], fixes: &[MeasurementFix], cfg: &TrackerConfig) -> Vec<Vec<Option<f64>>> {
    let thr = cfg.gate_threshold();
    tracks
        .iter()
        .map(|t| fixes.iter().map(|f| gated_d2(t, f, thr)).collect())
        .collect()
}

/// Global nearest neighbour on a gated cost matrix. The assignment is solved
/// separately on each connected component of the gating graph, which gives
/// the same optimum as one large problem.
pub fn gnn_from_costs(costs: &[Vec<Option<f64>>], n_fixes: usize) -> Assignment {
    let nt = costs.len();
    // union-find over tracks then fixes
    let mut parent: Vec<usize> = (0..nt + n_fixes).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (r, row) in costs.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if v.is_some() {
                let (a, b) = (find(&mut parent, r), find(&mut parent, nt + c));
                parent[a] = b;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> = Default::default();
    for r in 0..nt {
        if costs[r].iter().any(Option::is_some) {
            let g = find(&mut parent, r);
            groups.entry(g).or_default().0.push(r);
        }
    }
    for c in 0..n_fixes {
        let g = find(&mut parent, nt + c);
        if let Some(e) = groups.get_mut(&g) {
            e.1.push(c);
        }
    }
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (rows, cols) in groups.values() {
        let sub: Vec<Vec<Option<f64>>> = rows
            .iter()
            .map(|&r| cols.iter().map(|&c| costs[r][c]).collect())
            .collect();
        for (a, b) in hungarian(&sub) {
            let (r, c) = (rows[a], cols[b]);
            pairs.push((r, c, costs[r][c].expect("allowed pair")));
        }
    }
    pairs.sort_unstable_by_key(|&(r, c, _)| (r, c));
    let mut track_used = vec![false; nt];
    let mut fix_used = vec![false; n_fixes];
    for &(r, c, _) in &pairs {
        track_used[r] = true;
        fix_used[c] = true;
    }
    Assignment {
        pairs,
        unassigned_tracks: (0..nt).filter(|&k| !track_used[k]).collect(),
        unassigned_fixes: (0..n_fixes).filter(|&k| !fix_used[k]).collect(),
    }
}

pub fn gnn_associate(tracks: &[Track], fixes: &[MeasurementFix], cfg: &TrackerConfig) -> Assignment {
    gnn_from_costs(&gated_costs(tracks, fixes, cfg), fixes.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct JpdaWeights {
    /// Per track: (fix index or `None` for missed detection, β).
    pub betas: Vec<Vec<(Option<usize>, f64)>>,
}

fn gaussian_density(d2: f64, s: &DMatrix<f64>) -> f64 {
    let det = s.determinant().max(f64::MIN_POSITIVE);
    (-0.5 * d2).exp() / ((2.0 * std::f64::consts::PI).powi(3) * det).sqrt()
}

/// Association probabilities from exact enumeration of the joint events of
/// each cluster of tracks that share gated fixes.
pub fn jpda_weights(tracks: &[Track], fixes: &[MeasurementFix], cfg: &TrackerConfig) -> Result<JpdaWeights, TrackError> {
    let costs = gated_costs(tracks, fixes, cfg);
    let nt = tracks.len();
    // likelihood ratio of each gated pair versus clutter
    let lr: Vec<Vec<Option<f64>>> = tracks
        .iter()
        .zip(&costs)
        .map(|(t, row)| {
            row.iter()
                .enumerate()
                .map(|(k, c)| {
                    c.map(|d2| {
                        let (_, s) = innovation(t, &fixes[k]);
                        cfg.p_detection * gaussian_density(d2, &s) / cfg.clutter_density
                    })
                })
                .collect()
        })
        .collect();

    // clusters via shared fixes
    let mut parent: Vec<usize> = (0..nt).collect();
    fn root(p: &mut [usize], mut k: usize) -> usize {
        while p[k] != k {
            p[k] = p[p[k]];
            k = p[k];
        }
        k
    }
    for k in 0..fixes.len() {
        let users: Vec<usize> = (0..nt).filter(|&t| costs[t][k].is_some()).collect();
        for w in users.windows(2) {
            let (a, b) = (root(&mut parent, w[0]), root(&mut parent, w[1]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut clusters: HashMap<usize, Vec<usize>> = HashMap::new();
    for t in 0..nt {
        let r = root(&mut parent, t);
        clusters.entry(r).or_default().push(t);
    }

    let miss = 1.0 - cfg.p_detection;
    let mut betas: Vec<Vec<(Option<usize>, f64)>> = vec![Vec::new(); nt];
    let mut keys: Vec<usize> = clusters.keys().copied().collect();
    keys.sort_unstable();
    for key in keys {
        let members = &clusters[&key];
        let options: Vec<Vec<(usize, f64)>> = members
            .iter()
            .map(|&t| {
                lr[t].iter().enumerate().filter_map(|(k, v)| v.map(|v| (k, v))).collect()
            })
            .collect();
        // accumulated weight per (member, choice); choice 0 = miss
        let mut acc: Vec<Vec<f64>> = options.iter().map(|o| vec![0.0; o.len() + 1]).collect();
        let mut choice = vec![0usize; members.len()];
        let mut used = vec![false; fixes.len()];
        let mut events = 0usize;
        #[allow(clippy::too_many_arguments)]
        fn walk(
            d: usize,
            w: f64,
            options: &[Vec<(usize, f64)>],
            miss: f64,
            choice: &mut [usize],
            used: &mut [bool],
            acc: &mut [Vec<f64>],
            events: &mut usize,
            cap: usize,
        ) -> Result<(), TrackError> {
            if d == options.len() {
                *events += 1;
                if *events > cap {
                    return Err(TrackError::EventExplosion(cap));
                }
                for (m, &c) in choice.iter().enumerate() {
                    acc[m][c] += w;
                }
                return Ok(());
            }
            choice[d] = 0;
            walk(d + 1, w * miss, options, miss, choice, used, acc, events, cap)?;
            for (o, &(k, v)) in options[d].iter().enumerate() {
                if !used[k] {
                    used[k] = true;
                    choice[d] = o + 1;
                    walk(d + 1, w * v, options, miss, choice, used, acc, events, cap)?;
                    used[k] = false;
                }
            }
            Ok(())
        }
        walk(0, 1.0, &options, miss, &mut choice, &mut used, &mut acc, &mut events, cfg.max_jpda_events)?;
        for (m, &t) in members.iter().enumerate() {
            let total: f64 = acc[m].iter().sum();
            let mut row = vec![(None, acc[m][0])];
            row.extend(options[m].iter().zip(&acc[m][1..]).map(|(&(k, _), &w)| (Some(k), w)));
            if total > 0.0 {
                for e in row.iter_mut() {
                    e.1 /= total;
                }
            } else {
                row = vec![(None, 1.0)];
            }
            betas[t] = row;
        }
    }
    Ok(JpdaWeights { betas })
}

/// JPDA update: each track becomes the moment-matched mixture of its
/// per-hypothesis Kalman posteriors weighted by β.
pub fn jpda_update(tracks: &[Track], fixes: &[MeasurementFix], cfg: &TrackerConfig) -> Result<(Vec<Track>, JpdaWeights), TrackError> {
    let w = jpda_weights(tracks, fixes, cfg)?;
    let mut out = Vec::with_capacity(tracks.len());
    for (t, row) in tracks.iter().zip(&w.betas) {
        let mut comps: Vec<(f64, Track)> = Vec::with_capacity(row.len());
        for &(k, beta) in row {
            if beta == 0.0 {
                continue;
            }
            let post = match k {
                None => t.clone(),
                Some(k) => kf_update(t, &fixes[k])?,
            };
            comps.push((beta, post));
        }
        let n = t.state.len();
        let mut x = DVector::zeros(n);
        for (b, c) in &comps {
            x += &c.state * *b;
        }
        let mut p = DMatrix::zeros(n, n);
        for (b, c) in &comps {
            let d = &c.state - &x;
            p += (&c.covariance + &d * d.transpose()) * *b;
        }
        symmetrize(&mut p);
        let mut nt = t.clone();
        nt.state = x;
        nt.covariance = p;
        nt.last_innovation = comps
            .iter()
            .filter(|(b, _)| *b > 0.0)
            .find_map(|(_, c)| c.last_innovation.clone());
        out.push(nt);
    }
    Ok((out, w))
}

/// Applies one CPI's hit/miss outcome to a track's status.
pub fn lifecycle_update(t: &mut Track, hit: bool, cfg: &TrackerConfig) {
    if !t.is_alive() {
        return;
    }
    t.window.push_back(hit);
    while t.window.len() > cfg.confirm_n {
        t.window.pop_front();
    }
    let window_hits = t.window.iter().filter(|&&h| h).count();
    if hit {
        t.hits += 1;
        t.consecutive_misses = 0;
        match t.status {
            TrackStatus::Tentative if window_hits >= cfg.confirm_m => t.status = TrackStatus::Confirmed,
            TrackStatus::Coasting => t.status = TrackStatus::Confirmed,
            _ => {}
        }
    } else {
        t.consecutive_misses += 1;
        if t.status == TrackStatus::Confirmed {
            t.status = TrackStatus::Coasting;
        }
        let remaining = cfg.confirm_n - t.window.len();
        let hopeless = t.status == TrackStatus::Tentative && window_hits + remaining < cfg.confirm_m;
        if t.consecutive_misses >= cfg.delete_after_misses || hopeless {
            t.status = TrackStatus::Deleted;
        }
    }
}

/// Per-CPI view of one live track.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackSnapshot {
    pub cpi: usize,
    pub time: f64,
    pub id: u32,
    pub status: TrackStatus,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
}

/// Sequential multi-target tracker; ids are never reused.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub tracks: Vec<Track>,
    next_id: u32,
    cpi: usize,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            tracks: Vec::new(),
            next_id: 0,
            cpi: 0,
        }
    }

    pub fn alive(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| t.is_alive())
    }

    /// Processes the fixes of one CPI taken at `time` and returns the live
    /// tracks afterwards.
    pub fn step(&mut self, fixes: &[MeasurementFix], time: f64) -> Result<Vec<TrackSnapshot>, TrackError> {
        let cfg = self.cfg.clone();
        let live: Vec<usize> = (0..self.tracks.len()).filter(|&k| self.tracks[k].is_alive()).collect();
        let mut predicted: Vec<Track> = live
            .iter()
            .map(|&k| {
                let t = &self.tracks[k];
                let dt = time - t.time;
                if dt > 0.0 {
                    kf_predict(t, dt, &cfg)
                } else {
                    t.clone()
                }
            })
            .collect();
        let costs = gated_costs(&predicted, fixes, &cfg);
        let birth_thr = chi2_quantile(cfg.birth_exclusion_probability, 3);
        let in_some_gate: Vec<bool> = fixes
            .iter()
            .map(|f| predicted.iter().any(|t| gated_d2(t, f, birth_thr).is_some()))
            .collect();

        let mut hit = vec![false; predicted.len()];
        let mut fix_used = vec![false; fixes.len()];
        match cfg.association {
            Association::Gnn => {
                let a = gnn_from_costs(&costs, fixes.len());
                for &(t, f, _) in &a.pairs {
                    predicted[t] = kf_update(&predicted[t], &fixes[f])?;
                    hit[t] = true;
                    fix_used[f] = true;
                }
            }
            Association::Jpda => {
                let (upd, w) = jpda_update(&predicted, fixes, &cfg)?;
                predicted = upd;
                for (t, row) in w.betas.iter().enumerate() {
                    for &(k, _) in row {
                        if let Some(k) = k {
                            hit[t] = true;
                            fix_used[k] = true;
                        }
                    }
                }
            }
        }
        for (t, h) in predicted.iter_mut().zip(&hit) {
            lifecycle_update(t, *h, &cfg);
        }
        for (slot, t) in live.iter().zip(predicted) {
            self.tracks[*slot] = t;
        }

        // births from fixes outside every existing gate
        let mut born: Vec<Track> = Vec::new();
        for (k, f) in fixes.iter().enumerate() {
            if fix_used[k] || in_some_gate[k] {
                continue;
            }
            if let (Some(min), Some(snr)) = (cfg.birth_snr_db, f.snr_db) {
                if snr < min {
                    continue;
                }
            }
            let near_newborn = born.iter().any(|b| gated_d2(b, f, birth_thr).is_some());
            if near_newborn {
                continue;
            }
            born.push(Track::new(self.next_id, f, time, &cfg));
            self.next_id += 1;
        }
        self.tracks.retain(Track::is_alive);
        self.tracks.extend(born);

        let snaps = self
            .alive()
            .map(|t| TrackSnapshot {
                cpi: self.cpi,
                time,
                id: t.id,
                status: t.status,
                position: t.position().into(),
                velocity: t.velocity().into(),
            })
            .collect();
        self.cpi += 1;
        Ok(snaps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackReport {
    /// RMSE over matched (established track, truth) pairs per CPI.
    pub rmse_series: Vec<Option<f64>>,
    /// Median of the per-CPI RMSE values.
    pub rmse_median: Option<f64>,
    pub swap_count: usize,
    /// Cumulative swaps after each CPI.
    pub swap_series: Vec<usize>,
    /// Fraction of truth targets under an established track, per CPI.
    pub completeness_series: Vec<f64>,
    pub completeness: f64,
    /// Established tracks without truth within the matching radius, per CPI.
    pub unmatched_series: Vec<usize>,
    /// Truth id matched by each snapshot (aligned with the input).
    pub matches: Vec<Vec<Option<u32>>>,
}

impl TrackReport {
    /// First CPI at which every truth target is under an established track.
    pub fn first_complete_cpi(&self) -> Option<usize> {
        self.completeness_series.iter().position(|&c| c >= 1.0)
    }
}

pub const MATCH_RADIUS: f64 = 50.0;

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Scores per-CPI track snapshots against per-CPI truth `(id, position)`.
/// Only tracks in the confirmed state take part; a coasting track has no
/// measurement this CPI. A swap is a confirmed track whose matched truth id
/// differs from the id it was last matched to, so exchanges that happen
/// while coasting are still counted.
pub fn score(snapshots: &[Vec<TrackSnapshot>], truth: &[Vec<(u32, Vec3)>], radius: f64) -> TrackReport {
    let mut rmse_series = Vec::new();
    let mut completeness_series = Vec::new();
    let mut unmatched_series = Vec::new();
    let mut swap_series = Vec::new();
    let mut matches = Vec::new();
    let mut swaps = 0;
    let mut last: HashMap<u32, u32> = HashMap::new();
    for (snaps, tr) in snapshots.iter().zip(truth) {
        let mut row = Vec::with_capacity(snaps.len());
        let mut se = 0.0;
        let mut n = 0;
        let mut covered = vec![false; tr.len()];
        let mut unmatched = 0;
        for s in snaps {
            if s.status != TrackStatus::Confirmed {
                row.push(None);
                continue;
            }
            let p = Vec3::from(s.position);
            let best = tr
                .iter()
                .enumerate()
                .map(|(k, (_, q))| (k, (p - q).norm()))
                .filter(|&(_, d)| d <= radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((k, d)) => {
                    se += d * d;
                    n += 1;
                    covered[k] = true;
                    let id = tr[k].0;
                    if last.insert(s.id, id).is_some_and(|old| old != id) {
                        swaps += 1;
                    }
                    row.push(Some(id));
                }
                None => {
                    unmatched += 1;
                    row.push(None);
                }
            }
        }
        rmse_series.push((n > 0).then(|| (se / n as f64).sqrt()));
        completeness_series.push(if tr.is_empty() {
            1.0
        } else {
            covered.iter().filter(|&&c| c).count() as f64 / tr.len() as f64
        });
        unmatched_series.push(unmatched);
        swap_series.push(swaps);
        matches.push(row);
    }
    let mut vals: Vec<f64> = rmse_series.iter().flatten().copied().collect();
    let completeness = if completeness_series.is_empty() {
        0.0
    } else {
        completeness_series.iter().sum::<f64>() / completeness_series.len() as f64
    };
    TrackReport {
        rmse_median: median(&mut vals),
        rmse_series,
        swap_count: swaps,
        swap_series,
        completeness_series,
        completeness,
        unmatched_series,
        matches,
    }
}
