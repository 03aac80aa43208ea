//! Scenario description: configuration types, document loading and validation,
//! derived waveform quantities and the deterministic random-stream factory.
//!
//! A scenario document is JSON with exactly five top-level keys: `waveform`,
//! `stations`, `fleet`, `clutter` and `run`. Units follow the field names
//! (Hz, m, m/s, m/s², dB, W, K); angles are in degrees.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mobility::{random_fleet, FleetBounds, GroundBox};
use crate::sensefront::{CfarConfig, Window};
use crate::track::TrackerConfig;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// Cartesian position or velocity; `z` is altitude above ground.
pub type Vec3 = Vector3<f64>;

/// Random stream type used throughout the crate.
pub type SimRng = ChaCha8Rng;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed scenario document: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Name of the offending field for validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Validation { field, .. } => Some(field),
            ConfigError::Parse(_) => None,
        }
    }
}

fn ensure(cond: bool, field: &str, message: &str) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, message))
    }
}

fn ensure_finite(v: &Vec3, field: &str) -> Result<(), ConfigError> {
    ensure(v.iter().all(|c| c.is_finite()), field, "components must be finite")
}

fn ensure_placed(v: &Vec3, field: &str) -> Result<(), ConfigError> {
    ensure_finite(v, field)?;
    ensure(v.z >= 0.0, field, "altitude must be >= 0")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveformConfig {
    pub carrier_freq: f64,
    /// Subcarrier spacing.
    pub scs: f64,
    pub n_subcarriers: usize,
    pub n_symbols_per_cpi: usize,
    pub tx_power: f64,
    pub noise_figure: f64,
    pub noise_temp: f64,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        Self {
            carrier_freq: 3.5e9,
            scs: 30e3,
            n_subcarriers: 3334,
            n_symbols_per_cpi: 256,
            tx_power: 1.0,
            noise_figure: 10.0,
            noise_temp: 290.0,
        }
    }
}

impl WaveformConfig {
    pub fn bandwidth(&self) -> f64 {
        self.n_subcarriers as f64 * self.scs
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    /// Symbol duration with the cyclic prefix ignored.
    pub fn symbol_duration(&self) -> f64 {
        1.0 / self.scs
    }

    pub fn cpi_duration(&self) -> f64 {
        self.n_symbols_per_cpi as f64 / self.scs
    }

    /// Largest subcarrier count whose occupied bandwidth does not exceed `bandwidth`.
    pub fn with_bandwidth(&self, bandwidth: f64) -> Self {
        let n = ((bandwidth / self.scs) + 1e-9).floor().max(2.0) as usize;
        Self {
            n_subcarriers: n,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(
            self.carrier_freq.is_finite() && self.carrier_freq > 0.0,
            "waveform.carrier_freq",
            "must be > 0",
        )?;
        ensure(self.scs.is_finite() && self.scs > 0.0, "waveform.scs", "must be > 0")?;
        ensure(self.n_subcarriers >= 2, "waveform.n_subcarriers", "must be >= 2")?;
        ensure(
            self.n_symbols_per_cpi >= 2,
            "waveform.n_symbols_per_cpi",
            "must be >= 2",
        )?;
        ensure(
            self.tx_power.is_finite() && self.tx_power > 0.0,
            "waveform.tx_power",
            "must be > 0",
        )?;
        ensure(
            self.noise_figure.is_finite(),
            "waveform.noise_figure",
            "must be finite",
        )?;
        ensure(
            self.noise_temp.is_finite() && self.noise_temp > 0.0,
            "waveform.noise_temp",
            "must be > 0",
        )
    }
}

/// Resolution and ambiguity figures implied by an OFDM numerology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolutionReport {
    pub bandwidth: f64,
    pub delay_resolution: f64,
    pub range_sum_resolution: f64,
    pub symbol_duration: f64,
    pub cpi_duration: f64,
    pub doppler_resolution: f64,
    pub unambiguous_delay: f64,
    pub unambiguous_doppler: f64,
}

pub fn derived_waveform_params(w: &WaveformConfig) -> ResolutionReport {
    let bandwidth = w.bandwidth();
    ResolutionReport {
        bandwidth,
        delay_resolution: 1.0 / bandwidth,
        range_sum_resolution: SPEED_OF_LIGHT / bandwidth,
        symbol_duration: 1.0 / w.scs,
        cpi_duration: w.n_symbols_per_cpi as f64 / w.scs,
        doppler_resolution: w.scs / w.n_symbols_per_cpi as f64,
        unambiguous_delay: 1.0 / w.scs,
        unambiguous_doppler: w.scs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementPattern {
    Isotropic,
    /// `cos(off-boresight angle)^exponent` in the front half-space, zero behind.
    CosinePower(f64),
}

/// Uniform planar array. Elements sit on a centered rectangular lattice in the
/// plane orthogonal to the boresight; `nx` runs along the horizontal in-plane
/// axis and `ny` along the vertical in-plane axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpaConfig {
    pub nx: usize,
    pub ny: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
    pub boresight_azimuth: f64,
    pub boresight_elevation: f64,
    pub element: ElementPattern,
}

impl Default for UpaConfig {
    fn default() -> Self {
        Self {
            nx: 1,
            ny: 1,
            spacing: 0.5,
            boresight_azimuth: 0.0,
            boresight_elevation: 0.0,
            element: ElementPattern::Isotropic,
        }
    }
}

impl UpaConfig {
    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    pub fn validate(&self, field: &str) -> Result<(), ConfigError> {
        ensure(self.nx >= 1, &format!("{field}.nx"), "must be >= 1")?;
        ensure(self.ny >= 1, &format!("{field}.ny"), "must be >= 1")?;
        ensure(
            self.spacing.is_finite() && self.spacing > 0.0,
            &format!("{field}.spacing"),
            "must be > 0",
        )?;
        ensure(
            self.boresight_azimuth.is_finite() && self.boresight_elevation.abs() <= 90.0,
            &format!("{field}.boresight_elevation"),
            "must lie in [-90, 90] degrees",
        )?;
        if let ElementPattern::CosinePower(p) = self.element {
            ensure(
                p.is_finite() && p >= 0.0,
                &format!("{field}.element"),
                "cosine exponent must be >= 0",
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationRole {
    Transmitter,
    Receiver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationConfig {
    pub id: String,
    pub position: Vec3,
    pub role: StationRole,
    #[serde(default)]
    pub array: UpaConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    #[serde(alias = "CV")]
    Cv,
    #[serde(alias = "CA")]
    Ca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RcsFluctuation {
    #[default]
    None,
    Swerling1,
}

pub const DEFAULT_RCS: f64 = 0.01;

fn default_rcs() -> f64 {
    DEFAULT_RCS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UavConfig {
    pub id: u32,
    pub initial_position: Vec3,
    pub initial_velocity: Vec3,
    #[serde(default = "Vec3::zeros")]
    pub acceleration: Vec3,
    #[serde(default = "default_rcs")]
    pub rcs_mean: f64,
    pub motion_model: MotionModel,
    #[serde(default)]
    pub rcs_fluctuation: RcsFluctuation,
}

/// Fleet description: explicit UAVs plus `count` randomly generated ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetConfig {
    pub count: usize,
    /// Filled from the station geometry when absent.
    pub bounds: Option<FleetBounds>,
    pub rcs_mean: f64,
    pub rcs_fluctuation: RcsFluctuation,
    pub uavs: Vec<UavConfig>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            count: 0,
            bounds: None,
            rcs_mean: DEFAULT_RCS,
            rcs_fluctuation: RcsFluctuation::None,
            uavs: Vec::new(),
        }
    }
}

impl FleetConfig {
    pub fn size(&self) -> usize {
        self.uavs.len() + self.count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClutterConfig {
    pub n_scatterers: usize,
    /// Filled from the fleet region when absent.
    pub region: Option<GroundBox>,
    /// Clutter-to-strongest-target calibration, dB (target over clutter).
    pub scr_target: f64,
}

impl Default for ClutterConfig {
    fn default() -> Self {
        Self {
            n_scatterers: 0,
            region: None,
            scr_target: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessingConfig {
    pub window: Window,
    pub mti: bool,
    pub cfar: CfarConfig,
    /// Symbol groups per CPI used as array snapshots.
    pub n_snapshots: usize,
    pub grid_step_deg: f64,
    pub diagonal_loading: f64,
    /// Lower bound on the direction-cosine error assumed for fix covariances.
    pub direction_sigma_floor: f64,
}

impl Default for ProcessingConfig {
    fn default() -> Self {
        Self {
            window: Window::Hann,
            mti: true,
            cfar: CfarConfig::default(),
            n_snapshots: 16,
            grid_step_deg: 1.0,
            diagonal_loading: 1e-6,
            direction_sigma_floor: 5e-4,
        }
    }
}

impl ProcessingConfig {
    pub fn validate(&self, n_symbols: usize) -> Result<(), ConfigError> {
        self.cfar.validate()?;
        ensure(
            self.n_snapshots >= 2 && n_symbols % self.n_snapshots == 0,
            "run.processing.n_snapshots",
            "must be >= 2 and divide n_symbols_per_cpi",
        )?;
        ensure(
            self.grid_step_deg > 0.0 && self.grid_step_deg <= 10.0,
            "run.processing.grid_step_deg",
            "must lie in (0, 10]",
        )?;
        ensure(
            self.diagonal_loading >= 0.0,
            "run.processing.diagonal_loading",
            "must be >= 0",
        )?;
        ensure(
            self.direction_sigma_floor > 0.0,
            "run.processing.direction_sigma_floor",
            "must be > 0",
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_cpis: usize,
    /// Time between consecutive CPI starts, s.
    pub cpi_interval: f64,
    pub seed: u64,
    pub processing: ProcessingConfig,
    pub tracker: TrackerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_cpis: 20,
            cpi_interval: 0.25,
            seed: 42,
            processing: ProcessingConfig::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub waveform: WaveformConfig,
    pub stations: Vec<StationConfig>,
    #[serde(default)]
    pub fleet: FleetConfig,
    #[serde(default)]
    pub clutter: ClutterConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl ScenarioConfig {
    pub fn transmitter(&self) -> &StationConfig {
        self.stations
            .iter()
            .find(|s| s.role == StationRole::Transmitter)
            .expect("validated scenario has a transmitter")
    }

    pub fn receiver(&self) -> &StationConfig {
        self.stations
            .iter()
            .find(|s| s.role == StationRole::Receiver)
            .expect("validated scenario has a receiver")
    }

    pub fn seed(&self) -> u64 {
        self.run.seed
    }

    pub fn fleet_bounds(&self) -> FleetBounds {
        self.fleet.bounds.clone().unwrap_or_else(|| {
            let mid = 0.5 * (self.transmitter().position + self.receiver().position);
            FleetBounds::around(mid.x, mid.y)
        })
    }

    pub fn clutter_region(&self) -> GroundBox {
        self.clutter
            .region
            .clone()
            .unwrap_or_else(|| self.fleet_bounds().region)
    }

    /// The full fleet: explicit UAVs followed by the random draw from the
    /// `fleet` stream of the scenario seed.
    pub fn uavs(&self) -> Vec<UavConfig> {
        let mut out = self.fleet.uavs.clone();
        if self.fleet.count > 0 {
            let mut rng = spawn_rng(self.run.seed, "fleet");
            let first_id = out.iter().map(|u| u.id + 1).max().unwrap_or(0);
            for (k, mut u) in random_fleet(&mut rng, &self.fleet_bounds(), self.fleet.count)
                .into_iter()
                .enumerate()
            {
                u.id = first_id + k as u32;
                u.rcs_mean = self.fleet.rcs_mean;
                u.rcs_fluctuation = self.fleet.rcs_fluctuation;
                out.push(u);
            }
        }
        out
    }

    /// Checks every invariant of the scenario and its parts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.waveform.validate()?;

        let n_tx = self
            .stations
            .iter()
            .filter(|s| s.role == StationRole::Transmitter)
            .count();
        let n_rx = self
            .stations
            .iter()
            .filter(|s| s.role == StationRole::Receiver)
            .count();
        ensure(
            n_tx == 1 && n_rx == 1 && self.stations.len() == 2,
            "stations",
            "exactly one transmitter and one receiver are required",
        )?;
        for (k, s) in self.stations.iter().enumerate() {
            ensure_placed(&s.position, &format!("stations[{k}].position"))?;
            s.array.validate(&format!("stations[{k}].array"))?;
        }
        ensure(
            (self.stations[0].position - self.stations[1].position).norm() > 0.0,
            "stations",
            "transmitter and receiver positions must differ",
        )?;

        let bounds = self.fleet_bounds();
        bounds.validate("fleet.bounds")?;
        ensure(
            self.fleet.rcs_mean.is_finite() && self.fleet.rcs_mean > 0.0,
            "fleet.rcs_mean",
            "must be > 0",
        )?;
        let mut ids = std::collections::BTreeSet::new();
        for (k, u) in self.fleet.uavs.iter().enumerate() {
            let f = format!("fleet.uavs[{k}]");
            ensure(ids.insert(u.id), &format!("{f}.id"), "duplicate UAV id")?;
            ensure_placed(&u.initial_position, &format!("{f}.initial_position"))?;
            ensure_finite(&u.initial_velocity, &format!("{f}.initial_velocity"))?;
            ensure_finite(&u.acceleration, &format!("{f}.acceleration"))?;
            ensure(
                u.rcs_mean.is_finite() && u.rcs_mean > 0.0,
                &format!("{f}.rcs_mean"),
                "must be > 0",
            )?;
            ensure(
                u.initial_velocity.norm() <= bounds.speed_max,
                &format!("{f}.initial_velocity"),
                "speed exceeds fleet speed bound",
            )?;
            for s in &self.stations {
                ensure(
                    (u.initial_position - s.position).norm() > 0.0,
                    &format!("{f}.initial_position"),
                    "coincides with a station",
                )?;
            }
        }

        if let Some(region) = &self.clutter.region {
            region.validate("clutter.region")?;
        }
        ensure(
            self.clutter.scr_target.is_finite(),
            "clutter.scr_target",
            "must be finite",
        )?;

        ensure(self.run.n_cpis >= 1, "run.n_cpis", "must be >= 1")?;
        ensure(
            self.run.cpi_interval.is_finite()
                && self.run.cpi_interval >= self.waveform.cpi_duration(),
            "run.cpi_interval",
            "must be at least one CPI duration",
        )?;
        self.run.processing.validate(self.waveform.n_symbols_per_cpi)?;
        self.run.tracker.validate()
    }
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let scn: ScenarioConfig = serde_json::from_value(value)
        .map_err(|e| ConfigError::invalid("document", e.to_string()))?;
    scn.validate()?;
    Ok(scn)
}

/// Independent reproducible random stream for `(seed, label)`.
pub fn spawn_rng(seed: u64, label: &str) -> SimRng {
    let mut h = Sha256::new();
    h.update(b"isac-airspace/stream/v1");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    SimRng::from_seed(digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) const MINIMAL: &str = r#"{
        "waveform": {"n_subcarriers": 334},
        "stations": [
            {"id": "tx", "role": "transmitter", "position": [0, 0, 25]},
            {"id": "rx", "role": "receiver", "position": [500, 0, 25]}
        ],
        "fleet": {"count": 10},
        "clutter": {},
        "run": {"n_cpis": 4}
    }"#;

    #[test]
    fn minimal_document_has_ten_uavs() {
        let scn = load_scenario(MINIMAL).unwrap();
        assert_eq!(scn.fleet.size(), 10);
        assert_eq!(scn.uavs().len(), 10);
        scn.validate().unwrap();
    }

    #[test]
    fn zero_scs_is_rejected_by_name() {
        let text = MINIMAL.replace(r#""n_subcarriers": 334"#, r#""n_subcarriers": 334, "scs": 0"#);
        let err = load_scenario(&text).unwrap_err();
        assert!(err.to_string().contains("scs"), "{err}");
        assert_eq!(err.field(), Some("waveform.scs"));
    }

    #[test]
    fn unknown_keys_are_validation_errors() {
        let text = MINIMAL.replace(r#""clutter": {}"#, r#""clutter": {}, "extra": 1"#);
        assert!(matches!(
            load_scenario(&text),
            Err(ConfigError::Validation { .. })
        ));
        let text = MINIMAL.replace(r#""clutter": {}"#, r#""clutter": {"density": 3}"#);
        assert!(matches!(
            load_scenario(&text),
            Err(ConfigError::Validation { .. })
        ));
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(
            load_scenario("{\"waveform\": "),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn loading_is_deterministic() {
        let a = load_scenario(MINIMAL).unwrap();
        let b = load_scenario(MINIMAL).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.uavs(), b.uavs());
    }

    #[test]
    fn two_transmitters_rejected() {
        let text = MINIMAL.replace("\"receiver\"", "\"transmitter\"");
        assert_eq!(load_scenario(&text).unwrap_err().field(), Some("stations"));
    }

    #[test]
    fn resolution_identities() {
        let w = WaveformConfig::default();
        let r = derived_waveform_params(&w);
        assert!((r.bandwidth - 100.02e6).abs() < 1.0);
        assert!((r.range_sum_resolution - 2.9973).abs() < 1e-3);
        assert!((r.doppler_resolution - 117.1875).abs() < 1e-9);
        assert!((r.cpi_duration - 8.5333e-3).abs() < 1e-6);
        assert_eq!(r.unambiguous_doppler, 30e3);
        assert!((r.unambiguous_delay - 1.0 / 30e3).abs() < 1e-15);
        assert!((r.delay_resolution * r.bandwidth - 1.0).abs() < 1e-12);
    }

    #[test]
    fn range_resolution_shrinks_with_subcarriers() {
        let w = WaveformConfig::default();
        let mut prev = f64::INFINITY;
        for n in [2, 10, 100, 1000, 3334, 5000] {
            let r = derived_waveform_params(&WaveformConfig {
                n_subcarriers: n,
                ..w.clone()
            });
            assert!(r.range_sum_resolution < prev);
            prev = r.range_sum_resolution;
        }
    }

    #[test]
    fn bandwidth_conversion_never_exceeds_request() {
        let w = WaveformConfig::default();
        for b in [5e6, 10e6, 20e6, 50e6, 100e6] {
            let x = w.with_bandwidth(b);
            assert!(x.bandwidth() <= b + 1e-6);
            assert!(x.bandwidth() > b - w.scs);
        }
    }

    #[test]
    fn streams_are_reproducible_and_separated() {
        let draw = |seed, label: &str| -> Vec<u64> {
            let mut r = spawn_rng(seed, label);
            (0..100).map(|_| r.gen()).collect()
        };
        assert_eq!(draw(42, "noise"), draw(42, "noise"));
        assert_ne!(draw(42, "noise"), draw(42, "clutter"));
        assert_ne!(draw(42, "noise"), draw(43, "noise"));
    }
}
