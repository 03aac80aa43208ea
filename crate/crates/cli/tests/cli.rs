use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL: &str = r#"{
    "waveform": {"n_subcarriers": 334, "n_symbols_per_cpi": 64, "tx_power": 1.0e5},
    "stations": [
      {"id": "tx", "position": [0, 0, 25], "role": "transmitter",
       "array": {"nx": 1, "ny": 1, "boresight_azimuth": 90}},
      {"id": "rx", "position": [500, 0, 25], "role": "receiver",
       "array": {"nx": 4, "ny": 4, "boresight_azimuth": 90, "boresight_elevation": 20}}
    ],
    "fleet": {"count": 0, "uavs": [
      {"id": 1, "initial_position": [400, 300, 150], "initial_velocity": [10, 5, 0], "motion_model": "cv"},
      {"id": 2, "initial_position": [650, 450, 200], "initial_velocity": [-8, 12, 0], "motion_model": "ca",
       "acceleration": [0.5, 0, 0]}
    ]},
    "run": {"n_cpis": 5, "seed": 7, "processing": {"mti": false}}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_isac-airspace"));
    c.env_remove("ISAC_AIRSPACE_SEED");
    c
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(c: &mut Command) -> Output {
    c.output().expect("spawn")
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

/// Every listed file exists and matches its recorded hash.
fn verify_manifest(out: &Path) -> serde_json::Value {
    let m = manifest(out);
    for f in m["files"].as_array().unwrap() {
        let data = fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&data)));
        assert_eq!(f["bytes"].as_u64().unwrap(), data.len() as u64);
    }
    m
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_writes_all_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out = dir.path().join("run");
    let o = run(bin().arg("simulate").arg(&cfg).arg("--out").arg(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["truth.csv", "detections.csv", "tracks.csv", "report.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = verify_manifest(&out);
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["files"].as_array().unwrap().len(), 4);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_uavs"], 2);
    assert_eq!(report["n_cpis"], 5);
    let truth = csv_rows(&out.join("truth.csv"));
    assert_eq!(truth[0][..4], ["cpi", "time_s", "uav_id", "x"]);
    assert_eq!(truth.len(), 1 + 5 * 2);
}

#[test]
fn simulate_is_reproducible_and_seed_overrides_apply() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let outs: Vec<PathBuf> = (0..2).map(|k| dir.path().join(format!("run{k}"))).collect();
    for out in &outs {
        assert!(run(bin().arg("simulate").arg(&cfg).arg("--out").arg(out)).status.success());
    }
    for f in ["truth.csv", "detections.csv", "tracks.csv", "report.json"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }

    let env_out = dir.path().join("env");
    let o = run(bin().env("ISAC_AIRSPACE_SEED", "11").arg("simulate").arg(&cfg).arg("--out").arg(&env_out));
    assert!(o.status.success());
    assert_eq!(manifest(&env_out)["seed"], 11);
    assert_ne!(fs::read(env_out.join("detections.csv")).unwrap(), fs::read(outs[0].join("detections.csv")).unwrap());

    let flag_out = dir.path().join("flag");
    let o = run(bin()
        .env("ISAC_AIRSPACE_SEED", "11")
        .args(["simulate", "--seed", "13"])
        .arg(&cfg)
        .arg("--out")
        .arg(&flag_out));
    assert!(o.status.success());
    assert_eq!(manifest(&flag_out)["seed"], 13);
}

#[test]
fn config_errors_exit_1_without_outputs() {
    let dir = TempDir::new().unwrap();
    let bad = write_config(dir.path(), "bad.json", &SMALL.replace("\"n_subcarriers\": 334", "\"n_subcarriers\": 1"));
    let good = write_config(dir.path(), "small.json", SMALL);
    let cases: Vec<(Vec<std::ffi::OsString>, Option<(&str, &str)>)> = vec![
        (vec!["simulate".into(), bad.clone().into()], None),
        (vec!["simulate".into(), dir.path().join("missing.json").into()], None),
        (vec!["simulate".into(), good.clone().into()], Some(("ISAC_AIRSPACE_SEED", "seven"))),
        (vec!["coverage".into(), bad.into()], None),
        (vec!["sweep".into(), good.clone().into(), "--pfas".into(), "2".into()], None),
        (vec!["simulate".into(), good.into(), "--jobs".into(), "0".into()], None),
        (vec!["gdop".into(), "--range".into(), "-5".into()], None),
        (vec!["gdop".into(), "--preset".into(), "nope".into()], None),
    ];
    for (k, (args, env)) in cases.into_iter().enumerate() {
        let out = dir.path().join(format!("out{k}"));
        let mut c = bin();
        if let Some((key, v)) = env {
            c.env(key, v);
        }
        let o = run(c.args(&args).arg("--out").arg(&out));
        assert_eq!(o.status.code(), Some(1), "case {k}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
        assert!(!out.exists(), "case {k} wrote output");
    }
}

#[test]
fn degenerate_gdop_geometry_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("g");
    let o = run(bin().args(["gdop", "--range", "0", "--altitude", "0", "--out"]).arg(&out));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gdop_curves() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("aoa");
    assert!(run(bin().args(["gdop", "--preset", "aoa", "--range", "300", "--out"]).arg(&out)).status.success());
    let rows = csv_rows(&out.join("gdop.csv"));
    assert_eq!(rows[0], ["azimuth_deg", "gdop_m", "preset"]);
    assert_eq!(rows.len(), 1 + 181);
    let g: Vec<f64> = rows[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    let max = g.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(*g.last().unwrap(), max);
    verify_manifest(&out);

    let both = dir.path().join("both");
    assert!(run(bin().args(["gdop", "--out"]).arg(&both)).status.success());
    let rows = csv_rows(&both.join("gdop.csv"));
    assert_eq!(rows.len(), 1 + 2 * 181);
    let aoa: Vec<&String> = rows[1..182].iter().map(|r| &r[1]).collect();
    let tdoa: Vec<&String> = rows[182..].iter().map(|r| &r[1]).collect();
    assert!(rows[182..].iter().all(|r| r[2] == "tdoa"));
    assert_ne!(aoa, tdoa);
}

#[test]
fn coverage_grids() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let iso = dir.path().join("iso");
    let o = run(bin()
        .args(["coverage"])
        .arg(&cfg)
        .args(["--extent", "1000", "--spacing", "20", "--out"])
        .arg(&iso));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&iso.join("coverage.csv"));
    assert_eq!(rows[0], ["x", "y", "snr_db", "covered"]);
    assert_eq!(rows.len(), 1 + 50 * 50);
    assert!(rows[1..].iter().any(|r| r[3] == "1") && rows[1..].iter().any(|r| r[3] == "0"));
    verify_manifest(&iso);

    let beam = dir.path().join("beam");
    assert!(run(bin()
        .args(["coverage"])
        .arg(&cfg)
        .args(["--mode", "beam", "--extent", "1000", "--spacing", "20", "--out"])
        .arg(&beam))
    .status
    .success());
    let b = csv_rows(&beam.join("coverage.csv"));
    let differ = rows[1..].iter().zip(&b[1..]).filter(|(x, y)| x[3] != y[3]).count();
    assert!(differ as f64 >= 0.01 * 2500.0, "{differ}");

    let cube = dir.path().join("cube");
    assert!(run(bin()
        .args(["coverage"])
        .arg(&cfg)
        .args(["--dim", "3", "--extent", "400", "--spacing", "40", "--out"])
        .arg(&cube))
    .status
    .success());
    let data = fs::read(cube.join("coverage.bin")).unwrap();
    let u = |k: usize| u32::from_le_bytes(data[4 * k..4 * k + 4].try_into().unwrap());
    assert_eq!((u(0), u(1), u(2)), (10, 10, 10));
    assert_eq!(f32::from_le_bytes(data[12..16].try_into().unwrap()), 40.0);
    assert_eq!(data.len(), 28 + 4 * 1000);
    verify_manifest(&cube);
}

#[test]
fn sweep_rows_cover_the_product() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.json", &SMALL.replace("\"n_cpis\": 5", "\"n_cpis\": 3"));
    let out = dir.path().join("sweep");
    let o = run(bin()
        .args(["--jobs", "1", "sweep"])
        .arg(&cfg)
        .args(["--bandwidths", "5e6,10e6", "--pfas", "1e-3,1e-6", "--seeds", "1,2", "--out"])
        .arg(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("rmse.csv"));
    assert_eq!(rows[0], ["bandwidth_hz", "pfa", "seed", "rmse_m", "swap_count", "completeness"]);
    assert_eq!(rows.len(), 1 + 2 * 2 * 2);
    let m = verify_manifest(&out);
    assert_eq!(m["config"]["sweep"]["seeds"], serde_json::json!([1, 2]));
}
