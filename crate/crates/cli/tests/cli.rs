use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hicontrast_cli::RunConfig;
use serde_json::Value;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn hicontrast(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hicontrast"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

/// The single run directory created under `out`.
fn run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synthetic_config_gives_the_closed_form_gap() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config_path("synthetic.toml");
    let o = hicontrast(&["gaps", "--config", cfg.to_str().unwrap()], out.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&run_dir(out.path()).join("gaps.json"));
    let gaps = doc["result"]["gaps"].as_array().unwrap();
    assert_eq!(gaps.len(), 1);
    assert_eq!(gaps[0]["lower"].as_f64().unwrap(), 10.0);
    assert!((gaps[0]["upper"].as_f64().unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(doc["config"]["gaps"]["lambda_max"].as_f64().unwrap(), 100.0);
    assert_eq!(doc["content_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn three_d_pipeline_finds_modes_in_the_first_gap() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config_path("ball3d.toml");
    let o = hicontrast(&["pipeline", "--config", cfg.to_str().unwrap()], out.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(out.path());
    for stage in ["inclusion-spectrum", "beta", "gaps", "homogenize", "defect-modes"] {
        assert!(dir.join(format!("{stage}.json")).exists(), "{stage}");
    }
    assert!(!dir.join("validate-eps.json").exists());
    let modes = read_json(&dir.join("defect-modes.json"));
    let table = modes["result"]["modes"].as_array().unwrap();
    assert!(table.iter().any(|m| m["gap"] == 1), "{table:?}");
    let gaps = read_json(&dir.join("gaps.json"));
    let first = &gaps["result"]["gaps"][0];
    for m in table.iter().filter(|m| m["gap"] == 1) {
        let l = m["lambda0"].as_f64().unwrap();
        assert!(l > first["lower"].as_f64().unwrap() && l < first["upper"].as_f64().unwrap());
    }
}

#[test]
fn invalid_radius_is_a_config_error_naming_the_field() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config_path("synthetic.toml");
    let o = hicontrast(
        &[
            "gaps",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "geometry.inclusion.radius=0.5",
        ],
        out.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("geometry.inclusion.radius"));
    assert_eq!(fs::read_dir(out.path()).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn missing_sections_and_unknown_fields_are_config_errors() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config_path("synthetic.toml");
    let cfg = cfg.to_str().unwrap();
    let o = hicontrast(&["defect-modes", "--config", cfg], out.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("defect"));
    let o = hicontrast(&["gaps", "--config", cfg, "--set", "gaps.lambda_min=1"], out.path());
    assert_eq!(o.status.code(), Some(2));
    let o = hicontrast(&["gaps"], out.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_three() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config_path("synthetic.toml");
    let o = hicontrast(
        &[
            "inclusion-spectrum",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "beta.synthetic_poles=[]",
        ],
        out.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = hicontrast(
        &[
            "inclusion-spectrum",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "beta={method=\"series\", spectrum=\"fem\", mesh_h=0.05}",
            "--set",
            "eigen.max_iter=1",
        ],
        out.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fem-kernel"));
}

#[test]
fn identical_configs_give_identical_reports_in_new_directories() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config_path("synthetic.toml");
    let args = ["pipeline", "--config", cfg.to_str().unwrap(), "--threads", "2"];
    assert!(hicontrast(&args, out.path()).status.success());
    assert!(hicontrast(&args, out.path()).status.success());
    let mut dirs: Vec<PathBuf> = fs::read_dir(out.path()).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    assert_eq!(dirs.len(), 2);
    let mut files: Vec<String> = fs::read_dir(&dirs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert!(files.contains(&"beta.json".to_string()) && files.contains(&"gaps.csv".to_string()));
    for f in &files {
        assert_eq!(
            fs::read(dirs[0].join(f)).unwrap(),
            fs::read(dirs[1].join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn shipped_configs_round_trip() {
    for name in ["ball3d.toml", "synthetic.toml", "disk2d.toml"] {
        let text = fs::read_to_string(config_path(name)).unwrap();
        let c = RunConfig::parse(&text, &[]).unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml(), &[]).unwrap(), c, "{name}");
    }
}

#[test]
fn reports_echo_overrides() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config_path("synthetic.toml");
    let o = hicontrast(
        &[
            "beta",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "beta.pole_guard=1e-3",
            "--set",
            "beta.samples=7",
        ],
        out.path(),
    );
    assert!(o.status.success());
    let dir = run_dir(out.path());
    let doc = read_json(&dir.join("beta.json"));
    assert_eq!(doc["config"]["beta"]["pole_guard"].as_f64().unwrap(), 1e-3);
    assert_eq!(doc["result"]["samples"].as_array().unwrap().len(), 7);
    let saved = RunConfig::parse(&fs::read_to_string(dir.join("config.toml")).unwrap(), &[]).unwrap();
    assert_eq!(saved.beta.samples, 7);
}
