use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const COMPACT: &str = "segments = [\"60:0.5\"]\nduplicates = [\"60:20\"]\nprofile_sequences = 2\n\
n_state_tokens = 8\ntoken_dim = 16\nn_layers = 2\nn_heads = 2\nn_frame_tokens = 16\n";

fn gatelab(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatelab"))
        .current_dir(cwd)
        .args(args)
        .env_remove("GATELAB_OUT")
        .output()
        .expect("spawn gatelab")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = gatelab(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, COMPACT).unwrap();
    (dir, cfg)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[test]
fn profile_beta_outputs_and_seed_sensitivity() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    ok(dir.path(), &["profile-beta", "--config", cfg, "--out", "a"]);
    ok(dir.path(), &["profile-beta", "--config", cfg, "--out", "b", "--seed", "99"]);
    let stats = json(&dir.path().join("a/beta_stats.json"));
    assert_eq!(stats["format_version"], 1);
    assert_eq!(stats["config"]["seed"], 7);
    let beta = &stats["beta_stats"];
    assert!(beta["min"].as_f64().unwrap() > 0.0 && beta["max"].as_f64().unwrap() < 1.0);
    assert_eq!(beta["per_sequence_means"].as_array().unwrap().len(), 2);

    let a = csv_rows(&dir.path().join("a/beta_hist.csv"));
    let b = csv_rows(&dir.path().join("b/beta_hist.csv"));
    assert_eq!(a[0], "bin_lo,bin_hi,count");
    assert_eq!(a.len(), 61);
    assert_ne!(a, b, "histogram counts should depend on the seed");
}

#[test]
fn probe_writes_per_policy_files_and_summary() {
    let (dir, cfg) = setup();
    ok(
        dir.path(),
        &["probe-redundancy", "--config", cfg.to_str().unwrap(), "--policy", "ttt3r", "--policy", "fixed:0.5", "--policy", "afg-img"],
    );
    let out = dir.path().join("gatelab-out");
    for label in ["ttt3r", "fixed-0.5", "afg-img"] {
        let rows = csv_rows(&out.join(format!("probe_{label}.csv")));
        assert_eq!(rows[0], "frame,alpha,beta_mean,delta_norm,drift,cum_ate_proxy,update_norm");
        assert_eq!(rows.len(), 81);
        assert!(out.join(format!("trace_{label}.csv")).exists());
        let trace = json(&out.join(format!("trace_{label}.json")));
        assert_eq!(trace["trace"]["beta"].as_array().unwrap().len(), 80);
    }
    let summary = json(&out.join("probe_summary.json"));
    assert_eq!(summary["inject_start"], 60);
    assert_eq!(summary["inject_end"], 79);
    let img = &summary["reports"][2]["summary"];
    assert!(img["closure_horizon"].is_number());
    let floor = 1.0 / (1.0 + 1f64.exp());
    assert!((img["alpha_min_on_duplicates"].as_f64().unwrap() - floor).abs() < 1e-12);
}

#[test]
fn horizon_closure_value() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["horizon", "--beta-bar", "0.352", "--alpha-min", "0.048"]);
    let report = json(&dir.path().join("gatelab-out/horizon.json"));
    let approx = report["horizon"]["horizon_approx"].as_f64().unwrap();
    assert!((approx - 59.19).abs() < 0.01, "{approx}");
    assert!(report["horizon"]["empirical_horizon"].is_u64());
}

#[test]
fn sweeps_have_one_row_per_setting() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    ok(dir.path(), &["sweep-tau", "--config", cfg]);
    ok(dir.path(), &["sweep-alpha", "--config", cfg]);
    let out = dir.path().join("gatelab-out");
    let tau = csv_rows(&out.join("sweep_tau.csv"));
    assert_eq!(tau.len(), 6);
    assert!(tau[0].starts_with("tau,alpha_min_on_duplicates"));
    let alpha = csv_rows(&out.join("sweep_alpha.csv"));
    assert_eq!(alpha.len(), 6);
    assert!(alpha[5].starts_with("adaptive,,"));
    assert!(json(&out.join("sweep_alpha.json"))["rows"].as_array().unwrap().len() == 5);
}

#[test]
fn output_directory_from_environment_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gatelab"))
        .current_dir(dir.path())
        .args(["horizon"])
        .env("GATELAB_OUT", "from-env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/horizon.json").exists());

    fs::write(dir.path().join("c.toml"), "out = \"from-config\"\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gatelab"))
        .current_dir(dir.path())
        .args(["horizon", "--config", "c.toml"])
        .env("GATELAB_OUT", "from-env-2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-config/horizon.json").exists());
    assert!(!dir.path().join("from-env-2").exists());

    let mut entries: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    entries.sort();
    assert_eq!(entries, ["c.toml", "from-config", "from-env"]);
}

const TUM: &str = "# t tx ty tz qx qy qz qw\n\
0.0 0 0 0 0 0 0 1\n\
0.1 1 0 0 0 0 0.0998334 0.9950042\n\
0.2 1 1 0 0 0 0.1986693 0.9800666\n\
0.3 0 1 0.5 0 0 0.2955202 0.9553365\n\
0.4 0 0 1 0 0 0.3894183 0.9210610\n";

#[test]
fn eval_traj_identical_and_kitti() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gt.txt"), TUM).unwrap();
    let report: Value = serde_json::from_str(&ok(dir.path(), &["eval-traj", "gt.txt", "gt.txt"])).unwrap();
    assert!(report["ate_m"].as_f64().unwrap() < 1e-12);
    assert!(report["rpe_rot_deg"].as_f64().unwrap() < 1e-5);
    assert_eq!(report["matches"], 5);
    assert_eq!(report["kind"], "eval-traj");

    let kitti = "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 1 0 1 0 0 0 0 1 0\n1 0 0 1 0 1 0 1 0 0 1 0\n1 0 0 0 0 1 0 1 0 0 1 1\n";
    fs::write(dir.path().join("k.txt"), kitti).unwrap();
    let csv = ok(dir.path(), &["eval-traj", "k.txt", "k.txt", "--csv", "--delta", "2"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "ate_m,rpe_rot_deg,matches,scale");
    let fields: Vec<f64> = lines[1].split(',').map(|f| f.parse().unwrap()).collect();
    assert!(fields[0] < 1e-12 && fields[1] < 1e-5);
    assert_eq!(fields[2], 4.0);
    assert!((fields[3] - 1.0).abs() < 1e-12);
}

#[test]
fn eval_depth_scale_shift_absorbs_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&pred).unwrap();
    fs::write(gt.join("0000.csv"), "1,2,3\n4,5,6\n").unwrap();
    fs::write(pred.join("0000.csv"), "2,4,6\n8,10,12\n").unwrap();
    let run = |alignment: &str| -> Value {
        serde_json::from_str(&ok(dir.path(), &["eval-depth", "pred", "gt", "--alignment", alignment])).unwrap()
    };
    let fitted = run("scale-shift");
    assert!(fitted["mean"]["abs_rel"].as_f64().unwrap() < 1e-12);
    assert_eq!(fitted["frames"][0]["name"], "0000.csv");
    let metric = run("metric");
    assert!((metric["mean"]["abs_rel"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(metric["mean"]["delta_1_25"].as_f64().unwrap(), 0.0);
}

#[test]
fn failures_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.txt"), "0 0 0 0 0 0 0 1\n1 0 0 0 0 0 1\n").unwrap();
    let out = gatelab(dir.path(), &["eval-traj", "bad.txt", "bad.txt", "--format", "tum"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage input") && err.contains("bad.txt:2"), "{err}");

    fs::write(dir.path().join("c.toml"), "colour = 3\n").unwrap();
    let out = gatelab(dir.path(), &["horizon", "--config", "c.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("c.toml"));

    let out = gatelab(dir.path(), &["horizon", "--beta-bar", "2.0", "--alpha-min", "1.0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage horizon"));

    let out = gatelab(dir.path(), &["sweep-tau", "--policy", "ttt3r"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage sweep-tau"));
}
