use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use asg_core::engine::RunReport;
use asg_core::Tensor;

fn asg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asg")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const MINIMAL: &str = r#"{
  "image.base_height": 8, "image.base_width": 8,
  "image.target_height": 8, "image.target_width": 8,
  "image.channels": 3,
  "sampler.steps": 4,
  "predictor.kind": "gaussian",
  "executor.mode": "sequential"
}"#;

#[test]
fn missing_config_names_the_path() {
    let o = asg(&["generate", "--config", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/definitely/not/here.json"), "{}", stderr(&o));
}

#[test]
fn minimal_config_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("run");
    let o = asg(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["latent.asgt", "latent.ppm", "report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report = RunReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.staleness.is_empty());
    assert_eq!(report.patches, 1);
    let latent = Tensor::read_asgt(out.join("latent.asgt")).unwrap();
    assert_eq!(latent.shape().dims(), [3, 8, 8]);
    assert_eq!(latent.checksum(), report.checksum);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = asg(&[
            "generate",
            "--seed",
            "7",
            "--mode",
            "async",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        bytes.push(fs::read(out.join("latent.asgt")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let o = asg(&[
        "generate",
        "--seed",
        "8",
        "--out",
        dir.path().join("c").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_ne!(fs::read(dir.path().join("c/latent.asgt")).unwrap(), bytes[0]);
}

#[test]
fn unknown_flag_exits_1() {
    let o = asg(&["generate", "--stepz", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--stepz"));
}

#[test]
fn bad_values_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"sampler.ratio": 1.5}"#);
    let o = asg(&["generate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ratio"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), r#"{"sampler.stepz": 3}"#);
    let o = asg(&["generate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sampler.stepz"), "{}", stderr(&o));

    let o = asg(&[
        "generate",
        "--mask",
        "file:/no/such/mask.asgt",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/mask.asgt"), "{}", stderr(&o));
}

#[test]
fn selftest_passes_and_lists_checks() {
    let o = asg(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let checks = stdout(&o).lines().filter(|l| l.starts_with("ok ")).count();
    assert!(checks >= 10, "{}", stdout(&o));
}

#[test]
fn corrupted_schedule_fails_selftest() {
    let o = asg(&["selftest", "--corrupt-schedule"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL schedule_valid"), "{}", stdout(&o));
}

#[test]
fn benchmark_prints_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"sampler.steps": 6}"#);
    let o = asg(&["benchmark", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    for mode in ["sequential", "parallel-sync", "parallel-async"] {
        assert!(table.contains(mode), "{table}");
    }
    let csv = fs::read_to_string(dir.path().join("benchmark.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn unknown_benchmark_mode_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"benchmark.modes": ["sequential", "warp"]}"#);
    let o = asg(&["benchmark", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("benchmark.modes"), "{}", stderr(&o));
}

#[test]
fn ablation_grid_has_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"sampler.steps": 10}"#);
    let o = asg(&["ablate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    assert!(csv.starts_with("sg,cam,mode,"));
    // With SG off the mask has nothing to scale, so all four cells agree.
    let off: Vec<Vec<&str>> = rows
        .iter()
        .filter(|r| r.starts_with("false,"))
        .map(|r| r.split(',').skip(3).collect())
        .collect();
    assert_eq!(off.len(), 4);
    assert!(off.iter().all(|m| *m == off[0]), "{csv}");
}

#[test]
fn config_canonical_form_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"guidance": {"w": 1.5, "mask": "one"}, "sampler.ratio": 0.3, "seed": 11}"#,
    );
    let first = asg(&["config", "--config", &cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    let canon = stdout(&first);
    assert!(canon.contains("\"guidance.w\": 1.5"), "{canon}");
    let path = dir.path().join("canon.json");
    fs::write(&path, &canon).unwrap();
    let second = asg(&["config", "--config", path.to_str().unwrap()]);
    assert_eq!(stdout(&second), canon);
}

#[test]
fn schedule_csv() {
    let o = asg(&["schedule"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("t,"));
    assert_eq!(lines.count(), 1000);
}

#[test]
fn generate_over_stdio_echo_server() {
    let dir = tempfile::tempdir().unwrap();
    let server = format!("remote:stdio:{} serve --echo", env!("CARGO_BIN_EXE_asg"));
    let mut sums = Vec::new();
    for mode in ["sequential", "sync"] {
        let out = dir.path().join(mode);
        let o = asg(&[
            "generate",
            "--predictor",
            &server,
            "--mode",
            mode,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        sums.push(stdout(&o));
    }
    assert_eq!(sums[0], sums[1]);
}

#[test]
fn dump_patches_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = asg(&["generate", "--dump-patches", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("patches/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["patches"].as_array().unwrap().len(), 4);
    assert!(dir.path().join("patches/patch_000.asgt").is_file());
}
