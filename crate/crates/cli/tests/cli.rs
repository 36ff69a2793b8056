use std::path::Path;
use std::process::{Command, Output};

fn tinyde(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinyde"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TINYDE_DATA_DIR")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_config_keys_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "[ood]\nmembers = [1, 5]\nsigma = 2.0\n",
    );
    let out = tinyde(&["ood", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma"));
    assert!(
        !dir.path().join("results").exists(),
        "nothing may run before validation"
    );
}

#[test]
fn task_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "task = \"cim-study\"\n");
    assert_eq!(
        tinyde(&["cost", "--config", &cfg], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_dataset_names_the_expected_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = tinyde(&["reproduce-uci", "--data-dir", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere/boston-housing.csv"), "{err}");
}

#[test]
fn environment_supplies_the_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tinyde"))
        .args(["cim"])
        .current_dir(dir.path())
        .env("TINYDE_DATA_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("from-env/boston-housing.csv"));
}

#[test]
fn malformed_csv_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("d")).unwrap();
    write(
        &dir.path().join("d"),
        "boston-housing.csv",
        "a,b\n1,2\n3,x\n",
    );
    let out = tinyde(&["cim", "--data-dir", "d"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "blocker", "");
    let out = tinyde(&["cost", "--out", "blocker/sub"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn cost_run_writes_results_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "[cost]\nspec = \"uci-mlp\"\nmembers = [1, 5]\n",
    );
    let out = tinyde(
        &["cost", "--config", &cfg, "--out", "res", "--seed", "3"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("res/cost_curves.csv")).unwrap();
    // one header plus seven methods at two sizes
    assert_eq!(csv.lines().count(), 15);
    let tiny = csv.lines().find(|l| l.starts_with("tiny_de,5,")).unwrap();
    assert!(tiny.ends_with(",1"), "{tiny}");
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("res/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["task"], "cost-census");
    assert_eq!(manifest["outputs"][0], "cost_curves.csv");
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = tinyde_cli::ExperimentConfig::load(&path).unwrap();
        cfg.validate(cfg.task.expect("shipped configs name their task")).unwrap();
        seen += 1;
    }
    assert_eq!(seen, 4);
}
