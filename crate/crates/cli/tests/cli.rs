use std::fs;
use std::path::Path;
use std::process::Command;

const QUICK: &str = r#"
name = "quick"
kind = "compare_baselines"
seed = 9
lab = "a"
prior = "a"
eval_specs = ["a", "b1"]
controllers = ["random", "scan", "expert"]

[specs]
a = "preset:spec_a"
b1 = "preset:spec_b1"

[eval]
episodes = 6
t_steps = 40
"#;

fn specmon(args: &[&str], out_env: Option<&Path>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_specmon"));
    cmd.args(args).env("RUST_LOG", "error");
    match out_env {
        Some(p) => cmd.env("SPECMON_OUT", p),
        None => cmd.env_remove("SPECMON_OUT"),
    };
    cmd.output().unwrap()
}

#[test]
fn compare_baselines_writes_curves_per_spec() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.toml");
    fs::write(&config, QUICK).unwrap();
    let out = dir.path().join("out");
    let run = specmon(&["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for file in ["curves_a.csv", "curves_b1.csv", "scores.csv", "episodes.csv", "manifest.json"] {
        assert!(out.join(file).exists(), "{file}");
    }
    let curves = fs::read_to_string(out.join("curves_a.csv")).unwrap();
    assert_eq!(curves.lines().count(), 41);
    assert!(curves.lines().next().unwrap().starts_with("t,random_iou_mean"));
}

#[test]
fn rerun_is_byte_identical_and_env_overrides_out() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.toml");
    fs::write(&config, QUICK).unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let cfg = config.to_str().unwrap();
    assert!(specmon(&["--config", cfg, "--out", first.to_str().unwrap(), "--threads", "1"], None).status.success());
    assert!(specmon(&["--config", cfg, "--out", "ignored", "--threads", "3"], Some(&second)).status.success());
    assert!(!Path::new("ignored").exists());
    for file in ["curves_a.csv", "curves_b1.csv", "scores.csv", "episodes.csv", "manifest.json"] {
        assert_eq!(fs::read(first.join(file)).unwrap(), fs::read(second.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn log_episodes_writes_logs_and_renders() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.toml");
    fs::write(&config, QUICK).unwrap();
    let out = dir.path().join("out");
    let run = specmon(
        &["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--log-episodes"],
        None,
    );
    assert!(run.status.success());
    assert!(out.join("renders/expert_a.csv").exists());
    assert_eq!(fs::read_dir(out.join("logs")).unwrap().count(), 3 * 2 * 6);
}

#[test]
fn seed_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.toml");
    fs::write(&config, QUICK).unwrap();
    let out = dir.path().join("out");
    let cfg = config.to_str().unwrap();
    assert!(specmon(&["--config", cfg, "--out", out.to_str().unwrap(), "--seed-override", "77"], None).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 77);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "kind = \"evaluate\"\n[specs]\nlab = \"preset:spec_a\"\n").unwrap();
    let run = specmon(&["--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).contains("seed"));

    let missing = dir.path().join("missing.toml");
    let run = specmon(&["--config", missing.to_str().unwrap()], None);
    assert_eq!(run.status.code(), Some(1));

    fs::write(&config, "kind = \"evaluate\"\nseed = 1\n[specs]\nlab = \"nope.spec\"\n").unwrap();
    let run = specmon(&["--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn shipped_configs_parse_and_resolve() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = specmon::experiment::ExperimentConfig::load(&path).unwrap();
            cfg.resolve(&configs).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
