use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn erc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erc")).args(args).current_dir(cwd).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) {
    let text = format!(
        "# small run\noutput_dir = out\ntrain.steps = 6\ntrain.prompt_batch = 8\ntrain.mini_batch = 2\n{extra}"
    );
    fs::write(dir.join("c.txt"), text).unwrap();
}

#[test]
fn run_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "dump_tokens = true\nobjective.erc_enabled = true\n");
    let out = dir.path().join("out");

    let first = erc(&["run", "c.txt", "--quiet"], dir.path());
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(first.stdout.is_empty() && first.stderr.is_empty());
    let files = ["config.txt", "metrics.jsonl", "tokens.jsonl", "policy.txt", "summary.json"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    assert!(!before[1].is_empty() && !before[2].is_empty());

    assert_eq!(erc(&["run", "c.txt", "--quiet"], dir.path()).status.code(), Some(0));
    for (f, b) in files.iter().zip(&before) {
        assert_eq!(&fs::read(out.join(f)).unwrap(), b, "{f} differs between runs");
    }

    // The snapshot reproduces the run by itself.
    fs::copy(out.join("config.txt"), dir.path().join("snap.txt")).unwrap();
    assert_eq!(erc(&["run", "snap.txt", "--quiet"], dir.path()).status.code(), Some(0));
    assert_eq!(fs::read(out.join("metrics.jsonl")).unwrap(), before[1]);

    let seeded = erc(&["run", "c.txt", "--quiet", "--seed", "7"], dir.path());
    assert_eq!(seeded.status.code(), Some(0));
    assert_ne!(fs::read(out.join("metrics.jsonl")).unwrap(), before[1]);
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("train.seed = 7\n"));
}

#[test]
fn config_errors_exit_one_before_any_compute() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.txt"), "output_dir = out\ntrain.prompt_batch = 8\ntrain.mini_batch = 3\n").unwrap();
    let o = erc(&["run", "bad.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("line 3") && msg.contains("divide"), "{msg}");

    write_config(dir.path(), "objective.variant = sgd\n");
    let o = erc(&["run", "c.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 6"), "{}", String::from_utf8_lossy(&o.stderr));

    write_config(dir.path(), "");
    let o = erc(&["run", "c.txt", "--override", "train.mini_batch=5"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(erc(&["run", "missing.txt"], dir.path()).status.code(), Some(1));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), "file").unwrap();
    write_config(dir.path(), "");
    let o = erc(&["run", "c.txt", "--override", "output_dir=blocker/out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_dir_per_value_and_a_comparison() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "objective.variant = ppo-penalty\n");
    let o = erc(&["sweep", "c.txt", "--axis", "beta_kl", "--values", "0,0.01,0.1", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for v in ["0.0", "0.01", "0.1"] {
        assert!(out.join(format!("beta_kl={v}")).join("metrics.jsonl").exists());
    }
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("axis,value,initial_reward,final_reward,entropy_std_final_half"));

    let o = erc(&["sweep", "c.txt", "--axis", "alpha_entropy", "--values"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    write_config(dir.path(), "");
    let o = erc(&["sweep", "c.txt", "--axis", "beta_kl", "--values", "0.1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = erc(&["sweep", "c.txt", "--axis", "erc_bounds", "--values", "0.05:0.05,0.1", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("erc_bounds=0.1:0.1").join("config.txt").exists());
}

#[test]
fn analyze_reads_only_the_dump_dir() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "dump_tokens = true\nobjective.erc_enabled = true\n");
    assert_eq!(erc(&["run", "c.txt", "--quiet"], dir.path()).status.code(), Some(0));
    let out = dir.path().join("out");

    let o = erc(&["analyze", "out", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let analysis = out.join("analysis");
    for f in ["entropy-ratio", "trust-region", "clip-ratio", "entropy-profile", "token-frequency"] {
        let csv = fs::read_to_string(analysis.join(format!("{f}.csv"))).unwrap();
        assert!(csv.lines().count() > 1, "{f} is empty");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(analysis.join("manifest.json")).unwrap()).unwrap();
    let tokens = fs::read_to_string(out.join("tokens.jsonl")).unwrap().lines().count();
    assert_eq!(manifest["record_count"], tokens);
    assert_eq!(manifest["seed"], 0);
    assert!(manifest["subsample_seed"].is_null());

    let o = erc(&["analyze", "out", "--analyses", "clip-ratio", "--subsample", "10", "--subsample-seed", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(analysis.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["record_count"], 10);
    assert_eq!(manifest["subsample_seed"], 3);

    assert_eq!(erc(&["analyze", "out", "--analyses"], dir.path()).status.code(), Some(1));
    fs::remove_file(out.join("tokens.jsonl")).unwrap();
    assert_eq!(erc(&["analyze", "out"], dir.path()).status.code(), Some(2));
    assert_eq!(erc(&["analyze", "nowhere"], dir.path()).status.code(), Some(2));
}
