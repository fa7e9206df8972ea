use std::path::Path;
use std::process::{Command, Output};

use lgtm_cli::{RunManifest, RunStatus};

const BASE: &str = r#"
trainer = "lgtm"
alpha = 0.6
temperature = 1.0
eta_s = 0.1
eta_t = 0.1
max_steps = 25
batch_size = 16
seed = 1

[data]
source = "gaussian"
num_classes = 2
dim = 4
separation = 2.0
label_noise = 0.1
n_train = 96
n_val = 32

[student]
hidden = [8]

[teacher]
hidden = [16]
"#;

fn lgtm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgtm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LGTM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", BASE);
    let out = lgtm(&["run", "--config", "run.toml", "--out", "out"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out");
    for f in ["manifest.json", "metrics.csv", "influence.jsonl", "teacher.ckpt", "student.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let m = RunManifest::load(&run.join("manifest.json")).unwrap();
    assert_eq!(m.status, RunStatus::Complete);
    assert_eq!(m.steps, Some(25));
    assert_eq!(m.seeds.run, 1);
    let names: Vec<_> = m.phases.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["load-data", "init", "train", "checkpoint"]);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(&format!("# dataset_fingerprint={}\n", m.train_fingerprint)));
    let influence_lines = std::fs::read_to_string(run.join("influence.jsonl")).unwrap().lines().count();
    assert_eq!(influence_lines, 25 * 16);
    let (student, header) = lgtm_core::models::load_checkpoint(&run.join("student.ckpt")).unwrap();
    assert_eq!(header.step, 25);
    assert_eq!(student.spec.hidden, vec![8]);
}

#[test]
fn missing_alpha_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &BASE.replace("alpha = 0.6\n", ""));
    let out = lgtm(&["run", "--config", "run.toml", "--out", "out"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_value_and_unreadable_config_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &BASE.replace("eta_s = 0.1", "eta_s = -1.0"));
    let out = lgtm(&["run", "--config", "run.toml", "--out", "out"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eta_s"));
    let out = lgtm(&["run", "--config", "nope.toml", "--out", "out"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let csv = BASE.split("[data]").next().unwrap().to_string()
        + "[data]\nsource = \"csv\"\npath = \"missing.csv\"\nlabel_column = \"y\"\n";
    write(dir.path(), "run.toml", &csv);
    let out = lgtm(&["run", "--config", "run.toml", "--out", "out"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_steps_is_a_valid_run() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &BASE.replace("max_steps = 25", "max_steps = 0"));
    let out = lgtm(&["run", "--config", "run.toml", "--out", "out"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let rows: Vec<_> = metrics.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.starts_with("0,")));
    assert_eq!(std::fs::read_to_string(dir.path().join("out/influence.jsonl")).unwrap(), "");
    let m = RunManifest::load(&dir.path().join("out/manifest.json")).unwrap();
    assert_eq!(m.steps, Some(0));
}

#[test]
fn reruns_are_byte_identical_and_manifest_replays() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", BASE);
    for out in ["a", "b"] {
        assert_eq!(lgtm(&["run", "--config", "run.toml", "--out", out], dir.path()).status.code(), Some(0));
    }
    let replay = lgtm(&["run", "--config", "a/manifest.json", "--out", "c"], dir.path());
    assert_eq!(replay.status.code(), Some(0));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    for f in ["metrics.csv", "influence.jsonl", "student.ckpt", "teacher.ckpt"] {
        assert_eq!(read(&format!("a/{f}")), read(&format!("b/{f}")), "{f}");
        assert_eq!(read(&format!("a/{f}")), read(&format!("c/{f}")), "{f}");
    }
}

#[test]
fn out_dir_defaults_to_env_var() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &BASE.replace("max_steps = 25", "max_steps = 2"));
    let out = Command::new(env!("CARGO_BIN_EXE_lgtm"))
        .args(["run", "--config", "run.toml"])
        .current_dir(dir.path())
        .env("LGTM_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("from-env/manifest.json").exists());
}

#[test]
fn sweep_writes_one_manifest_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &BASE.replace("max_steps = 25", "max_steps = 10"));
    write(dir.path(), "grid.toml", "seed = [1, 2]\ntrainer = [\"vanilla\", \"lgtm\"]\n");
    let out = lgtm(
        &["sweep", "--config", "run.toml", "--grid", "grid.toml", "--jobs", "3", "--out", "sw"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sw = dir.path().join("sw");
    let manifests: Vec<_> = std::fs::read_dir(&sw)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path().join("manifest.json");
            p.exists().then_some(p)
        })
        .collect();
    assert_eq!(manifests.len(), 4);

    let mut summary = csv::Reader::from_path(sw.join("summary.csv")).unwrap();
    let rows: Vec<_> = summary.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| &r[6] == "complete"));

    let mut agg = csv::Reader::from_path(sw.join("aggregate.csv")).unwrap();
    let groups: Vec<_> = agg.records().map(|r| r.unwrap()).collect();
    assert_eq!(groups.len(), 2);
    assert!(groups.iter().all(|g| &g[4] == "2"));
}

#[test]
fn alpha_sweep_over_standard_values() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", &BASE.replace("max_steps = 25", "max_steps = 3"));
    write(dir.path(), "grid.toml", "alpha = [1.0, 0.8, 0.6, 0.4]\n");
    let out = lgtm(&["sweep", "--config", "run.toml", "--grid", "grid.toml", "--out", "sw"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let mut summary = csv::Reader::from_path(dir.path().join("sw/summary.csv")).unwrap();
    let alphas: Vec<String> = summary.records().map(|r| r.unwrap()[2].to_string()).collect();
    assert_eq!(alphas, ["1", "0.8", "0.6", "0.4"]);
}

#[test]
fn empty_or_bad_grid_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.toml", BASE);
    for (name, grid) in [("empty.toml", ""), ("list.toml", "seed = []\n"), ("key.toml", "eta_s = [0.1]\n")] {
        write(dir.path(), name, grid);
        let out = lgtm(&["sweep", "--config", "run.toml", "--grid", name, "--out", "sw"], dir.path());
        assert_eq!(out.status.code(), Some(2), "{name}");
    }
}

#[test]
fn verify_small_passes() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let out = lgtm(&["verify", "--scale", "small"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("PASS fda-mixed-derivative"));
    assert!(t0.elapsed().as_secs() < 60);
}

#[test]
fn verify_with_sabotaged_epsilon_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = lgtm(&["verify", "--scale", "small", "--epsilon", "1e3"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(1), "{stdout}");
    assert!(stdout.contains("FAIL fda-mixed-derivative"));
}

#[test]
fn bad_arguments_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lgtm(&["verify", "--scale", "huge"], dir.path()).status.code(), Some(2));
    assert_eq!(lgtm(&["verify", "--epsilon", "-1"], dir.path()).status.code(), Some(2));
    assert_eq!(lgtm(&["frobnicate"], dir.path()).status.code(), Some(2));
}
