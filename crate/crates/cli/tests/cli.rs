use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
    "stream": {"kind": "synthetic", "n_tasks": 2, "train_per_class": 20, "test_per_class": 10},
    "methods": [{"method": "er"}, {"method": "er", "lider": true}],
    "buffer": {"capacity": 10},
    "train": {"hidden": [16]},
    "lider": {"alpha": 0.001, "beta": 0.001}
}"#;

fn lider(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lider"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LIDER_OUT")
        .output()
        .unwrap()
}

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("exp.json");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn faa_of(summary: &Value, label: &str) -> f64 {
    summary["means"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["label"] == label)
        .unwrap()["faa_class_il"]
        .as_f64()
        .unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Every file below `dir`, relative to it.
fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn exit_codes() {
    let (dir, cfg) = setup(SMALL);
    let cfg = cfg.to_str().unwrap();
    let missing = lider(&["run", "--config", "nope.json", "--out", "o"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));

    fs::write(dir.path().join("bad.json"), r#"{"stream": {"kind": "synthetic"}, "methods": [], "extra": 1}"#).unwrap();
    assert_eq!(lider(&["run", "--config", "bad.json"], dir.path()).status.code(), Some(2));
    fs::write(dir.path().join("empty.json"), r#"{"stream": {"kind": "synthetic"}, "methods": []}"#).unwrap();
    assert_eq!(lider(&["run", "--config", "empty.json"], dir.path()).status.code(), Some(2));

    assert_eq!(lider(&["poison", "--config", cfg, "--p", "1.5", "--out", "o"], dir.path()).status.code(), Some(2));
    assert_eq!(lider(&["run", "--config", cfg, "--jobs", "0", "--out", "o"], dir.path()).status.code(), Some(2));
    // Unparseable flags are usage errors, also exit 2.
    assert_eq!(lider(&["run"], dir.path()).status.code(), Some(2));
    assert_eq!(
        lider(&["analyze", "--kind", "bogus", "--checkpoint", "x", "--config", cfg], dir.path()).status.code(),
        Some(2)
    );
    assert!(!dir.path().join("o").exists());
}

#[test]
fn one_task_run_writes_a_single_cell_matrix() {
    let cfg = SMALL.replace("\"n_tasks\": 2", "\"n_tasks\": 1");
    let (dir, path) = setup(&cfg);
    ok(&lider(&["run", "--config", path.to_str().unwrap(), "--out", "res"], dir.path()));
    let cell = dir.path().join("res/er/seed_0");
    let rows = csv_rows(&cell.join("class_il.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], vec!["task", "after_0"]);
    assert_eq!(rows[1].len(), 2);
    assert!(cell.join("task_0/model.json").is_file());
    assert!(cell.join("task_0/buffer.json").is_file());
    // Forgetting is undefined for one task and reported as null.
    let summary = json(&dir.path().join("res/summary.json"));
    assert_eq!(summary["cells"].as_array().unwrap().len(), 2);
    assert!(summary["cells"][0]["ff_class_il"].is_null());
    assert!(summary["means"][0]["ff_class_il"].is_null());
}

#[test]
fn runs_are_byte_identical_and_jobs_do_not_matter() {
    let (dir, path) = setup(SMALL);
    let cfg = path.to_str().unwrap();
    ok(&lider(&["run", "--config", cfg, "--seeds", "0,1", "--out", "a"], dir.path()));
    ok(&lider(&["run", "--config", cfg, "--seeds", "0,1", "--jobs", "4", "--out", "b"], dir.path()));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let listing = files(&a);
    assert_eq!(listing, files(&b));
    for f in &listing {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f.display());
    }
    let summary = json(&a.join("summary.json"));
    let seeds: Vec<u64> = summary["cells"].as_array().unwrap().iter().map(|c| c["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![0, 1, 0, 1]);
}

#[test]
fn single_point_sweep_matches_run() {
    let (dir, path) = setup(SMALL);
    let cfg = path.to_str().unwrap();
    ok(&lider(&["run", "--config", cfg, "--out", "run"], dir.path()));
    ok(&lider(&["sweep", "--config", cfg, "--alpha", "0.001", "--beta", "0.001", "--out", "sw"], dir.path()));
    let run = faa_of(&json(&dir.path().join("run/summary.json")), "er_lider");
    let faa = csv_rows(&dir.path().join("sw/sweep_faa_er_lider.csv"));
    assert_eq!(faa[1][1].parse::<f64>().unwrap(), run);
    let delta = csv_rows(&dir.path().join("sw/sweep_delta_er_lider.csv"));
    assert_eq!(delta[1][1].parse::<f64>().unwrap(), 0.0);
    // Unregularized methods get no sweep output.
    assert!(!dir.path().join("sw/sweep_faa_er.csv").exists());
}

#[test]
fn sweep_grid_is_mean_centered() {
    let (dir, path) = setup(SMALL);
    ok(&lider(
        &["sweep", "--config", path.to_str().unwrap(), "--alpha", "0,0.01", "--beta", "0,0.01", "--out", "sw"],
        dir.path(),
    ));
    let rows = csv_rows(&dir.path().join("sw/sweep_delta_er_lider.csv"));
    assert_eq!(rows[0], vec!["alpha\\beta", "0", "0.01"]);
    let total: f64 = rows[1..].iter().flat_map(|r| r[1..].iter().map(|v| v.parse::<f64>().unwrap())).sum();
    assert!(total.abs() < 1e-12);
    assert!(dir.path().join("sw/alpha_0.01_beta_0/er/seed_0/class_il.csv").is_file());

    // A zero-weight regularizer reproduces the unregularized baseline.
    let zero = json(&dir.path().join("sw/alpha_0_beta_0/summary.json"));
    assert_eq!(faa_of(&zero, "er_lider"), faa_of(&zero, "er"));
}

#[test]
fn poison_zero_matches_run() {
    let (dir, path) = setup(SMALL);
    let cfg = path.to_str().unwrap();
    ok(&lider(&["run", "--config", cfg, "--out", "run"], dir.path()));
    ok(&lider(&["poison", "--config", cfg, "--p", "0", "--out", "p0"], dir.path()));
    let run = json(&dir.path().join("run/summary.json"));
    let rows = csv_rows(&dir.path().join("p0/poison.csv"));
    assert_eq!(rows[0], vec!["p", "er", "er_lider"]);
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), faa_of(&run, "er"));
    assert_eq!(rows[1][2].parse::<f64>().unwrap(), faa_of(&run, "er_lider"));

    ok(&lider(&["poison", "--config", cfg, "--p", "0,0.5,1", "--out", "p3"], dir.path()));
    let rows = csv_rows(&dir.path().join("p3/poison.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3][0], "1");
}

#[test]
fn analyses_write_their_files() {
    let (dir, path) = setup(SMALL);
    let cfg = path.to_str().unwrap();
    ok(&lider(&["run", "--config", cfg, "--out", "run"], dir.path()));
    let ckpt = dir.path().join("run/er/seed_0/task_1/model.json");
    let ckpt = ckpt.to_str().unwrap();
    let before = fs::read(ckpt).unwrap();
    for (kind, file, lines) in [
        ("surface", "surface.csv", 1 + 21 * 21),
        ("guess", "roc.csv", 0),
        ("perturb", "perturb.csv", 6),
        ("lipschitz", "lipschitz.csv", 4),
    ] {
        let out = format!("an_{}", kind);
        ok(&lider(&["analyze", "--kind", kind, "--checkpoint", ckpt, "--config", cfg, "--out", &out], dir.path()));
        let text = fs::read_to_string(dir.path().join(&out).join(file)).unwrap();
        if lines > 0 {
            assert_eq!(text.lines().count(), lines, "{}", kind);
        }
    }
    let auc = json(&dir.path().join("an_guess/guess.json"))["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(fs::read(ckpt).unwrap(), before);

    // Guessing needs the buffer saved beside the checkpoint.
    let lone = dir.path().join("lone.json");
    fs::copy(ckpt, &lone).unwrap();
    let out = lider(
        &["analyze", "--kind", "guess", "--checkpoint", lone.to_str().unwrap(), "--config", cfg, "--out", "x"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn writes_stay_under_the_output_root() {
    let (dir, path) = setup(SMALL);
    let cfg = path.to_str().unwrap();
    ok(&lider(&["run", "--config", cfg, "--out", "res"], dir.path()));
    ok(&lider(&["poison", "--config", cfg, "--p", "0.5", "--out", "res2"], dir.path()));
    let mut top: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, vec!["exp.json", "res", "res2"]);
}

#[test]
fn output_root_falls_back_to_config_then_environment() {
    let with_out = SMALL.replacen('{', "{\"out_dir\": \"from_cfg\",", 1);
    let (dir, path) = setup(&with_out);
    let work = dir.path().join("work");
    fs::create_dir(&work).unwrap();
    ok(&lider(&["run", "--config", path.to_str().unwrap()], &work));
    // Relative to the config file, not the working directory.
    assert!(dir.path().join("from_cfg/summary.json").is_file());

    let (dir, path) = setup(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_lider"))
        .args(["run", "--config", path.to_str().unwrap()])
        .current_dir(dir.path())
        .env("LIDER_OUT", dir.path().join("env_out"))
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("env_out/summary.json").is_file());
}
