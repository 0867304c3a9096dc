use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn kmn(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmn"))
        .args(args)
        .env("KMN_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn manifest(dir: &Path) -> toml::Table {
    toml::from_str(&fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap()
}

fn generate(root: &Path, name: &str, task: &str, n: &str, seed: &str) -> PathBuf {
    let out = root.join(name);
    ok(&kmn(&["generate", "--task", task, "--n", n, "--seed", seed, "--out", out.to_str().unwrap()], root));
    out.join("dataset.kmnd")
}

#[test]
fn generate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = generate(tmp.path(), "a", "box_a", "100", "7");
    let b = generate(tmp.path(), "b", "box_a", "100", "7");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m = manifest(a.parent().unwrap());
    assert_eq!(m["status"].as_str(), Some("complete"));
    assert_eq!(m["notes"]["records"].as_str(), Some("100"));
    assert_eq!(m["artifacts"]["dataset"].as_str(), Some("dataset.kmnd"));

    // The manifest doubles as a config that regenerates the same file.
    let again = tmp.path().join("c");
    let cfg = a.parent().unwrap().join("manifest.toml");
    ok(&kmn(&["generate", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()], tmp.path()));
    assert_eq!(fs::read(&a).unwrap(), fs::read(again.join("dataset.kmnd")).unwrap());
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&kmn(&["generate", "--task", "box_b", "--n", "5", "--seed", "3"], tmp.path()));
    assert!(tmp.path().join("generate-box_b-3/dataset.kmnd").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kmn(&["generate", "--task", "unknown", "--n", "5"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown"));

    let out = kmn(&["generate", "--n", "5"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let out = kmn(&["generate", "--task", "box_a", "--config", bad.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate(tmp.path(), "d", "box_a", "5", "1");
    let dir = ds.parent().unwrap().to_str().unwrap();
    let out = kmn(&["generate", "--task", "box_a", "--n", "5", "--out", dir], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    ok(&kmn(&["generate", "--task", "box_a", "--n", "6", "--out", dir, "--force"], tmp.path()));
    assert_eq!(manifest(ds.parent().unwrap())["notes"]["records"].as_str(), Some("6"));
}

#[test]
fn baseline_trains_on_a_single_record() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate(tmp.path(), "d", "box_a", "1", "1");
    let out = tmp.path().join("t");
    ok(&kmn(
        &["train", "--dataset", ds.to_str().unwrap(), "--mode", "baseline", "--epochs", "2", "--out", out.to_str().unwrap()],
        tmp.path(),
    ));
    let log = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(out.join("weights.kmnw").exists());
    assert!(!out.join("baseline.kmnw").exists());
    assert_eq!(manifest(&out)["config"]["train"]["rounds"].as_integer(), Some(0));
}

#[test]
fn kmn_training_then_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate(tmp.path(), "d", "box_b", "40", "2");
    let run = tmp.path().join("t");
    ok(&kmn(
        &[
            "train", "--dataset", ds.to_str().unwrap(), "--epochs", "2", "--retrain-epochs", "1",
            "--rounds", "3", "--n-aug", "8", "--out", run.to_str().unwrap(),
        ],
        tmp.path(),
    ));
    let m = manifest(&run);
    assert_eq!(m["notes"]["n_pred_sequence"].as_str(), Some("1,2,3"));
    assert_eq!(m["notes"]["mode"].as_str(), Some("kmn"));
    for artifact in m["artifacts"].as_table().unwrap().values() {
        assert!(run.join(artifact.as_str().unwrap()).exists(), "{artifact}");
    }
    let rounds = fs::read_to_string(run.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 5);

    let eval = tmp.path().join("e");
    let out = kmn(
        &[
            "eval", "--dataset", ds.to_str().unwrap(),
            "--weights", run.join("weights.kmnw").to_str().unwrap(),
            "--baseline", run.join("baseline.kmnw").to_str().unwrap(),
            "--icp", "--gallery", "2", "--out", eval.to_str().unwrap(),
        ],
        tmp.path(),
    );
    ok(&out);
    let csv = fs::read_to_string(eval.join("mae.csv")).unwrap();
    for method in ["KMN", "Baseline", "ICP"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{method},test,"))), "{method}\n{csv}");
    }
    assert!(eval.join("gallery/best_1_input.pgm").exists());
    assert!(eval.join("report.md").exists());
    assert_eq!(manifest(&eval)["status"].as_str(), Some("complete"));
}

#[test]
fn eval_refuses_mismatched_weights_and_icp_on_scaled_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let a = generate(tmp.path(), "a", "box_a", "10", "1");
    let c = generate(tmp.path(), "c", "box_c", "10", "1");
    for (ds, name) in [(&a, "wa"), (&c, "wc")] {
        ok(&kmn(
            &["train", "--dataset", ds.to_str().unwrap(), "--mode", "baseline", "--epochs", "1",
              "--out", tmp.path().join(name).to_str().unwrap()],
            tmp.path(),
        ));
    }
    let wa = tmp.path().join("wa/weights.kmnw");
    let wc = tmp.path().join("wc/weights.kmnw");
    let out = kmn(
        &["eval", "--dataset", c.to_str().unwrap(), "--weights", wa.to_str().unwrap(), "--baseline", wc.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("box_a"));

    let out = kmn(
        &["eval", "--dataset", c.to_str().unwrap(), "--weights", wc.to_str().unwrap(), "--baseline", wc.to_str().unwrap(), "--icp"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scale"));

    // An untrained network still evaluates.
    ok(&kmn(
        &["eval", "--dataset", c.to_str().unwrap(), "--weights", wc.to_str().unwrap(), "--baseline", wc.to_str().unwrap(),
          "--out", tmp.path().join("e").to_str().unwrap()],
        tmp.path(),
    ));
}

#[test]
fn render_samples_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, count: &str| {
        let out = tmp.path().join(name);
        ok(&kmn(&["render-samples", "--task", "door", "--count", count, "--seed", "5", "--out", out.to_str().unwrap()], tmp.path()));
        out.join("images")
    };
    let empty = run("zero", "0");
    assert_eq!(fs::read_dir(&empty).unwrap().count(), 0);
    let a = run("a", "4");
    let b = run("b", "4");
    for i in 0..4 {
        let pgm = format!("sample_{i:04}.pgm");
        assert_eq!(fs::read(a.join(&pgm)).unwrap(), fs::read(b.join(&pgm)).unwrap());
        let label = fs::read_to_string(a.join(format!("sample_{i:04}.txt"))).unwrap();
        let frac: f64 = label
            .lines()
            .find_map(|l| l.strip_prefix("occupied_fraction "))
            .unwrap()
            .parse()
            .unwrap();
        assert!(frac > 0.0 && frac < 1.0, "{frac}");
        assert_eq!(label.lines().count(), 8);
    }
}

#[test]
fn interrupted_training_leaves_a_valid_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate(tmp.path(), "d", "box_a", "40", "4");
    let run = tmp.path().join("t");
    let mut child = Command::new(env!("CARGO_BIN_EXE_kmn"))
        .args([
            "train", "--dataset", ds.to_str().unwrap(), "--epochs", "1", "--retrain-epochs", "100000",
            "--rounds", "3", "--n-aug", "8", "--out", run.to_str().unwrap(),
        ])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(120);
    let m = loop {
        assert!(Instant::now() < deadline, "initial round never finished");
        assert!(child.try_wait().unwrap().is_none(), "training exited early");
        if let Ok(text) = fs::read_to_string(run.join("manifest.toml")) {
            let m: toml::Table = toml::from_str(&text).expect("manifest is always complete TOML");
            if m["artifacts"].as_table().unwrap().contains_key("round_0") {
                break m;
            }
        }
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    let after: toml::Table = toml::from_str(&fs::read_to_string(run.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(after["status"].as_str(), Some("running"));
    assert_eq!(m["command"].as_str(), Some("train"));
    for artifact in after["artifacts"].as_table().unwrap().values() {
        let path = run.join(artifact.as_str().unwrap());
        assert!(path.exists(), "{}", path.display());
    }
    assert!(after["timings"].as_table().unwrap().contains_key("round_0"));
    assert!(!run.join("weights.kmnw").exists());
}
