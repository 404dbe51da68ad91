use std::path::Path;
use std::process::{Command, Output};

fn flotapinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flotapinn"))
        .args(args)
        .env("FLOTAPINN_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(flotapinn(&["bogus"]).status.code(), Some(2));
    assert_eq!(flotapinn(&["simulate", "--frobnicate", "-o", "x"]).status.code(), Some(2));
    assert_eq!(flotapinn(&["simulate", "--preset", "huge", "-o", "x"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = flotapinn(&["preprocess", "--in", p(&dir.path().join("missing.csv")), "-o", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn simulate_preprocess_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let pre = dir.path().join("pre");
    let run = dir.path().join("run");
    let out = flotapinn(&["simulate", "--preset", "desk", "--seed", "7", "-o", p(&sim)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train.csv", "val.csv", "test.csv", "sim_truth.json"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    let out = flotapinn(&["preprocess", "--in", p(&sim.join("train.csv")), "-o", p(&pre)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("removed"));
    assert!(pre.join("train_stats.csv").exists());
    let out = flotapinn(&["preprocess", "--in", p(&sim), "-o", p(&pre)]);
    assert!(out.status.success());
    let out = flotapinn(&["train", "--kind", "tree", "--in", p(&pre), "-o", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint_tree.json");
    let out = flotapinn(&[
        "evaluate",
        "--in",
        p(&ckpt),
        "--data",
        p(&pre.join("test.csv")),
        "-o",
        p(&run),
    ]);
    assert!(out.status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["c_f"]["mse"].as_f64().unwrap().is_finite());
}

#[test]
fn benchmark_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        let sim = root.join("sim");
        let pre = root.join("pre");
        let bench = root.join("bench");
        assert!(flotapinn(&["simulate", "--seed", "11", "-o", p(&sim)]).status.success());
        assert!(flotapinn(&["preprocess", "--in", p(&sim), "-o", p(&pre)]).status.success());
        let out = flotapinn(&["benchmark", "--preset", "desk", "--seed", "11", "--in", p(&pre), "-o", p(&bench)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(flotapinn(&["report", "--in", p(&bench), "-o", p(&bench)]).status.success());
        let table = std::fs::read_to_string(bench.join("benchmark.csv")).unwrap();
        assert_eq!(table.lines().count(), 8);
        let mut files: Vec<_> = walk(&root).into_iter().map(|f| f.strip_prefix(&root).unwrap().to_path_buf()).collect();
        files.sort();
        trees.push((root, files));
    }
    let (ra, fa) = &trees[0];
    let (rb, fb) = &trees[1];
    assert_eq!(fa, fb);
    for f in fa {
        assert_eq!(std::fs::read(ra.join(f)).unwrap(), std::fs::read(rb.join(f)).unwrap(), "{}", f.display());
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}
