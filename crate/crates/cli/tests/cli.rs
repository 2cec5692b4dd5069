use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pyramid-det"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, count: &str, seed: &str) {
    let o = run(&["gen-scenes", "--count", count, "--seed", seed, "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_refine_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("scenes");
    gen(&scenes, "2", "3");
    assert!(scenes.join("velodyne/000001.bin").exists());
    assert!(scenes.join("label_2/000001.txt").exists());

    let out = tmp.path().join("run");
    let o = run(&["pipeline", p(&scenes), "--seed", "3", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.starts_with("# class bucket AP APH"));
    assert!(report.lines().any(|l| l.starts_with("Car all ")));

    // Evaluating the written detections reproduces the pipeline's report.
    let o = run(&["eval", p(&scenes), "--pred", p(&out.join("pred"))]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), report);
}

#[test]
fn pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("s");
    gen(&scenes, "2", "8");
    let a = run(&["pipeline", p(&scenes), "--seed", "1", "--out", p(&tmp.path().join("a"))]);
    let b = run(&["pipeline", p(&scenes), "--seed", "1", "--out", p(&tmp.path().join("b"))]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    for i in 0..2 {
        let name = format!("pred/{i:06}.txt");
        assert_eq!(
            fs::read(tmp.path().join("a").join(&name)).unwrap(),
            fs::read(tmp.path().join("b").join(&name)).unwrap()
        );
    }
}

#[test]
fn trained_weights_feed_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("model");
    let o = run(&["train-toy", "--steps", "3", "--scenes", "1", "--seed", "2", "--out", p(&model)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let losses = fs::read_to_string(model.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 4);

    let scenes = tmp.path().join("s");
    gen(&scenes, "1", "2");
    let params = model.join("model.params");
    let o = run(&["pipeline", p(&scenes), "--model", p(&params), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["fuse", p(&scenes), "--model", p(&params)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("# fused dim"));
}

#[test]
fn inspection_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("s");
    gen(&scenes, "1", "5");
    let o = run(&["encode", p(&scenes)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("voxel ")).count(), 4);
    assert!(text.lines().any(|l| l.starts_with("bev ")));

    let stats = tmp.path().join("pool.txt");
    let o = run(&["pool", p(&scenes), "--out", p(&stats)]);
    assert_eq!(code(&o), 0);
    let rows: Vec<String> = fs::read_to_string(stats).unwrap().lines().skip(1).map(String::from).collect();
    assert!(!rows.is_empty());
    for r in rows {
        let f: Vec<&str> = r.split_whitespace().collect();
        let empty: f64 = f[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&empty));
    }
}

#[test]
fn config_file_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 9\n[scene]\nobject_count = [1, 1]\n").unwrap();
    let scenes = tmp.path().join("s");
    let o = run(&["gen-scenes", "--config", p(&cfg), "--count", "2", "--out", p(&scenes)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..2 {
        let labels = fs::read_to_string(scenes.join(format!("label_2/{i:06}.txt"))).unwrap();
        assert_eq!(labels.lines().count(), 1);
    }
}

#[test]
fn checks_pass() {
    let o = run(&["gradcheck", "heads", "--coords", "100"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("PASS heads"));
    let o = run(&["selftest", "--gradient-coords", "40"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();

    // Validation errors.
    assert_eq!(code(&run(&["gradcheck", "nope"])), 1);
    assert_eq!(code(&run(&["gen-scenes"])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[fusion]\ndepth = 0\n").unwrap();
    assert_eq!(code(&run(&["selftest", "--config", p(&bad)])), 1);
    fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(code(&run(&["selftest", "--config", p(&bad)])), 1);

    // Runtime errors.
    assert_eq!(code(&run(&["encode", p(&tmp.path().join("missing"))])), 2);

    // Acceptance failure: finite differences do not resolve 1e-9.
    let o = run(&["gradcheck", "heads", "--tol", "1e-9", "--coords", "500"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("FAIL heads"));

    assert_eq!(code(&run(&["--help"])), 0);
}
