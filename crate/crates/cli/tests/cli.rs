use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gradcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradcomp"))
        .args(args)
        .env_remove("GRADCOMP_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_QUADRATIC: &str = r#"
workers = 2
iterations = 50
log_every = 10

[task]
kind = "quadratic"
dim = 8
noise_sigma = 0.5

[step_size]
rule = "constant"
eta = 0.05

[[scheme]]
name = "qsgd-mn"
bits = 2
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("does-not-exist.toml");
    let o = gradcomp(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does-not-exist.toml"), "{}", stderr(&o));
}

#[test]
fn malformed_config_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "workers = 2\niterations = \"lots\"\n");
    let o = gradcomp(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_exits_two() {
    assert_eq!(gradcomp(&["train", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(gradcomp(&[]).status.code(), Some(2));
}

#[test]
fn five_repeats_write_five_runs_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_QUADRATIC);
    let out = tmp.path().join("out");
    let o = gradcomp(&["train", "--config", &cfg, "--repeats", "5", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = csv_files(&out);
    assert_eq!(files.len(), 6, "{files:?}");
    for seed in 0..5 {
        assert!(files.contains(&format!("qsgd-mn-2-seed{seed}.csv")), "{files:?}");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert!(lines.next().unwrap().starts_with("scheme,runs,diverged,seeds,final_loss_mean"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..4], &["qsgd-mn-2", "5", "0", "0 1 2 3 4"]);
    // 32-bit header plus 8 coordinates at 2 bits.
    assert_eq!(row[10], "48");
}

#[test]
fn bits_flag_maps_to_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_QUADRATIC);
    let out = tmp.path().join("out");
    let o = gradcomp(&[
        "train", "--config", &cfg, "--scheme", "qsgd-mn", "--bits", "4", "--seeds", "7,9", "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_files(&out), ["qsgd-mn-4-seed7.csv", "qsgd-mn-4-seed9.csv", "summary.csv"]);
    // s = 8 needs 3 magnitude bits plus a sign.
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().contains(&format!(",{},", 32 + 8 * 4)));
}

#[test]
fn run_csv_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_QUADRATIC);
    let read = |sub: &str| {
        let out = tmp.path().join(sub);
        let o = gradcomp(&["train", "-c", &cfg, "--repeats", "1", "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success());
        fs::read(out.join("qsgd-mn-2-seed0.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn invalid_scheme_in_config_is_rejected_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL_QUADRATIC.replace("bits = 2", "bits = 40"));
    let out = tmp.path().join("out");
    let o = gradcomp(&["train", "-c", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn divergence_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL_QUADRATIC.replace("eta = 0.05", "eta = 5.0").replace("50", "2000"));
    let out = tmp.path().join("out");
    let o = gradcomp(&["train", "-c", &cfg, "--repeats", "1", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("qsgd-mn-2,1,1,"));
}

#[test]
fn out_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_gradcomp"))
        .args(["perf-model", "--profile", "resnet50-like", "--workers", "4,8"])
        .env("GRADCOMP_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("perf-resnet50-like.csv").exists());
}

#[test]
fn perf_model_writes_one_csv_per_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gradcomp(&["perf-model", "--out-dir", tmp.path().to_str().unwrap(), "--workers", "4,8,16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_files(tmp.path()), ["perf-resnet50-like.csv", "perf-vgg16-like.csv"]);
    let text = fs::read_to_string(tmp.path().join("perf-vgg16-like.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("workers,scheme,throughput"));
    // 3 worker counts times 8 default schemes.
    assert_eq!(lines.count(), 24);
    assert!(stdout(&o).contains("breakeven"));
}

#[test]
fn perf_model_rejects_unfillable_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gradcomp(&["perf-model", "--out-dir", tmp.path().to_str().unwrap(), "--workers", "6"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn perf_model_accepts_profile_and_cluster_files() {
    let tmp = tempfile::tempdir().unwrap();
    let profile = tmp.path().join("tiny.toml");
    fs::write(
        &profile,
        "name = \"tiny\"\nn_params = 1000\ncompute_sec_per_batch = 0.01\nencode_sec_per_coord = 0.0\n\
         decode_sec_per_coord = 0.0\nbatch_size = 32\n",
    )
    .unwrap();
    let cluster = tmp.path().join("cluster.toml");
    fs::write(
        &cluster,
        "nodes = 2\ngpus_per_node = 2\n[intra]\nbandwidth_bytes_per_sec = 1e10\nlatency_sec_per_step = 1e-6\n\
         [inter]\nbandwidth_bytes_per_sec = 1e8\nlatency_sec_per_step = 1e-5\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = gradcomp(&[
        "perf-model", "--profile", profile.to_str().unwrap(), "--cluster", cluster.to_str().unwrap(), "--workers",
        "2,4", "--scheme", "qsgd-mn:4", "--out-dir", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("perf-tiny.csv").exists());
}

#[test]
fn verify_exit_code_tracks_the_result() {
    let o = gradcomp(&[
        "verify", "--suite", "packing", "--suite", "commutativity", "--packing-trials", "500",
        "--commutativity-cases", "20",
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all suites passed"));
    assert_eq!(gradcomp(&["verify", "--suite", "nonsense"]).status.code(), Some(2));
    assert_eq!(gradcomp(&["verify", "--points", "10"]).status.code(), Some(2));
}

#[test]
fn verify_statistics_at_small_sizes() {
    let o = gradcomp(&["verify", "--suite", "unbiasedness", "--suite", "variance", "--samples", "2000", "--points", "10:2,100:4"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn explain_schemes_lists_the_mapping() {
    let o = gradcomp(&["--explain-schemes"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["allreduce-sgd", "qsgd-mn", "qsgd-mn-ts", "grandk-mn", "grandk-mn-ts"] {
        assert!(text.contains(name), "{name}");
    }
    assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["4", "8", "4"]), "{text}");
}

#[test]
fn bench_compress_reports_payload_size() {
    let o = gradcomp(&["bench-compress", "-n", "1000", "--scheme", "qsgd-mn:2", "--iterations", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("2032 bits charged"), "{}", stdout(&o));
    assert_eq!(gradcomp(&["bench-compress", "-n", "0"]).status.code(), Some(2));
}
