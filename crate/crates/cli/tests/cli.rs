use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use batchtune::speedmodel::SpeedModel;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_batchtune"));
    c.env_remove("HYPERTUNE_LOG");
    c
}

fn repo(path: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(path)
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Mean throughput of each phase row in a printed report.
fn phase_rates(report: &str) -> Vec<f64> {
    report
        .lines()
        .skip_while(|l| !l.starts_with("phase"))
        .skip(1)
        .take_while(|l| !l.contains(':'))
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn plan_sizes_the_csd_cluster() {
    let o = run(&["plan", "--scenario", repo("fixtures/csd36.cfg").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let batch = |node: &str| -> u32 {
        out.lines()
            .find(|l| l.split_whitespace().next() == Some(node))
            .unwrap()
            .split_whitespace()
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(batch("host"), 180);
    for i in 1..=36 {
        assert_eq!(batch(&format!("csd{i:02}")), 15);
    }
    assert!(out.contains("steps per epoch 416"), "{out}");
}

#[test]
fn sim_three_node_reports_the_three_phases() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.csv");
    let o = run(&[
        "sim",
        "--scenario",
        repo("fixtures/three_node.cfg").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rates = phase_rates(&stdout(&o));
    assert_eq!(rates.len(), 3, "{}", stdout(&o));
    assert!((rates[0] - 93.4).abs() / 93.4 <= 0.02);
    assert!((rates[1] - 53.3).abs() / 53.3 <= 0.02);
    assert!(rates[2] >= 80.0);
    assert!(std::fs::metadata(&out).unwrap().len() > 0);
}

#[test]
fn controller_off_never_leaves_the_degraded_phase() {
    let o = run(&[
        "sim",
        "--scenario",
        repo("fixtures/three_node.cfg").to_str().unwrap(),
        "--controller",
        "off",
    ]);
    assert!(o.status.success());
    let rates = phase_rates(&stdout(&o));
    assert_eq!(rates.len(), 2);
    assert!(!stdout(&o).contains("retune"));
}

#[test]
fn trace_csv_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tiny.csv");
    let o = run(&[
        "sim",
        "--scenario",
        data("tiny.cfg").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got = std::fs::read_to_string(&out).unwrap();
    let want = std::fs::read_to_string(data("tiny_golden.csv")).unwrap();
    assert_eq!(
        got.lines().next().unwrap(),
        "time_s,epoch,step,generation,node_id,throughput,cluster_throughput,event,decision,batch_size,cpu"
    );
    assert_eq!(got, want);
}

#[test]
fn missing_scenario_exits_2_naming_the_file() {
    let o = run(&["sim", "--scenario", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.cfg"));
}

#[test]
fn invalid_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    let text = std::fs::read_to_string(data("tiny.cfg"))
        .unwrap()
        .replace("cores_taken = 2\nfactor", "cores_taken = 3\nfactor");
    std::fs::write(&bad, text).unwrap();
    let o = run(&["sim", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("degradation"), "{}", stderr(&o));
}

#[test]
fn usage_errors_are_nonzero() {
    let o = run(&["sim"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sim_trace_replays_in_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let scenario = data("tiny.cfg");
    assert!(run(&["sim", "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status
        .success());
    let o = run(&["replay", "--trace", out.to_str().unwrap(), "--scenario", scenario.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("agreement: yes"));
    assert!(stdout(&o).contains("TERMINATE"));

    // a different policy cannot reproduce the recorded decisions
    let o = run(&[
        "replay",
        "--trace",
        out.to_str().unwrap(),
        "--scenario",
        scenario.to_str().unwrap(),
        "--controller",
        "off",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("agreement: no"));
}

#[test]
fn log_level_comes_from_the_environment() {
    let o = bin()
        .env("HYPERTUNE_LOG", "info")
        .args(["sim", "--scenario", data("tiny.cfg").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stderr(&o).contains("INFO"), "{}", stderr(&o));
    let quiet = run(&["sim", "--scenario", data("tiny.cfg").to_str().unwrap()]);
    assert!(!stderr(&quiet).contains("INFO"));
}

#[test]
fn bench_writes_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.speedmodel");
    let o = run(&[
        "bench",
        "--out",
        out.to_str().unwrap(),
        "--class",
        "probe",
        "--batch-sizes",
        "4,8,16",
        "--flops",
        "200",
        "--overhead-us",
        "2000",
        "--idle-us",
        "100",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let m: SpeedModel = text.parse().unwrap();
    assert_eq!(m.node_class(), "probe");
    assert_eq!(m.points().len(), 3);
}

#[test]
fn coordinator_and_worker_processes_complete_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("live.cfg");
    std::fs::write(
        &cfg,
        "epochs = 1\n[dataset]\ntotal_samples = 4000\n[bench]\nbatch_sizes = [16, 32, 64, 128]\nsteps_per_probe = 3\n",
    )
    .unwrap();
    let trace = dir.path().join("live.csv");
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("127.0.0.1:{port}");
    let coord = bin()
        .args([
            "coord",
            "--scenario",
            cfg.to_str().unwrap(),
            "--listen",
            &endpoint,
            "--workers",
            "2",
            "--out",
            trace.to_str().unwrap(),
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let workers: Vec<_> = ["a", "b"]
        .iter()
        .map(|id| {
            bin()
                .args([
                    "work", "--connect", &endpoint, "--id", id, "--cores", "1", "--flops", "200",
                    "--overhead-us", "4000", "--idle-us", "100",
                ])
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    for w in workers {
        let o = w.wait_with_output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = coord.wait_with_output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("normal"));

    let mut session = trace.as_os_str().to_owned();
    session.push(".session");
    assert!(Path::new(&session).exists());
    let o = run(&["replay", "--trace", trace.to_str().unwrap(), "--scenario", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("agreement: yes"));
}

#[test]
fn coordinator_rejects_zero_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("live.cfg");
    std::fs::write(&cfg, "[dataset]\ntotal_samples = 100\n").unwrap();
    let o = run(&["coord", "--scenario", cfg.to_str().unwrap(), "--listen", "127.0.0.1:0", "--workers", "0"]);
    assert_eq!(o.status.code(), Some(2));
}
