use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::Duration;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_syncrec"));
    c.env_remove("SYNCREC_HUB").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn check_golden(name: &str, args: &[&str]) {
    let out = run(args);
    assert_eq!(out.status.code(), Some(0), "{name}");
    let got = text(&out.stdout);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.txt"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, &got).unwrap();
    }
    let want = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden {}", path.display()));
    assert_eq!(got, want, "help text of {name} changed");
}

#[test]
fn help_text_is_pinned() {
    check_golden("root", &["--help"]);
    check_golden("hub_serve", &["hub", "serve", "--help"]);
    check_golden("sim", &["sim", "--help"]);
    check_golden("experiment_case1", &["experiment", "case1", "--help"]);
    check_golden("experiment_case2", &["experiment", "case2", "--help"]);
    check_golden("epoch", &["epoch", "--help"]);
    check_golden("inspect", &["inspect", "--help"]);
    check_golden("marker_inject", &["marker", "inject", "--help"]);
}

#[test]
fn task_out_of_range_is_a_usage_error() {
    let out = run(&["experiment", "case1", "--task", "5", "--subject", "S1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("task must be 1..4"));
}

#[test]
fn unknown_flags_and_subcommands_are_rejected() {
    assert_eq!(run(&["inspect", "--in", "x.srec", "--verbose"]).status.code(), Some(1));
    assert_eq!(run(&["replay"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.srec");
    let out = run(&["inspect", "--in", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let junk = dir.path().join("junk.srec");
    fs::write(&junk, [0u8; 16]).unwrap();
    let out = run(&["inspect", "--in", junk.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("not-srec") || text(&out.stderr).contains("not an .srec"), "{}", text(&out.stderr));
    // nothing listens on this port
    let port = free_port();
    let out = run(&["marker", "inject", "--hub", &format!("127.0.0.1:{port}"), "--label", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn case1_then_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("c1.srec");
    let out = run(&["experiment", "case1", "--task", "1", "--subject", "S1", "--out", rec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let jsonl = dir.path().join("e.jsonl");
    let out = run(&[
        "epoch", "--in", rec.to_str().unwrap(), "--marker", "Task 1 start", "--pre", "1", "--post", "5", "--out",
        jsonl.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let body = fs::read_to_string(&jsonl).unwrap();
    assert_eq!(body.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(body.lines().next().unwrap()).unwrap();
    assert_eq!(v["label"], "Task 1 start");

    let globbed = dir.path().join("g.jsonl");
    let out = run(&[
        "epoch", "--in", rec.to_str().unwrap(), "--marker", "Robot appr*", "--pre", "0.5", "--post", "1", "--out",
        globbed.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&globbed).unwrap().lines().count(), 8);
}

#[test]
fn case2_crossing_inspect_shows_state_changes_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("c2.srec");
    let cfg = configs().join("case2_crossing.json");
    let out = run(&[
        "experiment", "case2", "--subject", "S2", "--config", cfg.to_str().unwrap(), "--out", rec.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let a = run(&["inspect", "--in", rec.to_str().unwrap()]);
    let b = run(&["inspect", "--in", rec.to_str().unwrap()]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let report = text(&a.stdout);
    assert!(report.contains("Robot state change"));
    assert!(report.contains("Robot is stopping"));
    assert!(report.contains("footer counts match"));
}

#[test]
fn live_hub_records_simulators_and_injected_markers() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("live.srec");
    let port = free_port();
    let hub = format!("127.0.0.1:{port}");
    let mut serve = bin()
        .args(["hub", "serve", "--bind", "127.0.0.1", "--port", &port.to_string(), "--no-bridge"])
        .args(["--ping-interval", "0.5", "--duration", "5", "--record", rec.to_str().unwrap()])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_millis(500));
    let mut sim = bin()
        .env("SYNCREC_HUB", &hub)
        .args(["sim", "gsr", "--seed", "1", "--rate", "32", "--duration", "2.5", "--clock-offset", "0.25"])
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_millis(800));
    let out = bin().env("SYNCREC_HUB", &hub).args(["marker", "inject", "--label", "looked away"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(sim.wait().unwrap().success());
    assert!(serve.wait().unwrap().success());
    let report = text(&run(&["inspect", "--in", rec.to_str().unwrap()]).stdout);
    assert!(report.contains("investigator  looked away"), "{report}");
    assert!(report.contains("footer counts match"), "{report}");
    let gsr_line = report.lines().find(|l| l.contains(" gsr ")).unwrap();
    let n: u64 = gsr_line.split_whitespace().last().unwrap().parse().unwrap();
    assert!((70..=90).contains(&n), "{gsr_line}");
}

#[test]
fn remote_case1_writes_metadata_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("remote.srec");
    let meta = dir.path().join("remote.json");
    let cfg = dir.path().join("short.json");
    fs::write(&cfg, r#"{"insert_count": 1, "load_latency": 0.5, "dwell": 0.1}"#).unwrap();
    let port = free_port();
    let mut serve = bin()
        .args(["hub", "serve", "--bind", "127.0.0.1", "--port", &port.to_string(), "--no-bridge"])
        .args(["--duration", "14", "--record", rec.to_str().unwrap()])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_millis(500));
    let out = run(&[
        "experiment", "case1", "--task", "2", "--subject", "R1", "--config", cfg.to_str().unwrap(), "--hub",
        &format!("127.0.0.1:{port}"), "--out", meta.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(serve.wait().unwrap().success());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&meta).unwrap()).unwrap();
    assert_eq!(m["subject_id"], "R1");
    assert_eq!(m["acceleration"], "high");
    let report = text(&run(&["inspect", "--in", rec.to_str().unwrap()]).stdout);
    for label in ["Experiment start", "Task 2 init", "Task 2 start", "Task 2 end", "Experiment end"] {
        assert!(report.contains(label), "{label}\n{report}");
    }
}
