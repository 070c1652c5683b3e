use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};
use vizarel_core::rollout::normalize_abs;
use vizarel_core::{load_session, ExperienceId};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vizarel"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn vizarel")
}

fn demo(dir: &Path, episodes: u32, steps: u32, seed: u64, render: bool) -> PathBuf {
    let out = dir.to_str().unwrap();
    let (e, s, seed) = (episodes.to_string(), steps.to_string(), seed.to_string());
    let mut args = vec!["demo-gen", "--out", out, "--episodes", &e, "--steps", &s, "--seed", &seed];
    if !render {
        args.push("--no-render");
    }
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("demo.jsonl")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn demo_gen_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let la = demo(a.path(), 20, 200, 9, true);
    let lb = demo(b.path(), 20, 200, 9, true);
    let text = std::fs::read_to_string(&la).unwrap();
    assert_eq!(text.lines().count(), 4001);
    assert_eq!(text, std::fs::read_to_string(&lb).unwrap());
    for name in ["ep00000_t000000.png", "ep00019_t000199.png"] {
        let pa = std::fs::read(a.path().join("renders").join(name)).unwrap();
        assert_eq!(pa, std::fs::read(b.path().join("renders").join(name)).unwrap());
    }
    let other = tempfile::tempdir().unwrap();
    assert_ne!(text, std::fs::read_to_string(demo(other.path(), 20, 200, 10, false)).unwrap());
}

#[test]
fn demo_td_errors_are_informative() {
    let dir = tempfile::tempdir().unwrap();
    let (session, report) = load_session(&demo(dir.path(), 5, 100, 1, false)).unwrap();
    assert!(report.warnings.iter().all(|w| w.contains("render")), "{:?}", report.warnings);
    for e in 0..5 {
        let td = session.episode_td_errors(e).unwrap();
        assert!(td.iter().any(|&d| d != 0.0));
        let n = normalize_abs(&td);
        assert_eq!(n.iter().copied().fold(0.0, f64::max), 1.0);
    }
}

#[test]
fn ingest_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let log = demo(dir.path(), 2, 10, 0, true);
    let o = run(&["ingest", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["steps_loaded"], 20);
    assert_eq!(report["renders_available"], true);

    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let case = |name: &str, body: String| {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        run(&["ingest", p.to_str().unwrap()])
    };

    let o = case("empty.jsonl", String::new());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("EMPTY_LOG"), "{}", stderr(&o));

    let truncated = format!("{}\n{}\n{}\n", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
    let o = case("truncated.jsonl", truncated);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("MALFORMED_RECORD") && stderr(&o).contains('3'), "{}", stderr(&o));

    let mut step: Value = serde_json::from_str(lines[1]).unwrap();
    step.as_object_mut().unwrap().remove("reward");
    let o = case("schema.jsonl", format!("{}\n{step}\n", lines[0]));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("SCHEMA_VIOLATION"), "{}", stderr(&o));

    let mut step: Value = serde_json::from_str(lines[1]).unwrap();
    step["obs"] = json!([1.0, 2.0]);
    let o = case("dims.jsonl", format!("{}\n{step}\n", lines[0]));
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("DIMENSION_MISMATCH"), "{}", stderr(&o));

    let o = run(&["ingest", dir.path().join("missing.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

fn write_json(path: &Path, value: &Value) -> String {
    std::fs::write(path, serde_json::to_vec(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn export_writes_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let log = demo(dir.path(), 3, 20, 2, false);
    let log = log.to_str().unwrap();

    let single = write_json(
        &dir.path().join("state.json"),
        &json!({ "viewport_type": "state", "spec": { "kind": "line_plot" }, "binding": { "episode": 1 } }),
    );
    let out = dir.path().join("out1");
    let o = run(&["export", log, &single, out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files: Vec<_> = std::fs::read_dir(&out).unwrap().collect();
    assert_eq!(files.len(), 1);
    let payload: Value = serde_json::from_slice(&std::fs::read(out.join("vp-1.json")).unwrap()).unwrap();
    assert_eq!(payload["content"]["series"].as_array().unwrap().len(), 3);
    assert_eq!(payload["crosslink"][0], json!({ "episode": 1, "t": 0 }));

    let bad = write_json(
        &dir.path().join("bad.json"),
        &json!({ "viewport_type": "trajectory", "spec": { "kind": "histogram" } }),
    );
    let o = run(&["export", log, &bad, dir.path().join("out2").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("INCOMPATIBLE_SPEC"), "{}", stderr(&o));

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{ nope").unwrap();
    let o = run(&["export", log, broken.to_str().unwrap(), dir.path().join("out3").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let plan = write_json(
        &dir.path().join("plan.json"),
        &json!({
            "embedding": { "method": "pca" },
            "selections": [ { "id": "first", "episode": 0 }, { "id": "few", "ids": [[1, 0], [1, 1], [2, 5]] } ],
            "viewports": [
                { "viewport_type": "replay_buffer", "spec": { "kind": "scatter_plot" } },
                { "viewport_type": "distribution", "spec": { "kind": "histogram", "options": { "bins": 4 } },
                  "binding": { "selection_id": "first", "stream": "reward" } },
                { "viewport_type": "tensor_comparison", "spec": { "kind": "scatter_plot" },
                  "binding": { "selection_id": "few", "stream": "obs", "std_threshold": 0.2 } },
                { "viewport_type": "trajectory", "spec": { "kind": "line_plot" }, "binding": { "episode": 2 } }
            ]
        }),
    );
    let a = dir.path().join("plan_a");
    let b = dir.path().join("plan_b");
    for out in [&a, &b] {
        let o = run(&["export", log, &plan, out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for k in 1..=4 {
        let name = format!("vp-{k}.json");
        let pa = std::fs::read(a.join(&name)).unwrap();
        assert_eq!(pa, std::fs::read(b.join(&name)).unwrap(), "{name}");
    }
    let hist: Value = serde_json::from_slice(&std::fs::read(a.join("vp-2.json")).unwrap()).unwrap();
    assert_eq!(hist["content"]["total"], 20);
    let tensor: Value = serde_json::from_slice(&std::fs::read(a.join("vp-3.json")).unwrap()).unwrap();
    assert_eq!(tensor["crosslink"].as_array().unwrap().len(), 3);
}

#[test]
fn export_round_trip_has_no_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let log = demo(dir.path(), 2, 15, 5, true);
    let o = run(&["ingest", log.to_str().unwrap()]);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["warnings"], json!([]));
    let (session, _) = load_session(&log).unwrap();
    let last = session.resolve(ExperienceId::new(1, 14)).unwrap();
    assert!(last.done && last.next_value.is_none());
    assert!(session.renders_available() && session.td_available());
}

#[test]
fn serve_rejects_bad_port() {
    let o = run(&["serve", "--port", "99999"]);
    assert_eq!(o.status.code(), Some(2));
}

/// Holds the child's stdout open so its writes keep succeeding.
struct Server(std::process::Child, #[allow(dead_code)] std::process::ChildStdout);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts `serve` and returns it with the lines printed up to and including
/// the listening line.
fn start(args: &[&str]) -> (Server, Vec<String>) {
    let mut child = bin()
        .arg("serve")
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    let mut lines = Vec::new();
    for line in (&mut reader).lines() {
        let line = line.unwrap();
        let done = line.starts_with("listening on ");
        lines.push(line);
        if done {
            break;
        }
    }
    (Server(child, reader.into_inner()), lines)
}

fn listen_addr(lines: &[String]) -> String {
    lines
        .iter()
        .find_map(|l| l.strip_prefix("listening on http://"))
        .expect("listening line")
        .to_string()
}

#[test]
fn serve_loads_and_reports_address() {
    let dir = tempfile::tempdir().unwrap();
    let log = demo(dir.path(), 2, 10, 0, false);
    let (_server, lines) = start(&["--port", "0", "--load", log.to_str().unwrap(), "--open"]);
    assert!(lines[0].starts_with("loaded ") && lines[0].contains("(20 steps)"), "{lines:?}");
    let addr = listen_addr(&lines);
    assert!(addr.starts_with("127.0.0.1:"));

    // The port is now taken.
    let port = addr.rsplit(':').next().unwrap();
    let o = run(&["serve", "--port", port]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn serve_load_failure_exits() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "not json\n").unwrap();
    let o = run(&["serve", "--port", "0", "--load", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MALFORMED_RECORD"), "{}", stderr(&o));
}

#[test]
fn serve_env_configuration() {
    let (_server, lines) = {
        let mut child = bin()
            .arg("serve")
            .env("VIZAREL_PORT", "0")
            .env("VIZAREL_HOST", "127.0.0.1")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut reader = BufReader::new(child.stdout.take().unwrap());
        let line = (&mut reader).lines().next().unwrap().unwrap();
        (Server(child, reader.into_inner()), vec![line])
    };
    assert!(listen_addr(&lines).starts_with("127.0.0.1:"));
}
