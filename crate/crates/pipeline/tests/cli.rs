mod common;

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use common::{annotate, file_scorer_toml, Fixture, Scenario, ALL_SOURCES};
use factcheck::store::{append_jsonl, RunDir};

fn factcheck(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factcheck"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = Scenario::standard();
    let fx = Fixture::new(&tmp.path().join("fx"));
    let cfg = fx.write(&scenario, ALL_SOURCES, file_scorer_toml());
    let cfg = cfg.to_str().unwrap();
    let cwd = tmp.path();

    let out = ok(factcheck(&["prepare", "--config", cfg, "--run-dir", "run"], cwd));
    assert!(out.contains("20 cases (10 good, 10 bad)"), "{out}");
    ok(factcheck(&["generate", "--run-dir", "run"], cwd));
    {
        let dir = RunDir::open(&cwd.join("run")).unwrap();
        annotate(&dir, &scenario.annotations());
        append_jsonl(&fx.score_file(), &scenario.scores(&dir, "v1")).unwrap();
    }
    ok(factcheck(&["score", "--run-dir", "run", "--config", cfg], cwd));
    let assoc = ok(factcheck(&["associate", "--run-dir", "run"], cwd));
    assert!(assoc.contains("\"hallucinated\": 8"), "{assoc}");
    ok(factcheck(&["detect-eval", "--run-dir", "run"], cwd));
    let adapt = ok(factcheck(&["adapt", "--run-dir", "run", "--source", "oracle", "--source", "verifier:v1"], cwd));
    assert!(adapt.contains("\"arm\": \"verifier:v1\""), "{adapt}");
    ok(factcheck(&["adapt", "--run-dir", "run", "--compare-granularity"], cwd));
    ok(factcheck(&["rounds", "--run-dir", "run"], cwd));
    ok(factcheck(&["report", "--run-dir", "run"], cwd));
    let check = ok(factcheck(&["report", "--run-dir", "run", "--check"], cwd));
    assert!(check.contains("reports match"));
    for f in ["table1.csv", "table2.csv", "table3.csv", "table4.csv", "density_v1.csv", "manifest.json"] {
        assert!(cwd.join("run/reports").join(f).exists(), "{f}");
    }

    std::fs::write(cwd.join("run/reports/table1.csv"), "tampered").unwrap();
    let out = factcheck(&["report", "--run-dir", "run", "--check"], cwd);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("table1.csv"));
}

#[test]
fn bad_invocations_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new(&tmp.path().join("fx"));
    let cfg = fx.write(&Scenario::uniform(2), "folds = 2", "");
    let cfg = cfg.to_str().unwrap();
    let cwd = tmp.path();

    let out = factcheck(&["prepare", "--run-dir", "run"], cwd);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    ok(factcheck(&["prepare", "--config", cfg, "--run-dir", "run"], cwd));
    let out = factcheck(&["generate", "--run-dir", "run", "--seed", "123"], cwd);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("differs from the snapshot"));

    let out = factcheck(&["adapt", "--run-dir", "run", "--source", "telepathy"], cwd);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("telepathy"));

    let out = factcheck(&["generate", "--run-dir", "missing"], cwd);
    assert!(!out.status.success());

    std::fs::write(cwd.join("broken.toml"), "[dataset]\npath = 3\n").unwrap();
    let out = factcheck(&["prepare", "--config", "broken.toml", "--run-dir", "other"], cwd);
    assert!(!out.status.success());
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new(&tmp.path().join("fx"));
    let cfg = fx.write(&Scenario::uniform(10), "", "");
    let cfg = cfg.to_str().unwrap();
    let cwd = tmp.path();
    let a = ok(factcheck(&["prepare", "--config", cfg, "--run-dir", "a"], cwd));
    let b = ok(factcheck(&["prepare", "--config", cfg, "--run-dir", "b", "--seed", "77"], cwd));
    let id = |s: &str| s.split(':').next().unwrap().to_string();
    assert_ne!(id(&a), id(&b));
    ok(factcheck(&["generate", "--run-dir", "b", "--seed", "77"], cwd));
}

#[cfg(unix)]
#[test]
fn serve_annotate_answers_until_interrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new(&tmp.path().join("fx"));
    let cfg = fx.write(&Scenario::uniform(2), "folds = 2", "");
    let cwd = tmp.path();
    ok(factcheck(&["prepare", "--config", cfg.to_str().unwrap(), "--run-dir", "run"], cwd));
    ok(factcheck(&["generate", "--run-dir", "run"], cwd));

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let bind = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_factcheck"))
        .args(["serve-annotate", "--run-dir", "run", "--bind", &bind])
        .current_dir(cwd)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let started = Instant::now();
    let body = loop {
        match ureq::get(format!("http://{bind}/api/progress")).call() {
            Ok(mut r) => break r.body_mut().read_to_string().unwrap(),
            Err(_) if started.elapsed() < Duration::from_secs(10) => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => {
                let _ = child.kill();
                panic!("server never came up: {e}");
            }
        }
    };
    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    assert!(child.wait().unwrap().success());
    assert!(!cwd.join("run/run.lock").exists(), "lock left behind after interrupt");
    let v: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["total"], 4);
    assert_eq!(v["annotated"], 0);
}
