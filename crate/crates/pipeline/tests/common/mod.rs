#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use axum::Router;
use factcheck::arm;
use factcheck::config::RunConfig;
use factcheck::lm_client::{Matcher, MockEntry, MockScript};
use factcheck::report::{self, Reports};
use factcheck::runner::{self, Runner};
use factcheck::store::{append_jsonl, RunDir, ANNOTATIONS_FILE};
use factcheck_core::feedback::AnnotationRecord;
use factcheck_core::gateway::VerifierScore;

/// An axum app on an ephemeral port, stopped on drop.
pub struct TestServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl TestServer {
    pub fn start(app: Router) -> Self {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        Self { addr, shutdown: Some(tx), thread: Some(thread) }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// One verifier deployment: `/info` reports `trained_on`, `/score` answers
/// high for claims containing `marker`.
pub fn scorer_deployment(trained_on: Vec<usize>, marker: &'static str) -> TestServer {
    use axum::routing::{get, post};
    use axum::Json;
    use serde_json::{json, Value};
    let app = Router::new()
        .route("/info", get(move || async move { Json(json!({ "trained_on_folds": trained_on })) }))
        .route(
            "/score",
            post(move |Json(body): Json<Value>| async move {
                let claim = body["claim"].as_str().unwrap_or_default();
                Json(json!({ "prob": if claim.contains(marker) { 0.9 } else { 0.1 } }))
            }),
        );
    TestServer::start(app)
}

/// Scripted scenario over `n` balanced cases `c01..`: per case decisions,
/// which round-0 outputs carry a hallucinated second point, and what the
/// refinement round answers.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cases: Vec<ScriptedCase>,
    /// When set, refinement repeats the original response verbatim.
    pub ignore_feedback: bool,
    /// Self-reflection answers "No" (flag) to every probe.
    pub probe_flags_all: bool,
}

#[derive(Debug, Clone)]
pub struct ScriptedCase {
    pub id: String,
    pub good: bool,
    pub hallucinated: bool,
    pub initial_good: bool,
    /// Fails generation with a transport error.
    pub backend_down: bool,
}

pub const HALLUCINATION_MARKER: &str = "owns three houses";

impl ScriptedCase {
    pub fn reference(&self) -> String {
        format!("r{}", &self.id[1..])
    }

    pub fn x_prefix(&self) -> String {
        format!("ref: {};", self.reference())
    }

    pub fn points(&self) -> [String; 2] {
        let r = self.reference();
        let second = if self.hallucinated {
            format!("The applicant in {r} {HALLUCINATION_MARKER}.")
        } else {
            format!("Housing for {r} matches the file.")
        };
        [format!("Records for {r} are stable."), second]
    }

    pub fn initial_reply(&self) -> String {
        let [a, b] = self.points();
        format!("{} credit\n{a} {b}", if self.initial_good { "Good" } else { "Bad" })
    }

    pub fn refined_reply(&self) -> String {
        format!(
            "{} credit\nCorrected reasoning for {} after review.",
            if self.good { "Good" } else { "Bad" },
            self.reference()
        )
    }
}

impl Scenario {
    /// 20 cases, 8 with a hallucinated point, 6 of those misclassified, and
    /// one clean misclassification.
    pub fn standard() -> Self {
        let cases = (1..=20)
            .map(|i| {
                let good = i <= 10;
                let k = if good { i } else { i - 10 };
                let hallucinated = k <= 4;
                let wrong = k <= 3 || i == 15;
                ScriptedCase {
                    id: format!("c{i:02}"),
                    good,
                    hallucinated,
                    initial_good: good != wrong,
                    backend_down: false,
                }
            })
            .collect();
        Self { cases, ignore_feedback: false, probe_flags_all: false }
    }

    pub fn uniform(n_per_class: usize) -> Self {
        let cases = (1..=2 * n_per_class)
            .map(|i| {
                let good = i <= n_per_class;
                ScriptedCase { id: format!("c{i:03}"), good, hallucinated: false, initial_good: good, backend_down: false }
            })
            .collect();
        Self { cases, ignore_feedback: false, probe_flags_all: false }
    }

    pub fn dataset_csv(&self) -> String {
        let mut s = String::from("id,ref,age,housing,class\n");
        for (i, c) in self.cases.iter().enumerate() {
            let housing = if i % 3 == 0 { "rent" } else { "own" };
            s.push_str(&format!("{},{},{},{},{}\n", c.id, c.reference(), 20 + (i * 7) % 40, housing, if c.good { 1 } else { 2 }));
        }
        s
    }

    pub fn mock_script(&self) -> MockScript {
        let mut entries = Vec::new();
        for c in &self.cases {
            let x = c.x_prefix();
            let gen = Matcher::AllOf(vec![Matcher::Prefix("Assess the creditworthiness".into()), Matcher::Contains(x.clone())]);
            entries.push(if c.backend_down {
                MockEntry::failing(gen, "connection refused")
            } else {
                MockEntry::new(gen, c.initial_reply())
            });
            let refine = Matcher::AllOf(vec![Matcher::Prefix(x.clone()), Matcher::Contains("Your previous response".into())]);
            let reply = if self.ignore_feedback { c.initial_reply() } else { c.refined_reply() };
            entries.push(MockEntry::new(refine, reply));
        }
        let answer = if self.probe_flags_all { "No" } else { "Yes" };
        entries.push(MockEntry::new(Matcher::Contains("Question: does this imply".into()), answer));
        MockScript { entries, delay_ms: 0 }
    }

    pub fn annotations(&self) -> Vec<AnnotationRecord> {
        self.cases
            .iter()
            .filter(|c| !c.backend_down)
            .flat_map(|c| {
                [(1, false), (2, c.hallucinated)].map(|(point_index, hallucinated)| AnnotationRecord {
                    case_id: c.id.clone(),
                    round: 0,
                    point_index,
                    hallucinated,
                    annotator: "expert".into(),
                    timestamp: "2024-01-01T00:00:00+00:00".into(),
                })
            })
            .collect()
    }

    /// Fold-respecting scores: 0.9 on hallucinated points, 0.2 elsewhere.
    pub fn scores(&self, dir: &RunDir, scorer: &str) -> Vec<VerifierScore> {
        let plan = dir.folds().unwrap();
        self.cases
            .iter()
            .filter(|c| !c.backend_down)
            .flat_map(|c| {
                let fold = plan.fold_of(&c.id).unwrap();
                let trained = plan.training_folds(fold);
                [(1, 0.2), (2, if c.hallucinated { 0.9 } else { 0.2 })].map(|(point_index, prob)| VerifierScore {
                    case_id: c.id.clone(),
                    round: 0,
                    point_index,
                    prob,
                    scorer_id: scorer.into(),
                    trained_on_folds: trained.clone(),
                })
            })
            .collect()
    }
}

/// Files a run reads: dataset, mock script, optional score file and config.
pub struct Fixture {
    pub root: PathBuf,
}

impl Fixture {
    pub fn new(root: &Path) -> Self {
        std::fs::create_dir_all(root).unwrap();
        Self { root: root.to_path_buf() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("data.csv")
    }

    pub fn mock(&self) -> PathBuf {
        self.root.join("mock.json")
    }

    pub fn score_file(&self) -> PathBuf {
        self.root.join("scores.jsonl")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("run.toml")
    }

    /// Write the dataset, the script and a config using them. `extra` is
    /// appended to the `[experiment]` table; `tail` after everything.
    pub fn write(&self, scenario: &Scenario, experiment: &str, tail: &str) -> PathBuf {
        self.write_script(scenario, &scenario.mock_script(), experiment, tail)
    }

    pub fn write_script(&self, scenario: &Scenario, script: &MockScript, experiment: &str, tail: &str) -> PathBuf {
        std::fs::write(self.dataset(), scenario.dataset_csv()).unwrap();
        std::fs::write(self.mock(), serde_json::to_string_pretty(script).unwrap()).unwrap();
        let config = format!(
            r#"[dataset]
path = "data.csv"
label_column = "class"
id_column = "id"
label_map = {{ "1" = 1, "2" = 0 }}
numeric_columns = ["age"]
excluded_features = []
seed = 11

[generation]
model_name = "mock-slm"
mock = "mock.json"
max_parallel = 4

[experiment]
fold_seed = 5
{experiment}
{tail}"#
        );
        std::fs::write(self.config_path(), config).unwrap();
        self.config_path()
    }
}

pub fn file_scorer_toml() -> &'static str {
    "[[scorers]]\nid = \"v1\"\nfile = \"scores.jsonl\"\n"
}

pub fn annotate(dir: &RunDir, records: &[AnnotationRecord]) {
    append_jsonl(&dir.path(ANNOTATIONS_FILE), records).unwrap();
}

pub const ALL_SOURCES: &str = r#"sources = ["oracle", "verifier", "self_reflection"]"#;

/// Every step in order, ending with emitted reports. Annotations and the
/// score file come from the scenario script.
pub fn run_all(fx: &Fixture, scenario: &Scenario, run_root: &Path) -> factcheck::Result<Reports> {
    let cfg = RunConfig::load(&fx.write(scenario, ALL_SOURCES, file_scorer_toml()))?;
    runner::prepare(&cfg, run_root)?;
    let r = Runner::open(run_root)?;
    r.run_initial()?;
    annotate(r.dir(), &scenario.annotations());
    let _ = std::fs::remove_file(fx.score_file());
    append_jsonl(&fx.score_file(), &scenario.scores(r.dir(), "v1"))?;
    r.collect_scores()?;
    r.run_association()?;
    r.run_detection_eval()?;
    r.run_adaptive(&arm::channels(r.config()), r.config().experiment.granularity)?;
    r.run_granularity_compare()?;
    r.run_multi_round_experiment()?;
    report::emit(r.dir())
}

/// Every file under `reports/`, by name.
pub fn report_files(run_root: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(run_root.join("reports"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}
