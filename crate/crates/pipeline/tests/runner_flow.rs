mod common;

use std::path::{Path, PathBuf};

use common::{annotate, file_scorer_toml, Fixture, Scenario};
use factcheck::arm::{self, Channel};
use factcheck::config::RunConfig;
use factcheck::lm_client::{Matcher, MockEntry, MockScript};
use factcheck::report::{self, Status};
use factcheck::runner::{self, leakage_audit, Runner};
use factcheck::store::{append_jsonl, FailureRecord, RunDir, FAILURES_FILE};
use factcheck::Error;
use factcheck_core::{Decision, Granularity};

fn setup(root: &Path, scenario: &Scenario, script: Option<MockScript>, experiment: &str, tail: &str) -> (Fixture, PathBuf) {
    let fx = Fixture::new(&root.join("fx"));
    let script = script.unwrap_or_else(|| scenario.mock_script());
    let cfg = RunConfig::load(&fx.write_script(scenario, &script, experiment, tail)).unwrap();
    let run = root.join("run");
    runner::prepare(&cfg, &run).unwrap();
    (fx, run)
}

#[test]
fn a_failing_case_degrades_to_invalid() {
    let tmp = tempfile::tempdir().unwrap();
    let mut scenario = Scenario::uniform(2);
    scenario.cases[1].backend_down = true;
    let (_, run) = setup(tmp.path(), &scenario, None, "folds = 2", "");
    let r = Runner::open(&run).unwrap();
    let row = r.run_initial().unwrap();
    assert_eq!(row.status, Status::Done);
    assert_eq!(row.cases, 4);
    assert_eq!(row.failed_cases, 1);

    let gens = r.dir().generations(arm::INITIAL).unwrap();
    let broken = &gens["c002"][0];
    assert_eq!(broken.decision, Decision::Invalid);
    assert!(broken.note.as_deref().unwrap().starts_with("backend_error"));
    assert!(gens["c001"][0].decision.is_valid());
    let failures: Vec<FailureRecord> = r.dir().read(FAILURES_FILE).unwrap();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].case_id.as_deref(), Some("c002"));
    // invalid counts as the complement of a good label: a false negative
    assert_eq!(row.confusion.unwrap().fn_, 1);
    assert_eq!(row.weighted_cost, Some(5));
}

#[test]
fn one_writer_per_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = setup(tmp.path(), &Scenario::uniform(2), None, "folds = 2", "");
    let first = Runner::open(&run).unwrap();
    assert!(matches!(Runner::open(&run), Err(Error::Store(_))));
    assert!(RunDir::read_only(&run).is_ok());
    drop(first);
    assert!(Runner::open(&run).is_ok());
}

#[test]
fn a_different_config_cannot_reuse_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let (fx, run) = setup(tmp.path(), &Scenario::uniform(2), None, "folds = 2", "");
    let other = RunConfig::load(&fx.write(&Scenario::uniform(2), "folds = 3", "")).unwrap();
    assert!(matches!(runner::prepare(&other, &run), Err(Error::Store(_))));
}

#[test]
fn partial_runs_report_pending_arms() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = Scenario::standard();
    let (_, run) = setup(tmp.path(), &scenario, None, common::ALL_SOURCES, file_scorer_toml());
    let r = Runner::open(&run).unwrap();
    r.run_initial().unwrap();
    let reports = report::emit(r.dir()).unwrap();
    assert_eq!(reports.table1[0].status, Status::Pending);
    assert_eq!(reports.table2[0].status, Status::Pending);
    assert_eq!(reports.table3[0].status, Status::Done);
    assert!(reports.table3[1..].iter().all(|a| a.status == Status::Pending && a.f1.is_none()));
    assert_eq!(reports.rounds.status, Status::Pending);
    let csv = std::fs::read_to_string(run.join("reports/table3.csv")).unwrap();
    assert!(csv.contains("pending"));
    assert!(report::verify(r.dir()).unwrap().is_empty());

    annotate(r.dir(), &scenario.annotations());
    assert!(!report::verify(r.dir()).unwrap().is_empty(), "new raw records must invalidate the reports");
}

#[test]
fn association_needs_every_point_annotated() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = Scenario::standard();
    let (_, run) = setup(tmp.path(), &scenario, None, "", "");
    let r = Runner::open(&run).unwrap();
    r.run_initial().unwrap();
    let mut partial = scenario.annotations();
    partial.pop();
    annotate(r.dir(), &partial);
    let err = r.run_association().unwrap_err().to_string();
    assert!(err.contains("c20"), "{err}");
    annotate(r.dir(), &scenario.annotations()[39..]);
    let row = r.run_association().unwrap();
    assert_eq!((row.cases, row.hallucinated, row.misclassified), (20, 8, 7));
}

#[test]
fn a_failed_channel_leaves_other_arms_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = Scenario::standard();
    let (_, run) = setup(tmp.path(), &scenario, None, common::ALL_SOURCES, file_scorer_toml());
    let r = Runner::open(&run).unwrap();
    r.run_initial().unwrap();
    annotate(r.dir(), &scenario.annotations());
    // no scores collected: the verifier arm cannot run
    let rows = r.run_adaptive(&arm::channels(r.config()), Granularity::SinglePoint).unwrap();
    let by = |name: &str| rows.iter().find(|a| a.arm == name).unwrap().clone();
    assert_eq!(by("verifier:v1").status, Status::Failed);
    assert_eq!(by("oracle").status, Status::Done);
    assert_eq!(by("self_reflection").status, Status::Done);

    let tmp2 = tempfile::tempdir().unwrap();
    let (_, run2) = setup(tmp2.path(), &scenario, None, common::ALL_SOURCES, file_scorer_toml());
    let r2 = Runner::open(&run2).unwrap();
    r2.run_initial().unwrap();
    annotate(r2.dir(), &scenario.annotations());
    let alone = r2.run_adaptive(&[Channel::Oracle], Granularity::SinglePoint).unwrap();
    let (a, b) = (by("oracle"), alone[1].clone());
    assert_eq!((a.f1, a.weighted_cost, a.confusion), (b.f1, b.weighted_cost, b.confusion));
}

#[test]
fn granularities_can_disagree() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = Scenario::uniform(2);
    let mut script = scenario.mock_script();
    // the whole reasoning is rejected, each sentence on its own is accepted
    let whole = scenario.cases[0].points().join(" ");
    script.entries.insert(0, MockEntry::new(Matcher::Contains(format!("imply {whole}?")), "No"));
    let (_, run) = setup(tmp.path(), &scenario, Some(script), "folds = 2", "");
    let r = Runner::open(&run).unwrap();
    r.run_initial().unwrap();
    let rows = r.run_granularity_compare().unwrap();
    assert_eq!(rows.len(), 3);
    let ec = rows.iter().find(|a| a.granularity == Some(Granularity::EntireContent)).unwrap();
    let sp = rows.iter().find(|a| a.granularity == Some(Granularity::SinglePoint)).unwrap();
    assert_eq!((ec.refined, sp.refined), (1, 0));
    assert_eq!(sp.f1, rows[0].f1);

    let bundles = r.dir().bundles(&arm::adapt(&Channel::SelfReflection, Granularity::SinglePoint)).unwrap();
    assert!(bundles.values().all(|b| b.is_empty()));
    let gens = r.dir().generations(&arm::adapt(&Channel::SelfReflection, Granularity::SinglePoint)).unwrap();
    assert!(gens.values().all(|g| g[0].note.as_deref() == Some("no_feedback_skip")));

    let again = r.run_granularity_compare().unwrap();
    assert_eq!(again, rows);
}

#[test]
fn scoring_twice_adds_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = Scenario::standard();
    let (fx, run) = setup(tmp.path(), &scenario, None, "", file_scorer_toml());
    let r = Runner::open(&run).unwrap();
    r.run_initial().unwrap();
    append_jsonl(&fx.score_file(), &scenario.scores(r.dir(), "v1")).unwrap();
    assert_eq!(r.collect_scores().unwrap()["v1"], 40);
    assert_eq!(r.collect_scores().unwrap()["v1"], 0);
    assert!(leakage_audit(r.dir()).unwrap().is_empty());

    annotate(r.dir(), &scenario.annotations());
    let (rows, density) = r.run_detection_eval().unwrap();
    assert_eq!(rows[0].auprc, Some(100.0));
    assert_eq!(rows[0].hallucinated, 8);
    assert!(rows[0].wilcoxon_p.unwrap() < 0.05);
    assert_eq!(density["v1"].freq_h1.iter().sum::<f64>(), 1.0);
}

#[test]
fn leaky_scores_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = Scenario::uniform(3);
    let (fx, run) = setup(tmp.path(), &scenario, None, "folds = 3", file_scorer_toml());
    let r = Runner::open(&run).unwrap();
    r.run_initial().unwrap();
    let mut scores = scenario.scores(r.dir(), "v1");
    let fold = r.dir().folds().unwrap().fold_of(&scores[0].case_id).unwrap();
    scores[0].trained_on_folds.insert(fold);
    append_jsonl(&fx.score_file(), &scores).unwrap();
    let err = r.collect_scores().unwrap_err().to_string();
    assert!(err.contains("scores.jsonl:1:") && err.contains("leakage"), "{err}");
    assert!(r.dir().scores().unwrap().is_empty());
}

#[test]
fn deployments_without_a_held_out_fold_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = Scenario::uniform(3);
    let leaky = common::scorer_deployment(vec![0, 1, 2], "x");
    let ok = common::scorer_deployment(vec![1, 2], "x");
    let tail = format!("[[scorers]]\nid = \"enc\"\ndeployments = [\"{}\", \"{}\"]\n", leaky.url(), ok.url());
    let (_, run) = setup(tmp.path(), &scenario, None, "folds = 3", &tail);
    let r = Runner::open(&run).unwrap();
    r.run_initial().unwrap();
    let err = r.collect_scores().unwrap_err().to_string();
    assert!(err.contains("no deployment is held out"), "{err}");
    assert!(r.dir().scores().unwrap().is_empty());
}

#[test]
fn multi_round_failure_invalidates_later_rounds_of_that_case_only() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = Scenario { probe_flags_all: true, ..Scenario::uniform(2) };
    let mut script = scenario.mock_script();
    let target = &scenario.cases[2];
    let refine = Matcher::AllOf(vec![Matcher::Prefix(target.x_prefix()), Matcher::Contains("Your previous response".into())]);
    script.entries.insert(0, MockEntry {
        matcher: refine,
        replies: vec![
            factcheck::lm_client::MockReply::Text("Bad credit\nFirst refinement holds.".into()),
            factcheck::lm_client::MockReply::Error { error: "reset by peer".into() },
        ],
    });
    let (_, run) = setup(tmp.path(), &scenario, Some(script), "folds = 2\nrounds = 3", "");
    let r = Runner::open(&run).unwrap();
    r.run_initial().unwrap();
    let report = r.run_multi_round_experiment().unwrap();
    assert_eq!(report.rows.len(), 4);
    let gens = r.dir().generations(arm::ROUNDS).unwrap();
    let broken = &gens[&target.id];
    assert_eq!(broken.len(), 4);
    assert!(broken[1..].iter().all(|g| g.decision == Decision::Invalid));
    for other in scenario.cases.iter().filter(|c| c.id != target.id) {
        assert!(gens[&other.id].iter().all(|g| g.decision.is_valid()), "{}", other.id);
    }
    let failures: Vec<FailureRecord> = r.dir().read(FAILURES_FILE).unwrap();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].arm, arm::ROUNDS);
}

#[test]
fn rounds_below_two_are_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = setup(tmp.path(), &Scenario::uniform(2), None, "folds = 2\nrounds = 1", "");
    let r = Runner::open(&run).unwrap();
    r.run_initial().unwrap();
    assert!(matches!(r.run_multi_round_experiment(), Err(Error::Config(_))));
}
