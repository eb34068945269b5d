//! Experiment steps. Each step reads the run directory, does its LM or
//! scorer work case-parallel, and appends raw records in case order.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use factcheck_core::feedback::{
    entire_content_flags, oracle_flags, run_multi_round, run_refinement, verifier_flags, ContentJudge,
    FeedbackProvider, ProbeFeedback,
};
use factcheck_core::gateway::{plan_folds, score_point, validate_score, PointRef, Scorer, VerifierScore};
use factcheck_core::parser::{parse_generation, Decision};
use factcheck_core::prompts::{PromptTemplate, TemplateKind};
use factcheck_core::stats::DensityHistogram;
use factcheck_core::{CaseRecord, FeedbackBundle, FeedbackSource, Generation, Granularity, PromptSet};

use crate::arm::{self, Channel};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lm_client::{CompletionExchange, ExchangeLog, LmClient, Recording};
use crate::report::{self, ArmRow, AssociationRow, DetectionRow, RoundsReport};
use crate::scorer::{import_scores, HttpScorer};
use crate::store::{
    ArmBundle, ArmGeneration, ExchangeRecord, FailureRecord, RunDir, BACKEND_ERROR, BUNDLES_FILE, EXCHANGES_FILE,
    FAILURES_FILE, FOLDS_FILE, GENERATIONS_FILE, SCORES_FILE,
};
use crate::table::{load_table, prepare_cases};

const SCORER_TIMEOUT: Duration = Duration::from_secs(60);

/// Prompt templates from `dir` where a file exists, built-in wording otherwise.
pub fn load_prompts(dir: Option<&Path>) -> Result<PromptSet> {
    let mut set = PromptSet::default();
    let Some(dir) = dir else { return Ok(set) };
    for kind in [TemplateKind::Generation, TemplateKind::FeedbackProbe, TemplateKind::RoundContext, TemplateKind::Refinement] {
        let path = dir.join(kind.file_name());
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let t = PromptTemplate::new(kind, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match kind {
            TemplateKind::Generation => set.generation = t,
            TemplateKind::FeedbackProbe => set.feedback_probe = t,
            TemplateKind::RoundContext => set.round_context = t,
            TemplateKind::Refinement => set.refinement = t,
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSummary {
    pub run_id: String,
    pub cases: usize,
    pub good: usize,
    pub bad: usize,
    pub fold_sizes: Vec<usize>,
}

/// Ingest and preprocess the dataset, then fix the fold plan.
pub fn prepare(config: &RunConfig, root: &Path) -> Result<PrepareSummary> {
    let table = load_table(&config.dataset.path, &config.dataset)?;
    let cases = prepare_cases(table, &config.dataset)?;
    let plan = plan_folds(&cases, config.experiment.folds, config.experiment.fold_seed)
        .map_err(|e| Error::Config(e.to_string()))?;
    let dir = RunDir::create(root, config)?;
    dir.write_cases(&cases)?;
    dir.write_json(FOLDS_FILE, &plan)?;
    let good = cases.iter().filter(|c| c.label == factcheck_core::Label::Good).count();
    Ok(PrepareSummary {
        run_id: dir.info()?.run_id,
        cases: cases.len(),
        good,
        bad: cases.len() - good,
        fold_sizes: plan.fold_sizes(),
    })
}

/// Apply `f` to every item with at most `workers` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect()
}

fn failed_generation(case_id: &str, round: u32, err: impl std::fmt::Display) -> Generation {
    Generation {
        case_id: case_id.to_string(),
        round,
        decision: Decision::Invalid,
        points: Vec::new(),
        raw: String::new(),
        note: Some(format!("{BACKEND_ERROR}: {err}")),
    }
}

pub struct Backends {
    pub generation: LmClient,
    pub self_reflection: Option<LmClient>,
    pub finetuned: Option<LmClient>,
}

impl Backends {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            generation: LmClient::from_config(&cfg.generation)?,
            self_reflection: cfg.self_reflection.as_ref().map(LmClient::from_config).transpose()?,
            finetuned: cfg.finetuned.as_ref().map(LmClient::from_config).transpose()?,
        })
    }

    /// Backend probed for a channel; `None` for channels without one.
    pub fn feedback(&self, source: FeedbackSource) -> Option<&LmClient> {
        match source {
            FeedbackSource::SelfReflection => Some(self.self_reflection.as_ref().unwrap_or(&self.generation)),
            FeedbackSource::FinetunedSlm => self.finetuned.as_ref(),
            FeedbackSource::Oracle | FeedbackSource::Verifier => None,
        }
    }
}

/// Output of one case's worker: records to append once all cases finish.
#[derive(Default)]
struct CaseOutput {
    generations: Vec<Generation>,
    bundles: Vec<FeedbackBundle>,
    exchanges: Vec<CompletionExchange>,
    failure: Option<String>,
}

pub struct Runner {
    dir: RunDir,
    cfg: RunConfig,
    prompts: PromptSet,
    backends: Backends,
}

impl Runner {
    pub fn new(dir: RunDir, backends: Backends) -> Result<Self> {
        let cfg = dir.info()?.config;
        let prompts = load_prompts(cfg.experiment.prompts_dir.as_deref())?;
        Ok(Self { dir, cfg, prompts, backends })
    }

    /// Open a run directory with the backends its config snapshot names.
    pub fn open(root: &Path) -> Result<Self> {
        let dir = RunDir::open(root)?;
        let backends = Backends::from_config(&dir.info()?.config)?;
        Self::new(dir, backends)
    }

    pub fn dir(&self) -> &RunDir {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    fn workers(&self) -> usize {
        self.backends.generation.config().max_parallel
    }

    fn persist(&self, arm: &str, cases: &[CaseRecord], outputs: Vec<CaseOutput>) -> Result<()> {
        let mut gens = Vec::new();
        let mut bundles = Vec::new();
        let mut exchanges = Vec::new();
        let mut failures = Vec::new();
        for (case, out) in cases.iter().zip(outputs) {
            gens.extend(out.generations.into_iter().map(|generation| ArmGeneration { arm: arm.into(), generation }));
            bundles.extend(out.bundles.into_iter().map(|bundle| ArmBundle { arm: arm.into(), bundle }));
            exchanges.extend(out.exchanges.into_iter().map(|exchange| ExchangeRecord {
                arm: arm.into(),
                case_id: case.id.clone(),
                exchange,
            }));
            if let Some(message) = out.failure {
                log::warn!("{arm}: case {}: {message}", case.id);
                failures.push(FailureRecord { arm: arm.into(), case_id: Some(case.id.clone()), message });
            }
        }
        self.dir.append(EXCHANGES_FILE, &exchanges)?;
        self.dir.append(BUNDLES_FILE, &bundles)?;
        self.dir.append(FAILURES_FILE, &failures)?;
        self.dir.append(GENERATIONS_FILE, &gens)
    }

    /// Round-0 generation of every case. A failed completion degrades that
    /// case to an invalid decision; the step itself still succeeds.
    pub fn run_initial(&self) -> Result<ArmRow> {
        let cases = self.dir.cases()?;
        let outputs = par_map(&cases, self.workers(), |_, case| {
            let log = ExchangeLog::new();
            let client = Recording::new(&self.backends.generation, &log);
            let mut out = CaseOutput::default();
            let prompt = self.prompts.render_generation(&factcheck_core::render_attributes(case));
            let g = match prompt.map_err(|e| e.to_string()).and_then(|p| {
                factcheck_core::Completer::complete(&client, &p).map_err(|e| e.to_string())
            }) {
                Ok(raw) => parse_generation(&raw, &case.id, 0),
                Err(e) => {
                    out.failure = Some(e.clone());
                    failed_generation(&case.id, 0, e)
                }
            };
            out.generations.push(g);
            out.exchanges = log.into_inner();
            out
        });
        self.persist(arm::INITIAL, &cases, outputs)?;
        report::baseline(&self.dir, &self.cfg, &cases)
    }

    fn initial(&self, cases: &[CaseRecord]) -> Result<Vec<Generation>> {
        let mut gens = self.dir.generations(arm::INITIAL)?;
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(cases.len());
        for c in cases {
            match gens.get_mut(&c.id).and_then(|v| v.iter().position(|g| g.round == 0).map(|i| v.swap_remove(i))) {
                Some(g) => out.push(g),
                None => missing.push(c.id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Pipeline(format!(
                "{} case(s) have no round-0 generation; run `generate` first",
                missing.len()
            )));
        }
        Ok(out)
    }

    /// Score every round-0 point with `scorer`, each case on the deployment
    /// that held its fold out.
    pub fn collect_with<S>(&self, scorer: &S, workers: usize) -> Result<Vec<VerifierScore>>
    where
        S: Scorer + Sync,
        S::Error: std::fmt::Display + Send,
    {
        let plan = self.dir.folds()?;
        let cases = self.dir.cases()?;
        let initial = self.initial(&cases)?;
        let refs: Vec<PointRef<'_>> = cases
            .iter()
            .zip(&initial)
            .flat_map(|(case, g)| g.points.iter().map(move |point| PointRef { case, round: 0, point }))
            .collect();
        let results = par_map(&refs, workers, |_, r| score_point(&plan, r, scorer));
        let mut scores = Vec::with_capacity(results.len());
        for r in results {
            scores.push(r.map_err(|e| match e {
                factcheck_core::gateway::GatewayError::Scorer(s) => Error::Pipeline(format!("scorer: {s}")),
                other => Error::Pipeline(format!("{other}")),
            })?);
        }
        self.dir.append(SCORES_FILE, &scores)?;
        Ok(scores)
    }

    /// Collect or import scores for every configured scorer not yet covered.
    /// Returns the number of scores added per scorer.
    pub fn collect_scores(&self) -> Result<BTreeMap<String, usize>> {
        let plan = self.dir.folds()?;
        let cases = self.dir.cases()?;
        let wanted: usize = self.initial(&cases)?.iter().map(|g| g.points.len()).sum();
        let existing = self.dir.scores()?;
        let mut added = BTreeMap::new();
        for s in &self.cfg.scorers {
            if existing.get(&s.id).is_some_and(|v| v.iter().filter(|x| x.round == 0).count() >= wanted) {
                log::info!("scorer {}: already collected", s.id);
                added.insert(s.id.clone(), 0);
                continue;
            }
            let n = match &s.file {
                Some(path) => {
                    let scores: Vec<VerifierScore> =
                        import_scores(path, &plan)?.into_iter().filter(|x| x.scorer_id == s.id).collect();
                    self.dir.append(SCORES_FILE, &scores)?;
                    scores.len()
                }
                None => {
                    let scorer = HttpScorer::connect(&s.id, &s.deployments, SCORER_TIMEOUT)?;
                    self.collect_with(&scorer, s.max_parallel)?.len()
                }
            };
            added.insert(s.id.clone(), n);
        }
        Ok(added)
    }

    pub fn run_association(&self) -> Result<AssociationRow> {
        let cases = self.dir.cases()?;
        report::association(
            &self.cfg.generation.model_name,
            &cases,
            &self.dir.generations(arm::INITIAL)?,
            &self.dir.annotations()?,
        )
    }

    /// AUPRC, balanced accuracy, Wilcoxon p and density bins per scorer.
    /// Leakage and coverage gaps are hard errors.
    pub fn run_detection_eval(&self) -> Result<(Vec<DetectionRow>, BTreeMap<String, DensityHistogram>)> {
        let violations = leakage_audit(&self.dir)?;
        if !violations.is_empty() {
            return Err(Error::Pipeline(format!("leakage audit failed: {}", violations.join("; "))));
        }
        let cases = self.dir.cases()?;
        let initial = self.dir.generations(arm::INITIAL)?;
        let annotations = self.dir.annotations()?;
        let scores = self.dir.scores()?;
        let mut rows = Vec::new();
        let mut density = BTreeMap::new();
        for s in &self.cfg.scorers {
            let list = scores.get(&s.id).ok_or_else(|| Error::Pipeline(format!("scorer {}: no scores", s.id)))?;
            let points = report::scored_points(&cases, &initial, &annotations, list)?;
            rows.push(report::detection(&s.id, &points)?);
            density.insert(
                s.id.clone(),
                factcheck_core::stats::density_bins(&points, self.cfg.experiment.density_bins)?,
            );
        }
        Ok((rows, density))
    }

    /// Pure-feedback bundles for oracle and verifier channels, computed before
    /// any LM call so that missing inputs fail the arm as a whole.
    fn precomputed_bundles(&self, ch: &Channel, g: Granularity, initial: &[Generation]) -> Result<Option<Vec<FeedbackBundle>>> {
        let bundles = match ch {
            Channel::Oracle => {
                let anns = self.dir.annotations()?;
                initial
                    .iter()
                    .map(|gen| match g {
                        Granularity::SinglePoint => oracle_flags::<std::convert::Infallible>(gen, &anns).map_err(|e| e.to_string()),
                        Granularity::EntireContent => {
                            entire_content_flags::<LmClient>(gen, ContentJudge::Annotations(&anns), &self.prompts)
                                .map_err(|e| e.to_string())
                        }
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()
            }
            Channel::Verifier(id) => {
                let all = self.dir.scores()?.remove(id).unwrap_or_default();
                let mut by_case: BTreeMap<&str, Vec<VerifierScore>> = BTreeMap::new();
                for s in &all {
                    by_case.entry(s.case_id.as_str()).or_default().push(s.clone());
                }
                let empty = Vec::new();
                initial
                    .iter()
                    .map(|gen| {
                        let s = by_case.get(gen.case_id.as_str()).unwrap_or(&empty);
                        match g {
                            Granularity::SinglePoint => verifier_flags::<std::convert::Infallible>(gen, s).map_err(|e| e.to_string()),
                            Granularity::EntireContent => {
                                entire_content_flags::<LmClient>(gen, ContentJudge::Scores(s), &self.prompts)
                                    .map_err(|e| e.to_string())
                            }
                        }
                    })
                    .collect()
            }
            Channel::SelfReflection | Channel::FinetunedSlm => return Ok(None),
        };
        bundles.map(Some).map_err(Error::Pipeline)
    }

    fn adapt_arm(&self, cases: &[CaseRecord], initial: &[Generation], ch: &Channel, g: Granularity) -> Result<()> {
        let arm = arm::adapt(ch, g);
        let pre = self.precomputed_bundles(ch, g, initial)?;
        let feedback_client = match (&pre, self.backends.feedback(ch.source())) {
            (None, None) => return Err(Error::Config(format!("{}: no backend configured", ch.label()))),
            (_, c) => c,
        };
        let outputs = par_map(cases, self.workers(), |i, case| {
            let log = ExchangeLog::new();
            let generator = Recording::new(&self.backends.generation, &log);
            let g0 = &initial[i];
            let bundle = match (&pre, feedback_client) {
                (Some(b), _) => Ok(b[i].clone()),
                (None, Some(client)) => {
                    let probe = Recording::new(client, &log);
                    ProbeFeedback { backend: &probe, source: ch.source() }.feedback(case, g0, g, &self.prompts)
                }
                (None, None) => unreachable!("checked above"),
            };
            let mut out = CaseOutput::default();
            match bundle {
                Ok(b) => {
                    match run_refinement(case, g0, &b, &generator, &self.prompts) {
                        Ok(next) => out.generations.push(next),
                        Err(e) => {
                            out.failure = Some(e.to_string());
                            out.generations.push(failed_generation(&case.id, 1, e));
                        }
                    }
                    out.bundles.push(b);
                }
                Err(e) => {
                    out.failure = Some(format!("feedback: {e}"));
                    out.generations.push(failed_generation(&case.id, 1, e));
                }
            }
            out.exchanges = log.into_inner();
            out
        });
        self.persist(&arm, cases, outputs)
    }

    /// One refinement round per channel. A channel that cannot run is marked
    /// failed and the others proceed.
    pub fn run_adaptive(&self, channels: &[Channel], g: Granularity) -> Result<Vec<ArmRow>> {
        let cases = self.dir.cases()?;
        let initial = self.initial(&cases)?;
        let mut rows = vec![report::baseline(&self.dir, &self.cfg, &cases)?];
        for ch in channels {
            if let Err(e) = self.adapt_arm(&cases, &initial, ch, g) {
                let arm = arm::adapt(ch, g);
                log::error!("{arm}: {e}");
                self.dir.append(FAILURES_FILE, &[FailureRecord { arm, case_id: None, message: e.to_string() }])?;
            }
            rows.push(report::adapt_row(&self.dir, &self.cfg, &cases, ch, g)?);
        }
        Ok(rows)
    }

    /// Self-reflection at both granularities. Arms already complete in the
    /// run directory are reused rather than re-prompted.
    pub fn run_granularity_compare(&self) -> Result<Vec<ArmRow>> {
        let cases = self.dir.cases()?;
        let ch = Channel::SelfReflection;
        for g in [Granularity::EntireContent, Granularity::SinglePoint] {
            let row = report::adapt_row(&self.dir, &self.cfg, &cases, &ch, g)?;
            if row.status != report::Status::Done {
                self.run_adaptive(std::slice::from_ref(&ch), g)?;
            }
        }
        report::table4(&self.dir, &self.cfg, &cases)
    }

    /// Repeated self-feedback and refinement keeping only the latest
    /// response and the attributes as context.
    pub fn run_multi_round_experiment(&self) -> Result<RoundsReport> {
        let e = &self.cfg.experiment;
        if e.rounds < 2 {
            return Err(Error::Config("experiment.rounds must be at least 2 for the multi-round series".into()));
        }
        let source = e.rounds_source;
        let feedback_client = self
            .backends
            .feedback(source)
            .ok_or_else(|| Error::Config(format!("rounds_source {source:?} has no backend")))?;
        let cases = self.dir.cases()?;
        let initial = self.initial(&cases)?;
        let outputs = par_map(&cases, self.workers(), |i, case| {
            let log = ExchangeLog::new();
            let generator = Recording::new(&self.backends.generation, &log);
            let probe = Recording::new(feedback_client, &log);
            let provider = ProbeFeedback { backend: &probe, source };
            let g0 = initial[i].clone();
            let mut out = CaseOutput::default();
            match run_multi_round(case, g0.clone(), e.rounds, e.rounds_granularity, &provider, &generator, &self.prompts) {
                Ok(trace) => {
                    out.generations = trace.generations;
                    out.bundles = trace.bundles;
                }
                Err(err) => {
                    out.failure = Some(err.to_string());
                    out.generations.push(g0);
                    out.generations.extend((1..=e.rounds).map(|r| failed_generation(&case.id, r, &err)));
                }
            }
            out.exchanges = log.into_inner();
            out
        });
        self.persist(arm::ROUNDS, &cases, outputs)?;
        report::rounds(&self.dir, &self.cfg, &cases)
    }
}

/// Every stored score checked against the fold plan, plus one-score-per-point
/// coverage of round-0 points. Returns human-readable violations.
pub fn leakage_audit(dir: &RunDir) -> Result<Vec<String>> {
    let plan = dir.folds()?;
    let raw: Vec<VerifierScore> = dir.read(SCORES_FILE)?;
    let mut violations = Vec::new();
    let mut counts: BTreeMap<(&str, &str, usize), usize> = BTreeMap::new();
    for s in &raw {
        if let Err(e) = validate_score::<std::convert::Infallible>(&plan, s) {
            violations.push(e.to_string());
        }
        if s.round == 0 {
            *counts.entry((s.scorer_id.as_str(), s.case_id.as_str(), s.point_index)).or_default() += 1;
        }
    }
    for ((scorer, case, point), n) in &counts {
        if *n > 1 {
            violations.push(format!("scorer {scorer}: case {case} point {point} scored {n} times"));
        }
    }
    Ok(violations)
}
