//! Feedback channels and refinement rounds.
//!
//! Oracle and verifier bundles are pure functions of annotations and scores.
//! Self-reflection and fine-tuned feedback share one probe path and differ
//! only in the backend they are given.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{render_attributes, CaseRecord};
use crate::gateway::{VerifierScore, FLAG_THRESHOLD};
use crate::parser::{parse_generation, parse_yes_no, Generation, ProbeAnswer};
use crate::prompts::{PromptError, PromptSet};

/// Note set on a generation carried forward because there was nothing to feed back.
pub const NO_FEEDBACK_SKIP: &str = "no_feedback_skip";

/// Anything that turns a prompt into a completion.
pub trait Completer {
    type Error;

    fn complete(&self, prompt: &str) -> Result<String, Self::Error>;
}

/// Adapts a closure into a [`Completer`].
pub struct FnCompleter<F>(pub F);

impl<F, E> Completer for FnCompleter<F>
where
    F: Fn(&str) -> Result<String, E>,
{
    type Error = E;

    fn complete(&self, prompt: &str) -> Result<String, E> {
        (self.0)(prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Oracle,
    Verifier,
    SelfReflection,
    FinetunedSlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    SinglePoint,
    EntireContent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedPoint {
    pub index: usize,
    pub text: String,
}

/// Reasoning points one channel judged factually wrong. Empty means no refinement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    pub case_id: String,
    pub round: u32,
    pub source: FeedbackSource,
    pub granularity: Granularity,
    pub flagged_points: Vec<FlaggedPoint>,
    /// Probe answers that were neither yes nor no.
    #[serde(default)]
    pub warnings: usize,
}

impl FeedbackBundle {
    fn empty(generation: &Generation, source: FeedbackSource, granularity: Granularity) -> Self {
        Self {
            case_id: generation.case_id.clone(),
            round: generation.round,
            source,
            granularity,
            flagged_points: Vec::new(),
            warnings: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.flagged_points.is_empty()
    }

    /// Text substituted for `{F}`: one entry per flagged point, or the whole
    /// reasoning as a single entry at entire-content granularity.
    pub fn feedback_lines(&self) -> Vec<String> {
        match self.granularity {
            Granularity::SinglePoint => self.flagged_points.iter().map(|p| p.text.clone()).collect(),
            Granularity::EntireContent if self.flagged_points.is_empty() => Vec::new(),
            Granularity::EntireContent => {
                let mut joined = String::new();
                for (i, p) in self.flagged_points.iter().enumerate() {
                    if i > 0 {
                        joined.push(' ');
                    }
                    joined.push_str(&p.text);
                }
                alloc::vec![joined]
            }
        }
    }
}

/// One human judgment of one reasoning point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub case_id: String,
    pub round: u32,
    pub point_index: usize,
    pub hallucinated: bool,
    pub annotator: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeedbackError<E> {
    #[error("case {case_id} round {round}: points {missing:?} are not annotated")]
    IncompleteAnnotation { case_id: String, round: u32, missing: Vec<usize> },
    #[error("case {case_id} round {round}: no verifier score for point {index}")]
    MissingScore { case_id: String, round: u32, index: usize },
    #[error("case {case_id}: probability {prob} outside [0, 1]")]
    BadScore { case_id: String, prob: f64 },
    #[error("bundle for {bundle_case} round {bundle_round} does not belong to {case_id} round {round}")]
    BundleMismatch { bundle_case: String, bundle_round: u32, case_id: String, round: u32 },
    #[error("case record {case} does not match generation for {generation}")]
    CaseMismatch { case: String, generation: String },
    #[error("bundle references point {0}, which the generation does not have")]
    UnknownPoint(usize),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend: {0}")]
    Backend(E),
}

/// Resolve possibly conflicting annotations of one generation into one
/// judgment per point: majority vote, ties count as hallucinated. When an
/// annotator labels the same point twice the later record wins.
pub fn resolve_annotations(case_id: &str, round: u32, annotations: &[AnnotationRecord]) -> BTreeMap<usize, bool> {
    let mut latest: BTreeMap<(usize, &str), bool> = BTreeMap::new();
    for a in annotations.iter().filter(|a| a.case_id == case_id && a.round == round) {
        latest.insert((a.point_index, a.annotator.as_str()), a.hallucinated);
    }
    let mut votes: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((point, _), h) in latest {
        let v = votes.entry(point).or_default();
        if h {
            v.0 += 1;
        } else {
            v.1 += 1;
        }
    }
    votes.into_iter().map(|(p, (yes, no))| (p, yes >= no)).collect()
}

/// Per-point hallucination judgments for a generation, or the list of
/// unannotated points.
pub fn point_judgments<E>(generation: &Generation, annotations: &[AnnotationRecord]) -> Result<Vec<bool>, FeedbackError<E>> {
    let resolved = resolve_annotations(&generation.case_id, generation.round, annotations);
    let missing: Vec<usize> =
        generation.points.iter().map(|p| p.index).filter(|i| !resolved.contains_key(i)).collect();
    if !missing.is_empty() {
        return Err(FeedbackError::IncompleteAnnotation {
            case_id: generation.case_id.clone(),
            round: generation.round,
            missing,
        });
    }
    Ok(generation.points.iter().map(|p| resolved[&p.index]).collect())
}

fn flag_where(generation: &Generation, flags: &[bool]) -> Vec<FlaggedPoint> {
    generation
        .points
        .iter()
        .zip(flags)
        .filter(|(_, &f)| f)
        .map(|(p, _)| FlaggedPoint { index: p.index, text: p.text.clone() })
        .collect()
}

fn all_points(generation: &Generation) -> Vec<FlaggedPoint> {
    generation.points.iter().map(|p| FlaggedPoint { index: p.index, text: p.text.clone() }).collect()
}

pub fn oracle_flags<E>(generation: &Generation, annotations: &[AnnotationRecord]) -> Result<FeedbackBundle, FeedbackError<E>> {
    let judged = point_judgments(generation, annotations)?;
    let mut bundle = FeedbackBundle::empty(generation, FeedbackSource::Oracle, Granularity::SinglePoint);
    bundle.flagged_points = flag_where(generation, &judged);
    Ok(bundle)
}

/// Per-point verifier flags (`prob >= 0.5`). Scores for other cases or
/// rounds are ignored.
pub fn verifier_flags<E>(generation: &Generation, scores: &[VerifierScore]) -> Result<FeedbackBundle, FeedbackError<E>> {
    let mut flags = Vec::with_capacity(generation.points.len());
    for p in &generation.points {
        let score = scores
            .iter()
            .find(|s| s.case_id == generation.case_id && s.round == generation.round && s.point_index == p.index)
            .ok_or_else(|| FeedbackError::MissingScore {
                case_id: generation.case_id.clone(),
                round: generation.round,
                index: p.index,
            })?;
        if !score.prob.is_finite() || !(0.0..=1.0).contains(&score.prob) {
            return Err(FeedbackError::BadScore { case_id: score.case_id.clone(), prob: score.prob });
        }
        flags.push(score.prob >= FLAG_THRESHOLD);
    }
    let mut bundle = FeedbackBundle::empty(generation, FeedbackSource::Verifier, Granularity::SinglePoint);
    bundle.flagged_points = flag_where(generation, &flags);
    Ok(bundle)
}

fn check_case<E>(case: &CaseRecord, generation: &Generation) -> Result<(), FeedbackError<E>> {
    if case.id != generation.case_id {
        return Err(FeedbackError::CaseMismatch { case: case.id.clone(), generation: generation.case_id.clone() });
    }
    Ok(())
}

/// Ask `backend` whether the attributes imply `claim`; `Some(true)` flags it.
fn probe<C: Completer>(prompts: &PromptSet, x: &str, claim: &str, backend: &C) -> Result<Option<bool>, FeedbackError<C::Error>> {
    let prompt = prompts.render_feedback_probe(x, claim)?;
    let answer = backend.complete(&prompt).map_err(FeedbackError::Backend)?;
    Ok(match parse_yes_no(&answer) {
        ProbeAnswer::Yes => Some(false),
        ProbeAnswer::No => Some(true),
        ProbeAnswer::Unparseable => None,
    })
}

/// Probe every point separately. `source` only labels the bundle; the
/// self-reflection and fine-tuned channels both come through here.
pub fn probe_flags<C: Completer>(
    generation: &Generation,
    case: &CaseRecord,
    backend: &C,
    source: FeedbackSource,
    prompts: &PromptSet,
) -> Result<FeedbackBundle, FeedbackError<C::Error>> {
    check_case(case, generation)?;
    let x = render_attributes(case);
    let mut bundle = FeedbackBundle::empty(generation, source, Granularity::SinglePoint);
    for p in &generation.points {
        match probe(prompts, &x, &p.text, backend)? {
            Some(true) => bundle.flagged_points.push(FlaggedPoint { index: p.index, text: p.text.clone() }),
            Some(false) => {}
            None => bundle.warnings += 1,
        }
    }
    Ok(bundle)
}

pub fn self_reflection_flags<C: Completer>(
    generation: &Generation,
    case: &CaseRecord,
    backend: &C,
    prompts: &PromptSet,
) -> Result<FeedbackBundle, FeedbackError<C::Error>> {
    probe_flags(generation, case, backend, FeedbackSource::SelfReflection, prompts)
}

/// Feedback from a separately fine-tuned model; the generating model still
/// performs the refinement.
pub fn finetuned_flags<C: Completer>(
    generation: &Generation,
    case: &CaseRecord,
    backend: &C,
    prompts: &PromptSet,
) -> Result<FeedbackBundle, FeedbackError<C::Error>> {
    probe_flags(generation, case, backend, FeedbackSource::FinetunedSlm, prompts)
}

/// How the whole reasoning is judged at entire-content granularity.
pub enum ContentJudge<'a, C> {
    /// One probe over the concatenated reasoning.
    Probe { backend: &'a C, case: &'a CaseRecord, source: FeedbackSource },
    /// Erroneous iff any point is annotated as hallucinated.
    Annotations(&'a [AnnotationRecord]),
    /// Erroneous iff any point's score reaches the threshold.
    Scores(&'a [VerifierScore]),
}

/// Judge the reasoning as a whole; when erroneous, every point is flagged.
pub fn entire_content_flags<C: Completer>(
    generation: &Generation,
    judge: ContentJudge<'_, C>,
    prompts: &PromptSet,
) -> Result<FeedbackBundle, FeedbackError<C::Error>> {
    let (source, erroneous, warnings) = match judge {
        ContentJudge::Probe { backend, case, source } => {
            check_case(case, generation)?;
            if generation.points.is_empty() {
                (source, false, 0)
            } else {
                let x = render_attributes(case);
                match probe(prompts, &x, &generation.reasoning_text(), backend)? {
                    Some(flag) => (source, flag, 0),
                    None => (source, false, 1),
                }
            }
        }
        ContentJudge::Annotations(a) => {
            (FeedbackSource::Oracle, point_judgments(generation, a)?.into_iter().any(|h| h), 0)
        }
        ContentJudge::Scores(s) => {
            let b = verifier_flags(generation, s)?;
            (FeedbackSource::Verifier, !b.is_empty(), 0)
        }
    };
    let mut bundle = FeedbackBundle::empty(generation, source, Granularity::EntireContent);
    bundle.warnings = warnings;
    if erroneous {
        bundle.flagged_points = all_points(generation);
    }
    Ok(bundle)
}

fn check_bundle<E>(generation: &Generation, bundle: &FeedbackBundle) -> Result<(), FeedbackError<E>> {
    if bundle.case_id != generation.case_id || bundle.round != generation.round {
        return Err(FeedbackError::BundleMismatch {
            bundle_case: bundle.case_id.clone(),
            bundle_round: bundle.round,
            case_id: generation.case_id.clone(),
            round: generation.round,
        });
    }
    for f in &bundle.flagged_points {
        if generation.point(f.index).is_none() {
            return Err(FeedbackError::UnknownPoint(f.index));
        }
    }
    Ok(())
}

/// The refinement prompt for `bundle`, or `None` when there is nothing to feed back.
pub fn refinement_prompt<E>(
    case: &CaseRecord,
    generation: &Generation,
    bundle: &FeedbackBundle,
    prompts: &PromptSet,
) -> Result<Option<String>, FeedbackError<E>> {
    check_case(case, generation)?;
    check_bundle(generation, bundle)?;
    if bundle.is_empty() {
        return Ok(None);
    }
    let x = render_attributes(case);
    Ok(Some(prompts.render_refinement(&x, &generation.raw, &bundle.feedback_lines())?))
}

/// One adaptive-inference round. An empty bundle carries the generation
/// forward unchanged with the [`NO_FEEDBACK_SKIP`] note.
pub fn run_refinement<C: Completer>(
    case: &CaseRecord,
    generation: &Generation,
    bundle: &FeedbackBundle,
    backend: &C,
    prompts: &PromptSet,
) -> Result<Generation, FeedbackError<C::Error>> {
    let next_round = generation.round + 1;
    match refinement_prompt(case, generation, bundle, prompts)? {
        None => Ok(Generation { round: next_round, note: Some(NO_FEEDBACK_SKIP.to_string()), ..generation.clone() }),
        Some(prompt) => {
            let raw = backend.complete(&prompt).map_err(FeedbackError::Backend)?;
            Ok(parse_generation(&raw, &case.id, next_round))
        }
    }
}

/// Produces a bundle for the latest generation of a case.
pub trait FeedbackProvider {
    type Error;

    fn feedback(
        &self,
        case: &CaseRecord,
        generation: &Generation,
        granularity: Granularity,
        prompts: &PromptSet,
    ) -> Result<FeedbackBundle, FeedbackError<Self::Error>>;
}

/// Probe-based feedback from `backend` (self-reflection or a fine-tuned model).
pub struct ProbeFeedback<'a, C> {
    pub backend: &'a C,
    pub source: FeedbackSource,
}

impl<C: Completer> FeedbackProvider for ProbeFeedback<'_, C> {
    type Error = C::Error;

    fn feedback(
        &self,
        case: &CaseRecord,
        generation: &Generation,
        granularity: Granularity,
        prompts: &PromptSet,
    ) -> Result<FeedbackBundle, FeedbackError<C::Error>> {
        match granularity {
            Granularity::SinglePoint => probe_flags(generation, case, self.backend, self.source, prompts),
            Granularity::EntireContent => entire_content_flags(
                generation,
                ContentJudge::Probe { backend: self.backend, case, source: self.source },
                prompts,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// Round 0 through the last refinement round.
    pub generations: Vec<Generation>,
    /// `bundles[r]` was computed against `generations[r]`.
    pub bundles: Vec<FeedbackBundle>,
}

/// Repeated feedback and refinement. Each round's feedback is computed
/// against the latest generation, and each refinement prompt carries only
/// the attributes and that latest response.
pub fn run_multi_round<C, P>(
    case: &CaseRecord,
    initial: Generation,
    rounds: u32,
    granularity: Granularity,
    provider: &P,
    generator: &C,
    prompts: &PromptSet,
) -> Result<RoundTrace, FeedbackError<C::Error>>
where
    C: Completer,
    P: FeedbackProvider<Error = C::Error>,
{
    check_case(case, &initial)?;
    let mut trace = RoundTrace { generations: alloc::vec![initial], bundles: Vec::new() };
    for _ in 0..rounds {
        let latest = trace.generations.last().expect("initial generation present");
        let bundle = provider.feedback(case, latest, granularity, prompts)?;
        let next = run_refinement(case, latest, &bundle, generator, prompts)?;
        trace.bundles.push(bundle);
        trace.generations.push(next);
    }
    Ok(trace)
}
