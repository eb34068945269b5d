//! Leakage-free verifier scoring: stratified fold planning, per-point score
//! collection against fold-specific scorers, and thresholding.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{render_attributes, CaseRecord, Label};
use crate::parser::ReasoningPoint;

/// Fixed decision threshold on verifier probabilities.
pub const FLAG_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError<E> {
    #[error("fold count {k} is invalid for {cases} cases")]
    FoldCount { k: usize, cases: usize },
    #[error("both labels must be present to stratify folds")]
    MissingClass,
    #[error("case {0} is not in the fold plan")]
    UnknownCase(String),
    #[error("leakage: score for case {case_id} (fold {fold}) comes from a scorer trained on folds {trained_on:?}")]
    Leakage { case_id: String, fold: usize, trained_on: BTreeSet<usize> },
    #[error("case {case_id} point {point_index}: probability {prob} outside [0, 1]")]
    ProbOutOfRange { case_id: String, point_index: usize, prob: f64 },
    #[error("scorer: {0}")]
    Scorer(E),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.assignment.get(case_id).copied()
    }

    /// Folds a scorer for `test_fold` may be trained on.
    pub fn training_folds(&self, test_fold: usize) -> BTreeSet<usize> {
        (0..self.k).filter(|&f| f != test_fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = alloc::vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified k-fold assignment. Case ids of each label are sorted, shuffled
/// under `seed`, then dealt round-robin; the deal continues across labels so
/// fold sizes stay within one of each other.
pub fn plan_folds(cases: &[CaseRecord], k: usize, seed: u64) -> Result<FoldPlan, GatewayError<core::convert::Infallible>> {
    if k == 0 || k > cases.len() {
        return Err(GatewayError::FoldCount { k, cases: cases.len() });
    }
    let mut by_label: BTreeMap<Label, Vec<&str>> = BTreeMap::new();
    for c in cases {
        by_label.entry(c.label).or_default().push(&c.id);
    }
    if by_label.len() < 2 {
        return Err(GatewayError::MissingClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    let mut slot = 0usize;
    for ids in by_label.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            assignment.insert(id.to_string(), slot % k);
            slot += 1;
        }
    }
    Ok(FoldPlan { k, seed, assignment })
}

/// Per-point factual-error probability from one verifier deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierScore {
    pub case_id: String,
    pub round: u32,
    pub point_index: usize,
    pub prob: f64,
    pub scorer_id: String,
    pub trained_on_folds: BTreeSet<usize>,
}

/// Check the range and leakage invariants of a score against a plan.
pub fn validate_score<E>(plan: &FoldPlan, score: &VerifierScore) -> Result<(), GatewayError<E>> {
    let fold = plan.fold_of(&score.case_id).ok_or_else(|| GatewayError::UnknownCase(score.case_id.clone()))?;
    if score.trained_on_folds.contains(&fold) {
        return Err(GatewayError::Leakage {
            case_id: score.case_id.clone(),
            fold,
            trained_on: score.trained_on_folds.clone(),
        });
    }
    if !score.prob.is_finite() || !(0.0..=1.0).contains(&score.prob) {
        return Err(GatewayError::ProbOutOfRange {
            case_id: score.case_id.clone(),
            point_index: score.point_index,
            prob: score.prob,
        });
    }
    Ok(())
}

/// `prob >= 0.5` means the point is flagged as hallucinated.
pub fn threshold_predict(prob: f64) -> Result<bool, GatewayError<core::convert::Infallible>> {
    if !prob.is_finite() || !(0.0..=1.0).contains(&prob) {
        return Err(GatewayError::ProbOutOfRange { case_id: String::new(), point_index: 0, prob });
    }
    Ok(prob >= FLAG_THRESHOLD)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreRequest<'a> {
    pub context: &'a str,
    pub claim: &'a str,
    pub fold: usize,
}

/// A verifier reachable per test fold.
pub trait Scorer {
    type Error;

    fn scorer_id(&self) -> &str;

    /// Folds the deployment that serves `test_fold` was trained on.
    fn trained_on_folds(&self, test_fold: usize) -> Result<BTreeSet<usize>, Self::Error>;

    fn score(&self, request: &ScoreRequest<'_>) -> Result<f64, Self::Error>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    type Error = S::Error;

    fn scorer_id(&self) -> &str {
        (**self).scorer_id()
    }

    fn trained_on_folds(&self, test_fold: usize) -> Result<BTreeSet<usize>, Self::Error> {
        (**self).trained_on_folds(test_fold)
    }

    fn score(&self, request: &ScoreRequest<'_>) -> Result<f64, Self::Error> {
        (**self).score(request)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PointRef<'a> {
    pub case: &'a CaseRecord,
    pub round: u32,
    pub point: &'a ReasoningPoint,
}

/// Score one point with the deployment serving its case's held-out fold.
pub fn score_point<S: Scorer>(plan: &FoldPlan, point: &PointRef<'_>, scorer: &S) -> Result<VerifierScore, GatewayError<S::Error>> {
    let fold = plan.fold_of(&point.case.id).ok_or_else(|| GatewayError::UnknownCase(point.case.id.clone()))?;
    let trained_on_folds = scorer.trained_on_folds(fold).map_err(GatewayError::Scorer)?;
    let context = render_attributes(point.case);
    let prob = scorer
        .score(&ScoreRequest { context: &context, claim: &point.point.text, fold })
        .map_err(GatewayError::Scorer)?;
    let score = VerifierScore {
        case_id: point.case.id.clone(),
        round: point.round,
        point_index: point.point.index,
        prob,
        scorer_id: scorer.scorer_id().to_string(),
        trained_on_folds,
    };
    validate_score(plan, &score)?;
    Ok(score)
}

/// One score per point, in input order.
pub fn collect_scores<S: Scorer>(plan: &FoldPlan, points: &[PointRef<'_>], scorer: &S) -> Result<Vec<VerifierScore>, GatewayError<S::Error>> {
    points.iter().map(|p| score_point(plan, p, scorer)).collect()
}
