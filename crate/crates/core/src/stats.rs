//! Association, detection and classification statistics.
//!
//! Percentages are returned unrounded in `[0, 100]`; rounding to two
//! decimals is a reporting concern. Undefined quantities (zero variance,
//! empty conditioning groups, a single truth class) come back as `None`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;
use crate::parser::Decision;

/// Cost of predicting a bad profile for a good customer.
pub const FALSE_NEGATIVE_COST: u64 = 5;
/// Cost of predicting a good profile for a bad customer.
pub const FALSE_POSITIVE_COST: u64 = 1;
/// Largest pooled sample size for which the rank-sum test is enumerated exactly.
pub const EXACT_WILCOXON_MAX_POOLED: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{0} requires a non-empty input")]
    Empty(&'static str),
    #[error("pearson requires at least two observations")]
    TooFewObservations,
    #[error("outcome for case {case_id} has no aggregated hallucination label")]
    MissingHallucinationLabel { case_id: alloc::string::String },
    #[error("probability {0} is not a finite value in [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("density export needs at least two bins, got {0}")]
    TooFewBins(usize),
}

/// One classified case, optionally carrying its aggregated hallucination label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledOutcome {
    pub case_id: alloc::string::String,
    pub predicted: Decision,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_rsn: Option<bool>,
}

impl LabeledOutcome {
    /// The decision actually counted. An invalid output is scored as the
    /// complement of the label, so it is always a misclassification.
    pub fn effective_prediction(&self) -> Label {
        match self.predicted {
            Decision::Good => Label::Good,
            Decision::Bad => Label::Bad,
            Decision::Invalid => self.label.complement(),
        }
    }

    pub fn is_misclassified(&self) -> bool {
        self.effective_prediction() != self.label
    }
}

/// A verifier probability paired with the human judgment for that point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPoint {
    pub prob: f64,
    pub truth: bool,
}

/// Confusion counts with label 1 (good profile) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_outcomes(outcomes: &[LabeledOutcome]) -> Self {
        let mut c = Confusion::default();
        for o in outcomes {
            match (o.effective_prediction(), o.label) {
                (Label::Good, Label::Good) => c.tp += 1,
                (Label::Good, Label::Bad) => c.fp += 1,
                (Label::Bad, Label::Good) => c.fn_ += 1,
                (Label::Bad, Label::Bad) => c.tn += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return None;
        }
        Some(100.0 * (2 * self.tp) as f64 / denom as f64)
    }

    pub fn weighted_cost(&self) -> u64 {
        FALSE_NEGATIVE_COST * self.fn_ + FALSE_POSITIVE_COST * self.fp
    }
}

/// 1 iff any reasoning point is hallucinated.
pub fn aggregate_h(points: &[bool]) -> Result<bool, StatsError> {
    if points.is_empty() {
        return Err(StatsError::Empty("aggregate_h"));
    }
    Ok(points.iter().any(|&h| h))
}

/// Product-moment correlation of two binary vectors, computed from the 2x2
/// table (phi coefficient).
pub fn pearson(h: &[bool], e: &[bool]) -> Result<Option<f64>, StatsError> {
    if h.len() != e.len() {
        return Err(StatsError::LengthMismatch { left: h.len(), right: e.len() });
    }
    if h.len() < 2 {
        return Err(StatsError::TooFewObservations);
    }
    let (mut n11, mut n10, mut n01, mut n00) = (0u64, 0u64, 0u64, 0u64);
    for (&a, &b) in h.iter().zip(e) {
        match (a, b) {
            (true, true) => n11 += 1,
            (true, false) => n10 += 1,
            (false, true) => n01 += 1,
            (false, false) => n00 += 1,
        }
    }
    let row1 = (n11 + n10) as f64;
    let row0 = (n01 + n00) as f64;
    let col1 = (n11 + n01) as f64;
    let col0 = (n10 + n00) as f64;
    let denom = row1 * row0 * col1 * col0;
    if denom == 0.0 {
        return Ok(None);
    }
    let num = n11 as f64 * n00 as f64 - n10 as f64 * n01 as f64;
    Ok(Some((num / libm::sqrt(denom)).clamp(-1.0, 1.0)))
}

/// P(misclassified | H=1) - P(misclassified | H=0).
pub fn risk_difference(outcomes: &[LabeledOutcome]) -> Result<Option<f64>, StatsError> {
    let mut wrong = [0u64; 2];
    let mut total = [0u64; 2];
    for o in outcomes {
        let h = o.h_rsn.ok_or_else(|| StatsError::MissingHallucinationLabel {
            case_id: o.case_id.clone(),
        })?;
        let g = h as usize;
        total[g] += 1;
        if o.is_misclassified() {
            wrong[g] += 1;
        }
    }
    if total[0] == 0 || total[1] == 0 {
        return Ok(None);
    }
    Ok(Some(wrong[1] as f64 / total[1] as f64 - wrong[0] as f64 / total[0] as f64))
}

/// F1 of the good-profile class, as a percentage.
pub fn f1(outcomes: &[LabeledOutcome]) -> Result<Option<f64>, StatsError> {
    if outcomes.is_empty() {
        return Err(StatsError::Empty("f1"));
    }
    Ok(Confusion::from_outcomes(outcomes).f1())
}

/// `5 x FN + 1 x FP`.
pub fn weighted_cost(outcomes: &[LabeledOutcome]) -> Result<u64, StatsError> {
    if outcomes.is_empty() {
        return Err(StatsError::Empty("weighted_cost"));
    }
    Ok(Confusion::from_outcomes(outcomes).weighted_cost())
}

fn check_probs(points: &[ScoredPoint]) -> Result<(), StatsError> {
    for p in points {
        if !p.prob.is_finite() || !(0.0..=1.0).contains(&p.prob) {
            return Err(StatsError::ProbabilityOutOfRange(p.prob));
        }
    }
    Ok(())
}

/// Mean of TPR and TNR at `prob >= threshold`, as a percentage.
pub fn balanced_accuracy(points: &[ScoredPoint], threshold: f64) -> Result<Option<f64>, StatsError> {
    check_probs(points)?;
    let (mut tp, mut pos, mut tn, mut neg) = (0u64, 0u64, 0u64, 0u64);
    for p in points {
        let flagged = p.prob >= threshold;
        if p.truth {
            pos += 1;
            tp += flagged as u64;
        } else {
            neg += 1;
            tn += (!flagged) as u64;
        }
    }
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let tpr = tp as f64 / pos as f64;
    let tnr = tn as f64 / neg as f64;
    Ok(Some(50.0 * (tpr + tnr)))
}

/// Average precision (step interpolation), as a percentage.
///
/// Points are ranked by descending probability. Within a tie, negatives
/// are ranked ahead of positives, so 100 is reached only under strict
/// separation.
pub fn auprc(points: &[ScoredPoint]) -> Result<Option<f64>, StatsError> {
    check_probs(points)?;
    let positives = points.iter().filter(|p| p.truth).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<&ScoredPoint> = points.iter().collect();
    order.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.truth.cmp(&b.truth)));

    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, p) in order.iter().enumerate() {
        if p.truth {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(100.0 * sum / positives as f64))
}

/// Average ranks of the pooled sample, doubled so ties stay integral.
fn doubled_mid_ranks(pooled: &[f64]) -> (Vec<u64>, Vec<u64>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && pooled[idx[end + 1]] == pooled[idx[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end+1, doubled mean = start + end + 2
        let doubled = (start + end + 2) as u64;
        for &i in &idx[start..=end] {
            ranks[i] = doubled;
        }
        tie_sizes.push((end - start + 1) as u64);
        start = end + 1;
    }
    (ranks, tie_sizes)
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<(), StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty("wilcoxon_rank_sum"));
    }
    Ok(())
}

fn all_identical(a: &[f64], b: &[f64]) -> bool {
    let first = a[0];
    a.iter().chain(b).all(|&v| v == first)
}

/// Two-sided rank-sum p-value: exact enumeration up to
/// [`EXACT_WILCOXON_MAX_POOLED`] pooled observations, normal approximation
/// above that.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check_samples(a, b)?;
    if a.len() + b.len() <= EXACT_WILCOXON_MAX_POOLED {
        wilcoxon_exact(a, b)
    } else {
        wilcoxon_normal(a, b)
    }
}

/// Exact permutation p-value of the rank sum with mid-rank ties.
///
/// Counts, over every size-|a| subset of the pooled ranks, how many have a
/// rank sum at least as far from its mean as the observed one.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check_samples(a, b)?;
    if all_identical(a, b) {
        return Ok(1.0);
    }
    let n = a.len();
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let total = pooled.len();
    let (ranks, _) = doubled_mid_ranks(&pooled);
    let max_sum: u64 = ranks.iter().sum();
    let width = max_sum as usize + 1;

    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0f64; width]; n + 1];
    counts[0][0] = 1.0;
    for (seen, &r) in ranks.iter().enumerate() {
        let r = r as usize;
        for k in (1..=n.min(seen + 1)).rev() {
            let (lower, upper) = counts.split_at_mut(k);
            let prev = &lower[k - 1];
            let cur = &mut upper[0];
            for s in (0..width - r).rev() {
                if prev[s] != 0.0 {
                    cur[s + r] += prev[s];
                }
            }
        }
    }

    // doubled mean rank sum = n (N + 1)
    let mean2 = (n * (total + 1)) as i64;
    let observed: i64 = ranks[..n].iter().sum::<u64>() as i64;
    let observed_dev = (observed - mean2).abs();
    let mut extreme = 0.0;
    let mut all = 0.0;
    for (s, &c) in counts[n].iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        all += c;
        if (s as i64 - mean2).abs() >= observed_dev {
            extreme += c;
        }
    }
    Ok((extreme / all).min(1.0))
}

/// Normal approximation with tie and continuity correction.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check_samples(a, b)?;
    if all_identical(a, b) {
        return Ok(1.0);
    }
    let n = a.len() as f64;
    let m = b.len() as f64;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let total = n + m;
    let (ranks, ties) = doubled_mid_ranks(&pooled);
    let rank_sum_a = ranks[..a.len()].iter().sum::<u64>() as f64 / 2.0;
    let u = rank_sum_a - n * (n + 1.0) / 2.0;
    let mean = n * m / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (total * (total - 1.0));
    let var = n * m / 12.0 * ((total + 1.0) - tie_term);
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / libm::sqrt(var);
    Ok(libm::erfc(z / core::f64::consts::SQRT_2).min(1.0))
}

/// Per-group normalized histograms over equal-width bins on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    pub edges: Vec<(f64, f64)>,
    pub freq_h0: Vec<f64>,
    pub freq_h1: Vec<f64>,
    /// Set when the corresponding group had no points; its histogram is all zero.
    pub h0_empty: bool,
    pub h1_empty: bool,
}

pub fn density_bins(points: &[ScoredPoint], bins: usize) -> Result<DensityHistogram, StatsError> {
    if bins < 2 {
        return Err(StatsError::TooFewBins(bins));
    }
    check_probs(points)?;
    let mut counts = [vec![0u64; bins], vec![0u64; bins]];
    for p in points {
        let slot = ((p.prob * bins as f64) as usize).min(bins - 1);
        counts[p.truth as usize][slot] += 1;
    }
    let normalize = |c: &[u64]| -> (Vec<f64>, bool) {
        let total: u64 = c.iter().sum();
        if total == 0 {
            (vec![0.0; c.len()], true)
        } else {
            (c.iter().map(|&x| x as f64 / total as f64).collect(), false)
        }
    };
    let (freq_h0, h0_empty) = normalize(&counts[0]);
    let (freq_h1, h1_empty) = normalize(&counts[1]);
    let edges = (0..bins)
        .map(|i| (i as f64 / bins as f64, (i + 1) as f64 / bins as f64))
        .collect();
    Ok(DensityHistogram { edges, freq_h0, freq_h1, h0_empty, h1_empty })
}
