//! Metric tables computed from the raw records of a run directory.
//!
//! Nothing here is cached: every table is recomputed from generations,
//! annotations and scores, which is what makes replay checkable.

use std::collections::BTreeMap;

use factcheck_core::feedback::{point_judgments, resolve_annotations, AnnotationRecord};
use factcheck_core::gateway::VerifierScore;
use factcheck_core::stats::{
    aggregate_h, auprc, balanced_accuracy, density_bins, pearson, risk_difference, wilcoxon_rank_sum, Confusion,
    DensityHistogram, LabeledOutcome, ScoredPoint,
};
use factcheck_core::{CaseRecord, Generation, Granularity};
use serde::{Deserialize, Serialize};

use crate::arm::{self, Channel};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::store::{self, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Done,
    Pending,
    Failed,
}

/// Table 1 row: association between hallucinated reasoning and misclassification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRow {
    pub model: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub cases: usize,
    /// Cases without any reasoning point, left out of both measures.
    pub excluded: usize,
    pub hallucinated: usize,
    pub misclassified: usize,
    pub pearson: Option<f64>,
    pub risk_difference: Option<f64>,
}

/// Table 2 row: one verifier against the human point labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub scorer: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub points: usize,
    pub hallucinated: usize,
    pub auprc: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub wilcoxon_p: Option<f64>,
}

/// Table 3 and 4 row: classification quality of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub model: String,
    pub arm: String,
    pub granularity: Option<Granularity>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub cases: usize,
    pub f1: Option<f64>,
    pub weighted_cost: Option<u64>,
    pub confusion: Option<Confusion>,
    /// Cases whose feedback was non-empty and so were re-prompted.
    pub refined: usize,
    /// Cases degraded to an invalid decision by a backend failure.
    pub failed_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: u32,
    pub f1: Option<f64>,
    pub weighted_cost: u64,
    /// Cases whose decision differs from the previous round.
    pub changed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundsReport {
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub source: String,
    pub granularity: Granularity,
    pub rows: Vec<RoundRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reports {
    pub run_id: String,
    pub table1: Vec<AssociationRow>,
    pub table2: Vec<DetectionRow>,
    pub table3: Vec<ArmRow>,
    pub table4: Vec<ArmRow>,
    pub rounds: RoundsReport,
    pub density: BTreeMap<String, DensityHistogram>,
}

fn outcome(case: &CaseRecord, g: &Generation, h_rsn: Option<bool>) -> LabeledOutcome {
    LabeledOutcome { case_id: case.id.clone(), predicted: g.decision, label: case.label, h_rsn }
}

fn generation_at<'a>(gens: &'a BTreeMap<String, Vec<Generation>>, case: &str, round: u32) -> Option<&'a Generation> {
    gens.get(case)?.iter().find(|g| g.round == round)
}

fn list_cases(ids: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut s = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(" and {} more", ids.len() - SHOWN));
    }
    s
}

/// Pearson and risk difference over round-0 generations. Every point must
/// carry a resolved annotation.
pub fn association(
    model: &str,
    cases: &[CaseRecord],
    initial: &BTreeMap<String, Vec<Generation>>,
    annotations: &[AnnotationRecord],
) -> Result<AssociationRow> {
    let mut outcomes = Vec::new();
    let mut excluded = 0;
    let mut missing_gen = Vec::new();
    let mut incomplete = Vec::new();
    for case in cases {
        let Some(g) = generation_at(initial, &case.id, 0) else {
            missing_gen.push(case.id.clone());
            continue;
        };
        if g.points.is_empty() {
            excluded += 1;
            continue;
        }
        match point_judgments::<()>(g, annotations) {
            Ok(j) => outcomes.push(outcome(case, g, Some(aggregate_h(&j)?))),
            Err(_) => incomplete.push(case.id.clone()),
        }
    }
    if !missing_gen.is_empty() {
        return Err(Error::Pipeline(format!("no round-0 generation for cases {}", list_cases(&missing_gen))));
    }
    if !incomplete.is_empty() {
        return Err(Error::Pipeline(format!(
            "incomplete round-0 annotations for {} case(s): {}",
            incomplete.len(),
            list_cases(&incomplete)
        )));
    }
    let h: Vec<bool> = outcomes.iter().map(|o| o.h_rsn == Some(true)).collect();
    let e: Vec<bool> = outcomes.iter().map(LabeledOutcome::is_misclassified).collect();
    let r = if outcomes.len() >= 2 { pearson(&h, &e)? } else { None };
    Ok(AssociationRow {
        model: model.to_string(),
        status: Status::Done,
        note: None,
        cases: cases.len(),
        excluded,
        hallucinated: h.iter().filter(|&&x| x).count(),
        misclassified: e.iter().filter(|&&x| x).count(),
        pearson: r,
        risk_difference: risk_difference(&outcomes)?,
    })
}

/// Join one scorer's round-0 scores with the resolved human labels. Every
/// annotated point needs a score.
pub fn scored_points(
    cases: &[CaseRecord],
    initial: &BTreeMap<String, Vec<Generation>>,
    annotations: &[AnnotationRecord],
    scores: &[VerifierScore],
) -> Result<Vec<ScoredPoint>> {
    let by_point: BTreeMap<(&str, usize), f64> =
        scores.iter().filter(|s| s.round == 0).map(|s| ((s.case_id.as_str(), s.point_index), s.prob)).collect();
    let mut points = Vec::new();
    let mut gaps = Vec::new();
    for case in cases {
        let Some(g) = generation_at(initial, &case.id, 0) else { continue };
        let resolved = resolve_annotations(&case.id, 0, annotations);
        for p in &g.points {
            let Some(&truth) = resolved.get(&p.index) else { continue };
            match by_point.get(&(case.id.as_str(), p.index)) {
                Some(&prob) => points.push(ScoredPoint { prob, truth }),
                None => gaps.push(format!("{}#{}", case.id, p.index)),
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Pipeline(format!(
            "{} annotated point(s) have no score: {}",
            gaps.len(),
            list_cases(&gaps)
        )));
    }
    Ok(points)
}

pub fn detection(scorer: &str, points: &[ScoredPoint]) -> Result<DetectionRow> {
    let pos: Vec<f64> = points.iter().filter(|p| p.truth).map(|p| p.prob).collect();
    let neg: Vec<f64> = points.iter().filter(|p| !p.truth).map(|p| p.prob).collect();
    let wilcoxon_p = if pos.is_empty() || neg.is_empty() { None } else { Some(wilcoxon_rank_sum(&pos, &neg)?) };
    Ok(DetectionRow {
        scorer: scorer.to_string(),
        status: Status::Done,
        note: None,
        points: points.len(),
        hallucinated: pos.len(),
        auprc: if points.is_empty() { None } else { auprc(points)? },
        balanced_accuracy: if points.is_empty() { None } else { balanced_accuracy(points, 0.5)? },
        wilcoxon_p,
    })
}

/// F1 and weighted cost of the generations at `round`; `None` until every
/// case has one.
pub fn round_outcomes(
    cases: &[CaseRecord],
    gens: &BTreeMap<String, Vec<Generation>>,
    round: u32,
) -> Option<Vec<LabeledOutcome>> {
    cases.iter().map(|c| generation_at(gens, &c.id, round).map(|g| outcome(c, g, None))).collect()
}

struct ArmInput<'a> {
    model: &'a str,
    arm: String,
    label: String,
    granularity: Option<Granularity>,
    round: u32,
}

fn arm_row(dir: &RunDir, cases: &[CaseRecord], input: ArmInput<'_>) -> Result<ArmRow> {
    let gens = dir.generations(&input.arm)?;
    let bundles = dir.bundles(&input.arm)?;
    let mut row = ArmRow {
        model: input.model.to_string(),
        arm: input.label,
        granularity: input.granularity,
        status: Status::Pending,
        note: None,
        cases: cases.len(),
        f1: None,
        weighted_cost: None,
        confusion: None,
        refined: bundles.values().filter(|b| b.round + 1 == input.round && !b.is_empty()).count(),
        failed_cases: 0,
    };
    match round_outcomes(cases, &gens, input.round) {
        Some(outcomes) => {
            let c = Confusion::from_outcomes(&outcomes);
            row.status = Status::Done;
            row.f1 = c.f1();
            row.weighted_cost = Some(c.weighted_cost());
            row.confusion = Some(c);
            row.failed_cases = cases
                .iter()
                .filter_map(|c| generation_at(&gens, &c.id, input.round))
                .filter(|g| g.note.as_deref().is_some_and(|n| n.starts_with(store::BACKEND_ERROR)))
                .count();
        }
        None => match dir.failures(&input.arm)?.into_iter().rev().find(|f| f.case_id.is_none()) {
            Some(f) => {
                row.status = Status::Failed;
                row.note = Some(f.message);
            }
            None => row.note = Some("not run".into()),
        },
    }
    Ok(row)
}

/// The round-0 "No feedback" row shared by every arm table.
pub fn baseline(dir: &RunDir, cfg: &RunConfig, cases: &[CaseRecord]) -> Result<ArmRow> {
    let model = cfg.generation.model_name.as_str();
    arm_row(
        dir,
        cases,
        ArmInput { model, arm: arm::INITIAL.into(), label: "No feedback".into(), granularity: None, round: 0 },
    )
}

/// Round-1 row of one feedback channel at one granularity.
pub fn adapt_row(dir: &RunDir, cfg: &RunConfig, cases: &[CaseRecord], ch: &Channel, g: Granularity) -> Result<ArmRow> {
    let model = cfg.generation.model_name.as_str();
    arm_row(dir, cases, ArmInput { model, arm: arm::adapt(ch, g), label: ch.label(), granularity: Some(g), round: 1 })
}

pub fn table3(dir: &RunDir, cfg: &RunConfig, cases: &[CaseRecord]) -> Result<Vec<ArmRow>> {
    let mut rows = vec![baseline(dir, cfg, cases)?];
    for ch in arm::channels(cfg) {
        rows.push(adapt_row(dir, cfg, cases, &ch, cfg.experiment.granularity)?);
    }
    Ok(rows)
}

pub fn table4(dir: &RunDir, cfg: &RunConfig, cases: &[CaseRecord]) -> Result<Vec<ArmRow>> {
    let mut rows = vec![baseline(dir, cfg, cases)?];
    for g in [Granularity::EntireContent, Granularity::SinglePoint] {
        rows.push(adapt_row(dir, cfg, cases, &Channel::SelfReflection, g)?);
    }
    Ok(rows)
}

pub fn rounds(dir: &RunDir, cfg: &RunConfig, cases: &[CaseRecord]) -> Result<RoundsReport> {
    let e = &cfg.experiment;
    let gens = dir.generations(arm::ROUNDS)?;
    let mut report = RoundsReport {
        status: Status::Pending,
        note: None,
        source: Channel::label(&match e.rounds_source {
            factcheck_core::FeedbackSource::FinetunedSlm => Channel::FinetunedSlm,
            _ => Channel::SelfReflection,
        }),
        granularity: e.rounds_granularity,
        rows: Vec::new(),
    };
    let mut prev: Option<Vec<LabeledOutcome>> = None;
    for r in 0..=e.rounds {
        let Some(outcomes) = round_outcomes(cases, &gens, r) else {
            report.rows.clear();
            report.note = Some("not run".into());
            if let Some(f) = dir.failures(arm::ROUNDS)?.into_iter().rev().find(|f| f.case_id.is_none()) {
                report.status = Status::Failed;
                report.note = Some(f.message);
            }
            return Ok(report);
        };
        let c = Confusion::from_outcomes(&outcomes);
        let changed = prev
            .as_ref()
            .map(|p| p.iter().zip(&outcomes).filter(|(a, b)| a.predicted != b.predicted).count())
            .unwrap_or(0);
        report.rows.push(RoundRow { round: r, f1: c.f1(), weighted_cost: c.weighted_cost(), changed });
        prev = Some(outcomes);
    }
    report.status = Status::Done;
    Ok(report)
}

/// Every table, recomputed from raw records.
pub fn compute(dir: &RunDir) -> Result<Reports> {
    let info = dir.info()?;
    let cfg = &info.config;
    let cases = dir.cases()?;
    let initial = dir.generations(arm::INITIAL)?;
    let annotations = dir.annotations()?;
    let model = cfg.generation.model_name.as_str();

    let table1 = vec![association(model, &cases, &initial, &annotations).unwrap_or_else(|e| AssociationRow {
        model: model.to_string(),
        status: Status::Pending,
        note: Some(e.to_string()),
        cases: cases.len(),
        excluded: 0,
        hallucinated: 0,
        misclassified: 0,
        pearson: None,
        risk_difference: None,
    })];

    let scores = dir.scores()?;
    let mut table2 = Vec::new();
    let mut density = BTreeMap::new();
    for s in &cfg.scorers {
        let pending = |note: String| DetectionRow {
            scorer: s.id.clone(),
            status: Status::Pending,
            note: Some(note),
            points: 0,
            hallucinated: 0,
            auprc: None,
            balanced_accuracy: None,
            wilcoxon_p: None,
        };
        let Some(list) = scores.get(&s.id) else {
            table2.push(pending("no scores collected".into()));
            continue;
        };
        match scored_points(&cases, &initial, &annotations, list) {
            Ok(points) if !points.is_empty() => {
                table2.push(detection(&s.id, &points)?);
                density.insert(s.id.clone(), density_bins(&points, cfg.experiment.density_bins)?);
            }
            Ok(_) => table2.push(pending("no annotated points".into())),
            Err(e) => table2.push(pending(e.to_string())),
        }
    }

    Ok(Reports {
        run_id: info.run_id.clone(),
        table1,
        table2,
        table3: table3(dir, cfg, &cases)?,
        table4: table4(dir, cfg, &cases)?,
        rounds: rounds(dir, cfg, &cases)?,
        density,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.2}"))
}

fn real(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

fn status(s: Status) -> &'static str {
    match s {
        Status::Done => "done",
        Status::Pending => "pending",
        Status::Failed => "failed",
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

fn arm_csv(rows: &[ArmRow]) -> Vec<u8> {
    csv_bytes(
        &["model", "arm", "granularity", "status", "f1", "weighted_cost", "refined", "failed_cases", "note"],
        rows.iter().map(|r| {
            vec![
                r.model.clone(),
                r.arm.clone(),
                r.granularity.map_or("-", arm::granularity_label).to_string(),
                status(r.status).into(),
                pct(r.f1),
                r.weighted_cost.map_or_else(|| "NA".into(), |c| c.to_string()),
                r.refined.to_string(),
                r.failed_cases.to_string(),
                r.note.clone().unwrap_or_default(),
            ]
        }),
    )
}

/// File name to contents for everything under `reports/` except the manifest.
pub fn render(reports: &Reports) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    files.insert(
        "table1.csv".into(),
        csv_bytes(
            &["model", "status", "cases", "excluded", "hallucinated", "misclassified", "pearson", "risk_difference", "note"],
            reports.table1.iter().map(|r| {
                vec![
                    r.model.clone(),
                    status(r.status).into(),
                    r.cases.to_string(),
                    r.excluded.to_string(),
                    r.hallucinated.to_string(),
                    r.misclassified.to_string(),
                    real(r.pearson),
                    real(r.risk_difference),
                    r.note.clone().unwrap_or_default(),
                ]
            }),
        ),
    );
    files.insert("table1.json".into(), json_bytes(&reports.table1));
    files.insert(
        "table2.csv".into(),
        csv_bytes(
            &["scorer", "status", "points", "hallucinated", "auprc", "balanced_accuracy", "wilcoxon_p", "note"],
            reports.table2.iter().map(|r| {
                vec![
                    r.scorer.clone(),
                    status(r.status).into(),
                    r.points.to_string(),
                    r.hallucinated.to_string(),
                    pct(r.auprc),
                    pct(r.balanced_accuracy),
                    r.wilcoxon_p.map_or_else(|| "NA".into(), |p| format!("{p:.3e}")),
                    r.note.clone().unwrap_or_default(),
                ]
            }),
        ),
    );
    files.insert("table2.json".into(), json_bytes(&reports.table2));
    files.insert("table3.csv".into(), arm_csv(&reports.table3));
    files.insert("table3.json".into(), json_bytes(&reports.table3));
    files.insert("table4.csv".into(), arm_csv(&reports.table4));
    files.insert("table4.json".into(), json_bytes(&reports.table4));
    files.insert(
        "rounds.csv".into(),
        csv_bytes(
            &["round", "f1", "weighted_cost", "changed"],
            reports.rounds.rows.iter().map(|r| {
                vec![r.round.to_string(), pct(r.f1), r.weighted_cost.to_string(), r.changed.to_string()]
            }),
        ),
    );
    files.insert("rounds.json".into(), json_bytes(&reports.rounds));
    for (scorer, h) in &reports.density {
        files.insert(
            format!("density_{}.csv", sanitize(scorer)),
            csv_bytes(
                &["bin_low", "bin_high", "freq_h0", "freq_h1"],
                h.edges.iter().zip(h.freq_h0.iter().zip(&h.freq_h1)).map(|((lo, hi), (f0, f1))| {
                    vec![format!("{lo:.4}"), format!("{hi:.4}"), format!("{f0:.6}"), format!("{f1:.6}")]
                }),
            ),
        );
    }
    files
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Hashes of the raw inputs and the rendered outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn input_hashes(dir: &RunDir) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    for name in store::RAW_FILES {
        if let Some(h) = store::file_sha256(&dir.path(name))? {
            inputs.insert(name.to_string(), h);
        }
    }
    Ok(inputs)
}

/// Recompute and write every report plus `manifest.json`.
pub fn emit(dir: &RunDir) -> Result<Reports> {
    let reports = compute(dir)?;
    let files = render(&reports);
    let out = dir.path(store::REPORTS_DIR);
    if out.exists() {
        std::fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut outputs = BTreeMap::new();
    for (name, bytes) in &files {
        let p = out.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        outputs.insert(name.clone(), sha256_hex(bytes));
    }
    let manifest = Manifest { run_id: reports.run_id.clone(), inputs: input_hashes(dir)?, outputs };
    let p = out.join("manifest.json");
    std::fs::write(&p, json_bytes(&manifest)).map_err(|e| Error::io(&p, e))?;
    Ok(reports)
}

/// Recompute from raw records and compare with the written reports. Returns
/// one line per discrepancy; empty means the reports replay exactly.
pub fn verify(dir: &RunDir) -> Result<Vec<String>> {
    let out = dir.path(store::REPORTS_DIR);
    let manifest_path = out.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&manifest_path, e.line(), e.to_string()))?;
    let mut problems = Vec::new();
    if manifest.inputs != input_hashes(dir)? {
        problems.push("raw records changed since the reports were written".to_string());
    }
    let files = render(&compute(dir)?);
    for (name, bytes) in &files {
        match std::fs::read(out.join(name)) {
            Ok(on_disk) if on_disk == *bytes => {}
            Ok(_) => problems.push(format!("{name}: recomputed contents differ")),
            Err(_) => problems.push(format!("{name}: missing")),
        }
        if manifest.outputs.get(name) != Some(&sha256_hex(bytes)) {
            problems.push(format!("{name}: manifest hash differs"));
        }
    }
    for name in manifest.outputs.keys().filter(|n| !files.contains_key(*n)) {
        problems.push(format!("{name}: listed in manifest but no longer produced"));
    }
    Ok(problems)
}

#[cfg(test)]
mod tests {
    use super::*;
    use factcheck_core::dataset::{Attributes, Label};
    use factcheck_core::parser::parse_generation;

    fn case(id: &str, label: Label) -> CaseRecord {
        CaseRecord { id: id.into(), attributes: Attributes(vec![("age".into(), "50th percentile".into())]), label }
    }

    fn ann(case: &str, point: usize, h: bool) -> AnnotationRecord {
        AnnotationRecord {
            case_id: case.into(),
            round: 0,
            point_index: point,
            hallucinated: h,
            annotator: "a".into(),
            timestamp: String::new(),
        }
    }

    fn gens(list: &[(&str, &str)]) -> BTreeMap<String, Vec<Generation>> {
        list.iter().map(|(id, raw)| (id.to_string(), vec![parse_generation(raw, id, 0)])).collect()
    }

    #[test]
    fn perfect_association() {
        let cases = [case("a", Label::Good), case("b", Label::Good), case("c", Label::Bad), case("d", Label::Bad)];
        let g = gens(&[
            ("a", "bad credit\nX is low."),
            ("b", "good credit\nY is high."),
            ("c", "good credit\nZ is high."),
            ("d", "bad credit\nW is low."),
        ]);
        let anns = [ann("a", 1, true), ann("b", 1, false), ann("c", 1, true), ann("d", 1, false)];
        let row = association("m", &cases, &g, &anns).unwrap();
        assert_eq!(row.pearson, Some(1.0));
        assert_eq!(row.risk_difference, Some(1.0));
        assert_eq!((row.hallucinated, row.misclassified), (2, 2));
    }

    #[test]
    fn independent_association_is_zero() {
        let cases: Vec<CaseRecord> = ["a", "b", "c", "d"].iter().map(|id| case(id, Label::Good)).collect();
        let g = gens(&[
            ("a", "bad credit\nP."),
            ("b", "good credit\nP."),
            ("c", "bad credit\nP."),
            ("d", "good credit\nP."),
        ]);
        let anns = [ann("a", 1, true), ann("b", 1, true), ann("c", 1, false), ann("d", 1, false)];
        let row = association("m", &cases, &g, &anns).unwrap();
        assert_eq!(row.pearson, Some(0.0));
        assert_eq!(row.risk_difference, Some(0.0));
    }

    #[test]
    fn incomplete_annotations_list_cases() {
        let cases = [case("a", Label::Good), case("b", Label::Bad)];
        let g = gens(&[("a", "good credit\nP. Q."), ("b", "bad credit\nR.")]);
        let err = association("m", &cases, &g, &[ann("a", 1, false), ann("b", 1, false)]).unwrap_err();
        assert!(err.to_string().contains("a") && !err.to_string().contains("b"), "{err}");
    }

    #[test]
    fn pointless_cases_are_excluded() {
        let cases = [case("a", Label::Good), case("b", Label::Bad), case("c", Label::Bad)];
        let g = gens(&[("a", "good credit\nP."), ("b", "no idea"), ("c", "bad credit\nQ.")]);
        let row = association("m", &cases, &g, &[ann("a", 1, false), ann("c", 1, true)]).unwrap();
        assert_eq!(row.excluded, 1);
    }

    #[test]
    fn coverage_gap_is_error() {
        let cases = [case("a", Label::Good)];
        let g = gens(&[("a", "good credit\nP. Q.")]);
        let anns = [ann("a", 1, false), ann("a", 2, true)];
        let score = |p| VerifierScore {
            case_id: "a".into(),
            round: 0,
            point_index: p,
            prob: 0.9,
            scorer_id: "v".into(),
            trained_on_folds: Default::default(),
        };
        assert!(scored_points(&cases, &g, &anns, &[score(1)]).is_err());
        assert_eq!(scored_points(&cases, &g, &anns, &[score(1), score(2)]).unwrap().len(), 2);
    }

    #[test]
    fn perfect_scorer_detection() {
        let pts: Vec<ScoredPoint> =
            (0..10).map(|i| ScoredPoint { prob: if i < 4 { 1.0 } else { 0.0 }, truth: i < 4 }).collect();
        let row = detection("v", &pts).unwrap();
        assert_eq!(row.auprc, Some(100.0));
        assert_eq!(row.balanced_accuracy, Some(100.0));
        assert!(row.wilcoxon_p.unwrap() < 0.05);
    }

    #[test]
    fn formatting() {
        assert_eq!(pct(Some(66.666666)), "66.67");
        assert_eq!(pct(None), "NA");
        assert_eq!(real(Some(1.0 / 3f64.sqrt())), "0.5774");
        assert_eq!(sanitize("verifier:a/b"), "verifier_a_b");
    }
}
