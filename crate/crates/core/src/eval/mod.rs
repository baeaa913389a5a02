//! Detection-map post-processing and evaluation metrics: DSC, lesion-level
//! average precision at IoU ≥ 0.1, patient-level AUC-ROC, sensitivity at a
//! false-positive budget (FROC), and lesion-size stratification.

pub mod components;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use components::{components, intersection_size, iou, Connectivity};

pub const DEFAULT_THRESHOLD_STEPS: usize = 20;
pub const DEFAULT_IOU_MIN: f64 = 0.1;
pub const DEFAULT_FP_BUDGET: f64 = 1.0;
/// Voxelwise binarization threshold for DSC.
pub const BINARY_THRESHOLD: f64 = 0.5;
/// Size-class boundaries in mm³.
pub const SMALL_MAX_MM3: f64 = 931.0;
pub const LARGE_MIN_MM3: f64 = 2337.0;

const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCandidate {
    /// Ascending linear indices of a 26-connected component.
    pub voxels: Vec<usize>,
    pub confidence: f64,
}

fn check_prob_map(prob: &[f64], shape: [usize; 3]) -> Result<()> {
    if prob.len() != shape.iter().product::<usize>() {
        return Err(Error::Shape(format!(
            "probability map of length {} for shape {shape:?}",
            prob.len()
        )));
    }
    if let Some(v) = prob
        .iter()
        .find(|&&p| !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p))
    {
        return Err(Error::Domain(format!("probability {v} outside [0, 1]")));
    }
    Ok(())
}

/// Descending-threshold flood fill. At each threshold t = (steps − k)/steps,
/// k = 1..steps−1, every 26-connected component of {p ≥ t} that shares no
/// voxel with an already emitted candidate becomes a candidate with
/// confidence equal to its maximum probability. Output is sorted by
/// confidence (descending), then lowest voxel index.
pub fn extract_candidates(
    prob: &[f64],
    shape: [usize; 3],
    threshold_steps: usize,
) -> Result<Vec<DetectionCandidate>> {
    check_prob_map(prob, shape)?;
    if threshold_steps < 2 {
        return Err(Error::Config(format!(
            "need at least 2 threshold steps, got {threshold_steps}"
        )));
    }
    let mut claimed = vec![false; prob.len()];
    let mut out = Vec::new();
    for k in 1..threshold_steps {
        let t = (threshold_steps - k) as f64 / threshold_steps as f64;
        let above: Vec<bool> = prob.iter().map(|&p| p >= t).collect();
        for comp in components(&above, shape, Connectivity::TwentySix) {
            if comp.iter().any(|&v| claimed[v]) {
                continue;
            }
            comp.iter().for_each(|&v| claimed[v] = true);
            let confidence = comp
                .iter()
                .map(|&v| prob[v])
                .fold(f64::NEG_INFINITY, f64::max)
                .min(1.0);
            out.push(DetectionCandidate {
                voxels: comp,
                confidence,
            });
        }
    }
    out.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.voxels[0].cmp(&b.voxels[0]))
    });
    Ok(out)
}

/// 2|P∩G| / (|P| + |G|); 1 when both are empty.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "dsc: {} vs {} voxels",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Greedy one-to-one matching. Candidates, taken in the given order, claim
/// the unmatched lesion with the highest IoU (lowest index on ties) if that
/// IoU reaches `iou_min`. Returns per candidate the matched lesion and IoU.
pub fn match_candidates(
    candidates: &[DetectionCandidate],
    lesions: &[Vec<usize>],
    iou_min: f64,
) -> Vec<Option<(usize, f64)>> {
    let mut taken = vec![false; lesions.len()];
    candidates
        .iter()
        .map(|c| {
            let mut best: Option<(usize, f64)> = None;
            for (li, l) in lesions.iter().enumerate() {
                if taken[li] {
                    continue;
                }
                let v = iou(&c.voxels, l);
                if v >= iou_min && best.is_none_or(|(_, b)| v > b) {
                    best = Some((li, v));
                }
            }
            if let Some((li, _)) = best {
                taken[li] = true;
            }
            best
        })
        .collect()
}

/// One ranked detection across the evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub confidence: f64,
    pub case_id: usize,
    /// Position within its case's candidate list.
    pub index: usize,
    pub true_positive: bool,
}

fn rank(dets: &[ScoredDetection]) -> Vec<ScoredDetection> {
    let mut v = dets.to_vec();
    v.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.case_id.cmp(&b.case_id))
            .then(a.index.cmp(&b.index))
    });
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall after each entry of the ranked list.
pub fn pr_curve(dets: &[ScoredDetection], n_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    rank(dets)
        .iter()
        .enumerate()
        .map(|(k, d)| {
            tp += d.true_positive as usize;
            PrPoint {
                threshold: d.confidence,
                precision: tp as f64 / (k + 1) as f64,
                recall: if n_gt == 0 {
                    0.0
                } else {
                    tp as f64 / n_gt as f64
                },
            }
        })
        .collect()
}

/// All-points interpolated AP: Σ (r_k − r_{k−1}) · max_{j ≥ k} p_j over the
/// ranked list. Zero when there is no ground truth.
pub fn average_precision(dets: &[ScoredDetection], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let curve = pr_curve(dets, n_gt);
    let mut envelope = vec![0.0; curve.len()];
    let mut running = 0.0f64;
    for (i, p) in curve.iter().enumerate().rev() {
        running = running.max(p.precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in curve.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    ap
}

/// P(score⁺ > score⁻) + ½ P(tie), via midranks.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let npos = labels.iter().filter(|&&l| l).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Metric(
            "AUC-ROC needs both positive and negative cases".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = pos_rank_sum - (npos * (npos + 1)) as f64 / 2.0;
    Ok(u / (npos as f64 * nneg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub mean_fp: f64,
    pub sensitivity: f64,
}

/// One point per distinct confidence, highest first; a detection is kept
/// when its confidence is at least the threshold.
pub fn froc_curve(dets: &[ScoredDetection], n_gt: usize, n_cases: usize) -> Vec<FrocPoint> {
    let ranked = rank(dets);
    let mut out: Vec<FrocPoint> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, d) in ranked.iter().enumerate() {
        if d.true_positive {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_threshold = ranked
            .get(i + 1)
            .is_none_or(|n| n.confidence != d.confidence);
        if last_of_threshold {
            out.push(FrocPoint {
                threshold: d.confidence,
                mean_fp: fp as f64 / n_cases.max(1) as f64,
                sensitivity: if n_gt == 0 {
                    0.0
                } else {
                    tp as f64 / n_gt as f64
                },
            });
        }
    }
    out
}

/// Sensitivity at the operating point with the most detections whose mean
/// FP per case stays within `fp_budget`. Falls back to the highest
/// threshold when every threshold exceeds the budget; 0 without detections.
pub fn sensitivity_at_fp(
    dets: &[ScoredDetection],
    n_gt: usize,
    n_cases: usize,
    fp_budget: f64,
) -> f64 {
    let curve = froc_curve(dets, n_gt, n_cases);
    match curve.iter().rev().find(|p| p.mean_fp <= fp_budget) {
        Some(p) => p.sensitivity,
        None => curve.first().map_or(0.0, |p| p.sensitivity),
    }
}

// ---- size stratification -------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyMode {
    /// 931 / 2337 mm³.
    Fixed,
    /// Nearest-rank 33rd and 66th percentiles of the evaluation set.
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeGroup {
    Small,
    Medium,
    Large,
}

impl SizeGroup {
    pub const ALL: [SizeGroup; 3] = [Self::Small, Self::Medium, Self::Large];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeThresholds {
    pub lower_mm3: f64,
    pub upper_mm3: f64,
}

impl SizeThresholds {
    /// v < lower → small; lower ≤ v ≤ upper → medium; v > upper → large.
    pub fn group(&self, v: f64) -> SizeGroup {
        if v < self.lower_mm3 {
            SizeGroup::Small
        } else if v <= self.upper_mm3 {
            SizeGroup::Medium
        } else {
            SizeGroup::Large
        }
    }
}

/// Nearest-rank percentile: the value at 1-based rank ⌈p·n/100⌉ of the sorted data.
pub fn nearest_rank_percentile(values: &[f64], p: u32) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric("percentile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let rank = ((p as usize * n).div_ceil(100)).clamp(1, n);
    Ok(v[rank - 1])
}

pub fn size_thresholds(volumes_mm3: &[f64], mode: StratifyMode) -> Result<SizeThresholds> {
    if volumes_mm3.is_empty() {
        return Err(Error::Metric("cannot stratify an empty lesion set".into()));
    }
    Ok(match mode {
        StratifyMode::Fixed => SizeThresholds {
            lower_mm3: SMALL_MAX_MM3,
            upper_mm3: LARGE_MIN_MM3,
        },
        StratifyMode::Percentile => SizeThresholds {
            lower_mm3: nearest_rank_percentile(volumes_mm3, 33)?,
            upper_mm3: nearest_rank_percentile(volumes_mm3, 66)?,
        },
    })
}

pub fn stratify_by_size(
    volumes_mm3: &[f64],
    mode: StratifyMode,
) -> Result<(SizeThresholds, Vec<SizeGroup>)> {
    let th = size_thresholds(volumes_mm3, mode)?;
    Ok((th, volumes_mm3.iter().map(|&v| th.group(v)).collect()))
}

// ---- whole-set evaluation --------------------------------------------------

/// One case to evaluate: a probability map and its ground truth.
#[derive(Debug, Clone)]
pub struct CaseInput {
    pub case_id: usize,
    pub shape: [usize; 3],
    pub prob: Vec<f64>,
    pub gt: Vec<bool>,
    pub label: bool,
    pub voxel_volume_mm3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold_steps: usize,
    pub iou_min: f64,
    pub fp_budget: f64,
    pub stratify: StratifyMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold_steps: DEFAULT_THRESHOLD_STEPS,
            iou_min: DEFAULT_IOU_MIN,
            fp_budget: DEFAULT_FP_BUDGET,
            stratify: StratifyMode::Percentile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub confidence: f64,
    pub voxels: usize,
    pub matched_lesion: Option<usize>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRow {
    pub voxels: usize,
    pub volume_mm3: f64,
    pub group: SizeGroup,
    pub detected: bool,
    /// Dice of the lesion against the predicted components touching it.
    pub dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub case_id: usize,
    pub label: bool,
    pub dsc: f64,
    pub patient_score: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub candidates: Vec<CandidateRow>,
    pub lesions: Vec<LesionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_cases: usize,
    pub n_lesions: usize,
    pub n_candidates: usize,
    pub dsc: f64,
    pub ap: f64,
    /// Absent when only one patient class is present.
    pub auc_roc: Option<f64>,
    pub sen_at_fp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: SizeGroup,
    pub n_lesions: usize,
    pub dsc: Option<f64>,
    pub ap: f64,
    pub sen_at_fp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratified {
    pub mode: StratifyMode,
    pub thresholds: SizeThresholds,
    pub groups: Vec<GroupMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub options: EvalOptions,
    pub aggregate: Aggregate,
    pub stratified: Option<Stratified>,
    pub cases: Vec<CaseEvaluation>,
    pub pr_curve: Vec<PrPoint>,
    pub froc_curve: Vec<FrocPoint>,
}

struct CaseWork {
    candidates: Vec<DetectionCandidate>,
    lesions: Vec<Vec<usize>>,
    lesion_dsc: Vec<f64>,
    dsc: f64,
    patient_score: f64,
}

fn case_work(c: &CaseInput, opts: &EvalOptions) -> Result<CaseWork> {
    if c.gt.len() != c.prob.len() {
        return Err(Error::Shape(format!(
            "case {}: prediction and ground truth sizes differ",
            c.case_id
        )));
    }
    let candidates = extract_candidates(&c.prob, c.shape, opts.threshold_steps)?;
    let lesions = components(&c.gt, c.shape, Connectivity::TwentySix);
    let binary: Vec<bool> = c.prob.iter().map(|&p| p >= BINARY_THRESHOLD).collect();
    let pred_comps = components(&binary, c.shape, Connectivity::TwentySix);
    let lesion_dsc = lesions
        .iter()
        .map(|l| {
            let touching: Vec<&Vec<usize>> = pred_comps
                .iter()
                .filter(|p| intersection_size(p, l) > 0)
                .collect();
            let size: usize = touching.iter().map(|p| p.len()).sum();
            let inter: usize = touching.iter().map(|p| intersection_size(p, l)).sum();
            2.0 * inter as f64 / (size + l.len()) as f64
        })
        .collect();
    Ok(CaseWork {
        dsc: dsc(&binary, &c.gt)?,
        patient_score: c.prob.iter().copied().fold(0.0, f64::max),
        candidates,
        lesions,
        lesion_dsc,
    })
}

fn detections(
    works: &[CaseWork],
    cases: &[CaseInput],
    keep: &dyn Fn(usize, usize) -> bool,
    iou_min: f64,
) -> (Vec<ScoredDetection>, usize) {
    let mut dets = Vec::new();
    let mut n_gt = 0;
    for (w, c) in works.iter().zip(cases) {
        let kept: Vec<Vec<usize>> = w
            .lesions
            .iter()
            .enumerate()
            .filter(|(li, _)| keep(c.case_id, *li))
            .map(|(_, l)| l.clone())
            .collect();
        n_gt += kept.len();
        for (index, (cand, m)) in w
            .candidates
            .iter()
            .zip(match_candidates(&w.candidates, &kept, iou_min))
            .enumerate()
        {
            dets.push(ScoredDetection {
                confidence: cand.confidence,
                case_id: c.case_id,
                index,
                true_positive: m.is_some(),
            });
        }
    }
    (dets, n_gt)
}

/// Evaluates every case (in parallel) and aggregates the metrics.
pub fn evaluate(cases: &[CaseInput], opts: &EvalOptions) -> Result<EvalResult> {
    if cases.is_empty() {
        return Err(Error::Metric("no cases to evaluate".into()));
    }
    let works: Vec<CaseWork> = cases
        .par_iter()
        .map(|c| case_work(c, opts))
        .collect::<Result<_>>()?;
    let n_cases = cases.len();

    let (dets, n_gt) = detections(&works, cases, &|_, _| true, opts.iou_min);
    let scores: Vec<f64> = works.iter().map(|w| w.patient_score).collect();
    let labels: Vec<bool> = cases.iter().map(|c| c.label).collect();
    let auc = match auc_roc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::Metric(_)) => None,
        Err(e) => return Err(e),
    };

    let volumes: Vec<f64> = works
        .iter()
        .zip(cases)
        .flat_map(|(w, c)| {
            w.lesions
                .iter()
                .map(move |l| l.len() as f64 * c.voxel_volume_mm3)
        })
        .collect();
    let strat = if volumes.is_empty() {
        None
    } else {
        Some(stratify_by_size(&volumes, opts.stratify)?)
    };
    let group_of = |case_pos: usize, li: usize| -> SizeGroup {
        let (th, _) = strat.as_ref().expect("lesions exist");
        th.group(works[case_pos].lesions[li].len() as f64 * cases[case_pos].voxel_volume_mm3)
    };

    let mut case_rows = Vec::with_capacity(n_cases);
    for (pos, (w, c)) in works.iter().zip(cases).enumerate() {
        let matches = match_candidates(&w.candidates, &w.lesions, opts.iou_min);
        let tp = matches.iter().filter(|m| m.is_some()).count();
        let mut detected = vec![false; w.lesions.len()];
        matches
            .iter()
            .flatten()
            .for_each(|&(li, _)| detected[li] = true);
        case_rows.push(CaseEvaluation {
            case_id: c.case_id,
            label: c.label,
            dsc: w.dsc,
            patient_score: w.patient_score,
            tp,
            fp: matches.len() - tp,
            fn_: w.lesions.len() - tp,
            candidates: w
                .candidates
                .iter()
                .zip(&matches)
                .map(|(cand, m)| CandidateRow {
                    confidence: cand.confidence,
                    voxels: cand.voxels.len(),
                    matched_lesion: m.map(|(li, _)| li),
                    iou: m.map(|(_, v)| v),
                })
                .collect(),
            lesions: w
                .lesions
                .iter()
                .enumerate()
                .map(|(li, l)| LesionRow {
                    voxels: l.len(),
                    volume_mm3: l.len() as f64 * c.voxel_volume_mm3,
                    group: group_of(pos, li),
                    detected: detected[li],
                    dsc: w.lesion_dsc[li],
                })
                .collect(),
        });
    }

    let stratified = strat.as_ref().map(|(th, _)| {
        let pos_of: std::collections::HashMap<usize, usize> = cases
            .iter()
            .enumerate()
            .map(|(p, c)| (c.case_id, p))
            .collect();
        let groups = SizeGroup::ALL
            .iter()
            .map(|&grp| {
                let keep = |case_id: usize, li: usize| group_of(pos_of[&case_id], li) == grp;
                let (gd, gn) = detections(&works, cases, &keep, opts.iou_min);
                let dscs: Vec<f64> = case_rows
                    .iter()
                    .flat_map(|r| r.lesions.iter().filter(|l| l.group == grp).map(|l| l.dsc))
                    .collect();
                GroupMetrics {
                    group: grp,
                    n_lesions: gn,
                    dsc: (!dscs.is_empty()).then(|| dscs.iter().sum::<f64>() / dscs.len() as f64),
                    ap: average_precision(&gd, gn),
                    sen_at_fp: sensitivity_at_fp(&gd, gn, n_cases, opts.fp_budget),
                }
            })
            .collect();
        Stratified {
            mode: opts.stratify,
            thresholds: *th,
            groups,
        }
    });

    Ok(EvalResult {
        options: opts.clone(),
        aggregate: Aggregate {
            n_cases,
            n_lesions: n_gt,
            n_candidates: dets.len(),
            dsc: works.iter().map(|w| w.dsc).sum::<f64>() / n_cases as f64,
            ap: average_precision(&dets, n_gt),
            auc_roc: auc,
            sen_at_fp: sensitivity_at_fp(&dets, n_gt, n_cases, opts.fp_budget),
        },
        stratified,
        cases: case_rows,
        pr_curve: pr_curve(&dets, n_gt),
        froc_curve: froc_curve(&dets, n_gt, n_cases),
    })
}

pub fn pr_csv(curve: &[PrPoint]) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.precision, p.recall);
    }
    s
}

pub fn froc_csv(curve: &[FrocPoint]) -> String {
    let mut s = String::from("threshold,mean_fp,sensitivity\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.mean_fp, p.sensitivity);
    }
    s
}
