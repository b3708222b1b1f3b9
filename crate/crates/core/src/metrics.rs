//! Segmentation and classifier quality metrics plus review reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpolate::{ChangeRecord, Verdict};
use crate::volume::LabelVolume;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("volume dims differ: {0:?} vs {1:?}")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("ground truth has no cells")]
    EmptyGroundTruth,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Injective matching between predicted and ground-truth labels at one
/// IoU threshold.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub threshold: f64,
    /// (pred label, gt label, IoU), every IoU >= threshold
    pub matches: Vec<(u32, u32, f64)>,
    pub unmatched_pred: Vec<u32>,
    pub unmatched_gt: Vec<u32>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.matches.len()
    }
    pub fn fp(&self) -> usize {
        self.unmatched_pred.len()
    }
    pub fn fn_(&self) -> usize {
        self.unmatched_gt.len()
    }
}

fn label_sizes(v: &LabelVolume) -> BTreeMap<u32, usize> {
    let mut sizes = BTreeMap::new();
    for &l in &v.data {
        if l != 0 {
            *sizes.entry(l).or_insert(0) += 1;
        }
    }
    sizes
}

/// All (pred, gt) pairs with nonzero voxel intersection and their IoU.
fn overlap_ious(
    pred: &LabelVolume,
    gt: &LabelVolume,
) -> (Vec<(u32, u32, f64)>, BTreeSet<u32>, BTreeSet<u32>) {
    let ps = label_sizes(pred);
    let gs = label_sizes(gt);
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        if p != 0 && g != 0 {
            *inter.entry((p, g)).or_insert(0) += 1;
        }
    }
    let ious = inter
        .into_iter()
        .map(|((p, g), i)| {
            let union = ps[&p] + gs[&g] - i;
            (p, g, i as f64 / union as f64)
        })
        .collect();
    (ious, ps.into_keys().collect(), gs.into_keys().collect())
}

/// Greedy one-to-one matching in decreasing IoU order, accepting only
/// pairs at or above the threshold.
pub fn match_cells(
    pred: &LabelVolume,
    gt: &LabelVolume,
    threshold: f64,
) -> Result<MatchResult, MetricsError> {
    if pred.dims != gt.dims {
        return Err(MetricsError::DimMismatch(pred.dims, gt.dims));
    }
    let (mut ious, pred_labels, gt_labels) = overlap_ious(pred, gt);
    // descending IoU; ties broken by labels for determinism
    ious.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut used_pred = BTreeSet::new();
    let mut used_gt = BTreeSet::new();
    let mut matches = Vec::new();
    for (p, g, iou) in ious {
        if iou < threshold || used_pred.contains(&p) || used_gt.contains(&g) {
            continue;
        }
        used_pred.insert(p);
        used_gt.insert(g);
        matches.push((p, g, iou));
    }
    Ok(MatchResult {
        threshold,
        unmatched_pred: pred_labels.difference(&used_pred).copied().collect(),
        unmatched_gt: gt_labels.difference(&used_gt).copied().collect(),
        matches,
    })
}

/// AP = TP / (TP + FN + FP). Empty prediction vs empty truth is 1.
pub fn average_precision(
    pred: &LabelVolume,
    gt: &LabelVolume,
    threshold: f64,
) -> Result<f64, MetricsError> {
    let m = match_cells(pred, gt, threshold)?;
    let denom = m.tp() + m.fn_() + m.fp();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(m.tp() as f64 / denom as f64)
}

pub const MAP_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

/// Mean AP over the standard IoU thresholds.
pub fn mean_ap(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    for t in MAP_THRESHOLDS {
        sum += average_precision(pred, gt, t)?;
    }
    Ok(sum / MAP_THRESHOLDS.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JaccardScores {
    /// mean IoU over matched pairs only
    pub jaccard_matched: f64,
    /// unmatched ground-truth cells contribute 0
    pub jaccard_penalized: f64,
}

/// Mean best-overlap IoU between predicted and ground-truth cells.
pub fn jaccard(pred: &LabelVolume, gt: &LabelVolume) -> Result<JaccardScores, MetricsError> {
    let m = match_cells(pred, gt, 0.0)?;
    let n_gt = m.tp() + m.fn_();
    if n_gt == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let sum: f64 = m.matches.iter().map(|&(_, _, iou)| iou).sum();
    let matched = if m.tp() > 0 { sum / m.tp() as f64 } else { 0.0 };
    Ok(JaccardScores {
        jaccard_matched: matched,
        jaccard_penalized: sum / n_gt as f64,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Recall/precision/F1 over predicted vs true verdicts; Merge is the
/// positive class. Degenerate ratios (0/0) are reported as 1.
pub fn classification_report(
    predicted: &[Verdict],
    truth: &[Verdict],
) -> ClassificationReport {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0, 0, 0);
    for (&p, &t) in predicted.iter().zip(truth.iter()) {
        match (p, t) {
            (Verdict::Merge, Verdict::Merge) => tp += 1,
            (Verdict::Merge, Verdict::Keep) => fp += 1,
            (Verdict::Keep, Verdict::Merge) => fn_ += 1,
            (Verdict::Keep, Verdict::Keep) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let recall = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassificationReport {
        recall,
        precision,
        f1,
        tp,
        fp,
        fn_,
        tn,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackMetrics {
    pub mean_ap: f64,
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub jaccard: JaccardScores,
    pub n_pred_cells: usize,
    pub n_gt_cells: usize,
}

/// All segmentation metrics for one stack, for the per-stack JSON report.
pub fn stack_metrics(pred: &LabelVolume, gt: &LabelVolume) -> Result<StackMetrics, MetricsError> {
    let mut per = Vec::new();
    for t in MAP_THRESHOLDS {
        per.push((t, average_precision(pred, gt, t)?));
    }
    Ok(StackMetrics {
        mean_ap: per.iter().map(|&(_, a)| a).sum::<f64>() / per.len() as f64,
        ap_per_threshold: per,
        jaccard: jaccard(pred, gt)?,
        n_pred_cells: label_sizes(pred).len(),
        n_gt_cells: label_sizes(gt).len(),
    })
}

fn label_bbox(v: &LabelVolume, label: u32) -> Option<(usize, usize, usize, usize, usize, usize)> {
    let (nz, ny, nx) = v.dims;
    let mut bbox: Option<(usize, usize, usize, usize, usize, usize)> = None;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if v.get(z, y, x) == label {
                    bbox = Some(match bbox {
                        None => (z, z, y, y, x, x),
                        Some((z0, z1, y0, y1, x0, x1)) => (
                            z0.min(z),
                            z1.max(z),
                            y0.min(y),
                            y1.max(y),
                            x0.min(x),
                            x1.max(x),
                        ),
                    });
                }
            }
        }
    }
    bbox
}

/// CSV listing every correction with the merged cell's bounding box in the
/// corrected volume. The trailing verdict column is left blank for manual
/// review.
pub fn review_report_csv(
    corrected: &LabelVolume,
    log: &[ChangeRecord],
) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "label_a",
        "label_b",
        "verdict",
        "probability",
        "gap_layers",
        "z0",
        "z1",
        "y0",
        "y1",
        "x0",
        "x1",
        "fallback",
        "reviewer_verdict",
    ])?;
    for rec in log {
        let bbox = label_bbox(corrected, rec.resolved_a);
        let gaps = rec
            .gap_layers
            .iter()
            .map(|z| z.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let b = |i: usize| {
            bbox.map(|t| {
                [t.0, t.1, t.2, t.3, t.4, t.5][i].to_string()
            })
            .unwrap_or_default()
        };
        w.write_record([
            rec.label_a.to_string(),
            rec.label_b.to_string(),
            format!("{:?}", rec.verdict),
            format!("{:.6}", rec.probability),
            gaps,
            b(0),
            b(1),
            b(2),
            b(3),
            b(4),
            b(5),
            rec.fallback.to_string(),
            String::new(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf8 csv"))
}
