//! Candidate screening and feature extraction.
//!
//! Screens cell pairs for suspected oversegmentations, extracts
//! layer-to-layer EMD trajectories and their statistical summaries,
//! classifies the overlap-area trend of the virtually concatenated pair,
//! and assembles the fixed-order feature vector consumed by the
//! classifier.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ot::{geo_wasserstein, GeoWassersteinConfig, OtError};
use crate::volume::{mask_intersection, mask_overlap, CellIndex, CellRecord, Mask2D};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown label {0}")]
    UnknownLabel(u32),
    #[error(transparent)]
    Ot(#[from] OtError),
}

/// Which statistical summary layout the classifier consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureVariant {
    #[default]
    Default,
    Incomplete,
    Extra,
    Perturbed,
}

impl FeatureVariant {
    /// Quantile levels of the per-trajectory stats block.
    pub fn quantiles(&self) -> &'static [f64] {
        match self {
            FeatureVariant::Default => &[0.0, 0.25, 0.5, 0.75, 1.0],
            FeatureVariant::Incomplete => &[0.25, 0.5, 0.75],
            FeatureVariant::Extra => &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            FeatureVariant::Perturbed => &[0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }

    pub fn stats_len(&self) -> usize {
        self.quantiles().len()
    }

    /// The reduced Incomplete layout drops the shape-class one-hot,
    /// keeping the vector at 8 entries.
    pub fn has_class_one_hot(&self) -> bool {
        !matches!(self, FeatureVariant::Incomplete)
    }

    pub fn vector_len(&self) -> usize {
        2 * self.stats_len() + 2 + if self.has_class_one_hot() { 2 } else { 0 }
    }

    /// Index of the shape_index slot within the vector.
    pub fn shape_index_slot(&self) -> usize {
        2 * self.stats_len() + 1
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "default" => Some(FeatureVariant::Default),
            "incomplete" => Some(FeatureVariant::Incomplete),
            "extra" => Some(FeatureVariant::Extra),
            "perturbed" => Some(FeatureVariant::Perturbed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScreenConfig {
    pub max_gap: usize,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self { max_gap: 1 }
    }
}

/// A suspected oversegmented pair: upper fragment A (smaller z), lower
/// fragment B, and the contiguous gap strictly between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidatePair {
    pub label_a: u32,
    pub label_b: u32,
    /// z-layers strictly between bottom(A) and top(B); empty when touching
    pub gap_layers: Vec<usize>,
}

impl CandidatePair {
    pub fn gap(&self) -> usize {
        self.gap_layers.len()
    }
}

/// Screen all cell pairs for suspected oversegmentations.
///
/// A pair (A, B) qualifies iff A's bottom mask and B's top mask overlap
/// in (y, x) projection, the gap between them is at most `max_gap`
/// layers, and no complete third cell (top and bottom both strictly
/// inside the gap) overlaps the contact region. Noisy partial masks in
/// the gap are permitted.
pub fn screen_candidates(index: &CellIndex, cfg: &ScreenConfig) -> Vec<CandidatePair> {
    // cells grouped by top layer so each A only scans a small z-window
    let mut by_top: std::collections::BTreeMap<usize, Vec<u32>> = std::collections::BTreeMap::new();
    for rec in index.cells.values() {
        by_top.entry(rec.top_layer).or_default().push(rec.label);
    }

    let mut out = Vec::new();
    for a in index.cells.values() {
        let lo = a.bottom_layer + 1;
        let hi = a.bottom_layer + cfg.max_gap + 1;
        for (_, labels) in by_top.range(lo..=hi) {
            for &lb in labels {
                if lb == a.label {
                    continue;
                }
                let b = &index.cells[&lb];
                if let Some(pair) = check_pair(index, a, b, cfg) {
                    out.push(pair);
                }
            }
        }
    }
    out.sort_by_key(|p| (p.label_a, p.label_b));
    out
}

fn check_pair(
    index: &CellIndex,
    a: &CellRecord,
    b: &CellRecord,
    cfg: &ScreenConfig,
) -> Option<CandidatePair> {
    if a.bottom_layer >= b.top_layer {
        return None;
    }
    let gap = b.top_layer - a.bottom_layer - 1;
    if gap > cfg.max_gap {
        return None;
    }
    let contact = mask_intersection(a.bottom_mask(), b.top_mask());
    if contact.is_empty() {
        return None;
    }
    if gap > 0 {
        let contact_mask = Mask2D::new(0, 0, contact);
        // reject if a complete cell sits inside the gap over the contact
        for c in index.cells.values() {
            if c.label == a.label || c.label == b.label {
                continue;
            }
            if c.top_layer > a.bottom_layer && c.bottom_layer < b.top_layer {
                let overlaps = c
                    .masks
                    .values()
                    .any(|m| mask_overlap(m, &contact_mask) > 0);
                if overlaps {
                    return None;
                }
            }
        }
    }
    Some(CandidatePair {
        label_a: a.label,
        label_b: b.label,
        gap_layers: (a.bottom_layer + 1..b.top_layer).collect(),
    })
}

/// Layer-to-layer divergences within one cell, top to bottom.
#[derive(Debug, Clone)]
pub struct EmdTrajectory {
    pub label: u32,
    pub values: Vec<f64>,
    /// adjacencies skipped because an interior layer had no mask
    pub holes: usize,
}

fn cell_trajectory(rec: &CellRecord, ot: &GeoWassersteinConfig) -> Result<EmdTrajectory, OtError> {
    let masks: Vec<&Mask2D> = rec.masks.values().collect();
    let pairs: Vec<(&Mask2D, &Mask2D)> = masks
        .windows(2)
        .filter(|w| w[1].layer == w[0].layer + 1)
        .map(|w| (w[0], w[1]))
        .collect();
    let holes = masks.len().saturating_sub(1) - pairs.len();
    let values = pairs
        .par_iter()
        .map(|(m, n)| geo_wasserstein(m, n, ot))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EmdTrajectory {
        label: rec.label,
        values,
        holes,
    })
}

/// Per-fragment EMD trajectories plus the divergence across the gap.
pub fn extract_emd_trajectories(
    pair: &CandidatePair,
    index: &CellIndex,
    ot: &GeoWassersteinConfig,
) -> Result<(EmdTrajectory, f64, EmdTrajectory), FeatureError> {
    let a = index
        .get(pair.label_a)
        .ok_or(FeatureError::UnknownLabel(pair.label_a))?;
    let b = index
        .get(pair.label_b)
        .ok_or(FeatureError::UnknownLabel(pair.label_b))?;
    let traj_a = cell_trajectory(a, ot)?;
    let traj_b = cell_trajectory(b, ot)?;
    let emd_gap = geo_wasserstein(a.bottom_mask(), b.top_mask(), ot)?;
    Ok((traj_a, emd_gap, traj_b))
}

/// Statistical summary of one trajectory under a variant's quantile set.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsBlock {
    pub values: Vec<f64>,
    /// trajectory was empty (single-layer fragment); values are zeros
    pub empty: bool,
}

/// Quantile by linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn summarize(traj: &EmdTrajectory, variant: FeatureVariant) -> StatsBlock {
    let qs = variant.quantiles();
    if traj.values.is_empty() {
        return StatsBlock {
            values: vec![0.0; qs.len()],
            empty: true,
        };
    }
    let mut sorted = traj.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    StatsBlock {
        values: qs.iter().map(|&q| quantile(&sorted, q)).collect(),
        empty: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeClass {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeResult {
    pub class: ShapeClass,
    /// raw goodness of fit, before per-class normalization
    pub r2: f64,
    /// normalized R², clamped to [0, 1]
    pub shape_index: f64,
    /// overlap array too short for a meaningful fit
    pub degenerate: bool,
}

/// Per-class min-max normalization of R², fitted on the training corpus
/// and persisted with the model. Identity by default.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ShapeNormalizers {
    pub linear: (f64, f64),
    pub quadratic: (f64, f64),
}

impl Default for ShapeNormalizers {
    fn default() -> Self {
        Self {
            linear: (0.0, 1.0),
            quadratic: (0.0, 1.0),
        }
    }
}

impl ShapeNormalizers {
    pub fn apply(&self, class: ShapeClass, r2: f64) -> f64 {
        let (lo, hi) = match class {
            ShapeClass::Linear => self.linear,
            ShapeClass::Quadratic => self.quadratic,
        };
        if hi - lo <= f64::EPSILON {
            return r2.clamp(0.0, 1.0);
        }
        ((r2 - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    /// Fit per-class (min, max) over observed raw R² values.
    pub fn fit(observations: &[(ShapeClass, f64)]) -> Self {
        let mut out = Self::default();
        for class in [ShapeClass::Linear, ShapeClass::Quadratic] {
            let vals: Vec<f64> = observations
                .iter()
                .filter(|(c, _)| *c == class)
                .map(|&(_, r)| r)
                .collect();
            if vals.len() >= 2 {
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    match class {
                        ShapeClass::Linear => out.linear = (lo, hi),
                        ShapeClass::Quadratic => out.quadratic = (lo, hi),
                    }
                }
            }
        }
        out
    }
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn strictly_decreasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Strict rise followed by strict fall (the circular pattern), with at
/// least one step on each side.
fn rise_then_fall(v: &[usize]) -> bool {
    let Some(peak) = v
        .iter()
        .enumerate()
        .max_by_key(|&(_, x)| *x)
        .map(|(i, _)| i)
    else {
        return false;
    };
    if peak == 0 || peak == v.len() - 1 {
        return false;
    }
    strictly_increasing(&v[..=peak]) && strictly_decreasing(&v[peak..])
}

/// R² of the least-squares fit of `y` on polynomial powers of 0..n-1.
fn regression_r2(y: &[f64], degree: usize) -> f64 {
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return 1.0;
    }
    let k = degree + 1;
    // normal equations: (X^T X) beta = X^T y
    let mut xtx = vec![vec![0.0f64; k]; k];
    let mut xty = vec![0.0f64; k];
    for (i, &yi) in y.iter().enumerate() {
        let x = i as f64;
        let mut pow = vec![1.0; k];
        for p in 1..k {
            pow[p] = pow[p - 1] * x;
        }
        for r in 0..k {
            xty[r] += pow[r] * yi;
            for c in 0..k {
                xtx[r][c] += pow[r] * pow[c];
            }
        }
    }
    let beta = solve_dense(&mut xtx, &mut xty);
    let ss_res: f64 = y
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            let x = i as f64;
            let mut pred = 0.0;
            let mut pow = 1.0;
            for b in &beta {
                pred += b * pow;
                pow *= x;
            }
            (yi - pred).powi(2)
        })
        .sum();
    1.0 - ss_res / ss_tot
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let d = a[col][col];
        if d.abs() < 1e-12 {
            continue;
        }
        for row in col + 1..n {
            let f = a[row][col] / d;
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for c in row + 1..n {
            s -= a[row][c] * x[c];
        }
        x[row] = if a[row][row].abs() < 1e-12 {
            0.0
        } else {
            s / a[row][row]
        };
    }
    x
}

/// Overlap-area array of the virtually concatenated pair: A's consecutive
/// occupied layers, the A-bottom/B-top contact, then B's layers.
pub fn overlap_array(pair: &CandidatePair, index: &CellIndex) -> Result<Vec<usize>, FeatureError> {
    let a = index
        .get(pair.label_a)
        .ok_or(FeatureError::UnknownLabel(pair.label_a))?;
    let b = index
        .get(pair.label_b)
        .ok_or(FeatureError::UnknownLabel(pair.label_b))?;
    let mut masks: Vec<&Mask2D> = a.masks.values().collect();
    masks.extend(b.masks.values());
    Ok(masks
        .windows(2)
        .map(|w| mask_overlap(w[0], w[1]))
        .collect())
}

/// Classify the overlap trend of the concatenated pair.
pub fn shape_classify(
    pair: &CandidatePair,
    index: &CellIndex,
    normalizers: &ShapeNormalizers,
) -> Result<ShapeResult, FeatureError> {
    let overlaps = overlap_array(pair, index)?;
    Ok(classify_overlaps(&overlaps, normalizers))
}

pub fn classify_overlaps(overlaps: &[usize], normalizers: &ShapeNormalizers) -> ShapeResult {
    if overlaps.len() < 3 {
        return ShapeResult {
            class: ShapeClass::Linear,
            r2: 1.0,
            shape_index: normalizers.apply(ShapeClass::Linear, 1.0),
            degenerate: true,
        };
    }
    let y: Vec<f64> = overlaps.iter().map(|&v| v as f64).collect();
    let lin = regression_r2(&y, 1);
    let quad = regression_r2(&y, 2);
    let (class, mut r2) = if lin >= quad {
        (ShapeClass::Linear, lin)
    } else {
        (ShapeClass::Quadratic, quad)
    };
    if strictly_increasing(overlaps) || strictly_decreasing(overlaps) || rise_then_fall(overlaps) {
        r2 = 1.0;
    }
    ShapeResult {
        class,
        r2,
        shape_index: normalizers.apply(class, r2),
        degenerate: false,
    }
}

/// Fixed-order numeric feature vector for one candidate pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub variant: FeatureVariant,
    pub values: Vec<f64>,
    pub shape_class: ShapeClass,
    pub raw_r2: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureConfig {
    pub variant: FeatureVariant,
    pub ot: GeoWassersteinConfig,
    pub normalizers: ShapeNormalizers,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            variant: FeatureVariant::Default,
            ot: GeoWassersteinConfig::default(),
            normalizers: ShapeNormalizers::default(),
        }
    }
}

/// Assemble the classifier input: [statsA, statsB, emd_gap, shape_index,
/// class one-hot (linear, quadratic)].
pub fn build_feature_vector(
    pair: &CandidatePair,
    index: &CellIndex,
    cfg: &FeatureConfig,
) -> Result<FeatureVector, FeatureError> {
    let (traj_a, emd_gap, traj_b) = extract_emd_trajectories(pair, index, &cfg.ot)?;
    let stats_a = summarize(&traj_a, cfg.variant);
    let stats_b = summarize(&traj_b, cfg.variant);
    let shape = shape_classify(pair, index, &cfg.normalizers)?;
    let mut values = Vec::with_capacity(cfg.variant.vector_len());
    values.extend_from_slice(&stats_a.values);
    values.extend_from_slice(&stats_b.values);
    values.push(emd_gap);
    values.push(shape.shape_index);
    if cfg.variant.has_class_one_hot() {
        match shape.class {
            ShapeClass::Linear => values.extend_from_slice(&[1.0, 0.0]),
            ShapeClass::Quadratic => values.extend_from_slice(&[0.0, 1.0]),
        }
    }
    debug_assert_eq!(values.len(), cfg.variant.vector_len());
    Ok(FeatureVector {
        variant: cfg.variant,
        values,
        shape_class: shape.class,
        raw_r2: shape.r2,
    })
}

/// One audit row per candidate pair for CSV export.
pub fn export_candidates_csv<W: std::io::Write>(
    rows: &[(CandidatePair, FeatureVector)],
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let variant = rows.first().map(|(_, f)| f.variant).unwrap_or_default();
    let mut header = vec![
        "label_a".to_string(),
        "label_b".to_string(),
        "gap".to_string(),
    ];
    for i in 0..variant.vector_len() {
        header.push(format!("f{i}"));
    }
    w.write_record(&header)?;
    for (pair, feat) in rows {
        let mut rec = vec![
            pair.label_a.to_string(),
            pair.label_b.to_string(),
            pair.gap().to_string(),
        ];
        rec.extend(feat.values.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
