//! Repair of confirmed oversegmentations along the slicing axis.
//!
//! The missing gap-layer mask is reconstructed by optimal-transport
//! interpolation between the boundary contours of the two fragments'
//! facing masks, then the fragments are merged under the upper label.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::CandidatePair;
use crate::ot::{displacement_plan, OtError, PointDistribution};
use crate::volume::{LabelVolume, Mask2D};

#[derive(Debug, Error)]
pub enum InterpolateError {
    #[error("empty mask")]
    EmptyMask,
    #[error("interpolation parameter {0} outside [0, 1]")]
    BadParameter(f64),
    #[error("label {0} absent from volume")]
    StaleLabel(u32),
    #[error("conflicting decisions for pair ({0}, {1})")]
    ConflictingDecisions(u32, u32),
    #[error("merge decision has {masks} masks for {gaps} gap layers")]
    MaskCountMismatch { masks: usize, gaps: usize },
    #[error(transparent)]
    Ot(#[from] OtError),
}

/// Contour pixels of a mask, each carrying uniform mass.
#[derive(Debug, Clone)]
pub struct BoundaryCloud {
    pub pixels: Vec<(u32, u32)>,
}

impl BoundaryCloud {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn to_distribution(&self) -> Result<PointDistribution, OtError> {
        let w = 1.0 / self.pixels.len() as f64;
        PointDistribution::new(
            self.pixels
                .iter()
                .map(|&(y, x)| [y as f64, x as f64])
                .collect(),
            vec![w; self.pixels.len()],
        )
    }
}

/// Mask pixels with at least one 8-neighbor outside the mask.
pub fn extract_boundary(mask: &Mask2D) -> Result<BoundaryCloud, InterpolateError> {
    if mask.pixels.is_empty() {
        return Err(InterpolateError::EmptyMask);
    }
    let set: BTreeSet<(u32, u32)> = mask.pixels.iter().copied().collect();
    let pixels = mask
        .pixels
        .iter()
        .copied()
        .filter(|&(y, x)| {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || !set.contains(&(ny as u32, nx as u32)) {
                        return true;
                    }
                }
            }
            false
        })
        .collect();
    Ok(BoundaryCloud { pixels })
}

fn round_point(y: f64, x: f64) -> (i64, i64) {
    (y.round() as i64, x.round() as i64)
}

/// 8-connected line between two grid points, endpoints included.
fn bresenham(a: (i64, i64), b: (i64, i64), out: &mut BTreeSet<(i64, i64)>) {
    let (mut y, mut x) = a;
    let dy = (b.0 - a.0).abs();
    let dx = (b.1 - a.1).abs();
    let sy = if a.0 < b.0 { 1 } else { -1 };
    let sx = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx - dy;
    loop {
        out.insert((y, x));
        if (y, x) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 > -dy {
            err -= dy;
            x += sx;
        }
        if e2 < dx {
            err += dx;
            y += sy;
        }
    }
}

/// Fill the interior of an 8-connected contour: exterior flood fill with
/// 4-connectivity over the padded bounding box, complement is the mask.
fn fill_contour(contour: &BTreeSet<(i64, i64)>) -> Vec<(i64, i64)> {
    let min_y = contour.iter().map(|p| p.0).min().unwrap() - 1;
    let max_y = contour.iter().map(|p| p.0).max().unwrap() + 1;
    let min_x = contour.iter().map(|p| p.1).min().unwrap() - 1;
    let max_x = contour.iter().map(|p| p.1).max().unwrap() + 1;
    let h = (max_y - min_y + 1) as usize;
    let w = (max_x - min_x + 1) as usize;
    let idx = |y: i64, x: i64| (y - min_y) as usize * w + (x - min_x) as usize;
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    outside[idx(min_y, min_x)] = true;
    queue.push_back((min_y, min_x));
    while let Some((y, x)) = queue.pop_front() {
        for (ny, nx) in [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
            if ny < min_y || ny > max_y || nx < min_x || nx > max_x {
                continue;
            }
            if outside[idx(ny, nx)] || contour.contains(&(ny, nx)) {
                continue;
            }
            outside[idx(ny, nx)] = true;
            queue.push_back((ny, nx));
        }
    }
    let mut result = Vec::new();
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            if !outside[idx(y, x)] {
                result.push((y, x));
            }
        }
    }
    result.extend(contour.iter().copied());
    result.sort_unstable();
    result.dedup();
    result
}

fn dilate(pixels: &[(u32, u32)]) -> BTreeSet<(i64, i64)> {
    let mut out = BTreeSet::new();
    for &(y, x) in pixels {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                out.insert((y as i64 + dy, x as i64 + dx));
            }
        }
    }
    out
}

fn clamp_pixels(pixels: impl IntoIterator<Item = (i64, i64)>) -> Vec<(u32, u32)> {
    pixels
        .into_iter()
        .filter(|&(y, x)| y >= 0 && x >= 0)
        .map(|(y, x)| (y as u32, x as u32))
        .collect()
}

/// An interpolated gap-layer mask, tagged when the OT path failed and the
/// dilation fallback was used instead.
#[derive(Debug, Clone)]
pub struct InterpolatedMask {
    pub layer: usize,
    pub pixels: Vec<(u32, u32)>,
    pub fallback: bool,
}

/// Intersection of the radius-1 dilations of the two masks; union of the
/// masks when even that is empty.
fn fallback_mask(src: &Mask2D, dst: &Mask2D) -> Vec<(u32, u32)> {
    let da = dilate(&src.pixels);
    let db = dilate(&dst.pixels);
    let inter: Vec<(i64, i64)> = da.intersection(&db).copied().collect();
    if !inter.is_empty() {
        return clamp_pixels(inter);
    }
    let mut u = src.pixels.clone();
    u.extend_from_slice(&dst.pixels);
    u.sort_unstable();
    u.dedup();
    u
}

/// Intermediate mask at parameter `t` between `src` (t=0) and `dst` (t=1).
///
/// Matches the boundary clouds by exact optimal transport, emits the
/// rounded convex combination of every matched pixel pair, bridges
/// consecutive contour points with 8-connected segments, and fills the
/// closed contour. Returns the pixel set and a fallback flag.
pub fn interpolate_mask(
    src: &Mask2D,
    dst: &Mask2D,
    t: f64,
) -> Result<(Vec<(u32, u32)>, bool), InterpolateError> {
    if !(0.0..=1.0).contains(&t) || !t.is_finite() {
        return Err(InterpolateError::BadParameter(t));
    }
    if src.pixels.is_empty() || dst.pixels.is_empty() {
        return Err(InterpolateError::EmptyMask);
    }
    if t == 0.0 {
        return Ok((src.pixels.clone(), false));
    }
    if t == 1.0 {
        return Ok((dst.pixels.clone(), false));
    }
    let ba = extract_boundary(src)?;
    let bb = extract_boundary(dst)?;
    let pa = ba.to_distribution()?;
    let pb = bb.to_distribution()?;
    let plan = match displacement_plan(&pa, &pb) {
        Ok(p) => p,
        Err(_) => return Ok((fallback_mask(src, dst), true)),
    };

    let mut contour: BTreeSet<(i64, i64)> = BTreeSet::new();
    // barycentric image of each boundary pixel under the plan, per side
    let mut img_a: Vec<[f64; 3]> = vec![[0.0; 3]; ba.len()]; // (sum_w*y, sum_w*x, sum_w)
    let mut img_b: Vec<[f64; 3]> = vec![[0.0; 3]; bb.len()];
    for &(i, j, w) in &plan.entries {
        let (ay, ax) = ba.pixels[i];
        let (by, bx) = bb.pixels[j];
        let my = (1.0 - t) * ay as f64 + t * by as f64;
        let mx = (1.0 - t) * ax as f64 + t * bx as f64;
        contour.insert(round_point(my, mx));
        img_a[i][0] += w * by as f64;
        img_a[i][1] += w * bx as f64;
        img_a[i][2] += w;
        img_b[j][0] += w * ay as f64;
        img_b[j][1] += w * ax as f64;
        img_b[j][2] += w;
    }
    let image_of = |p: (u32, u32), acc: &[f64; 3], from_src: bool| -> (i64, i64) {
        let (oy, ox) = if acc[2] > 0.0 {
            (acc[0] / acc[2], acc[1] / acc[2])
        } else {
            (p.0 as f64, p.1 as f64)
        };
        if from_src {
            round_point((1.0 - t) * p.0 as f64 + t * oy, (1.0 - t) * p.1 as f64 + t * ox)
        } else {
            round_point((1.0 - t) * oy + t * p.0 as f64, (1.0 - t) * ox + t * p.1 as f64)
        }
    };
    // bridge the images of 8-adjacent boundary pixels on both sides; the
    // contour order is a subgraph of this adjacency, so every consecutive
    // pair gets a segment
    let bridge = |pixels: &[(u32, u32)], imgs: &[[f64; 3]], from_src: bool,
                  contour: &mut BTreeSet<(i64, i64)>| {
        let set: BTreeMap<(u32, u32), usize> =
            pixels.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        for (k, &(y, x)) in pixels.iter().enumerate() {
            let p_img = image_of((y, x), &imgs[k], from_src);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 {
                        continue;
                    }
                    if let Some(&m) = set.get(&(ny as u32, nx as u32)) {
                        if m > k {
                            let q_img = image_of((ny as u32, nx as u32), &imgs[m], from_src);
                            bresenham(p_img, q_img, contour);
                        }
                    }
                }
            }
        }
    };
    bridge(&ba.pixels, &img_a, true, &mut contour);
    bridge(&bb.pixels, &img_b, false, &mut contour);

    let filled = fill_contour(&contour);
    let expected = src.pixels.len().min(dst.pixels.len());
    if filled.len() * 2 < expected {
        // contour failed to close; fill collapsed to the contour itself
        return Ok((fallback_mask(src, dst), true));
    }
    let mut out: BTreeSet<(i64, i64)> = filled.into_iter().collect();
    // facing masks of a falsely split cell sit almost on top of each other
    // and the missing slice reaches at least as far as either neighbour;
    // rounding the transported contour shaves a boundary ring, so when the
    // overlap dominates we also claim the pixels where the masks agree plus,
    // inside a 1-px band around their disagreement, the nearer neighbour's
    // pixels and the ring where both dilations meet. Identical masks gain
    // nothing; disjoint masks keep the pure transport shape.
    let src_set: BTreeSet<(u32, u32)> = src.pixels.iter().copied().collect();
    let dst_set: BTreeSet<(u32, u32)> = dst.pixels.iter().copied().collect();
    let overlap = src.pixels.iter().filter(|p| dst_set.contains(p)).count();
    if overlap * 2 >= expected {
        out.extend(
            src.pixels
                .iter()
                .filter(|p| dst_set.contains(p))
                .map(|&(y, x)| (y as i64, x as i64)),
        );
        let sym: Vec<(u32, u32)> = src
            .pixels
            .iter()
            .filter(|p| !dst_set.contains(p))
            .chain(dst.pixels.iter().filter(|p| !src_set.contains(p)))
            .copied()
            .collect();
        if !sym.is_empty() {
            let band = dilate(&sym);
            let da = dilate(&src.pixels);
            let db = dilate(&dst.pixels);
            out.extend(da.intersection(&db).filter(|p| band.contains(p)));
            if t <= 0.5 {
                out.extend(
                    src.pixels
                        .iter()
                        .map(|&(y, x)| (y as i64, x as i64))
                        .filter(|p| band.contains(p)),
                );
            }
            if t >= 0.5 {
                out.extend(
                    dst.pixels
                        .iter()
                        .map(|&(y, x)| (y as i64, x as i64))
                        .filter(|p| band.contains(p)),
                );
            }
        }
    }
    Ok((clamp_pixels(out), false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Merge,
    Keep,
}

/// Classifier outcome for one candidate pair plus the repair payload.
#[derive(Debug, Clone)]
pub struct CorrectionDecision {
    pub pair: CandidatePair,
    pub verdict: Verdict,
    pub probability: f64,
    pub masks: Vec<InterpolatedMask>,
}

impl CorrectionDecision {
    pub fn keep(pair: CandidatePair, probability: f64) -> Self {
        Self {
            pair,
            verdict: Verdict::Keep,
            probability,
            masks: Vec::new(),
        }
    }
}

/// Build a Merge decision: one interpolated mask per gap layer at evenly
/// spaced parameters between the facing masks.
pub fn merge_decision(
    pair: CandidatePair,
    probability: f64,
    src: &Mask2D,
    dst: &Mask2D,
) -> Result<CorrectionDecision, InterpolateError> {
    let n = pair.gap_layers.len();
    let mut masks = Vec::with_capacity(n);
    for (k, &layer) in pair.gap_layers.iter().enumerate() {
        let t = (k + 1) as f64 / (n + 1) as f64;
        let (pixels, fallback) = interpolate_mask(src, dst, t)?;
        masks.push(InterpolatedMask {
            layer,
            pixels,
            fallback,
        });
    }
    Ok(CorrectionDecision {
        pair,
        verdict: Verdict::Merge,
        probability,
        masks,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub label_a: u32,
    pub label_b: u32,
    /// label_a after resolving earlier merges in the chain
    pub resolved_a: u32,
    pub verdict: Verdict,
    pub probability: f64,
    pub gap_layers: Vec<usize>,
    pub voxels_relabelled: usize,
    pub pixels_written: usize,
    /// interpolated pixels skipped because another cell owns them
    pub pixels_skipped: usize,
    pub fallback: bool,
}

/// Apply Merge decisions top to bottom, relabelling the lower fragment and
/// writing interpolated gap masks onto background voxels only. Merged
/// labels stay eligible for later decisions in the same pass, so chains of
/// fragments collapse to the topmost label.
pub fn apply_corrections(
    volume: &mut LabelVolume,
    decisions: &[CorrectionDecision],
) -> Result<Vec<ChangeRecord>, InterpolateError> {
    let mut order: Vec<&CorrectionDecision> = decisions.iter().collect();
    order.sort_by_key(|d| {
        (
            d.pair.gap_layers.first().copied().unwrap_or(usize::MAX),
            d.pair.label_a,
            d.pair.label_b,
        )
    });
    let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
    for d in &order {
        if !seen.insert((d.pair.label_a, d.pair.label_b)) {
            return Err(InterpolateError::ConflictingDecisions(
                d.pair.label_a,
                d.pair.label_b,
            ));
        }
    }
    let present: BTreeSet<u32> = volume.data.iter().copied().filter(|&l| l != 0).collect();
    let mut alias: BTreeMap<u32, u32> = BTreeMap::new();
    let resolve = |alias: &BTreeMap<u32, u32>, mut l: u32| {
        while let Some(&next) = alias.get(&l) {
            l = next;
        }
        l
    };

    let (nz, ny, nx) = volume.dims;
    let mut log = Vec::with_capacity(order.len());
    for d in order {
        for l in [d.pair.label_a, d.pair.label_b] {
            if !present.contains(&l) {
                return Err(InterpolateError::StaleLabel(l));
            }
        }
        if d.verdict == Verdict::Keep {
            log.push(ChangeRecord {
                label_a: d.pair.label_a,
                label_b: d.pair.label_b,
                resolved_a: resolve(&alias, d.pair.label_a),
                verdict: Verdict::Keep,
                probability: d.probability,
                gap_layers: d.pair.gap_layers.clone(),
                voxels_relabelled: 0,
                pixels_written: 0,
                pixels_skipped: 0,
                fallback: false,
            });
            continue;
        }
        if d.masks.len() != d.pair.gap_layers.len() {
            return Err(InterpolateError::MaskCountMismatch {
                masks: d.masks.len(),
                gaps: d.pair.gap_layers.len(),
            });
        }
        let a = resolve(&alias, d.pair.label_a);
        let b = resolve(&alias, d.pair.label_b);
        let mut relabelled = 0;
        if a != b {
            for v in volume.data.iter_mut() {
                if *v == b {
                    *v = a;
                    relabelled += 1;
                }
            }
            alias.insert(b, a);
        }
        let mut written = 0;
        let mut skipped = 0;
        let mut fallback = false;
        for m in &d.masks {
            fallback |= m.fallback;
            if m.layer >= nz {
                continue;
            }
            for &(y, x) in &m.pixels {
                let (y, x) = (y as usize, x as usize);
                if y >= ny || x >= nx {
                    continue;
                }
                if volume.get(m.layer, y, x) == 0 {
                    volume.set(m.layer, y, x, a);
                    written += 1;
                } else {
                    skipped += 1;
                }
            }
        }
        log.push(ChangeRecord {
            label_a: d.pair.label_a,
            label_b: d.pair.label_b,
            resolved_a: a,
            verdict: Verdict::Merge,
            probability: d.probability,
            gap_layers: d.pair.gap_layers.clone(),
            voxels_relabelled: relabelled,
            pixels_written: written,
            pixels_skipped: skipped,
            fallback,
        });
    }
    Ok(log)
}
