//! Detection and repair of cuts at arbitrary orientation.
//!
//! The contact surface between two adjacent labels is reduced to a
//! best-fit plane by PCA in anisotropy-scaled physical coordinates, the
//! pair is resliced along that plane, and the resliced stack is fed
//! through the standard feature and classifier path. A positive verdict
//! merges the two 3D bodies directly, without interpolation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{predict, ClassifierError, MlpModel};
use crate::features::{build_feature_vector, CandidatePair, FeatureConfig, FeatureError};
use crate::interpolate::Verdict;
use crate::ot::GeoWassersteinConfig;
use crate::volume::{CellIndex, CellRecord, LabelVolume, Mask2D};

#[derive(Debug, Error)]
pub enum TiltedError {
    #[error("labels {0} and {1} share no voxel face")]
    NotAdjacent(u32, u32),
    #[error("contact of {actual} faces is below the minimum of {min}")]
    ContactTooSmall { actual: usize, min: usize },
    #[error("contact cloud is degenerate (collinear or single point)")]
    DegenerateCloud,
    #[error("label {0} absent from volume")]
    LabelAbsent(u32),
    #[error("reslicing produced no masks for label {0}")]
    ResliceEmpty(u32),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[cfg(test)]
fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Contact midpoints between two labels in physical coordinates.
#[derive(Debug, Clone)]
pub struct CuttingSurface {
    pub label_a: u32,
    pub label_b: u32,
    /// (z, y, x) physical midpoints, one per face-adjacent voxel pair
    pub points: Vec<[f64; 3]>,
}

/// One midpoint per face-adjacent voxel pair (a in A, b in B), scaled by
/// the volume's anisotropy.
pub fn extract_cutting_surface(
    volume: &LabelVolume,
    label_a: u32,
    label_b: u32,
) -> Result<CuttingSurface, TiltedError> {
    let (nz, ny, nx) = volume.dims;
    let mut points = Vec::new();
    let mut consider = |p: (usize, usize, usize), q: (usize, usize, usize)| {
        let (lp, lq) = (volume.get(p.0, p.1, p.2), volume.get(q.0, q.1, q.2));
        if (lp == label_a && lq == label_b) || (lp == label_b && lq == label_a) {
            let a = volume.physical(p.0, p.1, p.2);
            let b = volume.physical(q.0, q.1, q.2);
            points.push(scale(add(a, b), 0.5));
        }
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if z + 1 < nz {
                    consider((z, y, x), (z + 1, y, x));
                }
                if y + 1 < ny {
                    consider((z, y, x), (z, y + 1, x));
                }
                if x + 1 < nx {
                    consider((z, y, x), (z, y, x + 1));
                }
            }
        }
    }
    if points.is_empty() {
        return Err(TiltedError::NotAdjacent(label_a, label_b));
    }
    Ok(CuttingSurface {
        label_a,
        label_b,
        points,
    })
}

/// Best-fit plane through a point cloud with an orthonormal frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReferencePlane {
    pub centroid: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub n: [f64; 3],
    /// mean squared distance of the cloud to the plane; equals the
    /// smallest covariance eigenvalue
    pub residual: f64,
}

/// Jacobi eigendecomposition of a symmetric 3x3 matrix. Returns
/// eigenvalues in descending order with matching unit eigenvectors.
fn eigen_symmetric_3x3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        // largest off-diagonal element
        let (mut p, mut q, mut m) = (0, 1, a[0][1].abs());
        for (i, j) in [(0, 2), (1, 2)] {
            if a[i][j].abs() > m {
                p = i;
                q = j;
                m = a[i][j].abs();
            }
        }
        if m < 1e-15 {
            break;
        }
        let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..3 {
            let (akp, akq) = (a[k][p], a[k][q]);
            a[k][p] = c * akp - s * akq;
            a[k][q] = s * akp + c * akq;
        }
        for k in 0..3 {
            let (apk, aqk) = (a[p][k], a[q][k]);
            a[p][k] = c * apk - s * aqk;
            a[q][k] = s * apk + c * aqk;
        }
        for k in 0..3 {
            let (vkp, vkq) = (v[k][p], v[k][q]);
            v[k][p] = c * vkp - s * vkq;
            v[k][q] = s * vkp + c * vkq;
        }
    }
    let mut pairs: Vec<(f64, [f64; 3])> = (0..3)
        .map(|i| (a[i][i], [v[0][i], v[1][i], v[2][i]]))
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    (
        [pairs[0].0, pairs[1].0, pairs[2].0],
        [pairs[0].1, pairs[1].1, pairs[2].1],
    )
}

/// PCA plane through a cloud, unoriented: the normal is the covariance
/// eigenvector with the smallest eigenvalue.
pub fn fit_plane_points(points: &[[f64; 3]]) -> Result<ReferencePlane, TiltedError> {
    if points.len() < 3 {
        return Err(TiltedError::DegenerateCloud);
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        c = add(c, *p);
    }
    c = scale(c, 1.0 / n);
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = sub(*p, c);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j] / n;
            }
        }
    }
    let (vals, vecs) = eigen_symmetric_3x3(cov);
    // collinear cloud: only one significant spread direction
    if vals[1] <= 1e-12 * vals[0].max(1e-300) {
        return Err(TiltedError::DegenerateCloud);
    }
    Ok(ReferencePlane {
        centroid: c,
        u: vecs[0],
        v: vecs[1],
        n: vecs[2],
        residual: vals[2].max(0.0),
    })
}

/// PCA plane with the normal oriented from A's centroid toward B's.
pub fn fit_plane_pca(
    surface: &CuttingSurface,
    centroid_a: [f64; 3],
    centroid_b: [f64; 3],
) -> Result<ReferencePlane, TiltedError> {
    let mut plane = fit_plane_points(&surface.points)?;
    if dot(plane.n, sub(centroid_b, centroid_a)) < 0.0 {
        plane.n = scale(plane.n, -1.0);
        // keep the frame right-handed
        plane.v = scale(plane.v, -1.0);
    }
    Ok(plane)
}

/// Centroid of a label's voxels in physical coordinates.
pub fn label_centroid(volume: &LabelVolume, label: u32) -> Result<[f64; 3], TiltedError> {
    let (nz, ny, nx) = volume.dims;
    let mut c = [0.0; 3];
    let mut count = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if volume.get(z, y, x) == label {
                    c = add(c, volume.physical(z, y, x));
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(TiltedError::LabelAbsent(label));
    }
    Ok(scale(c, 1.0 / count as f64))
}

#[derive(Debug, Clone)]
pub struct TiltedConfig {
    /// physical distance between consecutive slices along the normal
    pub spacing: f64,
    /// cap on slices explored on each side of the reference plane
    pub max_slices: usize,
    /// adjacency edges below this face count are not evaluated
    pub min_contact: usize,
    pub ot: GeoWassersteinConfig,
}

impl Default for TiltedConfig {
    fn default() -> Self {
        Self {
            spacing: 1.0,
            max_slices: 64,
            min_contact: 10,
            ot: GeoWassersteinConfig::default(),
        }
    }
}

/// Per-label masks of the resliced pair, keyed by signed slice offset.
/// Offset 0 is the reference layer.
#[derive(Debug, Clone)]
pub struct TiltedStack {
    pub plane: ReferencePlane,
    /// in-plane grid pitch (physical units)
    pub pitch: f64,
    pub spacing: f64,
    /// k -> (A pixels, B pixels) in non-negative grid coordinates
    pub slices: BTreeMap<i64, (Vec<(u32, u32)>, Vec<(u32, u32)>)>,
}

/// Radius-1 morphological closing (dilation then erosion, 8-connectivity).
fn close_radius_1(pixels: &[(u32, u32)]) -> Vec<(u32, u32)> {
    if pixels.is_empty() {
        return Vec::new();
    }
    let mut dilated = std::collections::BTreeSet::new();
    for &(y, x) in pixels {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                dilated.insert((y as i64 + dy, x as i64 + dx));
            }
        }
    }
    let mut out: Vec<(u32, u32)> = dilated
        .iter()
        .filter(|&&(y, x)| {
            (-1i64..=1).all(|dy| (-1i64..=1).all(|dx| dilated.contains(&(y + dy, x + dx))))
        })
        .filter(|&&(y, x)| y >= 0 && x >= 0)
        .map(|&(y, x)| (y as u32, x as u32))
        .collect();
    out.sort_unstable();
    out
}

/// Reslice the pair along the plane by nearest-neighbor sampling in
/// physical coordinates. The in-plane pitch is the smallest anisotropy
/// component, so strips are at most one grid cell wide before closing.
pub fn reslice(
    volume: &LabelVolume,
    label_a: u32,
    label_b: u32,
    plane: &ReferencePlane,
    cfg: &TiltedConfig,
) -> Result<TiltedStack, TiltedError> {
    let (nz, ny, nx) = volume.dims;
    let an = volume.anisotropy;
    let pitch = an[0].min(an[1]).min(an[2]);

    // in-plane and normal extent of the two bodies around the centroid
    let (mut umin, mut umax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut kmin, mut kmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut seen_a = false;
    let mut seen_b = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let l = volume.get(z, y, x);
                if l != label_a && l != label_b {
                    continue;
                }
                seen_a |= l == label_a;
                seen_b |= l == label_b;
                let d = sub(volume.physical(z, y, x), plane.centroid);
                let (pu, pv, pn) = (dot(d, plane.u), dot(d, plane.v), dot(d, plane.n));
                umin = umin.min(pu);
                umax = umax.max(pu);
                vmin = vmin.min(pv);
                vmax = vmax.max(pv);
                kmin = kmin.min(pn);
                kmax = kmax.max(pn);
            }
        }
    }
    if !seen_a {
        return Err(TiltedError::LabelAbsent(label_a));
    }
    if !seen_b {
        return Err(TiltedError::LabelAbsent(label_b));
    }

    let i_lo = (umin / pitch).floor() as i64 - 1;
    let i_hi = (umax / pitch).ceil() as i64 + 1;
    let j_lo = (vmin / pitch).floor() as i64 - 1;
    let j_hi = (vmax / pitch).ceil() as i64 + 1;
    let k_lo = ((kmin / cfg.spacing).floor() as i64).max(-(cfg.max_slices as i64));
    let k_hi = ((kmax / cfg.spacing).ceil() as i64).min(cfg.max_slices as i64);

    // half-up rounding so half-integer plane coordinates map to a
    // consistent voxel on both sides of zero
    let half_up = |t: f64| (t + 0.5).floor();
    let sample = move |point: [f64; 3]| -> u32 {
        let z = half_up(point[0] / an[0]);
        let y = half_up(point[1] / an[1]);
        let x = half_up(point[2] / an[2]);
        if z < 0.0 || y < 0.0 || x < 0.0 {
            return 0;
        }
        let (z, y, x) = (z as usize, y as usize, x as usize);
        if z >= nz || y >= ny || x >= nx {
            return 0;
        }
        volume.get(z, y, x)
    };

    let mut slices = BTreeMap::new();
    let slice_at = |k: i64| -> (Vec<(u32, u32)>, Vec<(u32, u32)>) {
        let mut ma = Vec::new();
        let mut mb = Vec::new();
        for i in i_lo..=i_hi {
            for j in j_lo..=j_hi {
                let p = add(
                    plane.centroid,
                    add(
                        add(scale(plane.u, i as f64 * pitch), scale(plane.v, j as f64 * pitch)),
                        scale(plane.n, k as f64 * cfg.spacing),
                    ),
                );
                let l = sample(p);
                if l == label_a || l == label_b {
                    let px = ((i - i_lo) as u32, (j - j_lo) as u32);
                    if l == label_a {
                        ma.push(px);
                    } else {
                        mb.push(px);
                    }
                }
            }
        }
        // closing may only claim pixels not sampled as the other label,
        // and pixels claimed by both closings stay unassigned, so the two
        // masks remain disjoint
        let sa: std::collections::BTreeSet<(u32, u32)> = ma.iter().copied().collect();
        let sb: std::collections::BTreeSet<(u32, u32)> = mb.iter().copied().collect();
        let ca: Vec<(u32, u32)> = close_radius_1(&ma)
            .into_iter()
            .filter(|p| !sb.contains(p))
            .collect();
        let cb: Vec<(u32, u32)> = close_radius_1(&mb)
            .into_iter()
            .filter(|p| !sa.contains(p))
            .collect();
        let both: std::collections::BTreeSet<(u32, u32)> = ca
            .iter()
            .filter(|p| cb.binary_search(p).is_ok() && !sa.contains(p))
            .copied()
            .collect();
        (
            ca.into_iter().filter(|p| !both.contains(p)).collect(),
            cb.into_iter().filter(|p| !both.contains(p)).collect(),
        )
    };
    // walk outward from the reference layer until both masks vanish
    for dir in [1i64, -1] {
        let mut k = if dir == 1 { 0 } else { -1 };
        loop {
            if (dir == 1 && k > k_hi) || (dir == -1 && k < k_lo) {
                break;
            }
            let (ma, mb) = slice_at(k);
            if ma.is_empty() && mb.is_empty() {
                break;
            }
            slices.insert(k, (ma, mb));
            k += dir;
        }
    }
    Ok(TiltedStack {
        plane: *plane,
        pitch,
        spacing: cfg.spacing,
        slices,
    })
}

/// Render a resliced stack as a label volume (A=1, B=2) for export.
pub fn stack_to_volume(stack: &TiltedStack) -> Option<LabelVolume> {
    let k0 = *stack.slices.keys().next()?;
    let k1 = *stack.slices.keys().next_back()?;
    let mut h = 0u32;
    let mut w = 0u32;
    for (a, b) in stack.slices.values() {
        for &(y, x) in a.iter().chain(b.iter()) {
            h = h.max(y + 1);
            w = w.max(x + 1);
        }
    }
    let dims = ((k1 - k0 + 1) as usize, h as usize, w as usize);
    let mut v = LabelVolume::new(dims, [stack.spacing, stack.pitch, stack.pitch]).ok()?;
    for (&k, (a, b)) in &stack.slices {
        let z = (k - k0) as usize;
        for &(y, x) in a {
            v.set(z, y as usize, x as usize, 1);
        }
        for &(y, x) in b {
            v.set(z, y as usize, x as usize, 2);
        }
    }
    Some(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TiltedDecision {
    pub label_a: u32,
    pub label_b: u32,
    pub verdict: Verdict,
    pub probability: f64,
    pub contact_faces: usize,
    pub plane: ReferencePlane,
}

/// Evaluate one adjacent pair along its fitted cutting plane and merge the
/// bodies on a positive verdict. The reference layer's masks are removed
/// from the resliced stack, the two sides become an upper and a lower
/// fragment, and the standard feature path decides. Keep never alters the
/// volume.
pub fn evaluate_tilted_pair(
    volume: &mut LabelVolume,
    label_a: u32,
    label_b: u32,
    model: &MlpModel,
    cfg: &TiltedConfig,
) -> Result<TiltedDecision, TiltedError> {
    let surface = extract_cutting_surface(volume, label_a, label_b)?;
    if surface.points.len() < cfg.min_contact {
        return Err(TiltedError::ContactTooSmall {
            actual: surface.points.len(),
            min: cfg.min_contact,
        });
    }
    let ca = label_centroid(volume, label_a)?;
    let cb = label_centroid(volume, label_b)?;
    let plane = fit_plane_pca(&surface, ca, cb)?;
    let stack = reslice(volume, label_a, label_b, &plane, cfg)?;

    // A is on the negative-normal side; its masks below the reference
    // layer form the upper fragment, B's above form the lower one
    let k_lo = *stack.slices.keys().next().expect("non-empty stack");
    let layer_of = |k: i64| (k - k_lo) as usize;
    let mut masks_a = BTreeMap::new();
    let mut masks_b = BTreeMap::new();
    for (&k, (a, b)) in &stack.slices {
        if k < 0 && !a.is_empty() {
            masks_a.insert(layer_of(k), Mask2D::new(layer_of(k), label_a, a.clone()));
        }
        if k > 0 && !b.is_empty() {
            masks_b.insert(layer_of(k), Mask2D::new(layer_of(k), label_b, b.clone()));
        }
    }
    if masks_a.is_empty() {
        return Err(TiltedError::ResliceEmpty(label_a));
    }
    if masks_b.is_empty() {
        return Err(TiltedError::ResliceEmpty(label_b));
    }
    let record = |label: u32, masks: BTreeMap<usize, Mask2D>| CellRecord {
        label,
        top_layer: *masks.keys().next().unwrap(),
        bottom_layer: *masks.keys().next_back().unwrap(),
        voxel_count: masks.values().map(|m| m.len()).sum(),
        masks,
    };
    let mut index = CellIndex::default();
    index.cells.insert(label_a, record(label_a, masks_a));
    index.cells.insert(label_b, record(label_b, masks_b));
    let pair = CandidatePair {
        label_a,
        label_b,
        gap_layers: vec![layer_of(0)],
    };
    let fcfg = FeatureConfig {
        variant: model.variant,
        ot: cfg.ot,
        normalizers: model.normalizers,
    };
    let features = build_feature_vector(&pair, &index, &fcfg)?;
    let (probability, merge) = predict(model, &features.values)?;
    let verdict = if merge { Verdict::Merge } else { Verdict::Keep };
    if verdict == Verdict::Merge {
        for v in volume.data.iter_mut() {
            if *v == label_b {
                *v = label_a;
            }
        }
    }
    Ok(TiltedDecision {
        label_a,
        label_b,
        verdict,
        probability,
        contact_faces: surface.points.len(),
        plane,
    })
}
