//! Optimal-transport kernels: exact EMD on small discrete distributions,
//! sliced-Wasserstein estimation on large ones, and the shape divergence
//! between 2D masks represented as uniform pixel distributions.
//!
//! Masks are compared in the shared (y, x) frame without re-centering, so
//! the divergence reflects both shape change and positional drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::volume::Mask2D;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("empty mask")]
    EmptyMask,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("size cap exceeded: |P|*|Q| = {actual} > {cap}")]
    SizeCapExceeded { actual: usize, cap: usize },
}

/// Weighted point cloud in the (y, x) plane; weights sum to 1.
#[derive(Debug, Clone)]
pub struct PointDistribution {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl PointDistribution {
    pub fn new(points: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self, OtError> {
        if points.len() != weights.len() {
            return Err(OtError::InvalidDistribution(
                "points/weights length mismatch".into(),
            ));
        }
        if points.is_empty() {
            return Err(OtError::InvalidDistribution("empty distribution".into()));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(OtError::InvalidDistribution("negative weight".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(OtError::InvalidDistribution(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Optimal coupling between two point distributions.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// (source index, target index, mass)
    pub entries: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self, n_sources: usize) -> Vec<f64> {
        let mut sums = vec![0.0; n_sources];
        for &(i, _, m) in &self.entries {
            sums[i] += m;
        }
        sums
    }

    pub fn col_sums(&self, n_targets: usize) -> Vec<f64> {
        let mut sums = vec![0.0; n_targets];
        for &(_, j, m) in &self.entries {
            sums[j] += m;
        }
        sums
    }
}

/// Uniform distribution over a mask's pixels, one atom per pixel.
pub fn mask_to_distribution(mask: &Mask2D) -> Result<PointDistribution, OtError> {
    if mask.is_empty() {
        return Err(OtError::EmptyMask);
    }
    let n = mask.len();
    let w = 1.0 / n as f64;
    let points = mask
        .pixels
        .iter()
        .map(|&(y, x)| [y as f64, x as f64])
        .collect();
    PointDistribution::new(points, vec![w; n])
}

fn euclidean(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dy = a[0] - b[0];
    let dx = a[1] - b[1];
    (dy * dy + dx * dx).sqrt()
}

/// Exact Wasserstein-1 via successive shortest augmenting paths with node
/// potentials on the bipartite transportation network.
pub fn exact_emd(
    p: &PointDistribution,
    q: &PointDistribution,
    size_cap: usize,
) -> Result<(f64, TransportPlan), OtError> {
    let m = p.len();
    let n = q.len();
    if m * n > size_cap {
        return Err(OtError::SizeCapExceeded {
            actual: m * n,
            cap: size_cap,
        });
    }

    let mut cost = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            cost[i * n + j] = euclidean(p.points[i], q.points[j]);
        }
    }
    solve_transport(p, q, cost)
}

/// Euclidean-cost plan with a tiny quadratic tie-break. Under pure
/// Euclidean cost the optimal plan is non-unique whenever mass moves
/// along a common direction (any non-reversing matching costs the same);
/// the quadratic term selects the unique non-crossing plan, which is the
/// one whose barycentric interpolation traces the shape's displacement.
/// The perturbation is at most one part in 10^6 of the true cost.
pub fn displacement_plan(
    p: &PointDistribution,
    q: &PointDistribution,
) -> Result<TransportPlan, OtError> {
    let m = p.len();
    let n = q.len();
    let mut cost = vec![0.0f64; m * n];
    let mut d_max = 0.0f64;
    for i in 0..m {
        for j in 0..n {
            let d = euclidean(p.points[i], q.points[j]);
            cost[i * n + j] = d;
            d_max = d_max.max(d);
        }
    }
    if d_max > 0.0 {
        let gamma = 1e-6 / d_max;
        for c in cost.iter_mut() {
            *c += gamma * *c * *c;
        }
    }
    Ok(solve_transport(p, q, cost)?.1)
}

fn solve_transport(
    p: &PointDistribution,
    q: &PointDistribution,
    cost: Vec<f64>,
) -> Result<(f64, TransportPlan), OtError> {
    let m = p.len();
    let n = q.len();
    let mut supply = p.weights.clone();
    // rescale demand so totals match exactly
    let sp: f64 = supply.iter().sum();
    let sq: f64 = q.weights.iter().sum();
    let scale = sp / sq;
    let mut demand: Vec<f64> = q.weights.iter().map(|&w| w * scale).collect();

    let mut flow = vec![0.0f64; m * n];
    let n_nodes = m + n;
    let mut potential = vec![0.0f64; n_nodes];
    const EPS: f64 = 1e-13;

    loop {
        let total_supply: f64 = supply.iter().sum();
        if total_supply <= EPS * m as f64 {
            break;
        }
        // Dijkstra from all sources with remaining supply
        let mut dist = vec![f64::INFINITY; n_nodes];
        let mut prev: Vec<Option<usize>> = vec![None; n_nodes];
        let mut done = vec![false; n_nodes];
        let mut heap = std::collections::BinaryHeap::new();
        for (i, &s) in supply.iter().enumerate() {
            if s > EPS {
                dist[i] = 0.0;
                heap.push(std::cmp::Reverse((ordered(0.0), i)));
            }
        }
        while let Some(std::cmp::Reverse((d, u))) = heap.pop() {
            let d = d.into_inner();
            if done[u] || d > dist[u] {
                continue;
            }
            done[u] = true;
            if u < m {
                // forward arcs i -> j
                for j in 0..n {
                    let v = m + j;
                    let rc = cost[u * n + j] + potential[u] - potential[v];
                    let nd = d + rc.max(0.0);
                    if nd < dist[v] - 1e-15 {
                        dist[v] = nd;
                        prev[v] = Some(u);
                        heap.push(std::cmp::Reverse((ordered(nd), v)));
                    }
                }
            } else {
                // backward arcs j -> i along positive flow
                let j = u - m;
                for i in 0..m {
                    if flow[i * n + j] > EPS {
                        let rc = -cost[i * n + j] + potential[u] - potential[i];
                        let nd = d + rc.max(0.0);
                        if nd < dist[i] - 1e-15 {
                            dist[i] = nd;
                            prev[i] = Some(u);
                            heap.push(std::cmp::Reverse((ordered(nd), i)));
                        }
                    }
                }
            }
        }
        // nearest target with remaining demand
        let target = (0..n)
            .filter(|&j| demand[j] > EPS && dist[m + j].is_finite())
            .min_by(|&a, &b| dist[m + a].partial_cmp(&dist[m + b]).unwrap());
        let Some(tj) = target else { break };
        let t = m + tj;

        // bottleneck along the path
        let mut bottleneck = demand[tj];
        let mut v = t;
        while let Some(u) = prev[v] {
            if u < m && v >= m {
                // forward arc, capacity unbounded
            } else if u >= m && v < m {
                bottleneck = bottleneck.min(flow[v * n + (u - m)]);
            }
            v = u;
        }
        bottleneck = bottleneck.min(supply[v]);
        debug_assert!(v < m);

        // augment
        let src = v;
        let mut v = t;
        while let Some(u) = prev[v] {
            if u < m && v >= m {
                flow[u * n + (v - m)] += bottleneck;
            } else {
                flow[v * n + (u - m)] -= bottleneck;
            }
            v = u;
        }
        supply[src] -= bottleneck;
        demand[tj] -= bottleneck;

        // update potentials
        for u in 0..n_nodes {
            if dist[u].is_finite() {
                potential[u] += dist[u];
            }
        }
    }

    let mut entries = Vec::new();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            let f = flow[i * n + j];
            if f > 0.0 {
                entries.push((i, j, f));
                total += f * cost[i * n + j];
            }
        }
    }
    Ok((total, TransportPlan { entries, cost: total }))
}

fn ordered(x: f64) -> ordered_float::NotNan<f64> {
    ordered_float::NotNan::new(x).expect("finite distance")
}

/// Wasserstein-1 between two weighted 1-D atom sets by exact quantile
/// matching of sorted atoms.
pub fn wasserstein_1d(xs: &[(f64, f64)], ys: &[(f64, f64)]) -> f64 {
    let mut a: Vec<(f64, f64)> = xs.to_vec();
    let mut b: Vec<(f64, f64)> = ys.to_vec();
    a.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    b.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    let (mut i, mut j) = (0, 0);
    let (mut wa, mut wb) = (0.0f64, 0.0f64);
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let ra = a[i].1 - wa;
        let rb = b[j].1 - wb;
        let delta = ra.min(rb);
        cost += delta * (a[i].0 - b[j].0).abs();
        if ra <= rb {
            i += 1;
            wa = 0.0;
            wb += delta;
            if (b[j].1 - wb).abs() < 1e-15 {
                j += 1;
                wb = 0.0;
            }
        } else {
            j += 1;
            wb = 0.0;
            wa += delta;
            if (a[i].1 - wa).abs() < 1e-15 {
                i += 1;
                wa = 0.0;
            }
        }
    }
    cost
}

/// Monte-Carlo sliced estimate: average 1-D Wasserstein-1 over random
/// projection directions drawn uniformly on the unit circle.
pub fn sliced_wasserstein(
    p: &PointDistribution,
    q: &PointDistribution,
    n_projections: usize,
    seed: u64,
) -> f64 {
    assert!(n_projections >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_projections {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = [theta.cos(), theta.sin()];
        total += projected_w1(p, q, dir);
    }
    total / n_projections as f64
}

/// 1-D Wasserstein-1 of both distributions projected onto `dir`.
pub fn projected_w1(p: &PointDistribution, q: &PointDistribution, dir: [f64; 2]) -> f64 {
    let xs: Vec<(f64, f64)> = p
        .points
        .iter()
        .zip(&p.weights)
        .map(|(pt, &w)| (pt[0] * dir[0] + pt[1] * dir[1], w))
        .collect();
    let ys: Vec<(f64, f64)> = q
        .points
        .iter()
        .zip(&q.weights)
        .map(|(pt, &w)| (pt[0] * dir[0] + pt[1] * dir[1], w))
        .collect();
    wasserstein_1d(&xs, &ys)
}

/// Configuration for the mask divergence.
#[derive(Debug, Clone, Copy)]
pub struct GeoWassersteinConfig {
    /// exact path used when |A|*|B| <= exact_cap
    pub exact_cap: usize,
    pub n_projections: usize,
    pub seed: u64,
}

impl Default for GeoWassersteinConfig {
    fn default() -> Self {
        Self {
            exact_cap: 250_000,
            n_projections: 50,
            seed: 0,
        }
    }
}

/// Shape divergence between two masks: exact EMD for small pairs, sliced
/// estimate otherwise. Units are pixels.
pub fn geo_wasserstein(a: &Mask2D, b: &Mask2D, cfg: &GeoWassersteinConfig) -> Result<f64, OtError> {
    let p = mask_to_distribution(a)?;
    let q = mask_to_distribution(b)?;
    if p.len() * q.len() <= cfg.exact_cap {
        Ok(exact_emd(&p, &q, cfg.exact_cap)?.0)
    } else {
        Ok(sliced_wasserstein(&p, &q, cfg.n_projections, cfg.seed))
    }
}
