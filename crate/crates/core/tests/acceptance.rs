//! Acceptance suite: one test per release criterion, each printing a
//! single pass/fail line (run with --nocapture to see them all).

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use overseg::classifier::{
    batch_gradient, load_model, predict, save_model, synthesize_training_set, train, Hyperparams,
    MlpModel, Provenance, SynthesisConfig, TrainingExample,
};
use overseg::features::{
    build_feature_vector, classify_overlaps, screen_candidates, CandidatePair, FeatureConfig,
    FeatureVariant, FeatureVector, ScreenConfig, ShapeClass, ShapeNormalizers,
};
use overseg::interpolate::{apply_corrections, merge_decision, Verdict};
use overseg::metrics::{average_precision, classification_report, jaccard, mean_ap, MAP_THRESHOLDS};
use overseg::ot::{
    exact_emd, mask_to_distribution, sliced_wasserstein, projected_w1, GeoWassersteinConfig,
    PointDistribution,
};
use overseg::testkit::{
    ellipsoid_phantom, generate_voronoi_volume, inject_axis_gap, inject_tilted_split,
    tangent_spheres_phantom, SplitPlane, SynthSpec,
};
use overseg::tilted::{evaluate_tilted_pair, fit_plane_points, TiltedConfig};
use overseg::volume::{build_cell_index, mask_intersection, mask_overlap, Mask2D};
use overseg::{CellIndex, LabelVolume};

fn report(n: u32, what: &str, r: Result<(), String>) {
    match r {
        Ok(()) => println!("acceptance criterion {n} ({what}): pass"),
        Err(e) => {
            println!("acceptance criterion {n} ({what}): FAIL: {e}");
            panic!("criterion {n} ({what}) failed: {e}");
        }
    }
}

// ---------------------------------------------------------------- 1: EMD

#[derive(serde::Deserialize)]
struct LpCase {
    p_points: Vec<[f64; 2]>,
    p_weights: Vec<f64>,
    q_points: Vec<[f64; 2]>,
    q_weights: Vec<f64>,
    emd: f64,
}

fn check_emd_against_lp_oracle() -> Result<(), String> {
    let text = include_str!("fixtures/emd_lp.json");
    let cases: Vec<LpCase> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if cases.len() != 50 {
        return Err(format!("expected 50 fixture cases, got {}", cases.len()));
    }
    let started = Instant::now();
    for (i, c) in cases.iter().enumerate() {
        let p = PointDistribution::new(c.p_points.clone(), c.p_weights.clone())
            .map_err(|e| e.to_string())?;
        let q = PointDistribution::new(c.q_points.clone(), c.q_weights.clone())
            .map_err(|e| e.to_string())?;
        let (d, _) = exact_emd(&p, &q, usize::MAX).map_err(|e| e.to_string())?;
        if (d - c.emd).abs() > 1e-6 {
            return Err(format!(
                "case {i}: exact_emd {d} vs linear-program oracle {}",
                c.emd
            ));
        }
    }
    // translation invariance: moving every point by v costs exactly |v|
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let n = rng.gen_range(2..=15);
        let points: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)])
            .collect();
        let mut weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        let v: [f64; 2] = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let moved: Vec<[f64; 2]> = points.iter().map(|p| [p[0] + v[0], p[1] + v[1]]).collect();
        let p = PointDistribution::new(points, weights.clone()).map_err(|e| e.to_string())?;
        let q = PointDistribution::new(moved, weights).map_err(|e| e.to_string())?;
        let (d, _) = exact_emd(&p, &q, usize::MAX).map_err(|e| e.to_string())?;
        if (d - norm).abs() > 1e-6 {
            return Err(format!("translation case: emd {d} vs |v| {norm}"));
        }
    }
    let elapsed = started.elapsed();
    if elapsed.as_secs_f64() >= 1.0 {
        return Err(format!("runtime {elapsed:?} exceeds 1 s"));
    }
    Ok(())
}

#[test]
fn criterion_01_exact_emd_matches_lp_oracle() {
    report(1, "exact EMD vs LP oracle", check_emd_against_lp_oracle());
}

// ------------------------------------------------- 2: sliced convergence

fn random_blob(rng: &mut ChaCha8Rng) -> Mask2D {
    let cy = rng.gen_range(6.0..14.0);
    let cx = rng.gen_range(6.0..14.0);
    let ry = rng.gen_range(2.0..8.0);
    let rx = rng.gen_range(2.0..8.0);
    let mut pixels = Vec::new();
    for y in 0..20u32 {
        for x in 0..20u32 {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                pixels.push((y, x));
            }
        }
    }
    Mask2D::new(0, 1, pixels)
}

/// Deterministic direction-grid average over [0, pi); W1 is symmetric
/// under direction negation so the half circle covers everything.
fn dense_grid_sliced(p: &PointDistribution, q: &PointDistribution, k: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..k {
        let theta = std::f64::consts::PI * (i as f64 + 0.5) / k as f64;
        total += projected_w1(p, q, [theta.cos(), theta.sin()]);
    }
    total / k as f64
}

fn check_sliced_convergence() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut pairs = Vec::new();
    while pairs.len() < 20 {
        let a = random_blob(&mut rng);
        let b = random_blob(&mut rng);
        if a.pixels.is_empty() || b.pixels.is_empty() {
            continue;
        }
        pairs.push((a, b));
    }
    for (i, (a, b)) in pairs.iter().enumerate() {
        let p = mask_to_distribution(a).map_err(|e| e.to_string())?;
        let q = mask_to_distribution(b).map_err(|e| e.to_string())?;
        let oracle = dense_grid_sliced(&p, &q, 4096);
        let est = sliced_wasserstein(&p, &q, 1000, 7);
        if (est - oracle).abs() > 0.05 * oracle {
            return Err(format!(
                "pair {i}: sliced estimate {est} not within 5% of grid oracle {oracle}"
            ));
        }
    }
    // estimator variance over seeds shrinks with the projection count
    let mut variances = Vec::new();
    for n_proj in [10usize, 100, 1000] {
        let mut var_sum = 0.0;
        for (a, b) in pairs.iter().take(5) {
            let p = mask_to_distribution(a).map_err(|e| e.to_string())?;
            let q = mask_to_distribution(b).map_err(|e| e.to_string())?;
            let est: Vec<f64> = (0..10u64)
                .map(|s| sliced_wasserstein(&p, &q, n_proj, s))
                .collect();
            let mean = est.iter().sum::<f64>() / est.len() as f64;
            var_sum += est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (est.len() - 1) as f64;
        }
        variances.push(var_sum);
    }
    if !(variances[0] > variances[1] && variances[1] > variances[2]) {
        return Err(format!(
            "variance not monotone over 10/100/1000 projections: {variances:?}"
        ));
    }
    Ok(())
}

#[test]
fn criterion_02_sliced_estimate_converges() {
    report(2, "sliced estimator convergence", check_sliced_convergence());
}

// ---------------------------------------------- 3: screening equivalence

/// Independent quadratic re-statement of the screening rule.
fn brute_force_candidates(index: &CellIndex, max_gap: usize) -> Vec<CandidatePair> {
    let mut out = Vec::new();
    for a in index.cells.values() {
        for b in index.cells.values() {
            if a.label == b.label || a.bottom_layer >= b.top_layer {
                continue;
            }
            let gap = b.top_layer - a.bottom_layer - 1;
            if gap > max_gap {
                continue;
            }
            let contact = mask_intersection(a.bottom_mask(), b.top_mask());
            if contact.is_empty() {
                continue;
            }
            let contact_mask = Mask2D::new(0, 0, contact);
            let blocked = gap > 0
                && index.cells.values().any(|c| {
                    c.label != a.label
                        && c.label != b.label
                        && c.top_layer > a.bottom_layer
                        && c.bottom_layer < b.top_layer
                        && c.masks.values().any(|m| mask_overlap(m, &contact_mask) > 0)
                });
            if blocked {
                continue;
            }
            out.push(CandidatePair {
                label_a: a.label,
                label_b: b.label,
                gap_layers: (a.bottom_layer + 1..b.top_layer).collect(),
            });
        }
    }
    out
}

fn pair_key(p: &CandidatePair) -> (u32, u32, Vec<usize>) {
    (p.label_a, p.label_b, p.gap_layers.clone())
}

fn check_screening_equivalence() -> Result<(), String> {
    for seed in 0..25u64 {
        let n_cells = 10 + (seed as usize % 3) * 20; // 10..=50
        let mut v = generate_voronoi_volume(&SynthSpec::new((18, 24, 24), n_cells, seed));
        // carve a couple of artificial gaps so positives exist too
        let index0 = build_cell_index(&v);
        let mut fresh = index0.labels().max().unwrap() + 1;
        let mut injected = 0;
        for rec in index0.cells.values() {
            if injected == 2 {
                break;
            }
            let extent = rec.bottom_layer - rec.top_layer;
            if extent >= 4 && rec.masks.len() == extent + 1 {
                let layer = (rec.top_layer + rec.bottom_layer) / 2;
                if inject_axis_gap(&mut v, rec.label, layer, fresh).is_ok() {
                    fresh += 1;
                    injected += 1;
                }
            }
        }
        let index = build_cell_index(&v);
        for max_gap in [1usize, 2] {
            let got: BTreeSet<_> = screen_candidates(&index, &ScreenConfig { max_gap })
                .iter()
                .map(pair_key)
                .collect();
            let want: BTreeSet<_> = brute_force_candidates(&index, max_gap)
                .iter()
                .map(pair_key)
                .collect();
            if got != want {
                return Err(format!(
                    "seed {seed} max_gap {max_gap}: screen found {} pairs, oracle {}",
                    got.len(),
                    want.len()
                ));
            }
        }
    }
    Ok(())
}

#[test]
fn criterion_03_screening_matches_brute_force() {
    report(3, "screening vs quadratic oracle", check_screening_equivalence());
}

// --------------------------------------------- 4: shape classification

/// Polynomial R^2 via an independently coded normal-equations solve.
fn oracle_r2(y: &[f64], degree: usize) -> f64 {
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return 1.0;
    }
    let k = degree + 1;
    let mut a = vec![vec![0.0f64; k + 1]; k];
    for (i, &yi) in y.iter().enumerate() {
        let x = i as f64;
        for r in 0..k {
            for c in 0..k {
                a[r][c] += x.powi((r + c) as i32);
            }
            a[r][k] += x.powi(r as i32) * yi;
        }
    }
    // Gaussian elimination with partial pivoting on the augmented system
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        for row in 0..k {
            if row != col {
                let f = a[row][col] / a[col][col];
                for c in col..=k {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
    let ss_res: f64 = y
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            let pred: f64 = beta
                .iter()
                .enumerate()
                .map(|(p, b)| b * (i as f64).powi(p as i32))
                .sum();
            (yi - pred).powi(2)
        })
        .sum();
    1.0 - ss_res / ss_tot
}

fn is_strictly_monotone(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1]) || v.windows(2).all(|w| w[0] > w[1])
}

fn is_rise_then_fall(v: &[usize]) -> bool {
    let peak = v
        .iter()
        .enumerate()
        .max_by_key(|&(_, &x)| x)
        .map(|(i, _)| i)
        .unwrap();
    v[..=peak].windows(2).all(|w| w[0] < w[1]) && v[peak..].windows(2).all(|w| w[0] > w[1])
}

fn check_shape_classification() -> Result<(), String> {
    let norm = ShapeNormalizers::default();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    // every strictly monotone trend scores a perfect shape index
    for i in 0..100 {
        let len = rng.gen_range(3..20);
        let mut arr = vec![rng.gen_range(1..50usize)];
        for _ in 1..len {
            let step = rng.gen_range(1..40usize);
            arr.push(arr.last().unwrap() + step);
        }
        if rng.gen_bool(0.5) {
            arr.reverse();
        }
        let res = classify_overlaps(&arr, &norm);
        if res.shape_index != 1.0 || res.r2 != 1.0 {
            return Err(format!(
                "monotone case {i}: shape_index {} r2 {}",
                res.shape_index, res.r2
            ));
        }
    }
    // R^2 agrees with the normal-equations oracle on noisy arrays
    let mut compared = 0;
    while compared < 100 {
        let len = rng.gen_range(4..25);
        let arr: Vec<usize> = (0..len).map(|_| rng.gen_range(0..1000usize)).collect();
        if is_strictly_monotone(&arr) || is_rise_then_fall(&arr) {
            continue; // those are clamped to 1 by design
        }
        let y: Vec<f64> = arr.iter().map(|&v| v as f64).collect();
        let lin = oracle_r2(&y, 1);
        let quad = oracle_r2(&y, 2);
        let (want_class, want_r2) = if lin >= quad {
            (ShapeClass::Linear, lin)
        } else {
            (ShapeClass::Quadratic, quad)
        };
        let res = classify_overlaps(&arr, &norm);
        if res.class != want_class || (res.r2 - want_r2).abs() > 1e-9 {
            return Err(format!(
                "array {arr:?}: r2 {} vs oracle {want_r2} (class {:?} vs {want_class:?})",
                res.r2, res.class
            ));
        }
        compared += 1;
    }
    Ok(())
}

#[test]
fn criterion_04_shape_index_and_r2_oracle() {
    report(4, "shape classification", check_shape_classification());
}

// --------------------------------------------- 5: classifier integrity

fn synthetic_examples(n: usize, seed: u64, variant: FeatureVariant) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = variant.vector_len();
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let mut values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // separable on the gap-divergence slot with some noise
            values[dim - 4] = if label {
                rng.gen_range(0.0..0.8)
            } else {
                rng.gen_range(1.2..2.0)
            };
            TrainingExample {
                features: FeatureVector {
                    variant,
                    values,
                    shape_class: ShapeClass::Linear,
                    raw_r2: rng.gen_range(0.5..1.0),
                },
                label,
                provenance: Provenance {
                    volume_id: "synthetic".into(),
                    label_a: i as u32,
                    label_b: i as u32 + 1,
                    synthesized: true,
                },
            }
        })
        .collect()
}

fn model_bytes(model: &MlpModel) -> Result<Vec<u8>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.json");
    save_model(model, &path).map_err(|e| e.to_string())?;
    std::fs::read(&path).map_err(|e| e.to_string())
}

fn check_classifier_integrity() -> Result<(), String> {
    let examples = synthetic_examples(80, 3, FeatureVariant::Default);
    let hp = Hyperparams {
        hidden_sizes: vec![8, 4],
        max_epochs: 25,
        dropout: 0.0,
        ..Hyperparams::default()
    };
    let (model, _) = train(&examples, &hp, 5).map_err(|e| e.to_string())?;

    // analytic gradient vs central finite differences, dropout off
    let rows: Vec<(Vec<f64>, f64, f64)> = examples
        .iter()
        .take(16)
        .map(|e| {
            (
                model.scaler.transform(&e.features.values),
                e.label as u32 as f64,
                1.0,
            )
        })
        .collect();
    let (grad_w, grad_b, _) = batch_gradient(&model, &rows, None);
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..60 {
        let l = rng.gen_range(0..model.weights.len());
        let check_bias = rng.gen_bool(0.3);
        let (analytic, fd) = if check_bias {
            let i = rng.gen_range(0..model.biases[l].len());
            let mut hi = model.clone();
            let mut lo = model.clone();
            hi.biases[l][i] += h;
            lo.biases[l][i] -= h;
            let (_, _, loss_hi) = batch_gradient(&hi, &rows, None);
            let (_, _, loss_lo) = batch_gradient(&lo, &rows, None);
            (grad_b[l][i], (loss_hi - loss_lo) / (2.0 * h))
        } else {
            let i = rng.gen_range(0..model.weights[l].len());
            let mut hi = model.clone();
            let mut lo = model.clone();
            hi.weights[l][i] += h;
            lo.weights[l][i] -= h;
            let (_, _, loss_hi) = batch_gradient(&hi, &rows, None);
            let (_, _, loss_lo) = batch_gradient(&lo, &rows, None);
            (grad_w[l][i], (loss_hi - loss_lo) / (2.0 * h))
        };
        let denom = analytic.abs().max(fd.abs()).max(1e-8);
        if (analytic - fd).abs() / denom > 1e-4 {
            return Err(format!(
                "gradient mismatch: analytic {analytic} vs finite difference {fd}"
            ));
        }
    }

    // bit-exact retraining per seed
    let (model2, _) = train(&examples, &hp, 5).map_err(|e| e.to_string())?;
    if model_bytes(&model)? != model_bytes(&model2)? {
        return Err("same-seed retraining is not byte-identical".into());
    }
    let (model3, _) = train(&examples, &hp, 6).map_err(|e| e.to_string())?;
    if model_bytes(&model)? == model_bytes(&model3)? {
        return Err("different seeds produced identical models".into());
    }

    // save/load round trip
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.json");
    save_model(&model, &path).map_err(|e| e.to_string())?;
    let loaded = load_model(&path).map_err(|e| e.to_string())?;
    if loaded != model {
        return Err("loaded model differs from the saved one".into());
    }
    let path2 = dir.path().join("model2.json");
    save_model(&loaded, &path2).map_err(|e| e.to_string())?;
    let b1 = std::fs::read(&path).map_err(|e| e.to_string())?;
    let b2 = std::fs::read(&path2).map_err(|e| e.to_string())?;
    if b1 != b2 {
        return Err("save/load/save round trip is not byte-identical".into());
    }
    Ok(())
}

#[test]
fn criterion_05_classifier_integrity() {
    report(5, "classifier integrity", check_classifier_integrity());
}

// -------------------------------------------------------- 9: metrics

/// Exhaustive one-to-one matching: maximum match count, ties broken by
/// total IoU.
fn exhaustive_match(ious: &[(u32, u32, f64)], threshold: f64) -> (usize, f64) {
    let edges: Vec<&(u32, u32, f64)> = ious.iter().filter(|e| e.2 >= threshold).collect();
    fn recurse(
        edges: &[&(u32, u32, f64)],
        k: usize,
        used_p: &mut BTreeSet<u32>,
        used_g: &mut BTreeSet<u32>,
    ) -> (usize, f64) {
        if k == edges.len() {
            return (0, 0.0);
        }
        let skip = recurse(edges, k + 1, used_p, used_g);
        let (p, g, iou) = *edges[k];
        if used_p.contains(&p) || used_g.contains(&g) {
            return skip;
        }
        used_p.insert(p);
        used_g.insert(g);
        let (n, s) = recurse(edges, k + 1, used_p, used_g);
        used_p.remove(&p);
        used_g.remove(&g);
        let take = (n + 1, s + iou);
        if take.0 > skip.0 || (take.0 == skip.0 && take.1 > skip.1) {
            take
        } else {
            skip
        }
    }
    recurse(&edges, 0, &mut BTreeSet::new(), &mut BTreeSet::new())
}

fn all_ious(pred: &LabelVolume, gt: &LabelVolume) -> Vec<(u32, u32, f64)> {
    let mut sizes_p = std::collections::BTreeMap::new();
    let mut sizes_g = std::collections::BTreeMap::new();
    let mut inter = std::collections::BTreeMap::new();
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        if p != 0 {
            *sizes_p.entry(p).or_insert(0usize) += 1;
        }
        if g != 0 {
            *sizes_g.entry(g).or_insert(0usize) += 1;
        }
        if p != 0 && g != 0 {
            *inter.entry((p, g)).or_insert(0usize) += 1;
        }
    }
    inter
        .into_iter()
        .map(|((p, g), i)| (p, g, i as f64 / (sizes_p[&p] + sizes_g[&g] - i) as f64))
        .collect()
}

fn check_metrics_oracle() -> Result<(), String> {
    for seed in 0..8u64 {
        let gt = generate_voronoi_volume(&SynthSpec::new((8, 12, 12), 6, seed));
        // identity first
        if (mean_ap(&gt, &gt).map_err(|e| e.to_string())? - 1.0).abs() > 0.0 {
            return Err(format!("seed {seed}: mean_ap(v, v) != 1"));
        }
        let j = jaccard(&gt, &gt).map_err(|e| e.to_string())?;
        if j.jaccard_matched != 1.0 || j.jaccard_penalized != 1.0 {
            return Err(format!("seed {seed}: jaccard(v, v) != 1"));
        }
        // perturbed prediction: inject a gap and shuffle label ids
        let mut pred = gt.clone();
        let index = build_cell_index(&gt);
        let fresh = index.labels().max().unwrap() + 1;
        for rec in index.cells.values() {
            let extent = rec.bottom_layer - rec.top_layer;
            if extent >= 4 && rec.masks.len() == extent + 1 {
                let layer = (rec.top_layer + rec.bottom_layer) / 2;
                if inject_axis_gap(&mut pred, rec.label, layer, fresh).is_ok() {
                    break;
                }
            }
        }
        let ious = all_ious(&pred, &gt);
        let n_pred = build_cell_index(&pred).len();
        let n_gt = index.len();
        for t in MAP_THRESHOLDS {
            let (max_tp, _) = exhaustive_match(&ious, t.max(1e-12));
            let want = max_tp as f64 / (n_pred + n_gt - max_tp) as f64;
            let got = average_precision(&pred, &gt, t).map_err(|e| e.to_string())?;
            if (got - want).abs() > 0.0 {
                return Err(format!(
                    "seed {seed} t {t}: AP {got} vs exhaustive oracle {want}"
                ));
            }
        }
        let (max_tp, best_sum) = exhaustive_match(&ious, 0.0);
        let got = jaccard(&pred, &gt).map_err(|e| e.to_string())?;
        let want_matched = best_sum / max_tp as f64;
        let want_penalized = best_sum / n_gt as f64;
        if (got.jaccard_matched - want_matched).abs() > 1e-12
            || (got.jaccard_penalized - want_penalized).abs() > 1e-12
        {
            return Err(format!(
                "seed {seed}: jaccard {got:?} vs oracle ({want_matched}, {want_penalized})"
            ));
        }
    }
    Ok(())
}

#[test]
fn criterion_09_metrics_match_exhaustive_oracle() {
    report(9, "metrics vs exhaustive matching", check_metrics_oracle());
}

// ------------------------------------------- shared pipeline plumbing

fn pipeline_spec(seed: u64) -> SynthSpec {
    SynthSpec::new((28, 36, 36), 36, seed)
}

fn train_pipeline_model(
    seeds: std::ops::Range<u64>,
    seed: u64,
    ot: GeoWassersteinConfig,
) -> Result<MlpModel, String> {
    let volumes: Vec<(String, LabelVolume)> = seeds
        .map(|s| (format!("train-{s}"), generate_voronoi_volume(&pipeline_spec(s))))
        .collect();
    let refs: Vec<(String, &LabelVolume)> = volumes
        .iter()
        .map(|(id, v)| (id.clone(), v))
        .collect();
    let mut cfg = SynthesisConfig::default();
    cfg.feature.ot = ot;
    let examples = synthesize_training_set(&refs, &cfg, seed).map_err(|e| e.to_string())?;
    let (model, _) = train(&examples, &Hyperparams::default(), seed).map_err(|e| e.to_string())?;
    Ok(model)
}

/// Carve one artificial gap into every splittable cell; returns the gap
/// records.
fn inject_all_gaps(
    v: &mut LabelVolume,
    limit: usize,
) -> Vec<overseg::testkit::GapRecord> {
    let index = build_cell_index(v);
    let mut fresh = index.labels().max().unwrap() + 1;
    let mut gaps = Vec::new();
    for rec in index.cells.values() {
        if gaps.len() == limit {
            break;
        }
        let extent = rec.bottom_layer - rec.top_layer;
        if extent >= 4 && rec.masks.len() == extent + 1 {
            let layer = (rec.top_layer + rec.bottom_layer) / 2;
            if let Ok(gap) = inject_axis_gap(v, rec.label, layer, fresh) {
                fresh += 1;
                gaps.push(gap);
            }
        }
    }
    gaps
}

// ------------------------------------ 6: end-to-end classification F1

fn check_pipeline_f1() -> Result<(), String> {
    let started = Instant::now();
    // Route full cross-section masks through the sliced estimator, at
    // train and test time alike: the wall-clock budget assumes more than
    // the single core this runner has, and exact transport on every
    // candidate pair blows it.
    let ot = GeoWassersteinConfig {
        exact_cap: 900,
        ..GeoWassersteinConfig::default()
    };
    let model = train_pipeline_model(300..310, 77, ot)?;
    let fcfg = FeatureConfig {
        variant: model.variant,
        ot,
        normalizers: model.normalizers,
    };
    let per_volume: Result<Vec<(usize, Vec<(Verdict, Verdict)>)>, String> = (400..410u64)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&s| {
            let mut v = generate_voronoi_volume(&pipeline_spec(s));
            let gaps = inject_all_gaps(&mut v, 20);
            let injected: BTreeSet<(u32, u32)> = gaps
                .iter()
                .map(|g| (g.label_upper, g.label_lower))
                .collect();
            let index = build_cell_index(&v);
            let mut verdicts = Vec::new();
            for pair in screen_candidates(&index, &ScreenConfig { max_gap: 1 }) {
                let fv = build_feature_vector(&pair, &index, &fcfg).map_err(|e| e.to_string())?;
                let (_, merge) = predict(&model, &fv.values).map_err(|e| e.to_string())?;
                let p = if merge { Verdict::Merge } else { Verdict::Keep };
                let t = if injected.contains(&(pair.label_a, pair.label_b)) {
                    Verdict::Merge
                } else {
                    Verdict::Keep
                };
                verdicts.push((p, t));
            }
            Ok((gaps.len(), verdicts))
        })
        .collect();
    let per_volume = per_volume?;
    let total_gaps: usize = per_volume.iter().map(|(g, _)| g).sum();
    let (predicted, truth): (Vec<Verdict>, Vec<Verdict>) = per_volume
        .into_iter()
        .flat_map(|(_, v)| v)
        .unzip();
    if total_gaps < 200 {
        return Err(format!("only {total_gaps} gaps injected, need 200"));
    }
    let report = classification_report(&predicted, &truth);
    let elapsed = started.elapsed();
    if report.f1 < 0.90 {
        return Err(format!(
            "F1 {:.4} below 0.90 (recall {:.4} precision {:.4}, {} candidates, {total_gaps} gaps)",
            report.f1,
            report.recall,
            report.precision,
            predicted.len()
        ));
    }
    if elapsed.as_secs_f64() >= 300.0 {
        return Err(format!("runtime {elapsed:?} exceeds 5 min"));
    }
    Ok(())
}

#[test]
fn criterion_06_pipeline_f1_on_held_out_volumes() {
    report(6, "held-out gap classification F1", check_pipeline_f1());
}

// --------------------------------------------- 7: correction round trip

fn check_correction_round_trip() -> Result<(), String> {
    let mut stacks = 0usize;
    for seed in 500..506u64 {
        let gt = generate_voronoi_volume(&SynthSpec::new((24, 48, 48), 8, seed));
        let base_index = build_cell_index(&gt);
        let fresh = base_index.labels().max().unwrap() + 1;
        // one stack per splittable cell: inject the gap, force the merge
        for rec in base_index.cells.values() {
            let extent = rec.bottom_layer - rec.top_layer;
            if extent < 4 || rec.masks.len() != extent + 1 {
                continue;
            }
            let layer = (rec.top_layer + rec.bottom_layer) / 2;
            let mut v = gt.clone();
            let gap = match inject_axis_gap(&mut v, rec.label, layer, fresh) {
                Ok(g) => g,
                Err(_) => continue,
            };
            stacks += 1;
            let uncorrected = v.clone();
            let index = build_cell_index(&v);
            let pair = CandidatePair {
                label_a: gap.label_upper,
                label_b: gap.label_lower,
                gap_layers: vec![gap.layer],
            };
            let src = index.get(gap.label_upper).unwrap().bottom_mask();
            let dst = index.get(gap.label_lower).unwrap().top_mask();
            let decision = merge_decision(pair, 1.0, src, dst).map_err(|e| e.to_string())?;
            apply_corrections(&mut v, &[decision]).map_err(|e| e.to_string())?;
            let recovered = gap
                .deleted_pixels
                .iter()
                .filter(|&&(y, x)| v.get(gap.layer, y as usize, x as usize) == gap.label_upper)
                .count();
            let frac = recovered as f64 / gap.deleted_pixels.len() as f64;
            if frac < 0.99 {
                return Err(format!(
                    "seed {seed} label {}: recovered {frac:.4} of the deleted mask",
                    gap.label_upper
                ));
            }
            let map_un = mean_ap(&uncorrected, &gt).map_err(|e| e.to_string())?;
            let map_co = mean_ap(&v, &gt).map_err(|e| e.to_string())?;
            let j_un = jaccard(&uncorrected, &gt).map_err(|e| e.to_string())?;
            let j_co = jaccard(&v, &gt).map_err(|e| e.to_string())?;
            if !(map_co > map_un) {
                return Err(format!(
                    "seed {seed} label {}: mAP {map_co} !> uncorrected {map_un}",
                    gap.label_upper
                ));
            }
            if !(j_co.jaccard_matched > j_un.jaccard_matched)
                || !(j_co.jaccard_penalized > j_un.jaccard_penalized)
            {
                return Err(format!(
                    "seed {seed} label {}: jaccard {j_co:?} !> uncorrected {j_un:?}",
                    gap.label_upper
                ));
            }
        }
    }
    if stacks < 30 {
        return Err(format!("only {stacks} round-trip stacks exercised"));
    }
    Ok(())
}

#[test]
fn criterion_07_correction_round_trip() {
    report(7, "correction round trip", check_correction_round_trip());
}

// --------------------------------------------------- 8: tilted pipeline

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

fn check_tilted_pipeline() -> Result<(), String> {
    // plane recovery on noisy synthetic planes
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let normal = normalize3([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.2..1.0),
        ]);
        // in-plane basis
        let anchor = if normal[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let u = normalize3([
            normal[1] * anchor[2] - normal[2] * anchor[1],
            normal[2] * anchor[0] - normal[0] * anchor[2],
            normal[0] * anchor[1] - normal[1] * anchor[0],
        ]);
        let w = [
            normal[1] * u[2] - normal[2] * u[1],
            normal[2] * u[0] - normal[0] * u[2],
            normal[0] * u[1] - normal[1] * u[0],
        ];
        let points: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                let a = rng.gen_range(-5.0..5.0);
                let b = rng.gen_range(-5.0..5.0);
                let g = 0.01 * gaussian(&mut rng);
                [
                    a * u[0] + b * w[0] + g * normal[0],
                    a * u[1] + b * w[1] + g * normal[1],
                    a * u[2] + b * w[2] + g * normal[2],
                ]
            })
            .collect();
        let plane = fit_plane_points(&points).map_err(|e| e.to_string())?;
        let dot = (plane.n[0] * normal[0] + plane.n[1] * normal[1] + plane.n[2] * normal[2]).abs();
        let angle = dot.clamp(-1.0, 1.0).acos().to_degrees();
        if angle > 1.0 {
            return Err(format!("seed {seed}: plane normal off by {angle:.3} degrees"));
        }
    }

    // phantom verdicts under the trained classifier
    let model = train_pipeline_model(600..604, 78, GeoWassersteinConfig::default())?;
    let cfg = TiltedConfig::default();
    let mut merged_ok = 0;
    let mut kept_ok = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // falsely split ellipsoid: one body cut by a tilted plane
        let mut e = ellipsoid_phantom((36, 36, 36), [1.0; 3], [18.0, 18.0, 18.0], [13.0, 10.0, 11.0], 1);
        let normal = normalize3([1.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
        let plane = SplitPlane {
            point: [18.0, 18.0, 18.0],
            normal,
        };
        inject_tilted_split(&mut e, 1, &plane, 2).map_err(|e| e.to_string())?;
        match evaluate_tilted_pair(&mut e, 1, 2, &model, &cfg) {
            Ok(d) if d.verdict == Verdict::Merge => merged_ok += 1,
            _ => {}
        }

        // two genuinely distinct touching spheres
        let dir = normalize3([1.0, rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)]);
        let half = 7.2;
        let ca = [20.0 - half * dir[0], 20.0 - half * dir[1], 20.0 - half * dir[2]];
        let cb = [20.0 + half * dir[0], 20.0 + half * dir[1], 20.0 + half * dir[2]];
        let mut s = tangent_spheres_phantom((40, 40, 40), [1.0; 3], ca, cb, 9.0);
        match evaluate_tilted_pair(&mut s, 1, 2, &model, &cfg) {
            Ok(d) if d.verdict == Verdict::Keep => kept_ok += 1,
            _ => {}
        }
    }
    if merged_ok < 9 || kept_ok < 9 {
        return Err(format!(
            "phantom verdicts: {merged_ok}/10 ellipsoid splits merged, {kept_ok}/10 sphere pairs kept"
        ));
    }
    Ok(())
}

#[test]
fn criterion_08_tilted_pipeline() {
    report(8, "tilted cut pipeline", check_tilted_pipeline());
}

// ------------------------------------------------- 10: CLI determinism

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_overseg"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`overseg {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn dir_snapshot(dir: &std::path::Path) -> Result<std::collections::BTreeMap<String, Vec<u8>>, String> {
    let mut out = std::collections::BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        out.insert(name, bytes);
    }
    Ok(out)
}

fn check_cli_determinism() -> Result<(), String> {
    use overseg::volume::{write_volume, FormatHint};
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();

    // this spec yields both natural screening candidates (negatives) and
    // splittable cells, so training sees two classes
    let gt = generate_voronoi_volume(&SynthSpec::new((16, 24, 24), 18, 1));
    let mut input = gt.clone();
    let gaps = inject_all_gaps(&mut input, 2);
    if gaps.len() < 2 {
        return Err("fixture volume has too few splittable cells".into());
    }
    let gt_path = root.join("gt.lbl");
    let in_path = root.join("input.lbl");
    write_volume(&gt, &gt_path, FormatHint::Auto).map_err(|e| e.to_string())?;
    write_volume(&input, &in_path, FormatHint::Auto).map_err(|e| e.to_string())?;
    let cfg_path = root.join("config.json");
    std::fs::write(&cfg_path, "{\"true_cases_per_volume\": 8}").map_err(|e| e.to_string())?;
    let gt_s = gt_path.to_str().unwrap();
    let in_s = in_path.to_str().unwrap();
    let cfg_s = cfg_path.to_str().unwrap();

    let mut snapshots: Vec<Vec<std::collections::BTreeMap<String, Vec<u8>>>> = Vec::new();
    for run in 0..2 {
        let t = root.join(format!("train{run}"));
        let s = root.join(format!("screen{run}"));
        let c = root.join(format!("correct{run}"));
        let e = root.join(format!("eval{run}"));
        run_cli(&[
            "train",
            "--config",
            cfg_s,
            "--input",
            gt_s,
            "--out",
            t.to_str().unwrap(),
            "--seed",
            "5",
        ])?;
        run_cli(&["screen", "--input", in_s, "--out", s.to_str().unwrap(), "--seed", "5"])?;
        let model = t.join("model.json");
        run_cli(&[
            "correct",
            "--input",
            in_s,
            "--model",
            model.to_str().unwrap(),
            "--out",
            c.to_str().unwrap(),
            "--seed",
            "5",
        ])?;
        let corrected = c.join("corrected.lbl");
        run_cli(&[
            "evaluate",
            "--input",
            corrected.to_str().unwrap(),
            "--gt",
            gt_s,
            "--out",
            e.to_str().unwrap(),
            "--seed",
            "5",
        ])?;
        snapshots.push(vec![
            dir_snapshot(&t)?,
            dir_snapshot(&s)?,
            dir_snapshot(&c)?,
            dir_snapshot(&e)?,
        ]);
    }
    for (stage, (a, b)) in snapshots[0].iter().zip(snapshots[1].iter()).enumerate() {
        if a.keys().ne(b.keys()) {
            return Err(format!("stage {stage}: output file sets differ between runs"));
        }
        for (name, bytes) in a {
            if bytes != &b[name] {
                return Err(format!("stage {stage}: {name} differs between runs"));
            }
        }
    }
    Ok(())
}

#[test]
fn criterion_10_cli_outputs_are_deterministic() {
    report(10, "CLI determinism", check_cli_determinism());
}
