//! Seeded checks behind the numbered acceptance criteria. Each returns a
//! short summary on success and the first discrepancy on failure.

use mammoclu::cluster::{self, Neighborhood};
use mammoclu::fusion::AttentionPool;
use mammoclu::graph::{bce_with_logits, Graph};
use mammoclu::imaging::PixelBox;
use mammoclu::linalg::Mat;
use mammoclu::loss::{composite_loss, LossWeights};
use mammoclu::metrics::{self, ViewDetections};
use mammoclu::model::StudyOutputs;
use mammoclu::params::{Init, InitMode, ParamStore};
use mammoclu::roi::{self, SaliencyMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Check = Result<String, String>;

/// Random point grid, anchor lattice and neighbourhood within the stated bounds.
pub fn random_cluster_instance(rng: &mut ChaCha8Rng) -> (Mat, (usize, usize), (usize, usize), Neighborhood) {
    let grid = (rng.gen_range(2..=8), rng.gen_range(2..=8));
    let anchors = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let nb = if rng.gen_bool(0.5) { Neighborhood::Four } else { Neighborhood::Eight };
    let d = rng.gen_range(2..=6);
    (random_mat(rng, grid.0 * grid.1, d), grid, anchors, nb)
}

/// Anchor feature matrix built from the oracles alone.
pub fn oracle_anchor_matrix(points: &Mat, grid: (usize, usize), lattice: (usize, usize), nb: Neighborhood) -> Mat {
    let rows: Vec<Vec<f64>> = oracle_anchors(grid.0, grid.1, lattice.0, lattice.1)
        .into_iter()
        .map(|at| oracle_anchor_feature(points, grid.0, grid.1, at, nb.k()))
        .collect();
    let d = points.cols;
    Mat::from_vec(rows.len(), d, rows.concat())
}

pub fn cluster_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for i in 0..instances {
        let (points, grid, lattice, nb) = random_cluster_instance(&mut rng);
        let expected_anchors = oracle_anchor_matrix(&points, grid, lattice, nb);
        let idx = cluster::select_anchors(grid, lattice).map_err(|e| e.to_string())?;
        let anchors = cluster::anchor_features(&points, grid, &idx, nb).map_err(|e| e.to_string())?;
        let drift = anchors
            .data
            .iter()
            .zip(&expected_anchors.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if drift > 1e-12 {
            return Err(format!("instance {i}: anchor features differ by {drift:e}"));
        }
        let got = cluster::assign_clusters(&points, &expected_anchors).map_err(|e| e.to_string())?;
        let want = oracle_assign(&points, &expanded(&expected_anchors));
        mismatches += got.iter().zip(&want).filter(|(a, b)| a != b).count();
    }
    if mismatches == 0 {
        Ok(format!("{instances} instances, 0 mismatches"))
    } else {
        Err(format!("{mismatches} mismatched assignments"))
    }
}

fn expanded(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mat {
    Mat::from_vec(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect())
}

pub fn greedy_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let crop = (3, 3);
    for i in 0..instances {
        let map = random_map(&mut rng, 16, 16);
        let got = roi::greedy_roi_select(&map, 3, crop).map_err(|e| e.to_string())?;
        let want = oracle_greedy(&map, 3, crop).ok_or(format!("instance {i}: oracle found no fit"))?;
        let got_pairs: Vec<_> = got.iter().map(|p| (p.coord, p.score)).collect();
        if got_pairs != want {
            return Err(format!("instance {i}: {got_pairs:?} != {want:?}"));
        }
        let coords: Vec<_> = got.iter().map(|p| p.coord).collect();
        if !pairwise_disjoint(&coords, crop) {
            return Err(format!("instance {i}: overlapping windows {coords:?}"));
        }
    }
    Ok(format!("{instances} maps, identical picks, all disjoint"))
}

pub fn gradients() -> Check {
    let block = grad::block_param_error();
    let block_in = grad::block_input_error();
    let align = grad::align_embed_error();
    let fuse = grad::fuse_view_error();
    let e2e = grad::end_to_end_error();
    let local = block.max(block_in).max(align).max(fuse);
    let msg = format!("block/align/fuse max {local:.1e}, end-to-end {e2e:.1e}");
    if local <= 1e-4 && e2e <= 1e-3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Study outputs with the given heads and a constant raw saliency per view.
pub fn outputs(global_prob: f64, local_logit: f64, fusion_logit: f64, maps: [f64; 4]) -> StudyOutputs {
    StudyOutputs {
        global_prob,
        local_logit,
        fusion_logit,
        f_fusion: vec![],
        f_global: vec![],
        f_local: vec![],
        view_weights: [vec![], vec![], vec![]],
        saliency_maps: maps
            .iter()
            .map(|&m| SaliencyMap::from_raw(Mat::filled(2, 2, m), (8, 8)))
            .collect(),
        patch_selections: vec![],
        instance_weights: vec![],
        assignments: vec![],
    }
}

pub fn loss_decomposition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let out = outputs(
            rng.gen_range(0.01..0.99),
            rng.gen_range(-8.0..8.0),
            rng.gen_range(-8.0..8.0),
            [(); 4].map(|_| rng.gen_range(0.0..1.0)),
        );
        let y = rng.gen_range(0..=1u8);
        let w = LossWeights::new(
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.01..2.0),
        );
        let full = composite_loss(&out, y, &w).map_err(|e| e.to_string())?;
        let units = [(1.0, 0.0, 0.0, 0.0), (0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 1.0, 0.0), (0.0, 0.0, 0.0, 1.0)]
            .map(|(a, b, c, d)| composite_loss(&out, y, &LossWeights::new(a, b, c, d)).map(|l| l.total));
        let [g, l, f, m] = units.map(|u| u.unwrap_or(f64::NAN));
        let terms = [(g, full.global), (l, full.local), (f, full.fusion), (m, full.map)];
        if terms.iter().any(|(u, t)| !((u - t).abs() <= 1e-12)) {
            return Err(format!("instance {i}: unit weights {terms:?}"));
        }
        let weighted = w.alpha * full.global + w.beta * full.local + w.gamma * full.fusion + w.delta * full.map;
        if weighted != full.total {
            return Err(format!("instance {i}: total {} != weighted sum {weighted}", full.total));
        }
    }
    let ln2 = std::f64::consts::LN_2;
    let g = composite_loss(&outputs(0.5, 0.0, 3.0, [0.0; 4]), 1, &LossWeights::new(1.0, 0.0, 0.0, 0.0))
        .map_err(|e| e.to_string())?
        .total;
    let f = composite_loss(&outputs(0.9, 2.0, 0.0, [0.0; 4]), 0, &LossWeights::new(0.0, 0.0, 1.0, 0.0))
        .map_err(|e| e.to_string())?
        .total;
    if (g - ln2).abs() > 1e-10 || (f - ln2).abs() > 1e-10 {
        return Err(format!("worked values {g} and {f}, expected ln 2"));
    }
    Ok("100 weight draws exact, ln 2 worked values hold".into())
}

pub fn pb(x0: usize, y0: usize, x1: usize, y1: usize) -> PixelBox {
    PixelBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    }
}

/// Three lesions; two patches cover two of them exactly, one patch is far away.
pub fn three_lesion_fixture() -> Vec<ViewDetections> {
    vec![
        ViewDetections {
            lesions: vec![pb(0, 0, 10, 10), pb(20, 20, 30, 30)],
            patches: vec![pb(0, 0, 10, 10), pb(50, 50, 60, 60)],
        },
        ViewDetections {
            lesions: vec![pb(5, 40, 15, 52)],
            patches: vec![pb(5, 40, 15, 52)],
        },
    ]
}

pub fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let (scores, labels) = random_scored_set(&mut rng, i % 2 == 1);
        let got = metrics::auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_auc(&scores, &labels)).abs());
    }
    if worst > 1e-9 {
        return Err(format!("auc differs from the pairwise oracle by {worst:e}"));
    }
    let c = metrics::confusion(&[0.9, 0.1], &[1, 0], 0.5).map_err(|e| e.to_string())?;
    if (c.tp, c.tn, c.fp, c.fn_) != (1, 1, 0, 0) || c.accuracy() != 1.0 {
        return Err(format!("confusion fixture gave {c:?}"));
    }
    let c = metrics::confusion(&[0.8; 4], &[1, 0, 1, 0], 0.5).map_err(|e| e.to_string())?;
    if c.accuracy() != 0.5 {
        return Err(format!("all-positive accuracy {}", c.accuracy()));
    }
    let c = metrics::confusion(&[0.5], &[1], 0.5).map_err(|e| e.to_string())?;
    if c.tp != 1 {
        return Err("a score at the threshold must count positive".into());
    }
    let f1s = [metrics::f1(5, 5, 5), metrics::f1(4, 0, 0), metrics::f1(0, 3, 2)];
    if f1s != [0.5, 1.0, 0.0] {
        return Err(format!("f1 fixtures gave {f1s:?}"));
    }
    let m = metrics::mdr(&three_lesion_fixture(), 0.25).map_err(|e| e.to_string())?;
    if m != 1.0 / 3.0 {
        return Err(format!("three-lesion mdr {m}"));
    }
    Ok(format!("auc max deviation {worst:.1e}, fixtures exact, mdr 1/3"))
}

/// A random strictly increasing map: a positive-slope affine part plus a
/// positive multiple of a monotone nonlinearity.
pub fn monotone_transform(rng: &mut ChaCha8Rng) -> impl Fn(f64) -> f64 {
    let a = rng.gen_range(0.1..10.0);
    let b = rng.gen_range(-5.0..5.0);
    let c = rng.gen_range(0.0..3.0);
    let kind = rng.gen_range(0..3);
    move |s: f64| {
        let nl = match kind {
            0 => s.powi(3),
            1 => s.exp(),
            _ => s.atan(),
        };
        a * s + b + c * nl
    }
}

fn ranks_equal(a: &[f64], b: &[f64]) -> bool {
    a.iter().enumerate().all(|(i, x)| {
        a.iter()
            .zip(b)
            .all(|(y, v)| x.partial_cmp(y) == b[i].partial_cmp(v))
    })
}

pub fn invariances() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in 0..20 {
        let (scores, labels) = random_scored_set(&mut rng, t % 2 == 0);
        let f = monotone_transform(&mut rng);
        let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
        if !ranks_equal(&scores, &mapped) {
            return Err(format!("transform {t} is not strictly increasing on the sample"));
        }
        let (a, b) = (
            metrics::auc(&scores, &labels).map_err(|e| e.to_string())?,
            metrics::auc(&mapped, &labels).map_err(|e| e.to_string())?,
        );
        if a != b {
            return Err(format!("transform {t}: auc {a} became {b}"));
        }
    }
    for i in 0..100 {
        let (points, grid, lattice, nb) = random_cluster_instance(&mut rng);
        let anchors = oracle_anchor_matrix(&points, grid, lattice, nb);
        let base = cluster::assign_clusters(&points, &anchors).map_err(|e| e.to_string())?;
        let (sp, sa) = (rng.gen_range(0.01..100.0), rng.gen_range(0.01..100.0));
        let mut p2 = points.clone();
        p2.scale(sp);
        let mut a2 = anchors.clone();
        a2.scale(sa);
        if cluster::assign_clusters(&p2, &a2).map_err(|e| e.to_string())? != base {
            return Err(format!("instance {i}: scaling by ({sp}, {sa}) changed the assignment"));
        }
    }
    for i in 0..50 {
        let (weights, pooled, perm, weights_p, pooled_p) = permuted_attention(&mut rng, i);
        let expected: Vec<f64> = perm.iter().map(|&p| weights[p]).collect();
        if weights_p != expected || pooled_p != pooled {
            return Err(format!("instance {i}: attention is not permutation equivariant"));
        }
    }
    Ok("20 monotone transforms, 100 scalings, 50 permutations, all exact".into())
}

/// Attention weights and pooled vector for random rows and for a random
/// permutation of them: `(w, pooled, perm, w_perm, pooled_perm)`.
pub fn permuted_attention(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<usize>, Vec<f64>, Vec<f64>) {
    let k = rng.gen_range(1..=8);
    let dim = rng.gen_range(1..=6);
    let mut store = ParamStore::new();
    let mut init = Init::new(seed, InitMode::Random);
    let pool = AttentionPool::new(&mut store, &mut init, "att", dim);
    let rows = random_mat(rng, k, dim);
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    let mut permuted = Mat::zeros(k, dim);
    for (n, &p) in perm.iter().enumerate() {
        permuted.row_mut(n).copy_from_slice(rows.row(p));
    }
    let run = |m: &Mat| {
        let mut g = Graph::new(&store);
        let x = g.input(m.clone());
        let p = pool.forward(&mut g, x).expect("finite rows");
        (g.value(p.weights).data.clone(), g.value(p.vector).data.clone())
    };
    let (w, v) = run(&rows);
    let (wp, vp) = run(&permuted);
    (w, v, perm, wp, vp)
}

/// Stable cross-entropy against the direct logistic formulas on [-30, 30].
pub fn stable_bce_error() -> f64 {
    let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
    (-300..=300)
        .map(|i| {
            let z = i as f64 / 10.0;
            let pos = (bce_with_logits(z, 1.0, 1.0) + sigma(z).ln()).abs();
            // 1 - sigma(z) written as sigma(-z) avoids cancellation in the oracle
            let neg = (bce_with_logits(z, 0.0, 1.0) + sigma(-z).ln()).abs();
            pos.max(neg)
        })
        .fold(0.0, f64::max)
}
