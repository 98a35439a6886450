//! Brute-force oracles shared by the integration tests. Each one is written
//! from the definitions, without calling the library routine it checks.

#![allow(dead_code)]

pub mod criteria;
pub mod grad;
pub mod harness;

use mammoclu::linalg::Mat;
use mammoclu::roi::MapCoord;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const NORM_EPS: f64 = 1e-12;

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Anchor grid indices, using integer pixel-centre arithmetic.
pub fn oracle_anchors(h: usize, w: usize, nh: usize, nw: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..nh {
        for j in 0..nw {
            let cy = (i as f64 + 0.5) * h as f64 / nh as f64;
            let cx = (j as f64 + 0.5) * w as f64 / nw as f64;
            out.push((cy.floor() as usize, cx.floor() as usize));
        }
    }
    out
}

/// Neighbourhood-averaged anchor feature with edge replication.
pub fn oracle_anchor_feature(points: &Mat, h: usize, w: usize, at: (usize, usize), k: usize) -> Vec<f64> {
    let mut offsets: Vec<(isize, isize)> = vec![(-1, 0), (1, 0), (0, -1), (0, 1)];
    if k == 8 {
        offsets.extend([(-1, -1), (-1, 1), (1, -1), (1, 1)]);
    }
    let d = points.cols;
    let mut acc = points.row(at.0 * w + at.1).to_vec();
    for (dr, dc) in offsets {
        let r = (at.0 as isize + dr).clamp(0, h as isize - 1) as usize;
        let c = (at.1 as isize + dc).clamp(0, w as isize - 1) as usize;
        for q in 0..d {
            acc[q] += points.get(r * w + c, q);
        }
    }
    acc.iter().map(|v| v / (k + 1) as f64).collect()
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    dot / (na * nb)
}

/// Exhaustive cosine argmax, ties to the lowest anchor.
pub fn oracle_assign(points: &Mat, anchors: &[Vec<f64>]) -> Vec<usize> {
    (0..points.rows)
        .map(|j| {
            let p = points.row(j);
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (m, a) in anchors.iter().enumerate() {
                let s = oracle_cosine(p, a);
                if s > best_s {
                    best_s = s;
                    best = m;
                }
            }
            best
        })
        .collect()
}

fn overlaps(a: MapCoord, b: MapCoord, crop: (usize, usize)) -> bool {
    a.row < b.row + crop.0 && b.row < a.row + crop.0 && a.col < b.col + crop.1 && b.col < a.col + crop.1
}

/// Sequential exhaustive search: every window position, skipping any that
/// overlaps an earlier pick, best mean first, ties to the smallest (row, col).
pub fn oracle_greedy(map: &Mat, n: usize, crop: (usize, usize)) -> Option<Vec<(MapCoord, f64)>> {
    let (h, w) = map.shape();
    let mut candidates = Vec::new();
    for r in 0..=h - crop.0 {
        for c in 0..=w - crop.1 {
            let mut s = 0.0;
            for rr in r..r + crop.0 {
                for cc in c..c + crop.1 {
                    s += map.get(rr, cc);
                }
            }
            candidates.push((MapCoord::new(r, c), s / (crop.0 * crop.1) as f64));
        }
    }
    let mut picks: Vec<(MapCoord, f64)> = Vec::new();
    for _ in 0..n {
        let best = candidates
            .iter()
            .filter(|(c, _)| picks.iter().all(|(p, _)| !overlaps(*c, *p, crop)))
            .fold(None::<(MapCoord, f64)>, |acc, &(c, s)| match acc {
                Some((bc, bs)) if bs > s || (bs == s && (bc.row, bc.col) < (c.row, c.col)) => {
                    Some((bc, bs))
                }
                _ => Some((c, s)),
            })?;
        picks.push(best);
    }
    Some(picks)
}

pub fn pairwise_disjoint(coords: &[MapCoord], crop: (usize, usize)) -> bool {
    coords
        .iter()
        .enumerate()
        .all(|(i, a)| coords[i + 1..].iter().all(|b| !overlaps(*a, *b, crop)))
}

/// Mann-Whitney statistic by direct comparison of every positive-negative pair.
pub fn oracle_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random scores with both classes present; `ties` rounds scores to create ties.
pub fn random_scored_set(rng: &mut ChaCha8Rng, ties: bool) -> (Vec<f64>, Vec<u8>) {
    let n = rng.gen_range(2..=50);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = (0..n)
        .map(|_| {
            let s: f64 = rng.gen();
            if ties {
                (s * 8.0).round() / 8.0
            } else {
                s
            }
        })
        .collect();
    (scores, labels)
}
