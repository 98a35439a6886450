//! Context-clustering primitives.
//!
//! These are the plain (non-differentiable) building blocks of a context
//! cluster block: uniform anchor placement, neighbourhood-averaged anchor
//! features, cosine-similarity assignment and the similarity-gated
//! aggregate/dispatch step. The autograd tape wraps [`aggregate_dispatch`]
//! and [`cosine_similarity`] with their hand-derived backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Mat;

/// Added to every norm in cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

/// Neighbourhood used to average anchor features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum Neighborhood {
    /// Up, down, left, right.
    Four,
    /// The four axis neighbours plus the diagonals.
    Eight,
}

impl Neighborhood {
    pub fn k(self) -> usize {
        match self {
            Neighborhood::Four => 4,
            Neighborhood::Eight => 8,
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, 0),
            (1, 0),
            (0, -1),
            (0, 1),
            (-1, -1),
            (-1, 1),
            (1, -1),
            (1, 1),
        ];
        match self {
            Neighborhood::Four => &FOUR,
            Neighborhood::Eight => &EIGHT,
        }
    }
}

impl TryFrom<usize> for Neighborhood {
    type Error = String;

    fn try_from(k: usize) -> std::result::Result<Self, String> {
        match k {
            4 => Ok(Neighborhood::Four),
            8 => Ok(Neighborhood::Eight),
            other => Err(format!("neighbour count must be 4 or 8, got {other}")),
        }
    }
}

impl From<Neighborhood> for usize {
    fn from(n: Neighborhood) -> usize {
        n.k()
    }
}

/// Row-major indices of a uniform `n_h x n_w` anchor lattice over an `h x w`
/// grid. Anchor `(i, j)` sits at row `floor((i + 0.5) * h / n_h)` and column
/// `floor((j + 0.5) * w / n_w)`.
pub fn select_anchors(grid: (usize, usize), anchor_grid: (usize, usize)) -> Result<Vec<usize>> {
    let (h, w) = grid;
    let (nh, nw) = anchor_grid;
    if nh == 0 || nw == 0 {
        return Err(invalid!("anchor grid {nh}x{nw} must be at least 1x1"));
    }
    if nh > h || nw > w {
        return Err(invalid!(
            "anchor grid {nh}x{nw} is larger than the point grid {h}x{w}"
        ));
    }
    let mut out = Vec::with_capacity(nh * nw);
    for i in 0..nh {
        let row = (2 * i + 1) * h / (2 * nh);
        for j in 0..nw {
            let col = (2 * j + 1) * w / (2 * nw);
            out.push(row * w + col);
        }
    }
    Ok(out)
}

/// Neighbours of `index` on an `h x w` grid, with coordinates clamped to the
/// grid (edge replication), so the result always has exactly `k` entries.
pub fn neighbor_indices(grid: (usize, usize), index: usize, nb: Neighborhood) -> Vec<usize> {
    let (h, w) = grid;
    let (r, c) = ((index / w) as isize, (index % w) as isize);
    nb.offsets()
        .iter()
        .map(|&(dr, dc)| {
            let rr = (r + dr).clamp(0, h as isize - 1) as usize;
            let cc = (c + dc).clamp(0, w as isize - 1) as usize;
            rr * w + cc
        })
        .collect()
}

/// Mean of an anchor point and its neighbours, per dimension.
pub fn anchor_feature(anchor: &[f64], neighbors: &[&[f64]]) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(invalid!("anchor feature needs at least one neighbour"));
    }
    let mut acc = anchor.to_vec();
    for n in neighbors {
        if n.len() != anchor.len() {
            return Err(invalid!(
                "neighbour has dimension {}, anchor has {}",
                n.len(),
                anchor.len()
            ));
        }
        for (a, v) in acc.iter_mut().zip(n.iter()) {
            *a += v;
        }
    }
    let denom = (neighbors.len() + 1) as f64;
    acc.iter_mut().for_each(|v| *v /= denom);
    Ok(acc)
}

/// Sparse averaging rows: row `m` lists `(point index, weight)` pairs whose
/// weighted sum is the neighbourhood-averaged feature of anchor `m`. Clamped
/// duplicates at the border appear as repeated entries.
pub fn anchor_weights(
    grid: (usize, usize),
    anchors: &[usize],
    nb: Neighborhood,
) -> Vec<Vec<(usize, f64)>> {
    let wgt = 1.0 / (nb.k() + 1) as f64;
    anchors
        .iter()
        .map(|&a| {
            let mut row = vec![(a, wgt)];
            row.extend(neighbor_indices(grid, a, nb).into_iter().map(|i| (i, wgt)));
            row
        })
        .collect()
}

/// Anchor features for every anchor of a point grid stored as `(h*w) x d`.
pub fn anchor_features(
    points: &Mat,
    grid: (usize, usize),
    anchors: &[usize],
    nb: Neighborhood,
) -> Result<Mat> {
    if points.rows != grid.0 * grid.1 {
        return Err(invalid!(
            "{} points do not fill a {}x{} grid",
            points.rows,
            grid.0,
            grid.1
        ));
    }
    let mut out = Mat::zeros(anchors.len(), points.cols);
    for (m, &a) in anchors.iter().enumerate() {
        let nbrs = neighbor_indices(grid, a, nb);
        let rows: Vec<&[f64]> = nbrs.iter().map(|&i| points.row(i)).collect();
        out.row_mut(m)
            .copy_from_slice(&anchor_feature(points.row(a), &rows)?);
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Pairwise cosine similarity, `N x M`, between `points` (`N x d`) and
/// `centers` (`M x d`), with [`NORM_EPS`] added to both norms.
pub fn cosine_similarity(points: &Mat, centers: &Mat) -> Mat {
    assert_eq!(points.cols, centers.cols, "cosine similarity width mismatch");
    let mut dots = Mat::zeros(points.rows, centers.rows);
    crate::linalg::gemm(false, true, 1.0, points, centers, 0.0, &mut dots);
    let cn: Vec<f64> = (0..centers.rows)
        .map(|m| norm(centers.row(m)) + NORM_EPS)
        .collect();
    for j in 0..points.rows {
        let pn = norm(points.row(j)) + NORM_EPS;
        for (s, c) in dots.row_mut(j).iter_mut().zip(&cn) {
            *s /= pn * c;
        }
    }
    dots
}

/// Row-wise argmax; ties go to the lowest column.
pub fn argmax_rows(sim: &Mat) -> Vec<usize> {
    (0..sim.rows)
        .map(|j| {
            let row = sim.row(j);
            let mut best = 0;
            for (m, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = m;
                }
            }
            best
        })
        .collect()
}

/// Assign each point to the anchor with the highest cosine similarity.
pub fn assign_clusters(points: &Mat, anchors: &Mat) -> Result<Vec<usize>> {
    if anchors.rows == 0 {
        return Err(invalid!("cannot assign clusters without anchors"));
    }
    if points.cols != anchors.cols {
        return Err(invalid!(
            "points have dimension {}, anchors have {}",
            points.cols,
            anchors.cols
        ));
    }
    Ok(argmax_rows(&cosine_similarity(points, anchors)))
}

/// Number of members in each of `m` clusters.
pub fn cluster_sizes(assignment: &[usize], m: usize) -> Vec<usize> {
    let mut sizes = vec![0; m];
    for &a in assignment {
        sizes[a] += 1;
    }
    sizes
}

/// Forward state of [`aggregate_dispatch`], kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Dispatch {
    /// Per-point update `s_j * g_c`, `N x d_v`.
    pub out: Mat,
    /// Per-point gate `s_j = sigmoid(alpha * sim_j + beta)`.
    pub gates: Vec<f64>,
    /// Aggregated cluster features `g_c`, `M x d_v`.
    pub aggregated: Mat,
    /// `1 + sum_j s_j` per cluster.
    pub denom: Vec<f64>,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Similarity-gated aggregation and dispatch.
///
/// For cluster `c` with members `j`, gate `s_j = sigmoid(alpha * sim[j, c] + beta)`,
/// `g_c = (v_c + sum_j s_j v_j) / (1 + sum_j s_j)` and member `j` receives
/// `s_j * g_c`. Empty clusters produce nothing.
pub fn aggregate_dispatch(
    values: &Mat,
    center_values: &Mat,
    assignment: &[usize],
    sim: &Mat,
    alpha: f64,
    beta: f64,
) -> Result<Dispatch> {
    let (n, d) = values.shape();
    let m = center_values.rows;
    if center_values.cols != d {
        return Err(invalid!(
            "center values have width {}, values have {d}",
            center_values.cols
        ));
    }
    if assignment.len() != n || sim.rows != n || sim.cols != m {
        return Err(invalid!(
            "dispatch shapes disagree: {n} values, {} assignments, similarity {}x{} for {m} anchors",
            assignment.len(),
            sim.rows,
            sim.cols
        ));
    }
    if let Some(&bad) = assignment.iter().find(|&&a| a >= m) {
        return Err(invalid!("assignment {bad} out of range for {m} anchors"));
    }

    let gates: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(j, &c)| sigmoid(alpha * sim.get(j, c) + beta))
        .collect();

    let mut aggregated = center_values.clone();
    let mut denom = vec![1.0; m];
    for (j, &c) in assignment.iter().enumerate() {
        let s = gates[j];
        denom[c] += s;
        let src = values.row(j);
        for (a, v) in aggregated.row_mut(c).iter_mut().zip(src) {
            *a += s * v;
        }
    }
    for (c, &den) in denom.iter().enumerate() {
        aggregated.row_mut(c).iter_mut().for_each(|v| *v /= den);
    }

    let mut out = Mat::zeros(n, d);
    for (j, &c) in assignment.iter().enumerate() {
        let s = gates[j];
        for (o, g) in out.row_mut(j).iter_mut().zip(aggregated.row(c)) {
            *o = s * g;
        }
    }
    Ok(Dispatch {
        out,
        gates,
        aggregated,
        denom,
    })
}

/// Gradients of [`aggregate_dispatch`] with respect to its differentiable inputs.
pub struct DispatchGrads {
    pub values: Mat,
    pub center_values: Mat,
    pub sim: Mat,
    pub alpha: f64,
    pub beta: f64,
}

pub fn aggregate_dispatch_backward(
    fwd: &Dispatch,
    values: &Mat,
    assignment: &[usize],
    sim: &Mat,
    alpha: f64,
    grad_out: &Mat,
) -> DispatchGrads {
    let (n, d) = values.shape();
    let m = fwd.aggregated.rows;

    // dL/dg_c = sum_j s_j dOut_j ; direct gate term dOut_j . g_c
    let mut d_agg = Mat::zeros(m, d);
    let mut d_gate = vec![0.0; n];
    for (j, &c) in assignment.iter().enumerate() {
        let s = fwd.gates[j];
        let go = grad_out.row(j);
        let g = fwd.aggregated.row(c);
        let mut dot = 0.0;
        for ((da, &o), &gv) in d_agg.row_mut(c).iter_mut().zip(go).zip(g) {
            *da += s * o;
            dot += o * gv;
        }
        d_gate[j] = dot;
    }

    // g_c = num_c / den_c
    let mut d_num = d_agg;
    let mut d_den = vec![0.0; m];
    for c in 0..m {
        let den = fwd.denom[c];
        let g = fwd.aggregated.row(c);
        let dn = d_num.row_mut(c);
        let mut dot = 0.0;
        for (v, &gv) in dn.iter_mut().zip(g) {
            dot += *v * gv;
            *v /= den;
        }
        d_den[c] = -dot / den;
    }

    let mut d_values = Mat::zeros(n, d);
    for (j, &c) in assignment.iter().enumerate() {
        let s = fwd.gates[j];
        let dn = d_num.row(c);
        let v = values.row(j);
        let mut dot = 0.0;
        for ((dv, &x), &vv) in d_values.row_mut(j).iter_mut().zip(dn).zip(v) {
            *dv = s * x;
            dot += x * vv;
        }
        d_gate[j] += dot + d_den[c];
    }

    let mut d_sim = Mat::zeros(n, m);
    let mut d_alpha = 0.0;
    let mut d_beta = 0.0;
    for (j, &c) in assignment.iter().enumerate() {
        let s = fwd.gates[j];
        let dz = d_gate[j] * s * (1.0 - s);
        d_sim.set(j, c, alpha * dz);
        d_alpha += dz * sim.get(j, c);
        d_beta += dz;
    }

    DispatchGrads {
        values: d_values,
        center_values: d_num,
        sim: d_sim,
        alpha: d_alpha,
        beta: d_beta,
    }
}
