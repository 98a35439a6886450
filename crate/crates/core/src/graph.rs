//! A small reverse-mode autodiff tape over [`Mat`].
//!
//! Nodes are appended in evaluation order, so reverse iteration is a valid
//! topological order for the backward sweep. Parameters are borrowed from a
//! [`ParamStore`] rather than copied into the tape. Non-differentiable routing
//! decisions (cluster assignment, column argmax, top-k selection) are recorded
//! in the op and treated as constants by the backward pass.

use std::collections::HashMap;

use crate::cluster::{self, sigmoid, Dispatch};
use crate::linalg::{gemm, min_max_normalize, Mat};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probabilities fed to [`Graph::bce_prob`] are clamped to `[P_CLAMP, 1 - P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-7;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Input,
    Variable,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Combine {
        x: Var,
        rows: Vec<Vec<(usize, f64)>>,
    },
    GroupConcat {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ColMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ColMean(Var),
    Softmax(Var),
    PoolRows {
        w: Var,
        x: Var,
    },
    Transpose(Var),
    Cosine {
        p: Var,
        c: Var,
    },
    Dispatch {
        values: Var,
        center_values: Var,
        sim: Var,
        alpha: Var,
        beta: Var,
        assignment: Vec<usize>,
        fwd: Box<Dispatch>,
    },
    /// Min-max rescaling; `lo`/`hi` are the arg-extremes, `span` is zero
    /// for a constant input.
    MinMax {
        x: Var,
        lo: usize,
        hi: usize,
        span: f64,
    },
    Mean(Var),
    BceProb {
        p: Var,
        target: f64,
    },
    BceLogits {
        z: Var,
        target: f64,
        pos_weight: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of a backward sweep.
pub struct Grads {
    /// Gradient per parameter, `None` when the parameter was not reached.
    pub params: Vec<Option<Mat>>,
    nodes: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of a [`Graph::variable`] leaf.
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }
}

/// Sum in ascending order, so any permutation of `v` gives the same bits.
fn sorted_sum(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logits(z: f64, target: f64, pos_weight: f64) -> f64 {
    pos_weight * target * softplus(-z) + (1.0 - target) * softplus(z)
}

/// Binary cross-entropy on a probability clamped to `[P_CLAMP, 1 - P_CLAMP]`.
pub fn bce_prob(p: f64, target: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Grads::of`].
    pub fn variable(&mut self, m: Mat) -> Var {
        self.push(m, Op::Variable, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `x · w + b`, with `b` a `1 x out` row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = Mat::zeros(xv.rows, wv.cols);
        gemm(false, false, 1.0, xv, wv, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..out.rows {
                for (o, bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                    *o += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|&x| gelu(x)).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::from_vec(
            av.rows,
            av.cols,
            av.data.iter().map(|&x| sigmoid(x)).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Per-row layer normalisation with affine `gamma`, `beta` (`1 x d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = xh[c] * gv.data[c] + bv.data[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Sparse row combination: output row `m` is `sum (w * x[i])` over `rows[m]`.
    pub fn combine(&mut self, x: Var, rows: Vec<Vec<(usize, f64)>>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(rows.len(), xv.cols);
        for (m, entries) in rows.iter().enumerate() {
            let o = out.row_mut(m);
            for &(i, w) in entries {
                for (ov, xx) in o.iter_mut().zip(xv.row(i)) {
                    *ov += w * xx;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Combine { x, rows }, rg)
    }

    /// Output row `m` is the concatenation of the rows of `x` listed in `groups[m]`.
    pub fn group_concat(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let g = groups.first().map_or(0, Vec::len);
        let d = xv.cols;
        let mut out = Mat::zeros(groups.len(), g * d);
        for (m, members) in groups.iter().enumerate() {
            assert_eq!(members.len(), g, "group_concat groups must have equal size");
            let o = out.row_mut(m);
            for (k, &i) in members.iter().enumerate() {
                o[k * d..(k + 1) * d].copy_from_slice(xv.row(i));
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::GroupConcat { x, groups }, rg)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let rg = self.rg(&parts);
        self.push(out, Op::ConcatCols(parts), rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let rg = self.rg(&parts);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts), rg)
    }

    /// Per-column maximum over rows (`1 x d`); ties go to the lowest row.
    pub fn col_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut argmax = vec![0; xv.cols];
        let mut out = Mat::row_vector(xv.row(0).to_vec());
        for r in 1..xv.rows {
            for (c, &v) in xv.row(r).iter().enumerate() {
                if v > out.data[c] {
                    out.data[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::ColMax { x, argmax }, rg)
    }

    pub fn col_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (o, v) in out.data.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale(1.0 / xv.rows as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::ColMean(x), rg)
    }

    /// Softmax over all entries (used on `k x 1` score columns).
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mx = xv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut data: Vec<f64> = xv.data.iter().map(|v| (v - mx).exp()).collect();
        let z = sorted_sum(&mut data.clone());
        data.iter_mut().for_each(|v| *v /= z);
        let out = Mat::from_vec(xv.rows, xv.cols, data);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// `sum_n w[n] * x[n, :]` for a `k x 1` weight column and `k x d` rows.
    /// Each column is summed in sorted order, so permuting the instances
    /// together with their weights leaves the result bit-identical.
    pub fn pool_rows(&mut self, w: Var, x: Var) -> Var {
        let (wv, xv) = (self.value(w), self.value(x));
        assert_eq!((wv.rows, wv.cols), (xv.rows, 1), "pool_rows shape mismatch");
        let mut col = vec![0.0; xv.rows];
        let data = (0..xv.cols)
            .map(|c| {
                for (n, t) in col.iter_mut().enumerate() {
                    *t = wv.data[n] * xv.get(n, c);
                }
                sorted_sum(&mut col)
            })
            .collect();
        let out = Mat::from_vec(1, xv.cols, data);
        let rg = self.rg(&[w, x]);
        self.push(out, Op::PoolRows { w, x }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Pairwise cosine similarity (`N x M`) of the rows of `p` and `c`.
    pub fn cosine(&mut self, p: Var, c: Var) -> Var {
        let out = cluster::cosine_similarity(self.value(p), self.value(c));
        let rg = self.rg(&[p, c]);
        self.push(out, Op::Cosine { p, c }, rg)
    }

    /// Similarity-gated aggregate/dispatch; `alpha`, `beta` are `1 x 1`.
    pub fn dispatch(
        &mut self,
        values: Var,
        center_values: Var,
        sim: Var,
        alpha: Var,
        beta: Var,
        assignment: Vec<usize>,
    ) -> Var {
        let fwd = cluster::aggregate_dispatch(
            self.value(values),
            self.value(center_values),
            &assignment,
            self.value(sim),
            self.scalar(alpha),
            self.scalar(beta),
        )
        .expect("dispatch shapes are validated by the caller");
        let out = fwd.out.clone();
        let rg = self.rg(&[values, center_values, sim, alpha, beta]);
        self.push(
            out,
            Op::Dispatch {
                values,
                center_values,
                sim,
                alpha,
                beta,
                assignment,
                fwd: Box::new(fwd),
            },
            rg,
        )
    }

    /// Rescales to `[0, 1]` by the extremes; a constant input maps to zeros
    /// and passes no gradient.
    pub fn min_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = min_max_normalize(xv);
        let mut lo = 0;
        let mut hi = 0;
        for (i, &v) in xv.data.iter().enumerate() {
            if v < xv.data[lo] {
                lo = i;
            }
            if v > xv.data[hi] {
                hi = i;
            }
        }
        let span = xv.data[hi] - xv.data[lo];
        let span = if span > 0.0 { span } else { 0.0 };
        let rg = self.rg(&[x]);
        self.push(out, Op::MinMax { x, lo, hi, span }, rg)
    }

    /// Mean of all entries, as a `1 x 1`.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Mat::scalar(m), Op::Mean(x), rg)
    }

    pub fn bce_prob(&mut self, p: Var, target: f64) -> Var {
        let l = bce_prob(self.scalar(p), target);
        let rg = self.rg(&[p]);
        self.push(Mat::scalar(l), Op::BceProb { p, target }, rg)
    }

    pub fn bce_logits(&mut self, z: Var, target: f64, pos_weight: f64) -> Var {
        let l = bce_with_logits(self.scalar(z), target, pos_weight);
        let rg = self.rg(&[z]);
        self.push(
            Mat::scalar(l),
            Op::BceLogits {
                z,
                target,
                pos_weight,
            },
            rg,
        )
    }

    /// `sum w_i * x_i` over equally shaped inputs.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let mut out = Mat::zeros(self.value(terms[0].0).rows, self.value(terms[0].0).cols);
        for &(v, w) in &terms {
            for (o, x) in out.data.iter_mut().zip(&self.value(v).data) {
                *o += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(out, Op::WeightedSum(terms), rg)
    }

    /// Back-propagate from a `1 x 1` output.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Variable | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(i, g, &mut grads);
        }

        let mut params = vec![None; self.params.len()];
        for (id, v) in &self.param_vars {
            params[id.0] = grads[v.0].take();
        }
        Grads {
            params,
            nodes: grads,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: Mat, grads: &mut [Option<Mat>]) {
        let out = self.nodes[i].value.as_ref().expect("op value");
        match &self.nodes[i].op {
            Op::Input | Op::Variable | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    gemm(false, true, 1.0, &g, wv, 0.0, &mut dx);
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Mat::zeros(wv.rows, wv.cols);
                    gemm(true, false, 1.0, xv, &g, 0.0, &mut dw);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = Mat::zeros(av.rows, av.cols);
                    gemm(false, true, 1.0, &g, bv, 0.0, &mut da);
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    gemm(true, false, 1.0, av, &g, 0.0, &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Mat::from_vec(g.rows, g.cols, d));
                }
                if self.needs(*b) {
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Mat::from_vec(g.rows, g.cols, d));
                }
            }
            Op::Scale(a, s) => {
                let mut d = g;
                d.scale(*s);
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(gg, &x)| gg * gelu_grad(x))
                    .collect();
                accumulate(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&out.data)
                    .map(|(gg, y)| gg * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = g.shape();
                let gv = self.value(*gamma);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = Mat::zeros(1, d);
                    let mut db = Mat::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            dg.data[c] += g.get(r, c) * xhat.get(r, c);
                            db.data[c] += g.get(r, c);
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        accumulate(grads, *beta, db);
                    }
                }
                if self.needs(*x) {
                    let mut dx = Mat::zeros(n, d);
                    let mut dxh = vec![0.0; d];
                    for r in 0..n {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            dxh[c] = gr[c] * gv.data[c];
                            s1 += dxh[c];
                            s2 += dxh[c] * xh[c];
                        }
                        let k = inv_std[r] / d as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = k * (d as f64 * dxh[c] - s1 - xh[c] * s2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Combine { x, rows } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for (m, entries) in rows.iter().enumerate() {
                    let gr = g.row(m);
                    for &(idx, w) in entries {
                        for (d, gg) in dx.row_mut(idx).iter_mut().zip(gr) {
                            *d += w * gg;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GroupConcat { x, groups } => {
                let xv = self.value(*x);
                let d = xv.cols;
                let mut dx = Mat::zeros(xv.rows, d);
                for (m, members) in groups.iter().enumerate() {
                    let gr = g.row(m);
                    for (k, &idx) in members.iter().enumerate() {
                        for (o, gg) in dx.row_mut(idx).iter_mut().zip(&gr[k * d..(k + 1) * d]) {
                            *o += gg;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    if self.needs(*p) {
                        let mut dp = Mat::zeros(pv.rows, pv.cols);
                        for r in 0..pv.rows {
                            dp.row_mut(r)
                                .copy_from_slice(&g.row(r)[off..off + pv.cols]);
                        }
                        accumulate(grads, *p, dp);
                    }
                    off += pv.cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    if self.needs(*p) {
                        let dp = Mat::from_vec(pv.rows, pv.cols, g.data[off..off + n].to_vec());
                        accumulate(grads, *p, dp);
                    }
                    off += n;
                }
            }
            Op::ColMax { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for (c, &r) in argmax.iter().enumerate() {
                    dx.set(r, c, g.data[c]);
                }
                accumulate(grads, *x, dx);
            }
            Op::ColMean(x) => {
                let xv = self.value(*x);
                let inv = 1.0 / xv.rows as f64;
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    for (d, gg) in dx.row_mut(r).iter_mut().zip(&g.data) {
                        *d = gg * inv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let dot: f64 = g.data.iter().zip(&out.data).map(|(a, b)| a * b).sum();
                let d = g
                    .data
                    .iter()
                    .zip(&out.data)
                    .map(|(gg, y)| y * (gg - dot))
                    .collect();
                accumulate(grads, *x, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::PoolRows { w, x } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                if self.needs(*w) {
                    let d = (0..xv.rows)
                        .map(|n| xv.row(n).iter().zip(&g.data).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, *w, Mat::from_vec(xv.rows, 1, d));
                }
                if self.needs(*x) {
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for n in 0..xv.rows {
                        for (d, gg) in dx.row_mut(n).iter_mut().zip(&g.data) {
                            *d = wv.data[n] * gg;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::Cosine { p, c } => {
                let (pv, cv) = (self.value(*p), self.value(*c));
                let (n, m) = g.shape();
                let pn: Vec<f64> = (0..n)
                    .map(|j| pv.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                let cn: Vec<f64> = (0..m)
                    .map(|k| cv.row(k).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                let mut h = Mat::zeros(n, m);
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; m];
                for j in 0..n {
                    let a = pn[j] + cluster::NORM_EPS;
                    for k in 0..m {
                        let b = cn[k] + cluster::NORM_EPS;
                        let gg = g.get(j, k);
                        let s = out.get(j, k);
                        h.set(j, k, gg / (a * b));
                        da[j] -= gg * s / a;
                        db[k] -= gg * s / b;
                    }
                }
                if self.needs(*p) {
                    let mut dp = Mat::zeros(n, pv.cols);
                    gemm(false, false, 1.0, &h, cv, 0.0, &mut dp);
                    for j in 0..n {
                        if pn[j] > 0.0 {
                            let f = da[j] / pn[j];
                            for (d, x) in dp.row_mut(j).iter_mut().zip(pv.row(j)) {
                                *d += f * x;
                            }
                        }
                    }
                    accumulate(grads, *p, dp);
                }
                if self.needs(*c) {
                    let mut dc = Mat::zeros(m, cv.cols);
                    gemm(true, false, 1.0, &h, pv, 0.0, &mut dc);
                    for k in 0..m {
                        if cn[k] > 0.0 {
                            let f = db[k] / cn[k];
                            for (d, x) in dc.row_mut(k).iter_mut().zip(cv.row(k)) {
                                *d += f * x;
                            }
                        }
                    }
                    accumulate(grads, *c, dc);
                }
            }
            Op::Dispatch {
                values,
                center_values,
                sim,
                alpha,
                beta,
                assignment,
                fwd,
            } => {
                let dg = cluster::aggregate_dispatch_backward(
                    fwd,
                    self.value(*values),
                    assignment,
                    self.value(*sim),
                    self.scalar(*alpha),
                    &g,
                );
                if self.needs(*values) {
                    accumulate(grads, *values, dg.values);
                }
                if self.needs(*center_values) {
                    accumulate(grads, *center_values, dg.center_values);
                }
                if self.needs(*sim) {
                    accumulate(grads, *sim, dg.sim);
                }
                if self.needs(*alpha) {
                    accumulate(grads, *alpha, Mat::scalar(dg.alpha));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Mat::scalar(dg.beta));
                }
            }
            Op::MinMax { x, lo, hi, span } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                if *span > 0.0 {
                    let y = out;
                    let mut to_lo = 0.0;
                    let mut to_hi = 0.0;
                    for (i, (&gi, &yi)) in g.data.iter().zip(&y.data).enumerate() {
                        dx.data[i] += gi / span;
                        to_lo += gi * (yi - 1.0) / span;
                        to_hi -= gi * yi / span;
                    }
                    dx.data[*lo] += to_lo;
                    dx.data[*hi] += to_hi;
                }
                accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let share = g.data[0] / xv.len() as f64;
                accumulate(grads, *x, Mat::filled(xv.rows, xv.cols, share));
            }
            Op::BceProb { p, target } => {
                let pv = self.scalar(*p);
                let d = if pv <= P_CLAMP || pv >= 1.0 - P_CLAMP {
                    0.0
                } else {
                    (pv - target) / (pv * (1.0 - pv))
                };
                accumulate(grads, *p, Mat::scalar(g.data[0] * d));
            }
            Op::BceLogits {
                z,
                target,
                pos_weight,
            } => {
                let zv = self.scalar(*z);
                let d = -pos_weight * target * sigmoid(-zv) + (1.0 - target) * sigmoid(zv);
                accumulate(grads, *z, Mat::scalar(g.data[0] * d));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        let mut d = g.clone();
                        d.scale(w);
                        accumulate(grads, v, d);
                    }
                }
            }
        }
    }
}
