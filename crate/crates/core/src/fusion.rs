//! Local/global fusion layers: alignment MLP, overlay, attention pooling over
//! instances and views, global folding, per-view fusion and the three heads.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::linalg::Mat;
use crate::nn::{Linear, WeightInit};
use crate::params::{Init, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlayMode {
    #[default]
    Sum,
    /// Concatenate, then project back to the local width.
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewAttentionMode {
    #[default]
    Attention,
    Mean,
}

fn check_width(g: &Graph, x: Var, expected: usize, what: &str) -> Result<()> {
    let got = g.value(x).cols;
    if got != expected {
        return Err(invalid!("{what}: expected width {expected}, got {got}"));
    }
    Ok(())
}

/// `y = P x + W2 gelu(W1 P x)`: a linear change of width followed by a
/// residual two-layer perceptron.
#[derive(Clone, Debug)]
pub struct AlignEmbed {
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AlignEmbed {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, din: usize, dim: usize) -> Self {
        let how = if din == dim {
            WeightInit::Identity
        } else {
            WeightInit::Uniform(1.0)
        };
        AlignEmbed {
            proj: Linear::new(store, init, &format!("{name}.proj"), din, dim, true, how),
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, dim, true, WeightInit::Uniform(1.0)),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), dim, dim, true, WeightInit::Residual(0.5)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_width(g, x, self.proj.din, "align_embed")?;
        let p = self.proj.forward(g, x);
        let h = self.fc1.forward(g, p);
        let h = g.gelu(h);
        let r = self.fc2.forward(g, h);
        Ok(g.add(p, r))
    }
}

/// Elementwise superposition of aligned feature-based and patch-based rows.
pub fn overlay(g: &mut Graph, fl: Var, pl: Var) -> Result<Var> {
    if g.value(fl).shape() != g.value(pl).shape() {
        return Err(invalid!(
            "overlay: shapes {:?} and {:?} differ",
            g.value(fl).shape(),
            g.value(pl).shape()
        ));
    }
    Ok(g.add(fl, pl))
}

/// Softmax attention pooling over the rows of a `k x dim` matrix.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub score: Linear,
}

pub struct Pooled {
    /// `1 x dim` weighted sum of the rows.
    pub vector: Var,
    /// `k x 1`, sums to one.
    pub weights: Var,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        AttentionPool {
            score: Linear::new(store, init, name, dim, 1, true, WeightInit::Uniform(1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, rows: Var) -> Result<Pooled> {
        check_width(g, rows, self.score.din, "attention")?;
        let v = g.value(rows);
        if v.rows == 0 {
            return Err(invalid!("attention needs at least one instance"));
        }
        if !v.is_finite() {
            return Err(invalid!("attention input has non-finite entries"));
        }
        let s = self.score.forward(g, rows);
        let weights = g.softmax(s);
        let vector = g.pool_rows(weights, rows);
        Ok(Pooled { vector, weights })
    }
}

/// Per-channel spatial maximum of the final global grid after each cell is
/// scaled by one plus its min-max normalised saliency, aligned linearly to
/// `dim`. The gate is the only route from the classification losses back to
/// the map, and normalising keeps it alive when the raw map is pushed
/// toward zero.
#[derive(Clone, Debug)]
pub struct FoldGlobal {
    pub align: Linear,
}

impl FoldGlobal {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize, dim: usize) -> Self {
        FoldGlobal {
            align: Linear::new(store, init, name, width, dim, true, WeightInit::Uniform(1.0)),
        }
    }

    /// `features` is `cells x width`, `saliency` is the raw `cells x 1` map.
    pub fn forward(&self, g: &mut Graph, features: Var, saliency: Var) -> Result<Var> {
        check_width(g, features, self.align.din, "fold_global")?;
        let (cells, width) = g.value(features).shape();
        if g.value(saliency).shape() != (cells, 1) {
            return Err(invalid!(
                "fold_global gate is {:?}, expected {cells}x1",
                g.value(saliency).shape()
            ));
        }
        let norm = g.min_max(saliency);
        let ones = g.input(Mat::from_vec(1, width, vec![1.0; width]));
        let gate = g.matmul(norm, ones);
        let boost = g.mul(features, gate);
        let gated = g.add(features, boost);
        let mx = g.col_max(gated);
        Ok(self.align.forward(g, mx))
    }
}

/// `F_f = W [F_g ; F_a]`, bias-free.
#[derive(Clone, Debug)]
pub struct FuseView {
    pub proj: Linear,
    pub dim: usize,
}

impl FuseView {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        FuseView {
            proj: Linear::new(store, init, name, 2 * dim, dim, false, WeightInit::Uniform(1.0)),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, global: Var, local: Var) -> Result<Var> {
        check_width(g, global, self.dim, "fuse_view global")?;
        check_width(g, local, self.dim, "fuse_view local")?;
        let x = g.concat_cols(vec![global, local]);
        Ok(self.proj.forward(g, x))
    }
}

/// Cross-view fusion of four `1 x dim` vectors.
#[derive(Clone, Debug)]
pub struct ViewFusion {
    pub mode: ViewAttentionMode,
    pub pool: AttentionPool,
}

impl ViewFusion {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        mode: ViewAttentionMode,
    ) -> Self {
        ViewFusion {
            mode,
            pool: AttentionPool::new(store, init, name, dim),
        }
    }

    /// Returns the fused vector and the `4 x 1` view weights.
    pub fn forward(&self, g: &mut Graph, views: &[Var]) -> Result<(Var, Var)> {
        if views.len() != 4 {
            return Err(invalid!("view fusion needs 4 views, got {}", views.len()));
        }
        let stacked = g.concat_rows(views.to_vec());
        match self.mode {
            ViewAttentionMode::Attention => {
                let p = self.pool.forward(g, stacked)?;
                Ok((p.vector, p.weights))
            }
            ViewAttentionMode::Mean => {
                check_width(g, stacked, self.pool.score.din, "view fusion")?;
                let w = g.input(crate::linalg::Mat::filled(4, 1, 0.25));
                Ok((g.col_mean(stacked), w))
            }
        }
    }
}

/// Linear map to one output; optionally squashed to a probability.
#[derive(Clone, Debug)]
pub struct Head {
    pub proj: Linear,
    pub probability: bool,
}

impl Head {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, probability: bool) -> Self {
        Head {
            proj: Linear::new(store, init, name, dim, 1, true, WeightInit::Residual(1.0)),
            probability,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let z = self.proj.forward(g, x);
        if self.probability {
            g.sigmoid(z)
        } else {
            z
        }
    }
}
