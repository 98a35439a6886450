//! Four-term training objective.
//!
//! `L = alpha * L_global + beta * L_local + gamma * L_fusion + delta * L_map`
//! where `L_global` is cross-entropy on the global probability, `L_local` and
//! `L_fusion` are cross-entropy on logits, and `L_map` is the mean absolute
//! saliency over the four views.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{bce_prob, bce_with_logits, Graph, Var};
use crate::model::{StudyOutputs, StudyVars};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Positive-class weight for the logit terms; 1 disables it.
    #[serde(default = "one")]
    pub pos_weight: f64,
}

fn one() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.1
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 0.1,
            pos_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Self {
        LossWeights {
            alpha,
            beta,
            gamma,
            delta,
            pos_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.delta];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid!("loss weights must be finite and non-negative, got {w:?}"));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(invalid!("at least one loss weight must be positive"));
        }
        if !(self.pos_weight.is_finite() && self.pos_weight > 0.0) {
            return Err(invalid!("pos_weight must be positive, got {}", self.pos_weight));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub global: f64,
    pub local: f64,
    pub fusion: f64,
    pub map: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.global += o.global;
        self.local += o.local;
        self.fusion += o.fusion;
        self.map += o.map;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.global *= s;
        self.local *= s;
        self.fusion *= s;
        self.map *= s;
        self
    }
}

fn check_label(label: u8) -> Result<f64> {
    match label {
        0 | 1 => Ok(label as f64),
        other => Err(invalid!("label must be 0 or 1, got {other}")),
    }
}

/// Mean over views of each view's mean raw saliency.
pub fn map_penalty(maps: &[Vec<f64>]) -> f64 {
    let per_view: Vec<f64> = maps
        .iter()
        .map(|m| m.iter().map(|v| v.abs()).sum::<f64>() / m.len() as f64)
        .collect();
    per_view.iter().sum::<f64>() / per_view.len() as f64
}

/// Loss on plain forward outputs.
pub fn composite_loss(out: &StudyOutputs, label: u8, w: &LossWeights) -> Result<LossBreakdown> {
    let y = check_label(label)?;
    let maps: Vec<Vec<f64>> = out.saliency_maps.iter().map(|m| m.raw.data.clone()).collect();
    Ok(combine_terms(
        w,
        bce_prob(out.global_prob, y),
        bce_with_logits(out.local_logit, y, w.pos_weight),
        bce_with_logits(out.fusion_logit, y, w.pos_weight),
        map_penalty(&maps),
    ))
}

fn combine_terms(w: &LossWeights, global: f64, local: f64, fusion: f64, map: f64) -> LossBreakdown {
    LossBreakdown {
        total: w.alpha * global + w.beta * local + w.gamma * fusion + w.delta * map,
        global,
        local,
        fusion,
        map,
    }
}

/// Builds the loss on the tape; returns the scalar root and the breakdown.
pub fn composite_loss_graph(
    g: &mut Graph,
    vars: &StudyVars,
    label: u8,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let y = check_label(label)?;
    let lg = g.bce_prob(vars.global_prob, y);
    let ll = g.bce_logits(vars.local_logit, y, w.pos_weight);
    let lf = g.bce_logits(vars.fusion_logit, y, w.pos_weight);
    // logistic outputs are positive, so the mean is the L1 mean
    let means: Vec<(Var, f64)> = vars
        .views
        .iter()
        .map(|v| (g.mean(v.saliency_raw), 1.0 / vars.views.len() as f64))
        .collect();
    let lm = g.weighted_sum(means);
    let total = g.weighted_sum(vec![(lg, w.alpha), (ll, w.beta), (lf, w.gamma), (lm, w.delta)]);
    let breakdown = LossBreakdown {
        total: g.scalar(total),
        global: g.scalar(lg),
        local: g.scalar(ll),
        fusion: g.scalar(lf),
        map: g.scalar(lm),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::roi::SaliencyMap;
    use std::f64::consts::LN_2;

    fn outputs(global_prob: f64, local_logit: f64, fusion_logit: f64, map: f64) -> StudyOutputs {
        StudyOutputs {
            global_prob,
            local_logit,
            fusion_logit,
            f_fusion: vec![],
            f_global: vec![],
            f_local: vec![],
            view_weights: [vec![], vec![], vec![]],
            saliency_maps: (0..4)
                .map(|_| SaliencyMap::from_raw(Mat::filled(2, 2, map), (8, 8)))
                .collect(),
            patch_selections: vec![],
            instance_weights: vec![],
            assignments: vec![],
        }
    }

    #[test]
    fn worked_values() {
        let o = outputs(0.5, 3.0, 0.0, 0.0);
        let l = composite_loss(&o, 1, &LossWeights::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((l.total - LN_2).abs() < 1e-10);
        let l = composite_loss(&o, 0, &LossWeights::new(0.0, 0.0, 1.0, 0.0)).unwrap();
        assert!((l.total - LN_2).abs() < 1e-10);
        let l = composite_loss(&o, 0, &LossWeights::new(0.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn bad_label_and_weights_are_rejected() {
        let o = outputs(0.5, 0.0, 0.0, 0.1);
        assert!(composite_loss(&o, 2, &LossWeights::default()).is_err());
        assert!(LossWeights::new(0.0, 0.0, 0.0, 0.0).validate().is_err());
        assert!(LossWeights::new(-1.0, 0.0, 0.0, 1.0).validate().is_err());
    }

    #[test]
    fn global_probability_is_clamped() {
        let o = outputs(0.0, 0.0, 0.0, 0.0);
        let l = composite_loss(&o, 1, &LossWeights::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(l.total.is_finite() && (l.total - -(1e-7f64).ln()).abs() < 1e-9);
    }
}
