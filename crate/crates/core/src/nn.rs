//! Parameterised layers over the autodiff tape.

use crate::graph::{Graph, Var};
use crate::linalg::Mat;
use crate::params::{Init, ParamId, ParamStore};

/// How a weight matrix is initialised.
#[derive(Clone, Copy, Debug)]
pub enum WeightInit {
    Uniform(f64),
    /// Uniform, but zero when the initialiser is in zero-residual mode.
    Residual(f64),
    Identity,
    Zeros,
    /// Input is `n` concatenated blocks of equal width: one uniform block
    /// matrix tiled `n` times and divided by `n`, so the layer starts as an
    /// average over the blocks followed by a channel projection.
    Pooled(usize, f64),
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        how: WeightInit,
    ) -> Self {
        let w = match how {
            WeightInit::Uniform(gain) => init.uniform(din, dout, gain),
            WeightInit::Residual(gain) => init.residual(din, dout, gain),
            WeightInit::Identity => {
                let mut m = Mat::zeros(din, dout);
                for i in 0..din.min(dout) {
                    m.set(i, i, 1.0);
                }
                m
            }
            WeightInit::Zeros => Mat::zeros(din, dout),
            WeightInit::Pooled(n, gain) => {
                assert!(n > 0 && din % n == 0, "pooled init needs din divisible by {n}");
                let block = init.uniform(din / n, dout, gain);
                let mut m = Mat::zeros(din, dout);
                for k in 0..n {
                    for r in 0..din / n {
                        for (o, v) in m.row_mut(k * (din / n) + r).iter_mut().zip(block.row(r)) {
                            *o = v / n as f64;
                        }
                    }
                }
                m
            }
        };
        let w = store.add(format!("{name}.w"), w);
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, dout)));
        Linear { w, b, din, dout }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.din * self.dout + if self.b.is_some() { self.dout } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, d, 1.0)),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}
