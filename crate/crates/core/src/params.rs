//! Named trainable parameters and their initialisation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Flat list of named parameter matrices. Names are dotted module paths such
/// as `global.stage1.block0.fc1.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Scalar counts grouped by the first `depth` components of each name.
    pub fn count_by_prefix(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, v) in self.iter() {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += v.len();
        }
        out
    }
}

/// How freshly built layers are initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Random weights everywhere.
    Random,
    /// Random weights, except that residual output projections, the fusion
    /// projection and every classification head start at zero.
    ZeroResidual,
}

/// Seeded weight factory.
pub struct Init {
    rng: ChaCha8Rng,
    pub mode: InitMode,
}

impl Init {
    pub fn new(seed: u64, mode: InitMode) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            mode,
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` scaled by `gain`.
    pub fn uniform(&mut self, rows: usize, cols: usize, gain: f64) -> Mat {
        let bound = gain / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    /// Like [`Init::uniform`], but zero under [`InitMode::ZeroResidual`].
    pub fn residual(&mut self, rows: usize, cols: usize, gain: f64) -> Mat {
        match self.mode {
            InitMode::Random => self.uniform(rows, cols, gain),
            InitMode::ZeroResidual => Mat::zeros(rows, cols),
        }
    }
}
