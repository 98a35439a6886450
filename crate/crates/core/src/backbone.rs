//! Hierarchical context-clustering feature extractor.
//!
//! A backbone is a 4x4 patchifying stem followed by stages. Each stage opens
//! with a point reducer (concatenate each `r x r` neighbourhood, project
//! linearly) and then applies context cluster blocks:
//!
//! ```text
//! xn  = LN(x)
//! v   = W_v xn                         value projection
//! c   = anchor-average(xn), v_c = anchor-average(v)
//! a_j = argmax_m cos(xn_j, c_m)        assignment (no gradient)
//! y   = x + W_o dispatch(v, v_c, cos, a)
//! z   = y + W_2 gelu(W_1 LN(y))
//! ```

use serde::{Deserialize, Serialize};

use crate::cluster::{self, Neighborhood};
use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::linalg::Mat;
use crate::nn::{LayerNorm, Linear, WeightInit};
use crate::params::{Init, ParamId, ParamStore};
use crate::points::POINT_DIMS;

pub const STEM_PATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Feature width after this stage's point reducer.
    pub width: usize,
    /// Number of context cluster blocks.
    pub blocks: usize,
    /// Spatial reduction factor of the stage's point reducer.
    pub reduce: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    /// Requested anchor lattice per stage. Lattices larger than a stage grid
    /// are clamped to the grid when the backbone is built.
    pub anchors: Vec<(usize, usize)>,
    pub neighbors_k: Neighborhood,
    pub stages: Vec<StageSpec>,
    /// Hidden width multiplier of the point-wise feed-forward layer.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    Small,
    Local,
    PaperScale,
    PaperScaleLocal,
}

impl Preset {
    pub fn config(self) -> ClusterConfig {
        let (widths, blocks, reduce, anchors): (&[usize], &[usize], &[usize], &[(usize, usize)]) =
            match self {
                Preset::Tiny => (&[16, 32], &[1, 1], &[1, 2], &[(2, 2), (2, 2)]),
                Preset::Small => (
                    &[32, 64, 128, 256],
                    &[1, 1, 2, 1],
                    &[2, 1, 1, 1],
                    &[(4, 4), (4, 4), (2, 2), (2, 2)],
                ),
                Preset::Local => (
                    &[32, 64, 128],
                    &[1, 1, 1],
                    &[1, 2, 2],
                    &[(4, 4), (2, 2), (2, 2)],
                ),
                Preset::PaperScale => (
                    &[64, 128, 320, 512],
                    &[2, 2, 6, 2],
                    &[1, 2, 2, 2],
                    &[(4, 4), (4, 4), (2, 2), (2, 2)],
                ),
                Preset::PaperScaleLocal => (
                    &[64, 128, 256],
                    &[1, 1, 2],
                    &[1, 2, 2],
                    &[(4, 4), (2, 2), (2, 2)],
                ),
            };
        ClusterConfig {
            anchors: anchors.to_vec(),
            neighbors_k: Neighborhood::Four,
            stages: widths
                .iter()
                .zip(blocks)
                .zip(reduce)
                .map(|((&width, &blocks), &reduce)| StageSpec {
                    width,
                    blocks,
                    reduce,
                })
                .collect(),
            mlp_ratio: default_mlp_ratio(),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(invalid!("cluster config needs at least one stage"));
        }
        if self.anchors.len() != self.stages.len() {
            return Err(invalid!(
                "{} anchor grids given for {} stages",
                self.anchors.len(),
                self.stages.len()
            ));
        }
        for (i, (s, a)) in self.stages.iter().zip(&self.anchors).enumerate() {
            if s.width == 0 || s.blocks == 0 {
                return Err(invalid!("stage {i}: width and blocks must be >= 1"));
            }
            if ![1, 2, 4].contains(&s.reduce) {
                return Err(invalid!("stage {i}: reduce must be 1, 2 or 4, got {}", s.reduce));
            }
            if a.0 * a.1 == 0 {
                return Err(invalid!("stage {i}: anchor grid must be at least 1x1"));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(invalid!("mlp_ratio must be >= 1"));
        }
        Ok(())
    }

    /// Product of the stem and every stage reduction.
    pub fn total_reduction(&self) -> usize {
        STEM_PATCH * self.stages.iter().map(|s| s.reduce).product::<usize>()
    }

    pub fn final_width(&self) -> usize {
        self.stages.last().map_or(0, |s| s.width)
    }
}

/// Row groups of each non-overlapping `r x r` neighbourhood, in row-major
/// order of the reduced grid; members are row-major within the block.
pub fn reducer_groups(grid: (usize, usize), r: usize) -> Result<Vec<Vec<usize>>> {
    let (h, w) = grid;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(invalid!(
            "grid {h}x{w} is not divisible by reduction factor {r}"
        ));
    }
    let (oh, ow) = (h / r, w / r);
    let mut groups = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let mut g = Vec::with_capacity(r * r);
            for di in 0..r {
                for dj in 0..r {
                    g.push((i * r + di) * w + j * r + dj);
                }
            }
            groups.push(g);
        }
    }
    Ok(groups)
}

/// Concatenates `r x r` neighbourhoods and projects them linearly.
#[derive(Clone, Debug)]
pub struct PointReducer {
    pub reduce: usize,
    pub proj: Linear,
    groups: Option<Vec<Vec<usize>>>,
    pub in_grid: (usize, usize),
    pub out_grid: (usize, usize),
}

impl PointReducer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_grid: (usize, usize),
        reduce: usize,
        din: usize,
        dout: usize,
        how: WeightInit,
    ) -> Result<Self> {
        let groups = reducer_groups(in_grid, reduce)?;
        let proj = Linear::new(store, init, name, reduce * reduce * din, dout, true, how);
        Ok(PointReducer {
            reduce,
            proj,
            groups: (reduce > 1).then_some(groups),
            in_grid,
            out_grid: (in_grid.0 / reduce, in_grid.1 / reduce),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let x = match &self.groups {
            Some(groups) => g.group_concat(x, groups.clone()),
            None => x,
        };
        self.proj.forward(g, x)
    }
}

/// One context cluster block bound to a fixed grid.
#[derive(Clone, Debug)]
pub struct ClusterBlock {
    pub grid: (usize, usize),
    pub anchors: Vec<usize>,
    anchor_rows: Vec<Vec<(usize, f64)>>,
    pub norm1: LayerNorm,
    pub value: Linear,
    pub sim_alpha: ParamId,
    pub sim_beta: ParamId,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Intermediate values of a block forward pass.
pub struct BlockTrace {
    pub output: Var,
    pub assignment: Vec<usize>,
}

impl ClusterBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        grid: (usize, usize),
        anchor_grid: (usize, usize),
        nb: Neighborhood,
        width: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let anchors = cluster::select_anchors(grid, anchor_grid)?;
        let anchor_rows = cluster::anchor_weights(grid, &anchors, nb);
        let hidden = width * mlp_ratio;
        Ok(ClusterBlock {
            grid,
            anchor_rows,
            anchors,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            value: Linear::new(
                store,
                init,
                &format!("{name}.value"),
                width,
                width,
                true,
                WeightInit::Uniform(1.0),
            ),
            sim_alpha: store.add(format!("{name}.sim_alpha"), Mat::scalar(1.0)),
            sim_beta: store.add(format!("{name}.sim_beta"), Mat::scalar(0.0)),
            proj: Linear::new(
                store,
                init,
                &format!("{name}.proj"),
                width,
                width,
                true,
                WeightInit::Residual(0.5),
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            fc1: Linear::new(
                store,
                init,
                &format!("{name}.fc1"),
                width,
                hidden,
                true,
                WeightInit::Uniform(1.0),
            ),
            fc2: Linear::new(
                store,
                init,
                &format!("{name}.fc2"),
                hidden,
                width,
                true,
                WeightInit::Residual(0.5),
            ),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> BlockTrace {
        let xn = self.norm1.forward(g, x);
        let v = self.value.forward(g, xn);
        let centers = g.combine(xn, self.anchor_rows.clone());
        let center_values = g.combine(v, self.anchor_rows.clone());
        let sim = g.cosine(xn, centers);
        let assignment = cluster::argmax_rows(g.value(sim));
        let (alpha, beta) = (g.param(self.sim_alpha), g.param(self.sim_beta));
        let dispatched = g.dispatch(v, center_values, sim, alpha, beta, assignment.clone());
        let update = self.proj.forward(g, dispatched);
        let y = g.add(x, update);

        let yn = self.norm2.forward(g, y);
        let hidden = self.fc1.forward(g, yn);
        let act = g.gelu(hidden);
        let ff = self.fc2.forward(g, act);
        let output = g.add(y, ff);
        BlockTrace { output, assignment }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub reducer: PointReducer,
    pub blocks: Vec<ClusterBlock>,
}

/// A context-clustering network bound to a fixed input size.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub name: String,
    pub config: ClusterConfig,
    pub input_grid: (usize, usize),
    pub stem: PointReducer,
    pub stages: Vec<Stage>,
}

/// Result of [`Backbone::forward`].
pub struct BackboneOutput {
    /// Final-stage point features, `(h*w) x width`.
    pub features: Var,
    pub grid: (usize, usize),
    /// Output of every stage with its grid.
    pub stage_features: Vec<(Var, (usize, usize))>,
    /// Channel-wise mean over the final points, `1 x width`.
    pub pooled: Var,
    /// Cluster assignment of the last block of every stage.
    pub assignments: Vec<Vec<usize>>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        config: &ClusterConfig,
        input_grid: (usize, usize),
    ) -> Result<Self> {
        config.validate()?;
        let (h, w) = input_grid;
        let total = config.total_reduction();
        if h % total != 0 || w % total != 0 {
            return Err(invalid!(
                "{name}: input {h}x{w} is not divisible by the total reduction {total}"
            ));
        }
        let stem_width = config.stages[0].width;
        let stem = PointReducer::new(
            store,
            init,
            &format!("{name}.stem"),
            input_grid,
            STEM_PATCH,
            POINT_DIMS,
            stem_width,
            WeightInit::Pooled(STEM_PATCH * STEM_PATCH, 1.0),
        )?;
        let mut grid = stem.out_grid;
        let mut din = stem_width;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (si, (spec, &anchor)) in config.stages.iter().zip(&config.anchors).enumerate() {
            let reducer = PointReducer::new(
                store,
                init,
                &format!("{name}.stage{si}.reducer"),
                grid,
                spec.reduce,
                din,
                spec.width,
                WeightInit::Pooled(spec.reduce * spec.reduce, 1.0),
            )?;
            grid = reducer.out_grid;
            let anchor_grid = (anchor.0.min(grid.0), anchor.1.min(grid.1));
            let blocks = (0..spec.blocks)
                .map(|bi| {
                    ClusterBlock::new(
                        store,
                        init,
                        &format!("{name}.stage{si}.block{bi}"),
                        grid,
                        anchor_grid,
                        config.neighbors_k,
                        spec.width,
                        config.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { reducer, blocks });
            din = spec.width;
        }
        Ok(Backbone {
            name: name.to_string(),
            config: config.clone(),
            input_grid,
            stem,
            stages,
        })
    }

    pub fn output_grid(&self) -> (usize, usize) {
        self.stages
            .last()
            .map_or(self.stem.out_grid, |s| s.reducer.out_grid)
    }

    /// Grid of stage `i`; panics when the stage does not exist.
    pub fn stage_grid(&self, i: usize) -> (usize, usize) {
        self.stages[i].reducer.out_grid
    }

    pub fn output_width(&self) -> usize {
        self.config.final_width()
    }

    /// `points` is the `(h*w) x 5` raw point matrix of an input of size `input_grid`.
    pub fn forward(&self, g: &mut Graph, points: Var) -> Result<BackboneOutput> {
        let (rows, cols) = g.value(points).shape();
        if rows != self.input_grid.0 * self.input_grid.1 || cols != POINT_DIMS {
            return Err(invalid!(
                "{}: expected {}x{} points of dimension {POINT_DIMS}, got {rows} x {cols}",
                self.name,
                self.input_grid.0,
                self.input_grid.1
            ));
        }
        let mut x = self.stem.forward(g, points);
        let mut stage_features = Vec::with_capacity(self.stages.len());
        let mut assignments = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.reducer.forward(g, x);
            let mut last = Vec::new();
            for block in &stage.blocks {
                let t = block.forward(g, x);
                x = t.output;
                last = t.assignment;
            }
            stage_features.push((x, stage.reducer.out_grid));
            assignments.push(last);
        }
        let pooled = g.col_mean(x);
        Ok(BackboneOutput {
            features: x,
            grid: self.output_grid(),
            stage_features,
            pooled,
            assignments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::InitMode;

    fn sample(rows: usize, cols: usize, seed: u64) -> Mat {
        let data = (0..rows * cols)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 7919) % 2000) as f64 / 1000.0 - 1.0)
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn reducer_groups_shape_and_errors() {
        let g = reducer_groups((4, 4), 2).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], vec![0, 1, 4, 5]);
        assert_eq!(g[3], vec![10, 11, 14, 15]);
        let err = reducer_groups((6, 5), 2).unwrap_err().to_string();
        assert!(err.contains("6x5") && err.contains('2'), "{err}");
    }

    #[test]
    fn reducer_identity_when_r_is_one() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1, InitMode::Random);
        let red = PointReducer::new(
            &mut store,
            &mut init,
            "r",
            (3, 3),
            1,
            4,
            4,
            WeightInit::Identity,
        )
        .unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(sample(9, 4, 3));
        let y = red.forward(&mut g, x);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn reducer_shape_and_constant_preservation() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1, InitMode::Random);
        let red = PointReducer::new(
            &mut store,
            &mut init,
            "r",
            (4, 4),
            2,
            3,
            2,
            WeightInit::Zeros,
        )
        .unwrap();
        // rows of the projection sum to one: each output channel averages the
        // 4 neighbours' first input channel
        let w = store.get_mut(red.proj.w);
        for k in 0..4 {
            w.set(k * 3, 0, 0.25);
            w.set(k * 3 + 1, 1, 0.25);
        }
        let mut g = Graph::new(&store);
        let x = g.input(Mat::from_vec(16, 3, [0.7, -0.2, 5.0].repeat(16)));
        let y = red.forward(&mut g, x);
        let yv = g.value(y);
        assert_eq!(yv.shape(), (4, 2));
        for r in 0..4 {
            assert!((yv.get(r, 0) - 0.7).abs() < 1e-15);
            assert!((yv.get(r, 1) + 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let mut store = ParamStore::new();
        let mut init = Init::new(5, InitMode::ZeroResidual);
        let block = ClusterBlock::new(
            &mut store,
            &mut init,
            "b",
            (4, 4),
            (2, 2),
            Neighborhood::Eight,
            6,
            2,
        )
        .unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(sample(16, 6, 2));
        let t = block.forward(&mut g, x);
        assert_eq!(g.value(t.output), g.value(x));
        assert_eq!(t.assignment.len(), 16);
    }

    #[test]
    fn block_preserves_shape_for_various_grids() {
        for (grid, anchors) in [((2, 2), (1, 1)), ((4, 6), (2, 3)), ((8, 8), (2, 2))] {
            let mut store = ParamStore::new();
            let mut init = Init::new(9, InitMode::Random);
            let block = ClusterBlock::new(
                &mut store,
                &mut init,
                "b",
                grid,
                anchors,
                Neighborhood::Four,
                5,
                2,
            )
            .unwrap();
            let mut g = Graph::new(&store);
            let x = g.input(sample(grid.0 * grid.1, 5, 4));
            let t = block.forward(&mut g, x);
            assert_eq!(g.value(t.output).shape(), (grid.0 * grid.1, 5));
        }
    }

    #[test]
    fn small_preset_grid_arithmetic() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0, InitMode::Random);
        let b = Backbone::new(&mut store, &mut init, "g", &Preset::Small.config(), (128, 128))
            .unwrap();
        // stem 4 then [2, 1, 1, 1]
        assert_eq!(b.output_grid(), (16, 16));
        assert_eq!(Preset::Small.config().total_reduction(), 8);
        let mut cfg = Preset::Tiny.config();
        cfg.stages[1].reduce = 2;
        cfg.stages[0].reduce = 2;
        let b = Backbone::new(&mut store, &mut init, "t", &cfg, (32, 32)).unwrap();
        // stem 4 then [2, 2]
        assert_eq!(b.output_grid(), (2, 2));
        assert_eq!(
            b.stages.iter().map(|s| s.reducer.out_grid).collect::<Vec<_>>(),
            vec![(4, 4), (2, 2)]
        );
    }

    #[test]
    fn stage_reduces_two_two_on_32_gives_8() {
        // stem stride 4 on 32x32 leaves 8x8; two reduce-1 stages keep it
        let mut store = ParamStore::new();
        let mut init = Init::new(0, InitMode::Random);
        let mut cfg = Preset::Tiny.config();
        cfg.stages[1].reduce = 1;
        let b = Backbone::new(&mut store, &mut init, "t", &cfg, (32, 32)).unwrap();
        assert_eq!(b.output_grid(), (8, 8));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0, InitMode::Random);
        assert!(Backbone::new(&mut store, &mut init, "g", &Preset::Tiny.config(), (20, 20)).is_err());
    }

    #[test]
    fn one_stage_zero_residual_pool_is_mean_of_projection() {
        let cfg = ClusterConfig {
            anchors: vec![(2, 2)],
            neighbors_k: Neighborhood::Four,
            stages: vec![StageSpec {
                width: 8,
                blocks: 1,
                reduce: 1,
            }],
            mlp_ratio: 2,
        };
        let mut store = ParamStore::new();
        let mut init = Init::new(3, InitMode::ZeroResidual);
        let b = Backbone::new(&mut store, &mut init, "g", &cfg, (8, 8)).unwrap();
        let mut g = Graph::new(&store);
        let pts = g.input(sample(64, 5, 1));
        let out = b.forward(&mut g, pts).unwrap();
        let stem = b.stem.forward(&mut g, pts);
        let projected = b.stages[0].reducer.forward(&mut g, stem);
        let mean = g.col_mean(projected);
        assert!(g.value(out.pooled).max_abs_diff(g.value(mean)) < 1e-14);
    }
}
