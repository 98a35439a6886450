//! The four-view study network.
//!
//! Per view: global backbone, saliency map, greedy ROI search, patch crops
//! re-encoded by the local backbone, feature-based local rows read from the
//! global grid, overlay, instance attention, global folding and per-view
//! fusion. Across views: three attention fusions and three heads.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ClusterConfig};
use crate::error::{invalid, Error, Result};
use crate::fusion::{
    overlay, AlignEmbed, AttentionPool, FoldGlobal, FuseView, Head, OverlayMode, ViewAttentionMode,
    ViewFusion,
};
use crate::graph::{Graph, Var};
use crate::imaging::Image;
use crate::linalg::Mat;
use crate::nn::{Linear, WeightInit};
use crate::params::{Init, InitMode, ParamStore};
use crate::points::image_to_points;
use crate::roi::{
    compute_crop_dims, crop_patches, greedy_roi_select, window_rows, MapCoord, PatchSelection,
    SaliencyHead, SaliencyMap,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "LCC")]
    Lcc,
    #[serde(rename = "LMLO")]
    Lmlo,
    #[serde(rename = "RCC")]
    Rcc,
    #[serde(rename = "RMLO")]
    Rmlo,
}

impl View {
    pub const ALL: [View; 4] = [View::Lcc, View::Lmlo, View::Rcc, View::Rmlo];

    pub fn name(self) -> &'static str {
        match self {
            View::Lcc => "LCC",
            View::Lmlo => "LMLO",
            View::Rcc => "RCC",
            View::Rmlo => "RMLO",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<View> {
        View::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub global: ClusterConfig,
    pub local: ClusterConfig,
    /// `(h_I, w_I)` every view is resized to.
    pub image_size: (usize, usize),
    pub num_patches: usize,
    pub patch_size: (usize, usize),
    /// Local width; defaults to the local backbone's final width.
    pub dim: Option<usize>,
    pub overlay: OverlayMode,
    pub view_attention: ViewAttentionMode,
    pub zero_residual: bool,
}

/// Layers of the study network. Values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub dim: usize,
    /// Index of the final global stage, read by the saliency head.
    pub map_stage: usize,
    pub crop_map: (usize, usize),
    pub global: Backbone,
    pub local: Backbone,
    pub saliency: SaliencyHead,
    pub local_proj: Option<Linear>,
    pub align: AlignEmbed,
    pub overlay_proj: Option<Linear>,
    pub instance_attention: AttentionPool,
    pub fold: FoldGlobal,
    pub fuse: FuseView,
    pub fuse_views: ViewFusion,
    pub global_views: ViewFusion,
    pub local_views: ViewFusion,
    pub global_head: Head,
    pub local_head: Head,
    pub fusion_head: Head,
}

pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Model> {
        let mut params = ParamStore::new();
        let arch = Architecture::new(config, &mut params, seed)?;
        Ok(Model { arch, params })
    }
}

impl Architecture {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let mode = if config.zero_residual {
            InitMode::ZeroResidual
        } else {
            InitMode::Random
        };
        let mut init = Init::new(seed, mode);
        let init = &mut init;
        if config.num_patches == 0 {
            return Err(invalid!("num_patches must be >= 1"));
        }
        let global = Backbone::new(store, init, "global", &config.global, config.image_size)?;
        let local = Backbone::new(store, init, "local", &config.local, config.patch_size)?;
        let map_stage = global.stages.len() - 1;
        let map = global.stage_grid(map_stage);
        let mw = config.global.stages[map_stage].width;
        let crop_map = compute_crop_dims(config.patch_size, map, config.image_size)?;
        let available = (map.0 / crop_map.0) * (map.1 / crop_map.1);
        if available < config.num_patches {
            return Err(invalid!(
                "{} patches of {}x{} map cells requested but a {}x{} map holds at most {available}",
                config.num_patches,
                crop_map.0,
                crop_map.1,
                map.0,
                map.1
            ));
        }
        let gw = global.output_width();
        let lw = local.output_width();
        let dim = config.dim.unwrap_or(lw);
        if dim == 0 {
            return Err(invalid!("fusion dim must be >= 1"));
        }
        let saliency = SaliencyHead::new(store, init, "saliency", mw);
        let local_proj = (dim != lw).then(|| {
            Linear::new(store, init, "fusion.local_proj", lw, dim, true, WeightInit::Uniform(1.0))
        });
        let align = AlignEmbed::new(store, init, "fusion.align", mw, dim);
        let overlay_proj = (config.overlay == OverlayMode::Concat).then(|| {
            Linear::new(store, init, "fusion.overlay", 2 * dim, dim, true, WeightInit::Uniform(1.0))
        });
        let instance_attention = AttentionPool::new(store, init, "fusion.instance_attention", dim);
        let fold = FoldGlobal::new(store, init, "fusion.fold", gw, dim);
        let fuse = FuseView::new(store, init, "fusion.fuse_view", dim);
        let va = config.view_attention;
        Ok(Architecture {
            config: config.clone(),
            dim,
            map_stage,
            crop_map,
            global,
            local,
            saliency,
            local_proj,
            align,
            overlay_proj,
            instance_attention,
            fold,
            fuse,
            fuse_views: ViewFusion::new(store, init, "fusion.views_fusion", dim, va),
            global_views: ViewFusion::new(store, init, "fusion.views_global", dim, va),
            local_views: ViewFusion::new(store, init, "fusion.views_local", dim, va),
            global_head: Head::new(store, init, "head.global", dim, true),
            local_head: Head::new(store, init, "head.local", dim, false),
            fusion_head: Head::new(store, init, "head.fusion", dim, false),
        })
    }

    pub fn map_size(&self) -> (usize, usize) {
        self.global.stage_grid(self.map_stage)
    }

    /// Forward pass of one study. `frozen` replaces the greedy ROI search with
    /// fixed per-view coordinates.
    pub fn study_forward(
        &self,
        g: &mut Graph,
        views: &[Image],
        frozen: Option<&[Vec<MapCoord>]>,
    ) -> Result<StudyVars> {
        if views.len() != 4 {
            return Err(invalid!("a study needs 4 views, got {}", views.len()));
        }
        if let Some(f) = frozen {
            if f.len() != 4 {
                return Err(invalid!("frozen coordinates given for {} views", f.len()));
            }
        }
        let mut per_view = Vec::with_capacity(4);
        for (i, view) in View::ALL.into_iter().enumerate() {
            let fixed = frozen.map(|f| f[i].as_slice());
            let vv = self
                .view_forward(g, &views[i], fixed)
                .map_err(|e| name_view(view, e))?;
            per_view.push(vv);
        }
        let ff: Vec<Var> = per_view.iter().map(|v| v.f_f).collect();
        let fg: Vec<Var> = per_view.iter().map(|v| v.f_g_pooled).collect();
        let fl: Vec<Var> = per_view.iter().map(|v| v.f_l_pooled).collect();
        let (f_fusion, w_fusion) = self.fuse_views.forward(g, &ff)?;
        let (f_global, w_global) = self.global_views.forward(g, &fg)?;
        let (f_local, w_local) = self.local_views.forward(g, &fl)?;
        let global_prob = self.global_head.forward(g, f_global);
        let local_logit = self.local_head.forward(g, f_local);
        let fusion_logit = self.fusion_head.forward(g, f_fusion);
        Ok(StudyVars {
            views: per_view,
            f_fusion,
            f_global,
            f_local,
            view_weights: [w_fusion, w_global, w_local],
            global_prob,
            local_logit,
            fusion_logit,
        })
    }

    fn view_forward(
        &self,
        g: &mut Graph,
        image: &Image,
        frozen: Option<&[MapCoord]>,
    ) -> Result<ViewVars> {
        let cfg = &self.config;
        if (image.height, image.width) != cfg.image_size {
            return Err(invalid!(
                "image is {}x{}, the model expects {}x{}",
                image.height,
                image.width,
                cfg.image_size.0,
                cfg.image_size.1
            ));
        }
        let pts = image_to_points(image)?;
        let pts = g.input(pts.points);
        let gout = self.global.forward(g, pts)?;
        let grid = gout.grid;
        let (map_features, map_grid) = gout.stage_features[self.map_stage];
        let raw = self.saliency.forward(g, map_features);
        let raw_map = Mat::from_vec(map_grid.0, map_grid.1, g.value(raw).data.clone());
        let map = SaliencyMap::from_raw(raw_map, cfg.image_size);

        let (coords, scores) = match frozen {
            Some(c) => {
                if c.len() != cfg.num_patches {
                    return Err(invalid!(
                        "{} frozen coordinates for {} patches",
                        c.len(),
                        cfg.num_patches
                    ));
                }
                (c.to_vec(), vec![f64::NAN; c.len()])
            }
            None => {
                let picks = greedy_roi_select(&map.values, cfg.num_patches, self.crop_map)?;
                (
                    picks.iter().map(|p| p.coord).collect(),
                    picks.iter().map(|p| p.score).collect(),
                )
            }
        };
        let crops = crop_patches(image, &coords, map_grid, cfg.patch_size)?;

        let mut pl_rows = Vec::with_capacity(crops.len());
        for (_, patch) in &crops {
            let p = image_to_points(patch)?;
            let p = g.input(p.points);
            let lout = self.local.forward(g, p)?;
            pl_rows.push(lout.pooled);
        }
        let mut f_pl = g.concat_rows(pl_rows);
        if let Some(proj) = &self.local_proj {
            f_pl = proj.forward(g, f_pl);
        }
        let f_fl = g.combine(map_features, window_rows(map_grid, &coords, self.crop_map)?);
        let f_fl_aligned = self.align.forward(g, f_fl)?;
        let f_l = match &self.overlay_proj {
            None => overlay(g, f_fl_aligned, f_pl)?,
            Some(proj) => {
                let cat = g.concat_cols(vec![f_fl_aligned, f_pl]);
                proj.forward(g, cat)
            }
        };
        let att = self.instance_attention.forward(g, f_l)?;
        let f_l_pooled = g.col_mean(f_l);
        let f_g_pooled = self.fold.forward(g, gout.features, raw)?;
        let f_f = self.fuse.forward(g, f_g_pooled, att.vector)?;

        let selection = PatchSelection {
            coords,
            scores,
            crop_size_map: self.crop_map,
            crop_size_image: cfg.patch_size,
            boxes: crops.iter().map(|c| c.0).collect(),
            patches: crops.into_iter().map(|c| c.1).collect(),
        };
        Ok(ViewVars {
            features: gout.features,
            grid,
            assignment: gout.assignments.last().cloned().unwrap_or_default(),
            saliency_raw: raw,
            saliency: map,
            selection,
            f_fl,
            f_pl,
            f_l,
            f_a: att.vector,
            instance_weights: att.weights,
            f_l_pooled,
            f_g_pooled,
            f_f,
        })
    }
}

fn name_view(view: View, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("view {view}: {m}")),
        other => other,
    }
}

/// Tape handles of one view's intermediates.
pub struct ViewVars {
    /// Final global feature grid `F_g`, `(h*w) x width`.
    pub features: Var,
    pub grid: (usize, usize),
    /// Final-stage cluster assignment of the global backbone.
    pub assignment: Vec<usize>,
    /// Logistic map before normalisation, `(h*w) x 1`.
    pub saliency_raw: Var,
    pub saliency: SaliencyMap,
    pub selection: PatchSelection,
    pub f_fl: Var,
    pub f_pl: Var,
    pub f_l: Var,
    pub f_a: Var,
    pub instance_weights: Var,
    pub f_l_pooled: Var,
    pub f_g_pooled: Var,
    pub f_f: Var,
}

pub struct StudyVars {
    pub views: Vec<ViewVars>,
    pub f_fusion: Var,
    pub f_global: Var,
    pub f_local: Var,
    /// Cross-view weights of the fusion, global and local streams.
    pub view_weights: [Var; 3],
    pub global_prob: Var,
    pub local_logit: Var,
    pub fusion_logit: Var,
}

/// Plain values of a study forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyOutputs {
    pub global_prob: f64,
    pub local_logit: f64,
    pub fusion_logit: f64,
    pub f_fusion: Vec<f64>,
    pub f_global: Vec<f64>,
    pub f_local: Vec<f64>,
    pub view_weights: [Vec<f64>; 3],
    pub saliency_maps: Vec<SaliencyMap>,
    pub patch_selections: Vec<PatchSelection>,
    pub instance_weights: Vec<Vec<f64>>,
    pub assignments: Vec<Vec<usize>>,
}

impl StudyVars {
    pub fn outputs(&self, g: &Graph) -> StudyOutputs {
        StudyOutputs {
            global_prob: g.scalar(self.global_prob),
            local_logit: g.scalar(self.local_logit),
            fusion_logit: g.scalar(self.fusion_logit),
            f_fusion: g.value(self.f_fusion).data.clone(),
            f_global: g.value(self.f_global).data.clone(),
            f_local: g.value(self.f_local).data.clone(),
            view_weights: self.view_weights.map(|w| g.value(w).data.clone()),
            saliency_maps: self.views.iter().map(|v| v.saliency.clone()).collect(),
            patch_selections: self.views.iter().map(|v| v.selection.clone()).collect(),
            instance_weights: self
                .views
                .iter()
                .map(|v| g.value(v.instance_weights).data.clone())
                .collect(),
            assignments: self.views.iter().map(|v| v.assignment.clone()).collect(),
        }
    }

    pub fn coords(&self) -> Vec<Vec<MapCoord>> {
        self.views.iter().map(|v| v.selection.coords.clone()).collect()
    }
}

impl StudyOutputs {
    pub fn fusion_prob(&self) -> f64 {
        crate::cluster::sigmoid(self.fusion_logit)
    }
}

/// Runs a forward pass on a fresh tape and returns plain outputs.
pub fn predict(model: &Model, views: &[Image]) -> Result<StudyOutputs> {
    let mut g = Graph::new(&model.params);
    let vars = model.arch.study_forward(&mut g, views, None)?;
    Ok(vars.outputs(&g))
}

/// Trainable scalar counts, in total and per name prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    /// Keyed by the first name component (`global`, `local`, `saliency`, ...).
    pub modules: std::collections::BTreeMap<String, usize>,
    /// Keyed by the first two name components.
    pub components: std::collections::BTreeMap<String, usize>,
}

pub fn param_report(store: &ParamStore) -> ParamReport {
    ParamReport {
        total: store.scalar_count(),
        modules: store.count_by_prefix(1),
        components: store.count_by_prefix(2),
    }
}
