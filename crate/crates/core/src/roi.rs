//! Saliency map head and greedy masked region-of-interest search.
//!
//! The saliency map lives on the final global grid. Patch crops are chosen on
//! that grid (window `h_crop x w_crop`, stride 1), one at a time: every window
//! containing no previously selected cell is scored by its mean saliency, the
//! best one wins (ties toward the smallest `(row, col)`), and its cells are
//! masked. Selected map coordinates are scaled to source-image pixels.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::imaging::{Image, PixelBox};
use crate::linalg::Mat;
use crate::nn::{Linear, WeightInit};
use crate::params::{Init, ParamStore};

/// Top-left corner of a selected window, in saliency-map cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapCoord {
    pub row: usize,
    pub col: usize,
}

impl MapCoord {
    pub fn new(row: usize, col: usize) -> Self {
        MapCoord { row, col }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// Min-max normalised scores, `h_map x w_map`.
    pub values: Mat,
    /// Logistic output before normalisation, `h_map x w_map`.
    pub raw: Mat,
    /// `(h_I, w_I)` of the image the map was computed from.
    pub source_size: (usize, usize),
}

impl SaliencyMap {
    pub fn from_raw(raw: Mat, source_size: (usize, usize)) -> Self {
        SaliencyMap {
            values: min_max_normalize(&raw),
            raw,
            source_size,
        }
    }

    pub fn map_size(&self) -> (usize, usize) {
        (self.values.rows, self.values.cols)
    }
}

pub use crate::linalg::min_max_normalize;

/// Per-location linear projection to one channel followed by a logistic.
#[derive(Clone, Debug)]
pub struct SaliencyHead {
    pub proj: Linear,
}

impl SaliencyHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize) -> Self {
        SaliencyHead {
            proj: Linear::new(store, init, name, width, 1, true, WeightInit::Residual(1.0)),
        }
    }

    /// Returns the `(h*w) x 1` logistic map as a tape variable.
    pub fn forward(&self, g: &mut Graph, features: Var) -> Var {
        let logits = self.proj.forward(g, features);
        g.sigmoid(logits)
    }
}

/// `h_crop = round(h_patch * h_map / h_I)` (at least 1), likewise for width.
pub fn compute_crop_dims(
    patch: (usize, usize),
    map: (usize, usize),
    image: (usize, usize),
) -> Result<(usize, usize)> {
    let all = [patch.0, patch.1, map.0, map.1, image.0, image.1];
    if all.contains(&0) {
        return Err(invalid!("crop dimensions need positive sizes, got {all:?}"));
    }
    if patch.0 > image.0 || patch.1 > image.1 {
        return Err(invalid!(
            "patch {}x{} is larger than the image {}x{}",
            patch.0,
            patch.1,
            image.0,
            image.1
        ));
    }
    let dim = |p: usize, m: usize, i: usize| -> usize {
        ((p as f64 * m as f64 / i as f64).round() as usize).clamp(1, m)
    };
    Ok((dim(patch.0, map.0, image.0), dim(patch.1, map.1, image.1)))
}

/// A greedy pick and the mean saliency of its window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiPick {
    pub coord: MapCoord,
    pub score: f64,
}

fn window_mean(map: &Mat, r: usize, c: usize, crop: (usize, usize)) -> f64 {
    let mut s = 0.0;
    for rr in r..r + crop.0 {
        for cc in c..c + crop.1 {
            s += map.get(rr, cc);
        }
    }
    s / (crop.0 * crop.1) as f64
}

/// Greedy masked search; see the module docs.
pub fn greedy_roi_select(map: &Mat, n: usize, crop: (usize, usize)) -> Result<Vec<RoiPick>> {
    let (h, w) = map.shape();
    if n == 0 {
        return Err(invalid!("at least one patch must be requested"));
    }
    if crop.0 == 0 || crop.1 == 0 || crop.0 > h || crop.1 > w {
        return Err(invalid!(
            "crop {}x{} does not fit the {h}x{w} saliency map",
            crop.0,
            crop.1
        ));
    }
    let mut masked = vec![false; h * w];
    let mut picks = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<RoiPick> = None;
        for r in 0..=h - crop.0 {
            for c in 0..=w - crop.1 {
                let blocked = (r..r + crop.0)
                    .any(|rr| (c..c + crop.1).any(|cc| masked[rr * w + cc]));
                if blocked {
                    continue;
                }
                let score = window_mean(map, r, c, crop);
                if best.map_or(true, |b| score > b.score) {
                    best = Some(RoiPick {
                        coord: MapCoord::new(r, c),
                        score,
                    });
                }
            }
        }
        let Some(pick) = best else {
            return Err(invalid!(
                "only {} disjoint {}x{} windows fit the {h}x{w} map, {n} requested",
                picks.len(),
                crop.0,
                crop.1
            ));
        };
        for rr in pick.coord.row..pick.coord.row + crop.0 {
            for cc in pick.coord.col..pick.coord.col + crop.1 {
                masked[rr * w + cc] = true;
            }
        }
        picks.push(pick);
    }
    Ok(picks)
}

/// Top-left pixel of the patch for a map coordinate: scale by the real-valued
/// image/map ratio, floor, then clamp so the whole patch is inside the image.
pub fn map_to_image(
    coord: MapCoord,
    map: (usize, usize),
    image: (usize, usize),
    patch: (usize, usize),
) -> (usize, usize) {
    let scale = |v: usize, m: usize, i: usize, p: usize| -> usize {
        let px = (v as f64 * i as f64 / m as f64).floor() as usize;
        px.min(i - p)
    };
    (
        scale(coord.row, map.0, image.0, patch.0),
        scale(coord.col, map.1, image.1, patch.1),
    )
}

/// Crops one `patch`-sized image per coordinate.
pub fn crop_patches(
    image: &Image,
    coords: &[MapCoord],
    map: (usize, usize),
    patch: (usize, usize),
) -> Result<Vec<(PixelBox, Image)>> {
    if patch.0 > image.height || patch.1 > image.width {
        return Err(invalid!(
            "patch {}x{} is larger than the image {}x{}",
            patch.0,
            patch.1,
            image.height,
            image.width
        ));
    }
    coords
        .iter()
        .map(|&c| {
            let (top, left) = map_to_image(c, map, (image.height, image.width), patch);
            let b = PixelBox {
                x_min: left,
                y_min: top,
                x_max: left + patch.1,
                y_max: top + patch.0,
            };
            Ok((b, image.crop(top, left, patch.0, patch.1)?))
        })
        .collect()
}

/// Averaging rows selecting each `crop` window of a `grid`, for [`Graph::combine`].
pub fn window_rows(
    grid: (usize, usize),
    coords: &[MapCoord],
    crop: (usize, usize),
) -> Result<Vec<Vec<(usize, f64)>>> {
    let wgt = 1.0 / (crop.0 * crop.1) as f64;
    coords
        .iter()
        .map(|c| {
            if c.row + crop.0 > grid.0 || c.col + crop.1 > grid.1 {
                return Err(invalid!(
                    "window {}x{} at ({}, {}) leaves the {}x{} grid",
                    crop.0,
                    crop.1,
                    c.row,
                    c.col,
                    grid.0,
                    grid.1
                ));
            }
            let mut row = Vec::with_capacity(crop.0 * crop.1);
            for r in c.row..c.row + crop.0 {
                for cc in c.col..c.col + crop.1 {
                    row.push((r * grid.1 + cc, wgt));
                }
            }
            Ok(row)
        })
        .collect()
}

/// Feature-based local information: the mean feature over each selected window.
pub fn extract_feature_local(
    features: &Mat,
    grid: (usize, usize),
    coords: &[MapCoord],
    crop: (usize, usize),
) -> Result<Mat> {
    if features.rows != grid.0 * grid.1 {
        return Err(invalid!(
            "{} feature rows do not fill a {}x{} grid",
            features.rows,
            grid.0,
            grid.1
        ));
    }
    let rows = window_rows(grid, coords, crop)?;
    let mut out = Mat::zeros(rows.len(), features.cols);
    for (m, entries) in rows.iter().enumerate() {
        let o = out.row_mut(m);
        for &(i, w) in entries {
            for (v, f) in o.iter_mut().zip(features.row(i)) {
                *v += w * f;
            }
        }
    }
    Ok(out)
}

/// Everything the ROI stage decided for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSelection {
    pub coords: Vec<MapCoord>,
    pub scores: Vec<f64>,
    pub crop_size_map: (usize, usize),
    pub crop_size_image: (usize, usize),
    /// Patch rectangles in source pixels.
    pub boxes: Vec<PixelBox>,
    pub patches: Vec<Image>,
}
