//! WebAssembly bindings for the static demo page in `www/`. Each export
//! takes plain numbers and returns a JSON string; the same functions are
//! callable natively for testing.

use mammoclu::cluster::{anchor_features, assign_clusters, cluster_sizes, select_anchors, Neighborhood};
use mammoclu::data::{phantom_view, PhantomConfig};
use mammoclu::imaging::PixelBox;
use mammoclu::linalg::{min_max_normalize, Mat};
use mammoclu::metrics::{self, lesion_detected, Confusion, RocPoint, DEFAULT_TAU};
use mammoclu::points::image_to_points;
use mammoclu::roi::{greedy_roi_select, map_to_image};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn phantom_config(size: usize) -> PhantomConfig {
    PhantomConfig {
        study_count: 1,
        image_size: (size, size),
        malignant_fraction: 1.0,
        seed: 0,
        lesion_intensity: 0.6,
        lesion_radius_range: ((size / 20).max(1), (size / 10).max(1)),
    }
}

fn gray_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().step_by(3).map(|v| (v * 255.0).round() as u8).collect()
}

#[derive(Debug, Serialize)]
pub struct ClusterView {
    pub size: usize,
    pub gray: Vec<u8>,
    pub lesion: Option<PixelBox>,
    /// Anchor index of every pixel, row-major.
    pub assignment: Vec<usize>,
    /// Pixel index of every anchor.
    pub anchors: Vec<usize>,
    pub sizes: Vec<usize>,
}

/// Assigns every pixel of a phantom view to the nearest of a uniform anchor
/// lattice by cosine similarity of `(r, g, b, x, y)` points.
pub fn cluster_view(seed: u64, size: usize, lattice: (usize, usize), k: usize, lesion: bool) -> Result<ClusterView> {
    let nb = Neighborhood::try_from(k)?;
    let (img, bbox) = phantom_view(&phantom_config(size), seed, lesion).map_err(|e| e.to_string())?;
    let ps = image_to_points(&img).map_err(|e| e.to_string())?;
    let anchors = select_anchors(ps.grid, lattice).map_err(|e| e.to_string())?;
    let feats = anchor_features(&ps.points, ps.grid, &anchors, nb).map_err(|e| e.to_string())?;
    let assignment = assign_clusters(&ps.points, &feats).map_err(|e| e.to_string())?;
    Ok(ClusterView {
        size,
        gray: gray_bytes(&img.data),
        lesion: bbox,
        sizes: cluster_sizes(&assignment, anchors.len()),
        assignment,
        anchors,
    })
}

#[derive(Debug, Serialize)]
pub struct RoiView {
    pub size: usize,
    pub gray: Vec<u8>,
    pub lesion: Option<PixelBox>,
    pub map_size: usize,
    /// Min-max normalised cell means, row-major.
    pub map: Vec<f64>,
    pub patches: Vec<PixelBox>,
    pub scores: Vec<f64>,
    pub detected: Option<bool>,
}

/// Greedy non-overlapping window selection on a stand-in saliency map: the
/// mean grey level of each `cell x cell` block, min-max normalised.
pub fn roi_view(seed: u64, size: usize, cell: usize, n: usize, crop: usize) -> Result<RoiView> {
    if cell == 0 || size % cell != 0 {
        return Err(format!("cell {cell} must divide the image size {size}"));
    }
    let (img, bbox) = phantom_view(&phantom_config(size), seed, true).map_err(|e| e.to_string())?;
    let m = size / cell;
    let mut raw = Mat::zeros(m, m);
    for r in 0..size {
        for c in 0..size {
            let v = raw.get(r / cell, c / cell) + img.data[(r * size + c) * 3];
            raw.set(r / cell, c / cell, v);
        }
    }
    let map = min_max_normalize(&raw);
    let picks = greedy_roi_select(&map, n, (crop, crop)).map_err(|e| e.to_string())?;
    let side = crop * cell;
    let patches: Vec<PixelBox> = picks
        .iter()
        .map(|p| {
            let (y, x) = map_to_image(p.coord, (m, m), (size, size), (side, side));
            PixelBox {
                x_min: x,
                y_min: y,
                x_max: x + side,
                y_max: y + side,
            }
        })
        .collect();
    Ok(RoiView {
        size,
        gray: gray_bytes(&img.data),
        detected: bbox.map(|b| lesion_detected(&b, &patches, DEFAULT_TAU)),
        lesion: bbox,
        map_size: m,
        map: map.data,
        scores: picks.iter().map(|p| p.score).collect(),
        patches,
    })
}

#[derive(Debug, Serialize)]
pub struct RocView {
    pub auc: f64,
    pub curve: Vec<RocPoint>,
    pub confusion: Confusion,
    pub acc: f64,
    pub f1: f64,
}

/// ROC curve, AUC and thresholded metrics for `n` negatives drawn from
/// `N(0, 1)` and `n` positives from `N(separation, 1)`, squashed to `(0, 1)`.
pub fn roc_view(seed: u64, n: usize, separation: f64, threshold: f64) -> Result<RocView> {
    if n == 0 {
        return Err("need at least one score per class".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
    let squash = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut scores = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for label in [0u8, 1] {
        let shift = if label == 1 { separation } else { 0.0 };
        for _ in 0..n {
            scores.push(squash(unit.sample(&mut rng) + shift));
            labels.push(label);
        }
    }
    let confusion = metrics::confusion(&scores, &labels, threshold).map_err(|e| e.to_string())?;
    Ok(RocView {
        auc: metrics::auc(&scores, &labels).map_err(|e| e.to_string())?,
        curve: metrics::roc_curve(&scores, &labels).map_err(|e| e.to_string())?,
        acc: confusion.accuracy(),
        f1: metrics::f1(confusion.tp, confusion.fp, confusion.fn_),
        confusion,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string())))
}

#[wasm_bindgen(js_name = clusterView)]
pub fn cluster_view_js(
    seed: u32,
    size: usize,
    lattice_h: usize,
    lattice_w: usize,
    k: usize,
    lesion: bool,
) -> std::result::Result<String, JsError> {
    to_js(cluster_view(seed as u64, size, (lattice_h, lattice_w), k, lesion))
}

#[wasm_bindgen(js_name = roiView)]
pub fn roi_view_js(seed: u32, size: usize, cell: usize, n: usize, crop: usize) -> std::result::Result<String, JsError> {
    to_js(roi_view(seed as u64, size, cell, n, crop))
}

#[wasm_bindgen(js_name = rocView)]
pub fn roc_view_js(seed: u32, n: usize, separation: f64, threshold: f64) -> std::result::Result<String, JsError> {
    to_js(roc_view(seed as u64, n, separation, threshold))
}
