//! Per-view PNG renderings: box overlays, cluster maps and saliency heatmaps.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::data::{write_atomic, LoadedStudy};
use crate::error::{Error, Result};
use crate::imaging::{Image, PixelBox};
use crate::model::{predict, Model, StudyOutputs, View};

pub const GREEN: [u8; 3] = [0, 220, 0];
pub const BLUE: [u8; 3] = [30, 90, 255];

const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

pub fn to_rgb(img: &Image) -> RgbImage {
    RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let p = img.pixel(y as usize, x as usize);
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// One-pixel rectangle outline of a half-open box.
pub fn draw_box(img: &mut RgbImage, b: &PixelBox, color: [u8; 3]) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let x1 = b.x_max.min(w);
    let y1 = b.y_max.min(h);
    if b.x_min >= x1 || b.y_min >= y1 {
        return;
    }
    for x in b.x_min..x1 {
        img.put_pixel(x as u32, b.y_min as u32, Rgb(color));
        img.put_pixel(x as u32, (y1 - 1) as u32, Rgb(color));
    }
    for y in b.y_min..y1 {
        img.put_pixel(b.x_min as u32, y as u32, Rgb(color));
        img.put_pixel((x1 - 1) as u32, y as u32, Rgb(color));
    }
}

/// Source image with lesions in green and selected patches in blue.
pub fn render_overlay(img: &Image, lesions: &[PixelBox], patches: &[PixelBox]) -> RgbImage {
    let mut out = to_rgb(img);
    for b in patches {
        draw_box(&mut out, b, BLUE);
    }
    for b in lesions {
        draw_box(&mut out, b, GREEN);
    }
    out
}

/// Flat colour per cluster, upsampled by nearest neighbour.
pub fn render_clusters(assignment: &[usize], grid: (usize, usize), size: (usize, usize)) -> RgbImage {
    RgbImage::from_fn(size.1 as u32, size.0 as u32, |x, y| {
        let r = y as usize * grid.0 / size.0;
        let c = x as usize * grid.1 / size.1;
        Rgb(PALETTE[assignment[r * grid.1 + c] % PALETTE.len()])
    })
}

fn heat(v: f64) -> [u8; 3] {
    // black, red, yellow, white
    let v = v.clamp(0.0, 1.0) * 3.0;
    let (r, g, b) = if v < 1.0 {
        (v, 0.0, 0.0)
    } else if v < 2.0 {
        (1.0, v - 1.0, 0.0)
    } else {
        (1.0, 1.0, v - 2.0)
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

pub fn render_saliency(values: &[f64], grid: (usize, usize), size: (usize, usize)) -> RgbImage {
    RgbImage::from_fn(size.1 as u32, size.0 as u32, |x, y| {
        let r = y as usize * grid.0 / size.0;
        let c = x as usize * grid.1 / size.1;
        Rgb(heat(values[r * grid.1 + c]))
    })
}

fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    write_atomic(path, &bytes)
}

/// What was drawn for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRendering {
    pub view: View,
    pub lesion_boxes: Vec<PixelBox>,
    pub patch_boxes: Vec<PixelBox>,
    pub clusters_used: usize,
    pub files: Vec<PathBuf>,
}

/// Renders every view of a study into `out_dir` and returns the outputs used.
pub fn visualize(
    model: &Model,
    study: &LoadedStudy,
    out_dir: &Path,
) -> Result<(StudyOutputs, Vec<ViewRendering>)> {
    let out = predict(model, &study.images)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let id = &study.record.study_id;
    let map_grid = model.arch.map_size();
    let cluster_grid = model.arch.global.output_grid();
    let mut rendered = Vec::with_capacity(4);
    for view in View::ALL {
        let v = view.index();
        let img = &study.images[v];
        let size = (img.height, img.width);
        let sel = &out.patch_selections[v];
        let overlay = render_overlay(img, &study.boxes[v], &sel.boxes);
        let clusters = render_clusters(&out.assignments[v], cluster_grid, size);
        let heat = render_saliency(&out.saliency_maps[v].values.data, map_grid, size);
        let mut files = Vec::new();
        for (kind, png) in [("overlay", &overlay), ("clusters", &clusters), ("saliency", &heat)] {
            let p = out_dir.join(format!("{id}_{}_{kind}.png", view.name()));
            save_png(&p, png)?;
            files.push(p);
        }
        let mut used: Vec<usize> = out.assignments[v].clone();
        used.sort_unstable();
        used.dedup();
        rendered.push(ViewRendering {
            view,
            lesion_boxes: study.boxes[v].clone(),
            patch_boxes: sel.boxes.clone(),
            clusters_used: used.len(),
            files,
        });
    }
    Ok((out, rendered))
}
