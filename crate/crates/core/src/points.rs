//! Images as sets of `(r, g, b, x, y)` points.
//!
//! Pixel `(i, j)` of an `h x w` image becomes the point
//! `(r, g, b, (j + 0.5)/w - 0.5, (i + 0.5)/h - 0.5)`, in row-major order.

use crate::error::{invalid, Result};
use crate::imaging::Image;
use crate::linalg::Mat;

/// Number of colour channels at the front of every raw point.
pub const COLOR_DIMS: usize = 3;
pub const POINT_DIMS: usize = 5;

/// Points laid out on a regular grid: `points` is `(h*w) x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Mat,
    pub grid: (usize, usize),
}

impl PointSet {
    pub fn new(points: Mat, grid: (usize, usize)) -> Result<Self> {
        if points.rows != grid.0 * grid.1 {
            return Err(invalid!(
                "{} points cannot fill a {}x{} grid",
                points.rows,
                grid.0,
                grid.1
            ));
        }
        Ok(PointSet { points, grid })
    }

    pub fn len(&self) -> usize {
        self.points.rows
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows == 0
    }

    pub fn dims(&self) -> usize {
        self.points.cols
    }
}

/// Normalised pixel-centre coordinate along an axis of length `n`.
#[inline]
pub fn position(index: usize, n: usize) -> f64 {
    (index as f64 + 0.5) / n as f64 - 0.5
}

pub fn image_to_points(image: &Image) -> Result<PointSet> {
    let (h, w) = (image.height, image.width);
    if h == 0 || w == 0 {
        return Err(invalid!("image must be at least 1x1, got {h}x{w}"));
    }
    if let Some(bad) = image.data.iter().position(|v| !v.is_finite()) {
        let px = bad / 3;
        return Err(invalid!(
            "non-finite pixel at row {}, column {}",
            px / w,
            px % w
        ));
    }
    let mut points = Mat::zeros(h * w, POINT_DIMS);
    for i in 0..h {
        let y = position(i, h);
        for j in 0..w {
            let row = points.row_mut(i * w + j);
            row[..COLOR_DIMS].copy_from_slice(&image.pixel(i, j));
            row[3] = position(j, w);
            row[4] = y;
        }
    }
    Ok(PointSet {
        points,
        grid: (h, w),
    })
}

/// Inverse of the row-major flattening: a `h x w x d` grid as nested rows.
pub fn points_to_grid(ps: &PointSet, channels: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let (h, w) = ps.grid;
    if ps.points.rows != h * w {
        return Err(invalid!(
            "{} points cannot fill a {h}x{w} grid",
            ps.points.rows
        ));
    }
    if ps.points.cols != channels {
        return Err(invalid!(
            "points carry {} channels, expected {channels}",
            ps.points.cols
        ));
    }
    Ok((0..h)
        .map(|i| (0..w).map(|j| ps.points.row(i * w + j).to_vec()).collect())
        .collect())
}

/// The colour planes of a raw point set as an image.
pub fn points_to_image(ps: &PointSet) -> Result<Image> {
    let grid = points_to_grid(ps, POINT_DIMS)?;
    let mut data = Vec::with_capacity(ps.len() * 3);
    for row in &grid {
        for p in row {
            data.extend_from_slice(&p[..COLOR_DIMS]);
        }
    }
    Image::new(ps.grid.0, ps.grid.1, data)
}
