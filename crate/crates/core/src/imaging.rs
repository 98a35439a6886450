//! In-memory 3-channel raster with intensities in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Half-open pixel rectangle `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        self.x_max.saturating_sub(self.x_min) * self.y_max.saturating_sub(self.y_min)
    }

    pub fn intersection_area(&self, other: &PixelBox) -> usize {
        let x0 = self.x_min.max(other.x_min);
        let x1 = self.x_max.min(other.x_max);
        let y0 = self.y_min.max(other.y_min);
        let y1 = self.y_max.min(other.y_max);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, row-major: `data[(r * width + c) * 3 + ch]`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(invalid!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| value).collect();
        Image {
            height,
            width,
            data,
        }
    }

    /// Replicates a single-channel buffer across RGB.
    pub fn from_gray(height: usize, width: usize, gray: &[f64]) -> Result<Self> {
        if gray.len() != height * width {
            return Err(invalid!(
                "gray buffer has {} values, expected {}x{}",
                gray.len(),
                height,
                width
            ));
        }
        Ok(Image {
            height,
            width,
            data: gray.iter().flat_map(|&v| [v, v, v]).collect(),
        })
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, r: usize, c: usize, p: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&p);
    }

    /// Mean over channels.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }

    /// Axis-aligned crop; the window must lie inside the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(invalid!(
                "crop {}x{} at ({top}, {left}) exceeds image {}x{}",
                height,
                width,
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for r in top..top + height {
            let start = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Bilinear resampling with half-pixel centres. Resizing to the current
    /// size returns an exact copy.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let coord = |i: usize, scale: f64, len: usize| -> (usize, usize, f64) {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut out = Image::filled(height, width, [0.0; 3]);
        for r in 0..height {
            let (y0, y1, fy) = coord(r, sy, self.height);
            for c in 0..width {
                let (x0, x1, fx) = coord(c, sx, self.width);
                let (p00, p01) = (self.pixel(y0, x0), self.pixel(y0, x1));
                let (p10, p11) = (self.pixel(y1, x0), self.pixel(y1, x1));
                let mut p = [0.0; 3];
                for ch in 0..3 {
                    let top = p00[ch] * (1.0 - fx) + p01[ch] * fx;
                    let bot = p10[ch] * (1.0 - fx) + p11[ch] * fx;
                    p[ch] = top * (1.0 - fy) + bot * fy;
                }
                out.set_pixel(r, c, p);
            }
        }
        out
    }
}
