//! RGB frames with `[0, 1]` pixel values and the bilinear resampling kernel.
//!
//! Resampling uses half-pixel centres: output pixel `j` of a span of width
//! `w_src` starting at continuous edge coordinate `x0` samples source
//! position `x0 + (j + 0.5) * w_src / w_out - 0.5`, clamped to
//! `[0, width - 1]`, blended linearly between the two neighbouring pixels.
//! Rows use the same rule. When the span equals the source width the
//! positions land exactly on pixel centres, so a same-size resize is the
//! identity.

use std::path::Path;

use crate::error::DatasetError;

/// `height × width × 3` image, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, DatasetError> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(DatasetError::Invalid(format!(
                "frame {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Frame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Frame { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel-centre coordinates, edge-clamped.
    pub fn sample(&self, y: f32, x: f32) -> [f32; 3] {
        let (y0, y1, fy) = split(y, self.height);
        let (x0, x1, fx) = split(x, self.width);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let at = |r: usize, q: usize| self.data[(r * self.width + q) * 3 + c];
            let top = lerp(at(y0, x0), at(y0, x1), fx);
            let bottom = lerp(at(y1, x0), at(y1, x1), fx);
            *o = lerp(top, bottom, fy);
        }
        out
    }

    /// Resamples the rectangle `[x0, x0 + w) × [y0, y0 + h)` (edge coordinates)
    /// into an `out_h × out_w` frame.
    #[allow(clippy::too_many_arguments)]
    pub fn crop_resize(&self, y0: f32, x0: f32, h: f32, w: f32, out_h: usize, out_w: usize) -> Frame {
        let mut data = Vec::with_capacity(out_h * out_w * 3);
        let sy = h / out_h as f32;
        let sx = w / out_w as f32;
        for i in 0..out_h {
            let y = y0 + (i as f32 + 0.5) * sy - 0.5;
            for j in 0..out_w {
                let x = x0 + (j as f32 + 0.5) * sx - 0.5;
                data.extend_from_slice(&self.sample(y, x));
            }
        }
        Frame { height: out_h, width: out_w, data }
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Frame {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.crop_resize(0.0, 0.0, self.height as f32, self.width as f32, out_h, out_w)
    }

    pub fn flip_horizontal(&self) -> Frame {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set_pixel(r, c, self.pixel(r, self.width - 1 - c));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self, DatasetError> {
        Frame::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DatasetError> {
        image::save_buffer(path, &self.to_rgb8(), self.width as u32, self.height as u32, image::ColorType::Rgb8)
            .map_err(|e| DatasetError::Encode { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn load_png(path: &Path) -> Result<Self, DatasetError> {
        if !path.exists() {
            return Err(DatasetError::MissingImage(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| DatasetError::Decode { path: path.to_path_buf(), message: e.to_string() })?;
        let rgb = img.to_rgb8();
        Frame::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }

    /// Mean absolute per-channel difference.
    pub fn mean_abs_diff(&self, other: &Frame) -> f32 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f32>() / self.data.len() as f32
    }
}

fn split(pos: f32, len: usize) -> (usize, usize, f32) {
    let p = pos.clamp(0.0, (len - 1) as f32);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, p - lo as f32)
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}
