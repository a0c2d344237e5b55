//! Stochastic two-view generation for self-supervised training.
//!
//! A view is produced by sampling a [`ViewParams`] from the policy and then
//! applying it deterministically: random resized crop, optional horizontal
//! flip, optional rotation, additive brightness, multiplicative contrast
//! around the image mean, optional grayscale, clamp to `[0, 1]`.
//! Labels never pass through here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::frame::Frame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Crop area as a fraction of the frame area, `(min, max)`.
    pub crop_scale_range: (f32, f32),
    pub flip_probability: f32,
    /// Maximum additive brightness offset.
    pub brightness_jitter: f32,
    /// Maximum relative contrast change.
    pub contrast_jitter: f32,
    pub grayscale_probability: f32,
    /// Maximum absolute rotation in degrees; 0 disables rotation.
    pub rotation_degrees: f32,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale_range: (0.5, 1.0),
            flip_probability: 0.5,
            brightness_jitter: 0.3,
            contrast_jitter: 0.3,
            grayscale_probability: 0.1,
            rotation_degrees: 0.0,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// Every transform disabled.
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_scale_range: (1.0, 1.0),
            flip_probability: 0.0,
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
            grayscale_probability: 0.0,
            rotation_degrees: 0.0,
            seed: 0,
        }
    }

    /// Corridor screens have side-sensitive variables, so no flips there.
    pub fn corridor() -> Self {
        AugmentationPolicy { flip_probability: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(ConfigError::Invalid(format!("crop_scale_range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})")));
        }
        for (name, p) in [("flip_probability", self.flip_probability), ("grayscale_probability", self.grayscale_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, v) in [
            ("brightness_jitter", self.brightness_jitter),
            ("contrast_jitter", self.contrast_jitter),
            ("rotation_degrees", self.rotation_degrees),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Concrete draw of every random choice for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewParams {
    /// `(y0, x0, height, width)` in source edge coordinates.
    pub crop: (f32, f32, f32, f32),
    pub scale: f32,
    pub flip: bool,
    pub rotation_radians: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub grayscale: bool,
}

/// Independent generator for one sample in one epoch.
pub fn view_rng(seed: u64, epoch: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(sample);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.gen::<f32>()
}

/// Square-aspect crop box covering `scale` of the frame area, placed at
/// fractional offsets `(u, v)` of the free room.
pub fn crop_box(height: usize, width: usize, scale: f32, u: f32, v: f32) -> (f32, f32, f32, f32) {
    let side = scale.sqrt();
    let (h, w) = (height as f32 * side, width as f32 * side);
    let y0 = (height as f32 - h) * v;
    let x0 = (width as f32 - w) * u;
    (y0, x0, h, w)
}

pub fn sample_view_params(policy: &AugmentationPolicy, height: usize, width: usize, rng: &mut ChaCha8Rng) -> ViewParams {
    let (lo, hi) = policy.crop_scale_range;
    let scale = uniform(rng, lo, hi);
    let u = rng.gen::<f32>();
    let v = rng.gen::<f32>();
    let flip = rng.gen::<f32>() < policy.flip_probability;
    let rot = uniform(rng, -policy.rotation_degrees, policy.rotation_degrees).to_radians();
    let brightness = uniform(rng, -policy.brightness_jitter, policy.brightness_jitter);
    let contrast = 1.0 + uniform(rng, -policy.contrast_jitter, policy.contrast_jitter);
    let grayscale = rng.gen::<f32>() < policy.grayscale_probability;
    ViewParams {
        crop: crop_box(height, width, scale, u, v),
        scale,
        flip,
        rotation_radians: rot,
        brightness,
        contrast,
        grayscale,
    }
}

fn rotate(frame: &Frame, radians: f32) -> Frame {
    let (h, w) = (frame.height(), frame.width());
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (s, c) = radians.sin_cos();
    let mut out = frame.clone();
    for r in 0..h {
        for q in 0..w {
            let (dy, dx) = (r as f32 - cy, q as f32 - cx);
            let sy = cy + c * dy - s * dx;
            let sx = cx + s * dy + c * dx;
            out.set_pixel(r, q, frame.sample(sy, sx));
        }
    }
    out
}

/// Applies a sampled view to `frame`, producing an `out_h × out_w` frame.
pub fn apply_view(frame: &Frame, p: &ViewParams, out_h: usize, out_w: usize) -> Frame {
    let (y0, x0, h, w) = p.crop;
    let mut f = frame.crop_resize(y0, x0, h, w, out_h, out_w);
    if p.flip {
        f = f.flip_horizontal();
    }
    if p.rotation_radians != 0.0 {
        f = rotate(&f, p.rotation_radians);
    }
    if p.brightness != 0.0 {
        f.data_mut().iter_mut().for_each(|v| *v += p.brightness);
    }
    if p.contrast != 1.0 {
        let mean = f.data().iter().sum::<f32>() / f.data().len() as f32;
        f.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * p.contrast + mean);
    }
    if p.grayscale {
        for px in f.data_mut().chunks_exact_mut(3) {
            let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.copy_from_slice(&[y, y, y]);
        }
    }
    f.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    f
}

/// Random crop of `scale_range` area, resized to `out_h × out_w`.
pub fn random_resized_crop(frame: &Frame, scale_range: (f32, f32), out_h: usize, out_w: usize, rng: &mut ChaCha8Rng) -> Frame {
    let scale = uniform(rng, scale_range.0, scale_range.1);
    let (y0, x0, h, w) = crop_box(frame.height(), frame.width(), scale, rng.gen(), rng.gen());
    frame.crop_resize(y0, x0, h, w, out_h, out_w)
}

/// Two independent views of `frame` at `out_h × out_w`.
pub fn make_views(frame: &Frame, policy: &AugmentationPolicy, out_h: usize, out_w: usize, rng: &mut ChaCha8Rng) -> (Frame, Frame) {
    let a = sample_view_params(policy, frame.height(), frame.width(), rng);
    let b = sample_view_params(policy, frame.height(), frame.width(), rng);
    (apply_view(frame, &a, out_h, out_w), apply_view(frame, &b, out_h, out_w))
}
