use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Image, LabelMask, Result};

/// Sample coordinates closer than this to an integer snap onto it, so exact
/// grid-aligned transforms reproduce pixels bit-for-bit.
const SNAP: f64 = 1e-6;

fn check_target(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::Invalid(format!("resize target {out_h}x{out_w} must be positive")));
    }
    Ok(())
}

/// Half-pixel-centered source coordinate, clamped to the valid range.
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    let s = (dst as f64 + 0.5) * (src_len as f64 / dst_len as f64) - 0.5;
    s.clamp(0.0, (src_len - 1) as f64)
}

pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    check_target(out_h, out_w)?;
    let (h, w) = (img.height(), img.width());
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let mut out = Vec::with_capacity(out_h * out_w * img.channels());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for y in 0..out_h {
            let sy = source_coord(y, h, out_h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..out_w {
                let sx = source_coord(x, w, out_w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(((top * (1.0 - fy) + bot * fy) as f32).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out_h, out_w, img.channels(), out)
}

pub fn resize_nearest(mask: &LabelMask, out_h: usize, out_w: usize) -> Result<LabelMask> {
    check_target(out_h, out_w)?;
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
            out.push(mask.get(sy.min(h - 1), sx.min(w - 1)));
        }
    }
    LabelMask::new(out_h, out_w, out)
}

/// Maps every value through `1 / (1 + exp(gain * (cutoff - x)))`.
pub fn sigmoid_correction(img: &Image, gain: f32, cutoff: f32) -> Result<Image> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(DataError::Invalid(format!("sigmoid gain must be positive, got {gain}")));
    }
    if !(0.0..=1.0).contains(&cutoff) {
        return Err(DataError::Invalid(format!("sigmoid cutoff must lie in [0, 1], got {cutoff}")));
    }
    let (g, c) = (gain as f64, cutoff as f64);
    Ok(img.map(|x| (1.0 / (1.0 + (g * (c - x as f64)).exp())) as f32))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Rotations are drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Zoom factors are drawn uniformly from `[min, max]`; above 1 magnifies.
    pub zoom_range: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { max_rotation_deg: 30.0, zoom_range: (0.8, 1.2) }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(DataError::Invalid(format!(
                "max rotation must lie in [0, 180] degrees, got {}",
                self.max_rotation_deg
            )));
        }
        let (lo, hi) = self.zoom_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(DataError::Invalid(format!("zoom range [{lo}, {hi}] must satisfy 0 < min <= max")));
        }
        Ok(())
    }
}

/// A rotation about the image center followed by a zoom about the same point.
/// Positive angles turn content counter-clockwise as displayed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation_deg: f64,
    pub zoom: f64,
}

impl Transform {
    pub const IDENTITY: Self = Self { rotation_deg: 0.0, zoom: 1.0 };

    pub fn sample(params: &AugmentParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = params.max_rotation_deg;
        let rotation_deg = rng.random_range(-m..=m);
        let zoom = rng.random_range(params.zoom_range.0..=params.zoom_range.1);
        Ok(Self { rotation_deg, zoom })
    }

    /// Source coordinate `(x, y)` that output pixel `(x, y)` samples.
    fn source(&self, x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = cx + (c * dx - s * dy) / self.zoom;
        let sy = cy + (s * dx + c * dy) / self.zoom;
        (snap(sx), snap(sy))
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Applies one geometric transform to an image (bilinear) and its mask
/// (nearest). Samples falling outside the source read as 0.
pub fn apply_transform(img: &Image, mask: &LabelMask, t: &Transform) -> Result<(Image, LabelMask)> {
    let (h, w) = (img.height(), img.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(DataError::Invalid(format!(
            "mask {}x{} does not match image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let coords: Vec<(f64, f64)> = (0..h * w).map(|i| t.source(i % w, i / w, h, w)).collect();
    let mut pixels = Vec::with_capacity(h * w * img.channels());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        let at = |xx: i64, yy: i64| -> f64 {
            if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                0.0
            } else {
                plane[yy as usize * w + xx as usize] as f64
            }
        };
        for &(sx, sy) in &coords {
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            pixels.push(((top * (1.0 - fy) + bot * fy) as f32).clamp(0.0, 1.0));
        }
    }
    let labels = coords
        .iter()
        .map(|&(sx, sy)| {
            let (xx, yy) = (sx.round(), sy.round());
            if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                0
            } else {
                mask.get(yy as usize, xx as usize)
            }
        })
        .collect();
    Ok((Image::new(h, w, img.channels(), pixels)?, LabelMask::new(h, w, labels)?))
}

/// Samples a transform from `seed` and applies it to the pair.
pub fn augment(img: &Image, mask: &LabelMask, seed: u64, params: &AugmentParams) -> Result<(Image, LabelMask)> {
    apply_transform(img, mask, &Transform::sample(params, seed)?)
}
