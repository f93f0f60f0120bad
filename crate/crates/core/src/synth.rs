//! Parametric synthetic leaves: an elliptical blade crossed by a midrib and
//! lateral veins, painted in flat colors with Gaussian pixel noise.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{save_pair, DataError, Image, LabelMask, BACKGROUND, BLADE, VEINS};
use crate::derive_seed;

pub const BLADE_FRACTION: (f64, f64) = (0.2, 0.7);
pub const VEIN_FRACTION: (f64, f64) = (0.005, 0.05);

/// Attempts per pair before `generate_dataset` gives up on a seed.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible leaf geometry at {height}x{width}: {reason}")]
    Infeasible { height: usize, width: usize, reason: String },
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contrast {
    High,
    Low,
}

impl FromStr for Contrast {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Self::High),
            "low" => Ok(Self::Low),
            other => Err(SynthError::Invalid(format!("contrast must be `high` or `low`, got {other:?}"))),
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::High => "high",
            Self::Low => "low",
        })
    }
}

impl Contrast {
    /// Base `(background, blade, veins)` colors before per-leaf jitter.
    fn base_palette(self) -> Palette {
        match self {
            Self::High => Palette {
                background: [0.90, 0.90, 0.86],
                blade: [0.22, 0.46, 0.16],
                veins: [0.72, 0.80, 0.38],
            },
            Self::Low => Palette {
                background: [0.90, 0.90, 0.86],
                blade: [0.24, 0.34, 0.18],
                veins: [0.32, 0.42, 0.26],
            },
        }
    }

    fn noise_sigma(self) -> f32 {
        match self {
            Self::High => 0.05,
            Self::Low => 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub background: [f32; 3],
    pub blade: [f32; 3],
    pub veins: [f32; 3],
}

impl Palette {
    fn color(&self, label: u8) -> [f32; 3] {
        match label {
            BACKGROUND => self.background,
            BLADE => self.blade,
            _ => self.veins,
        }
    }

    pub fn vein_blade_distance(&self) -> f32 {
        self.veins.iter().zip(&self.blade).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt()
    }
}

/// Blade ellipse in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    /// Semi-axis along the midrib.
    pub major: f64,
    pub minor: f64,
    pub rotation_rad: f64,
}

impl Ellipse {
    /// Coordinates in the leaf frame: x along the midrib, y across it.
    fn to_local(self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation_rad.sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn to_image(self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.rotation_rad.sin_cos();
        (self.center.0 + c * u - s * v, self.center.1 + s * u + c * v)
    }

    /// Squared normalized radius; at most 1 inside the blade.
    fn radius2(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.to_local(x, y);
        (u / self.major).powi(2) + (v / self.minor).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafParams {
    pub blade: Ellipse,
    /// Polylines in image pixel coordinates; the first is the midrib.
    pub veins: Vec<Vec<(f64, f64)>>,
    pub stroke_px: f64,
    pub colors: Palette,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl LeafParams {
    /// Draws a leaf sized for an `h`×`w` canvas.
    pub fn random(seed: u64, contrast: Contrast, h: usize, w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hf, wf) = (h as f64, w as f64);
        let side = hf.min(wf);
        let major = side * rng.random_range(0.36..0.46);
        let minor = major * rng.random_range(0.55..0.8);
        let blade = Ellipse {
            center: (wf / 2.0 + side * rng.random_range(-0.04..0.04), hf / 2.0 + side * rng.random_range(-0.04..0.04)),
            major,
            minor,
            rotation_rad: rng.random_range(0.0..std::f64::consts::PI),
        };

        let reach = 0.88;
        let mut veins = vec![vec![blade.to_image(-reach * major, 0.0), blade.to_image(reach * major, 0.0)]];
        let pairs = rng.random_range(2..=3);
        for i in 0..pairs {
            let t = -0.55 + 1.1 * (i as f64 + 0.5) / pairs as f64 + rng.random_range(-0.05..0.05);
            let u0 = t * major;
            for side_sign in [-1.0, 1.0] {
                let phi = rng.random_range(30f64..55.0).to_radians();
                let (du, dv) = (phi.cos(), side_sign * phi.sin());
                // Solves ((u0 + s du)/a)^2 + (s dv / b)^2 = reach^2 for s > 0.
                let (a2, b2) = (major * major, minor * minor);
                let qa = du * du / a2 + dv * dv / b2;
                let qb = 2.0 * u0 * du / a2;
                let qc = u0 * u0 / a2 - reach * reach;
                let s = (-qb + (qb * qb - 4.0 * qa * qc).max(0.0).sqrt()) / (2.0 * qa);
                let bend = rng.random_range(0.9..1.1);
                let mid = (u0 + 0.5 * s * du * bend, 0.5 * s * dv);
                veins.push(vec![
                    blade.to_image(u0, 0.0),
                    blade.to_image(mid.0, mid.1),
                    blade.to_image(u0 + s * du, s * dv),
                ]);
            }
        }

        let mut colors = contrast.base_palette();
        for c in [&mut colors.background, &mut colors.blade] {
            let shift: f32 = rng.random_range(-0.03..0.03);
            c.iter_mut().for_each(|v| *v = (*v + shift).clamp(0.0, 1.0));
        }
        let base = contrast.base_palette();
        for k in 0..3 {
            colors.veins[k] = (colors.blade[k] + base.veins[k] - base.blade[k]).clamp(0.0, 1.0);
        }

        Self {
            blade,
            veins,
            stroke_px: (side * 0.018).max(1.1) * rng.random_range(0.9..1.15),
            colors,
            noise_sigma: contrast.noise_sigma(),
            seed,
        }
    }
}

fn segment_distance2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ux, uy) = (b.0 - a.0, b.1 - a.1);
    let len2 = ux * ux + uy * uy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * ux + (p.1 - a.1) * uy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (p.0 - a.0 - t * ux, p.1 - a.1 - t * uy);
    dx * dx + dy * dy
}

/// Rasterizes the label mask at pixel centers with priority veins > blade >
/// background. Vein strokes are clipped to the blade.
pub fn rasterize(params: &LeafParams, h: usize, w: usize) -> Result<LabelMask> {
    let half2 = (params.stroke_px / 2.0).powi(2);
    let mut labels = vec![BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            if params.blade.radius2(p.0, p.1) > 1.0 {
                continue;
            }
            let on_vein = params
                .veins
                .iter()
                .any(|line| line.windows(2).any(|s| segment_distance2(p, s[0], s[1]) <= half2));
            labels[y * w + x] = if on_vein { VEINS } else { BLADE };
        }
    }
    Ok(LabelMask::new(h, w, labels)?)
}

/// Renders one leaf. Fails when the measured class fractions leave the
/// blade or vein bounds.
pub fn generate(params: &LeafParams, h: usize, w: usize) -> Result<(Image, LabelMask)> {
    if h == 0 || w == 0 {
        return Err(SynthError::Invalid(format!("canvas {h}x{w} must be positive")));
    }
    if !(params.noise_sigma >= 0.0 && params.noise_sigma.is_finite()) {
        return Err(SynthError::Invalid(format!("noise sigma must be non-negative, got {}", params.noise_sigma)));
    }
    let mask = rasterize(params, h, w)?;
    let counts = mask.counts(3);
    let n = (h * w) as f64;
    let (blade, veins) = ((counts[1] + counts[2]) as f64 / n, counts[2] as f64 / n);
    let infeasible = |reason: String| SynthError::Infeasible { height: h, width: w, reason };
    if !(BLADE_FRACTION.0..=BLADE_FRACTION.1).contains(&blade) {
        return Err(infeasible(format!("blade covers {blade:.4} of the canvas")));
    }
    if !(VEIN_FRACTION.0..=VEIN_FRACTION.1).contains(&veins) {
        return Err(infeasible(format!("veins cover {veins:.4} of the canvas")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &[1]));
    let noise = Normal::new(0.0f32, params.noise_sigma).map_err(|e| SynthError::Invalid(e.to_string()))?;
    let plane = h * w;
    let mut pixels = vec![0.0f32; 3 * plane];
    for (i, &l) in mask.labels().iter().enumerate() {
        let color = params.colors.color(l);
        for c in 0..3 {
            let jitter = if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels[c * plane + i] = (color[c] + jitter).clamp(0.0, 1.0);
        }
    }
    Ok((Image::new(h, w, 3, pixels)?, mask))
}

/// Leaf for pair `index` of a dataset, retrying derived seeds until the
/// geometry satisfies the fraction bounds.
pub fn dataset_leaf(index: usize, h: usize, w: usize, contrast: Contrast, seed: u64) -> Result<(Image, LabelMask)> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let params = LeafParams::random(derive_seed(seed, &[index as u64, attempt]), contrast, h, w);
        match generate(&params, h, w) {
            Ok(pair) => return Ok(pair),
            Err(e @ SynthError::Infeasible { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Writes `n` pairs named `leaf_0000`, `leaf_0001`, ... into `dir`.
pub fn generate_dataset(n: usize, h: usize, w: usize, contrast: Contrast, seed: u64, dir: &Path) -> Result<()> {
    if n == 0 {
        return Err(SynthError::Invalid("dataset size must be at least 1".into()));
    }
    for i in 0..n {
        let (image, mask) = dataset_leaf(i, h, w, contrast, seed)?;
        save_pair(dir, &format!("leaf_{i:04}"), &image, Some(&mask))?;
    }
    Ok(())
}
