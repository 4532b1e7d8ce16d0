use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{config_err, Result};
use crate::par;
use crate::tensor::Tensor;

/// Sub-pixel samples per axis used for antialiasing.
pub const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether `(x, y)` lies inside the shape whose `size × size` bounding box
    /// is centred on `(cx, cy)`.
    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, size: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let half = size / 2.0;
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= half * half,
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            // Apex at the top centre, base along the bottom edge.
            ShapeKind::Triangle => dy <= half && dy >= -half && dx.abs() <= (dy + half) / 2.0,
        }
    }
}

/// Parameters of the shape-classification dataset whose objects vary in scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Canvas side in pixels.
    pub canvas: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Object size range as fractions of the canvas side.
    pub scale_range: (f64, f64),
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

fn default_classes() -> usize {
    3
}

impl SyntheticSpec {
    pub fn new(canvas: usize, samples_per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            canvas,
            num_classes: 3,
            scale_range: (0.25, 0.9),
            samples_per_class,
            noise_std: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if self.num_classes != ShapeKind::ALL.len() {
            return Err(config_err!(
                "synthetic data has exactly 3 classes, got {}",
                self.num_classes
            ));
        }
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(config_err!(
                "scale range must satisfy 0 < min < max <= 1, got ({lo}, {hi})"
            ));
        }
        if lo * (self.canvas as f64) < 2.0 {
            return Err(config_err!(
                "shapes at scale {lo} span {:.2} px on a {} px canvas; at least 2 px are needed",
                lo * self.canvas as f64,
                self.canvas
            ));
        }
        if self.samples_per_class == 0 {
            return Err(config_err!("samples_per_class must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config_err!("noise_std must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Antialiased coverage of a shape on a `canvas × canvas` grid, in `[0, 1]`.
pub fn rasterize(kind: ShapeKind, canvas: usize, cx: f64, cy: f64, size: f64) -> Vec<f32> {
    let ss = SUPERSAMPLE;
    let inv = 1.0 / (ss * ss) as f32;
    let mut out = vec![0.0f32; canvas * canvas];
    for (p, px) in out.iter_mut().enumerate() {
        let (y0, x0) = ((p / canvas) as f64, (p % canvas) as f64);
        let mut hits = 0;
        for sy in 0..ss {
            for sx in 0..ss {
                let x = x0 + (sx as f64 + 0.5) / ss as f64;
                let y = y0 + (sy as f64 + 0.5) / ss as f64;
                hits += kind.contains(x, y, cx, cy, size) as usize;
            }
        }
        *px = hits as f32 * inv;
    }
    out
}

struct Draw {
    kind: ShapeKind,
    size: f64,
    cx: f64,
    cy: f64,
    noise_seed: u64,
}

/// Generates `3 · samples_per_class` single-channel images, classes
/// interleaved. Output is a pure function of `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.samples_per_class * ShapeKind::ALL.len();
    let canvas = spec.canvas as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws: Vec<Draw> = (0..n)
        .map(|i| {
            let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            let size = rng.random_range(spec.scale_range.0..=spec.scale_range.1) * canvas;
            let half = size / 2.0;
            let cx = rng.random_range(half..=canvas - half);
            let cy = rng.random_range(half..=canvas - half);
            Draw {
                kind,
                size,
                cx,
                cy,
                noise_seed: rng.random(),
            }
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let images = par::map_range(n, n > 1, |i| {
        let d = &draws[i];
        let mut img = rasterize(d.kind, spec.canvas, d.cx, d.cy, d.size);
        if spec.noise_std > 0.0 {
            let mut r = ChaCha8Rng::seed_from_u64(d.noise_seed);
            for v in &mut img {
                *v = (*v as f64 + noise.sample(&mut r)).clamp(0.0, 1.0) as f32;
            }
        }
        img
    });
    let images = Tensor::new(&[n, 1, spec.canvas, spec.canvas], images.concat())?;
    let labels = (0..n).map(|i| i % ShapeKind::ALL.len()).collect();
    let names = ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect();
    Dataset::new(images, labels, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn shapes_stay_inside_canvas() {
        let mut spec = SyntheticSpec::new(32, 20, 4);
        spec.noise_std = 0.0;
        let ds = gen_synthetic(&spec).unwrap();
        for i in 0..ds.len() {
            let img = &ds.images.data()[i * 1024..(i + 1) * 1024];
            let border: f32 = (0..32).map(|k| img[k] + img[31 * 32 + k] + img[k * 32] + img[k * 32 + 31]).sum();
            let total: f32 = img.iter().sum();
            assert!(total > 4.0, "sample {i} is nearly empty");
            assert!(border <= total);
        }
    }

    #[test]
    fn square_area_exact_when_aligned() {
        let img = rasterize(ShapeKind::Square, 16, 8.0, 8.0, 6.0);
        assert_eq!(img.iter().sum::<f32>(), 36.0);
    }

    #[test]
    fn tiny_min_scale_rejected() {
        let mut spec = SyntheticSpec::new(16, 1, 0);
        spec.scale_range = (0.1, 0.5);
        assert!(matches!(gen_synthetic(&spec), Err(Error::Config(_))));
        spec.scale_range = (0.5, 0.4);
        assert!(matches!(gen_synthetic(&spec), Err(Error::Config(_))));
    }
}
