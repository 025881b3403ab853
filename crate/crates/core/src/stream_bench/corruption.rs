//! Five corruption families at five severities each.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::Image;
use crate::error::{PaintError, Result};

pub const NOISE_STD: [f64; 5] = [0.04, 0.08, 0.12, 0.16, 0.20];
/// Number of 3×3 box-blur passes.
pub const BLUR_PASSES: [usize; 5] = [1, 2, 3, 4, 5];
/// Fraction of the original deviation from the image mean that survives.
pub const CONTRAST_FACTOR: [f64; 5] = [0.6, 0.45, 0.33, 0.24, 0.16];
/// Side of the low-resolution grid the image is averaged onto.
pub const PIXELATE_GRID: usize = 4;
/// Weight of the pixelated image in the blend with the original.
pub const PIXELATE_MIX: [f64; 5] = [0.2, 0.35, 0.5, 0.65, 0.8];
/// Side of each gray occluding square, and how many are drawn.
pub const OCCLUSION_SIDE: [usize; 5] = [4, 5, 6, 7, 8];
pub const OCCLUSION_COUNT: [usize; 5] = [1, 1, 1, 1, 2];
pub const OCCLUSION_FILL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    BoxBlur,
    ContrastReduction,
    Pixelate,
    Occlusion,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::ContrastReduction,
        CorruptionKind::Pixelate,
        CorruptionKind::Occlusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::BoxBlur => "box-blur",
            CorruptionKind::ContrastReduction => "contrast-reduction",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Occlusion => "occlusion",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = PaintError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PaintError::UnknownCorruption(s.to_string()))
    }
}

/// A corruption kind at a severity; severity 0 is the clean source domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl DomainSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(PaintError::Severity(severity));
        }
        Ok(Self { kind, severity })
    }

    pub fn is_clean(&self) -> bool {
        self.severity == 0
    }

    /// Applies the corruption, passing clean domains through unchanged.
    pub fn apply<R: Rng>(&self, image: &Image, rng: &mut R) -> Result<Image> {
        if self.is_clean() {
            Ok(image.clone())
        } else {
            corrupt(image, *self, rng)
        }
    }
}

impl fmt::Display for DomainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            f.write_str("clean")
        } else {
            write!(f, "{}@{}", self.kind, self.severity)
        }
    }
}

pub fn corrupt<R: Rng>(image: &Image, spec: DomainSpec, rng: &mut R) -> Result<Image> {
    if !(1..=5).contains(&spec.severity) {
        return Err(PaintError::Severity(spec.severity));
    }
    let s = usize::from(spec.severity) - 1;
    let mut out = match spec.kind {
        CorruptionKind::GaussianNoise => gaussian_noise(image, NOISE_STD[s], rng),
        CorruptionKind::BoxBlur => {
            (0..BLUR_PASSES[s]).fold(image.clone(), |im, _| box_blur(&im, 3))
        }
        CorruptionKind::ContrastReduction => reduce_contrast(image, CONTRAST_FACTOR[s]),
        CorruptionKind::Pixelate => blend(image, &pixelate(image, PIXELATE_GRID), PIXELATE_MIX[s]),
        CorruptionKind::Occlusion => occlude(image, OCCLUSION_SIDE[s], OCCLUSION_COUNT[s], rng),
    };
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

pub fn gaussian_noise<R: Rng>(image: &Image, std: f64, rng: &mut R) -> Image {
    let dist = Normal::new(0.0, std).expect("non-negative std");
    let mut out = image.clone();
    out.data.iter_mut().for_each(|v| *v += dist.sample(rng));
    out
}

/// Mean over a `size × size` window clipped at the borders; size 1 is the
/// identity.
pub fn box_blur(image: &Image, size: usize) -> Image {
    let lo = (size.max(1) - 1) / 2;
    let hi = size.max(1) / 2;
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let ys = y.saturating_sub(lo)..=(y + hi).min(image.height - 1);
            let xs = x.saturating_sub(lo)..=(x + hi).min(image.width - 1);
            for c in 0..image.channels {
                let mut total = 0.0;
                let mut n = 0usize;
                for yy in ys.clone() {
                    for xx in xs.clone() {
                        total += image.get(yy, xx, c);
                        n += 1;
                    }
                }
                out.set(y, x, c, total / n as f64);
            }
        }
    }
    out
}

pub fn reduce_contrast(image: &Image, factor: f64) -> Image {
    let mean = image.data.iter().sum::<f64>() / image.data.len() as f64;
    let mut out = image.clone();
    out.data
        .iter_mut()
        .for_each(|v| *v = mean + factor * (*v - mean));
    out
}

/// Averages onto a `grid × grid` lattice and maps back by nearest cell.
pub fn pixelate(image: &Image, grid: usize) -> Image {
    let cell_y = |y: usize| y * grid / image.height;
    let cell_x = |x: usize| x * grid / image.width;
    let mut sums = vec![0.0; grid * grid * image.channels];
    let mut counts = vec![0usize; grid * grid];
    for y in 0..image.height {
        for x in 0..image.width {
            let cell = cell_y(y) * grid + cell_x(x);
            counts[cell] += 1;
            for c in 0..image.channels {
                sums[cell * image.channels + c] += image.get(y, x, c);
            }
        }
    }
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let cell = cell_y(y) * grid + cell_x(x);
            for c in 0..image.channels {
                out.set(
                    y,
                    x,
                    c,
                    sums[cell * image.channels + c] / counts[cell] as f64,
                );
            }
        }
    }
    out
}

/// `(1 − w)·a + w·b` pixelwise.
pub fn blend(a: &Image, b: &Image, w: f64) -> Image {
    let mut out = a.clone();
    out.data
        .iter_mut()
        .zip(&b.data)
        .for_each(|(x, y)| *x = (1.0 - w) * *x + w * y);
    out
}

pub fn occlude<R: Rng>(image: &Image, side: usize, count: usize, rng: &mut R) -> Image {
    let mut out = image.clone();
    let side = side.min(image.height).min(image.width);
    for _ in 0..count {
        let top = rng.random_range(0..=image.height - side);
        let left = rng.random_range(0..=image.width - side);
        for y in top..top + side {
            for x in left..left + side {
                for c in 0..image.channels {
                    out.set(y, x, c, OCCLUSION_FILL);
                }
            }
        }
    }
    out
}

/// Mean squared pixel difference between two images.
pub fn distortion(a: &Image, b: &Image) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64
}
