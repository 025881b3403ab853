//! Procedurally generated single-channel shape dataset.
//!
//! Every class is a parametric pattern (bars, diagonals, crosses, boxes,
//! disks, stripe and checker textures) drawn on a jittered background with
//! random offset, stroke width, contrast and mild sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::Image;
use crate::error::{PaintError, Result};

pub const MAX_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub side: usize,
    pub seed: u64,
    pub train_size: usize,
    pub held_out_size: usize,
    pub target_pool_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            side: 16,
            seed: 0,
            train_size: 4000,
            held_out_size: 500,
            target_pool_size: 2000,
        }
    }
}

/// Disjoint sample streams derived from one dataset seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
    TargetPool,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::HeldOut => 0x686f_6c64,
            Split::TargetPool => 0x7467_7470,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > MAX_CLASSES {
            return Err(PaintError::Config(format!(
                "classes must be in 2..={MAX_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.side < 8 {
            return Err(PaintError::Config(format!(
                "image side {} too small",
                self.side
            )));
        }
        Ok(())
    }

    pub fn size_of(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::HeldOut => self.held_out_size,
            Split::TargetPool => self.target_pool_size,
        }
    }

    /// Class-balanced samples (labels cycle through the classes).
    pub fn generate(&self, split: Split) -> Result<SyntheticDataset> {
        self.validate()?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ split.salt().wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let n = self.size_of(split);
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % self.classes;
            images.push(render(label, self.side, &mut rng));
            labels.push(label);
        }
        Ok(SyntheticDataset { images, labels })
    }
}

/// Draws one jittered instance of `class`.
pub fn render<R: Rng>(class: usize, side: usize, rng: &mut R) -> Image {
    let s = side as f64;
    let c = (s - 1.0) / 2.0;
    let background: f64 = rng.random_range(0.15..0.35);
    let contrast = rng.random_range(0.35..0.6);
    let dx = rng.random_range(-2.0..=2.0);
    let dy = rng.random_range(-2.0..=2.0);
    let half_width = rng.random_range(1.0..1.8);
    let extent = rng.random_range(0.3 * s..0.45 * s);
    let period = rng.random_range(3.5..4.5);
    let phase = rng.random_range(0.0..period);
    let noise = Normal::<f64>::new(0.0, 0.03).expect("valid std");

    let mut img = Image::filled(side, side, 1, 0.0);
    for y in 0..side {
        for x in 0..side {
            let u = x as f64 - c - dx;
            let v = y as f64 - c - dy;
            let inside_box = u.abs() <= extent && v.abs() <= extent;
            let on = match class {
                0 => v.abs() <= half_width && u.abs() <= extent,
                1 => u.abs() <= half_width && v.abs() <= extent,
                2 => (u - v).abs() <= half_width * 1.4 && inside_box,
                3 => (u + v).abs() <= half_width * 1.4 && inside_box,
                4 => (u.abs() <= half_width || v.abs() <= half_width) && inside_box,
                5 => {
                    ((u - v).abs() <= half_width * 1.4 || (u + v).abs() <= half_width * 1.4)
                        && inside_box
                }
                6 => u.abs() <= extent * 0.75 && v.abs() <= extent * 0.75,
                7 => {
                    let m = u.abs().max(v.abs());
                    m <= extent && m >= extent - 1.5 * half_width
                }
                8 => ((y as f64 + phase) / period).floor() as i64 % 2 == 0,
                _ => {
                    let a = ((x as f64 + phase) / period).floor() as i64;
                    let b = ((y as f64 + phase) / period).floor() as i64;
                    (a + b) % 2 == 0
                }
            };
            let base = if on {
                background + contrast
            } else {
                background
            };
            img.set(y, x, 0, (base + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    img
}
