//! Supervised source training on clean data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::SyntheticDataset;
use crate::diffcore::{Graph, Tensor};
use crate::encoder::{argmax, patchify, EncoderConfig, EncoderParams, Trainable};
use crate::error::{PaintError, Result};
use crate::objectives;

/// Minimum held-out clean accuracy for a usable source model.
pub const CALIBRATION_FLOOR: f64 = 0.90;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainOptions {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Abort with a calibration error below this held-out accuracy.
    pub min_accuracy: Option<f64>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            epochs: 8,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
            min_accuracy: Some(CALIBRATION_FLOOR),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub params: EncoderParams,
    pub clean_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Adam state for one tensor.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Accuracy of the prompt-free model on labelled data.
pub fn evaluate(params: &EncoderParams, data: &SyntheticDataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(PaintError::EmptyBatch);
    }
    let mut correct = 0;
    for (imgs, labels) in data
        .images
        .chunks(batch_size)
        .zip(data.labels.chunks(batch_size))
    {
        let (_, probs) = params.infer(imgs, None)?;
        correct += (0..imgs.len())
            .filter(|&r| argmax(probs.row(r)) == labels[r])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

/// Cross-entropy training of every encoder parameter with Adam.
pub fn pretrain_source(
    train: &SyntheticDataset,
    held_out: &SyntheticDataset,
    options: &PretrainOptions,
) -> Result<PretrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut params = EncoderParams::init(options.encoder.clone(), &mut rng)?;
    let mut moments: Vec<Moments> = params
        .tensors_mut()
        .iter()
        .map(|t| Moments {
            m: vec![0.0; t.numel()],
            v: vec![0.0; t.numel()],
        })
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0i32;
    let mut epoch_losses = Vec::with_capacity(options.epochs);
    let total_steps = (options.epochs * train.len().div_ceil(options.batch_size.max(1))).max(1);

    for _ in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(options.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let vars = params.bind(&mut g, Trainable::Everything);
            let px = g.constant(patchify(&images, &params.config)?);
            let out = vars.forward_images(&mut g, px, images.len(), None)?;
            let target = one_hot(&labels, params.config.classes)?;
            let loss = objectives::graph::interpolation_consistency(&mut g, out.probs, &target)?;
            loss_sum += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?;

            step += 1;
            // Cosine decay to zero over the whole run.
            let progress = f64::from(step - 1) / total_steps as f64;
            let lr = options.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let c1 = 1.0 - BETA1.powi(step);
            let c2 = 1.0 - BETA2.powi(step);
            for ((tensor, var), mo) in params
                .tensors_mut()
                .into_iter()
                .zip(vars.all())
                .zip(&mut moments)
            {
                let grad = grads.get(var).expect("all parameters are trainable");
                for (((w, g), m), v) in tensor
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(&mut mo.m)
                    .zip(&mut mo.v)
                {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }

    let clean_accuracy = evaluate(&params, held_out, 256)?;
    if let Some(required) = options.min_accuracy {
        if clean_accuracy < required {
            return Err(PaintError::Calibration {
                accuracy: clean_accuracy,
                required,
            });
        }
    }
    Ok(PretrainReport {
        params,
        clean_accuracy,
        epoch_losses,
    })
}
