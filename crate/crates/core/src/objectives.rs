//! Adaptation objectives.
//!
//! Plain-value functions operate on probability rows and are used for
//! reporting and tests; the [`graph`] submodule builds the same quantities
//! as differentiable nodes. Logs are taken of probabilities clamped to
//! [`PROB_FLOOR`] in both paths.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::diffcore::{Tensor, PROB_FLOOR};
use crate::encoder::{argmax, Image};
use crate::error::{PaintError, Result};

const SIMPLEX_TOL: f64 = 1e-9;

/// Natural-log entropy of a probability vector.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|v| *v < 0.0) {
        return Err(PaintError::NotNormalized { sum });
    }
    Ok(-p.iter().map(|&v| v * v.max(PROB_FLOOR).ln()).sum::<f64>())
}

fn rows_of(probs: &Tensor) -> impl Iterator<Item = &[f64]> {
    let n = probs.shape().first().copied().unwrap_or(0);
    (0..n).map(move |r| probs.row(r))
}

/// Mean per-sample entropy, `L_ent`.
pub fn entropy_only_loss(probs: &Tensor) -> Result<f64> {
    let n = probs.shape()[0];
    if n == 0 {
        return Err(PaintError::EmptyBatch);
    }
    let mut total = 0.0;
    for row in rows_of(probs) {
        total += entropy(row)?;
    }
    Ok(total / n as f64)
}

/// Average prediction over the batch.
pub fn mean_prediction(probs: &Tensor) -> Vec<f64> {
    let n = probs.shape()[0];
    let k = probs.shape()[1];
    let mut mean = vec![0.0; k];
    for row in rows_of(probs) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    mean
}

/// `L_mi`: mean per-sample entropy minus the entropy of the mean prediction.
pub fn mutual_info_loss(probs: &Tensor) -> Result<f64> {
    let mean_entropy = entropy_only_loss(probs)?;
    let marginal = mean_prediction(probs);
    let total: f64 = marginal.iter().sum();
    // Renormalize away the rounding of the batch average.
    let marginal: Vec<f64> = marginal.iter().map(|v| v / total).collect();
    Ok(mean_entropy - entropy(&marginal)?)
}

/// Confident samples of a batch and their hard labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Keeps every row whose maximum probability is strictly above `phi`.
pub fn assign_pseudo_labels(probs: &Tensor, phi: f64) -> PseudoLabelSet {
    let mut set = PseudoLabelSet::default();
    for (i, row) in rows_of(probs).enumerate() {
        let label = argmax(row);
        if row[label] > phi {
            set.indices.push(i);
            set.labels.push(label);
        }
    }
    set
}

/// Blended samples with their soft labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MixedBatch {
    pub images: Vec<Image>,
    pub soft_labels: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
    /// Batch positions `(i, j)` that produced each blended sample.
    pub pairs: Vec<(usize, usize)>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn soft_label_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_rows(&self.soft_labels)?)
    }
}

/// `λ·a + (1 − λ)·b`, pixelwise.
pub fn mix_images(a: &Image, b: &Image, lambda: f64) -> Result<Image> {
    if a.data.len() != b.data.len() {
        return Err(PaintError::Dimension {
            expected: a.data.len(),
            got: b.data.len(),
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (lambda * x + (1.0 - lambda) * y).clamp(0.0, 1.0))
        .collect();
    Image::new(a.height, a.width, a.channels, data)
}

/// Convex blend of two one-hot labels.
pub fn mix_labels(a: usize, b: usize, lambda: f64, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[a] += lambda;
    y[b] += 1.0 - lambda;
    y
}

/// Pairs the pseudo-labelled subset with a random permutation of itself
/// and blends each pair with `λ ~ Beta(α, α)`.
pub fn build_mixed_batch<R: Rng>(
    images: &[Image],
    labels: &PseudoLabelSet,
    classes: usize,
    rng: &mut R,
    alpha: f64,
) -> Result<MixedBatch> {
    let m = labels.len();
    if m < 2 {
        return Ok(MixedBatch::default());
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| PaintError::Config(format!("Beta({alpha}, {alpha}): {e}")))?;
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(rng);
    if perm.iter().enumerate().any(|(i, p)| i == *p) {
        perm.shuffle(rng);
    }
    let mut out = MixedBatch::default();
    for (a, &b) in perm.iter().enumerate() {
        let lambda: f64 = beta.sample(rng);
        let (i, j) = (labels.indices[a], labels.indices[b]);
        out.images.push(mix_images(&images[i], &images[j], lambda)?);
        out.soft_labels.push(mix_labels(
            labels.labels[a],
            labels.labels[b],
            lambda,
            classes,
        ));
        out.lambdas.push(lambda);
        out.pairs.push((i, j));
    }
    Ok(out)
}

/// Mean soft cross-entropy between mixed-sample predictions and soft labels.
pub fn interpolation_consistency_loss(
    mixed_probs: &Tensor,
    soft_labels: &[Vec<f64>],
) -> Result<f64> {
    if soft_labels.is_empty() {
        return Ok(0.0);
    }
    if mixed_probs.shape()[0] != soft_labels.len() {
        return Err(PaintError::Dimension {
            expected: soft_labels.len(),
            got: mixed_probs.shape()[0],
        });
    }
    let mut total = 0.0;
    for (p, y) in rows_of(mixed_probs).zip(soft_labels) {
        total -= p
            .iter()
            .zip(y)
            .map(|(pk, yk)| yk * pk.max(PROB_FLOOR).ln())
            .sum::<f64>();
    }
    Ok(total / soft_labels.len() as f64)
}

pub fn combined_loss(l_mi: f64, l_ic: f64, beta: f64) -> f64 {
    l_mi + beta * l_ic
}

/// Differentiable versions of the objectives.
pub mod graph {
    use crate::diffcore::{Graph, Result, Tensor, Var, PROB_FLOOR};

    /// Per-row entropy of `[B, K]` probabilities, shape `[B]`.
    pub fn row_entropy(g: &mut Graph, probs: Var) -> Result<Var> {
        let safe = g.clamp_min(probs, PROB_FLOOR);
        let logs = g.log(safe)?;
        let plogp = g.mul(probs, logs)?;
        let axis = g.shape(probs).len() - 1;
        let s = g.sum_axis(plogp, axis)?;
        Ok(g.scale(s, -1.0))
    }

    pub fn entropy_only(g: &mut Graph, probs: Var) -> Result<Var> {
        let h = row_entropy(g, probs)?;
        Ok(g.mean_all(h))
    }

    pub fn mutual_info(g: &mut Graph, probs: Var) -> Result<Var> {
        let mean_entropy = entropy_only(g, probs)?;
        let marginal = g.mean_axis(probs, 0)?;
        let marginal_entropy = row_entropy(g, marginal)?;
        g.sub(mean_entropy, marginal_entropy)
    }

    pub fn interpolation_consistency(
        g: &mut Graph,
        mixed_probs: Var,
        soft_labels: &Tensor,
    ) -> Result<Var> {
        let y = g.constant(soft_labels.clone());
        let safe = g.clamp_min(mixed_probs, PROB_FLOOR);
        let logs = g.log(safe)?;
        let picked = g.mul(y, logs)?;
        let per_row = g.sum_axis(picked, 1)?;
        let mean = g.mean_all(per_row);
        Ok(g.scale(mean, -1.0))
    }

    pub fn combined(g: &mut Graph, l_mi: Var, l_ic: Var, beta: f64) -> Result<Var> {
        let weighted = g.scale(l_ic, beta);
        g.add(l_mi, weighted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-12);
        assert!(matches!(
            entropy(&[0.5, 0.6]),
            Err(PaintError::NotNormalized { .. })
        ));
    }

    #[test]
    fn mutual_info_examples() {
        let l = mutual_info_loss(&rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!((l + LN_2).abs() < 1e-9);
        assert!(
            mutual_info_loss(&rows(&[&[0.25; 4], &[0.25; 4]]))
                .unwrap()
                .abs()
                < 1e-9
        );
        assert!(
            mutual_info_loss(&rows(&[&[0.0, 1.0], &[0.0, 1.0]]))
                .unwrap()
                .abs()
                < 1e-9
        );
    }

    #[test]
    fn entropy_only_examples() {
        assert_eq!(
            entropy_only_loss(&rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(),
            0.0
        );
        let u = vec![0.1; 10];
        assert!((entropy_only_loss(&rows(&[&u, &u])).unwrap() - 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn pseudo_label_examples() {
        let p = rows(&[&[0.7, 0.2, 0.1], &[0.5, 0.3, 0.2]]);
        let set = assign_pseudo_labels(&p, 0.6);
        assert_eq!(set.indices, vec![0]);
        assert_eq!(set.labels, vec![0]);
        assert_eq!(assign_pseudo_labels(&p, 0.0).len(), 2);
        // strict inequality
        assert!(assign_pseudo_labels(&rows(&[&[0.6, 0.4]]), 0.6).is_empty());
    }

    #[test]
    fn mixing_examples() {
        let a = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let b = Image::new(1, 2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(mix_images(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mix_images(&a, &b, 0.5).unwrap().data, vec![0.5, 0.5]);
        assert_eq!(mix_labels(2, 0, 1.0, 3), vec![0.0, 0.0, 1.0]);
        let y = mix_labels(2, 0, 0.25, 3);
        assert_eq!(y, vec![0.75, 0.0, 0.25]);
    }

    #[test]
    fn mixed_batch_needs_two_confident_samples() {
        let imgs = vec![Image::filled(2, 2, 1, 0.1), Image::filled(2, 2, 1, 0.9)];
        let one = PseudoLabelSet {
            indices: vec![1],
            labels: vec![0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_mixed_batch(&imgs, &one, 3, &mut rng, 1.0)
            .unwrap()
            .is_empty());
        let two = PseudoLabelSet {
            indices: vec![0, 1],
            labels: vec![2, 0],
        };
        let mb = build_mixed_batch(&imgs, &two, 3, &mut rng, 1.0).unwrap();
        assert_eq!(mb.len(), 2);
        for (y, lam) in mb.soft_labels.iter().zip(&mb.lambdas) {
            assert!((0.0..=1.0).contains(lam));
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(y.iter().filter(|v| **v != 0.0).count() <= 2);
        }
    }

    #[test]
    fn unit_beta_draws_look_uniform() {
        let n = 400;
        let imgs: Vec<Image> = (0..n)
            .map(|i| Image::filled(1, 1, 1, i as f64 / n as f64))
            .collect();
        let labels = PseudoLabelSet {
            indices: (0..n).collect(),
            labels: vec![0; n],
        };
        let mb =
            build_mixed_batch(&imgs, &labels, 2, &mut ChaCha8Rng::seed_from_u64(4), 1.0).unwrap();
        let mean = mb.lambdas.iter().sum::<f64>() / n as f64;
        let below_quarter = mb.lambdas.iter().filter(|l| **l < 0.25).count() as f64 / n as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
        assert!((below_quarter - 0.25).abs() < 0.06, "{below_quarter}");
    }

    #[test]
    fn consistency_examples() {
        let l = interpolation_consistency_loss(&rows(&[&[0.5, 0.5]]), &[vec![1.0, 0.0]]).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
        assert_eq!(
            interpolation_consistency_loss(&rows(&[&[1.0, 0.0]]), &[vec![1.0, 0.0]]).unwrap(),
            0.0
        );
        assert_eq!(
            interpolation_consistency_loss(&Tensor::zeros(&[0, 2]), &[]).unwrap(),
            0.0
        );
    }

    #[test]
    fn combined_examples() {
        assert!((combined_loss(-0.5, 0.3, 1.0) + 0.2).abs() < 1e-15);
        assert_eq!(combined_loss(-0.5, 0.3, 0.0), -0.5);
        assert_eq!(combined_loss(-0.5, 0.0, 1.0), -0.5);
    }

    #[test]
    fn graph_and_value_paths_agree() {
        use crate::diffcore::Graph;
        let p = rows(&[&[0.7, 0.2, 0.1], &[0.1, 0.1, 0.8], &[0.3, 0.3, 0.4]]);
        let y = vec![
            vec![0.4, 0.0, 0.6],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.5],
        ];
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let mi = graph::mutual_info(&mut g, pv).unwrap();
        let ent = graph::entropy_only(&mut g, pv).unwrap();
        let ic =
            graph::interpolation_consistency(&mut g, pv, &Tensor::from_rows(&y).unwrap()).unwrap();
        assert!((g.value(mi).item() - mutual_info_loss(&p).unwrap()).abs() < 1e-12);
        assert!((g.value(ent).item() - entropy_only_loss(&p).unwrap()).abs() < 1e-12);
        assert!(
            (g.value(ic).item() - interpolation_consistency_loss(&p, &y).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn mixup_endpoints_reduce_to_plain_cross_entropy() {
        let p = rows(&[&[0.2, 0.5, 0.3]]);
        let ce_first = -(0.5f64).ln();
        let ce_second = -(0.3f64).ln();
        let l1 = interpolation_consistency_loss(&p, &[mix_labels(1, 2, 1.0, 3)]).unwrap();
        let l0 = interpolation_consistency_loss(&p, &[mix_labels(1, 2, 0.0, 3)]).unwrap();
        assert!((l1 - ce_first).abs() < 1e-12);
        assert!((l0 - ce_second).abs() < 1e-12);
    }
}
