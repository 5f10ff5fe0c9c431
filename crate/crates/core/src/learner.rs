//! Linear softmax classifier used as the adapting model.
//!
//! Parameters are stored flat: the `classes x features` weight matrix in
//! row-major order followed by the `classes` biases. Adaptation uses one of
//! two unsupervised losses on the model's own predictions:
//!
//! - entropy minimization, mean over the batch of `-sum_k p_k ln(p_k + 1e-12)`;
//! - robust pseudo-labeling, mean of `(1 - p_y^q) / q` where `y` is the
//!   model's argmax, held fixed while differentiating.

use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{ConfidenceReading, Prediction};
use crate::stream::LabeledBatch;

const LOG_GUARD: f64 = 1e-12;

/// Flat real-valued model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major `rows x dim` feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Dimensions of a linear softmax classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub classes: usize,
    pub features: usize,
}

impl Shape {
    pub fn new(classes: usize, features: usize) -> Result<Self> {
        if classes < 2 || features == 0 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes and 1 feature, got {classes} x {features}"
            )));
        }
        Ok(Self { classes, features })
    }

    pub fn num_params(&self) -> usize {
        self.classes * (self.features + 1)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn check_features(&self, x: &Features) -> Result<()> {
        if x.dim() != self.features {
            return Err(Error::DimensionMismatch {
                expected: self.features,
                got: x.dim(),
            });
        }
        if x.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    fn logits_into(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        let bias = &theta[self.classes * self.features..];
        for (k, z) in out.iter_mut().enumerate() {
            let w = &theta[k * self.features..(k + 1) * self.features];
            *z = bias[k] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Class probabilities for one feature vector.
    pub fn softmax_forward(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        if x.len() != self.features {
            return Err(Error::DimensionMismatch {
                expected: self.features,
                got: x.len(),
            });
        }
        if let Some(&v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature",
                value: v,
            });
        }
        let mut p = vec![0.0; self.classes];
        self.logits_into(theta, x, &mut p);
        if let Some(&v) = p.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "logit",
                value: v,
            });
        }
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Argmax class and its probability for every row; ties go to the lowest
    /// class index.
    pub fn predict(&self, theta: &[f64], x: &Features) -> Result<Vec<Prediction>> {
        Ok(self.predict_with_probs(theta, x)?.0)
    }

    /// Predictions together with the row-major `rows x classes` probabilities.
    pub fn predict_with_probs(
        &self,
        theta: &[f64],
        x: &Features,
    ) -> Result<(Vec<Prediction>, Vec<f64>)> {
        self.check_theta(theta)?;
        self.check_features(x)?;
        let mut probs = vec![0.0; x.len() * self.classes];
        let preds = x
            .rows()
            .zip(probs.chunks_exact_mut(self.classes))
            .map(|(row, p)| {
                self.logits_into(theta, row, p);
                softmax_in_place(p);
                argmax(p)
            })
            .collect();
        Ok((preds, probs))
    }

    /// Fraction of rows whose argmax matches `labels`.
    pub fn accuracy(&self, theta: &[f64], x: &Features, labels: &[usize]) -> Result<f64> {
        let preds = self.predict(theta, x)?;
        Ok(prediction_accuracy(&preds, labels))
    }

    /// Shared backward pass: `dz` receives the per-row probabilities and must
    /// overwrite them with dloss/dlogits.
    fn backprop<F>(&self, theta: &[f64], x: &Features, mut dz: F) -> Result<ParameterVector>
    where
        F: FnMut(&mut [f64]),
    {
        self.check_theta(theta)?;
        self.check_features(x)?;
        let (k_n, d) = (self.classes, self.features);
        let mut grad = vec![0.0; self.num_params()];
        let mut p = vec![0.0; k_n];
        for row in x.rows() {
            self.logits_into(theta, row, &mut p);
            softmax_in_place(&mut p);
            dz(&mut p);
            for (k, &g) in p.iter().enumerate() {
                if g != 0.0 {
                    for (gw, &xi) in grad[k * d..(k + 1) * d].iter_mut().zip(row) {
                        *gw += g * xi;
                    }
                }
                grad[k_n * d + k] += g;
            }
        }
        let inv = 1.0 / x.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok(grad.into())
    }

    /// Mean guarded Shannon entropy of the predictions.
    pub fn entropy_loss(&self, theta: &[f64], x: &Features) -> Result<f64> {
        self.mean_over_rows(theta, x, |p| {
            -p.iter().map(|&pk| pk * (pk + LOG_GUARD).ln()).sum::<f64>()
        })
    }

    /// Gradient of [`Shape::entropy_loss`].
    pub fn entropy_grad(&self, theta: &[f64], x: &Features) -> Result<ParameterVector> {
        let mut g = vec![0.0; self.classes];
        self.backprop(theta, x, |p| {
            // dH/dp_k = -(ln(p_k + e) + p_k / (p_k + e)); chain through softmax.
            for (gk, &pk) in g.iter_mut().zip(p.iter()) {
                *gk = (pk + LOG_GUARD).ln() + pk / (pk + LOG_GUARD);
            }
            let mean: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            for (pk, gk) in p.iter_mut().zip(&g) {
                *pk = -*pk * (gk - mean);
            }
        })
    }

    /// Mean generalized cross-entropy against the model's own argmax labels.
    pub fn rpl_loss(&self, theta: &[f64], x: &Features, q: f64) -> Result<f64> {
        self.mean_over_rows(theta, x, |p| {
            let y = argmax(p).class;
            (1.0 - p[y].powf(q)) / q
        })
    }

    /// Gradient of [`Shape::rpl_loss`] with the pseudo-labels held fixed.
    pub fn rpl_grad(&self, theta: &[f64], x: &Features, q: f64) -> Result<ParameterVector> {
        self.backprop(theta, x, |p| {
            let y = argmax(p).class;
            let scale = p[y].powf(q);
            // d/dz_j = -p_y^q * (1[j = y] - p_j)
            for (j, pj) in p.iter_mut().enumerate() {
                let ind = if j == y { 1.0 } else { 0.0 };
                *pj = -scale * (ind - *pj);
            }
        })
    }

    /// Mean cross-entropy against the true labels.
    pub fn cross_entropy_grad(
        &self,
        theta: &[f64],
        x: &Features,
        labels: &[usize],
    ) -> Result<(f64, ParameterVector)> {
        if labels.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: labels.len(),
            });
        }
        let mut loss = 0.0;
        let mut i = 0;
        let grad = self.backprop(theta, x, |p| {
            let y = labels[i];
            loss -= (p[y] + LOG_GUARD).ln();
            p[y] -= 1.0;
            i += 1;
        })?;
        Ok((loss / x.len() as f64, grad))
    }

    fn mean_over_rows<F>(&self, theta: &[f64], x: &Features, mut f: F) -> Result<f64>
    where
        F: FnMut(&[f64]) -> f64,
    {
        self.check_theta(theta)?;
        self.check_features(x)?;
        let mut p = vec![0.0; self.classes];
        let total: f64 = x
            .rows()
            .map(|row| {
                self.logits_into(theta, row, &mut p);
                softmax_in_place(&mut p);
                f(&p)
            })
            .sum();
        Ok(total / x.len() as f64)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

fn argmax(p: &[f64]) -> Prediction {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = k;
        }
    }
    Prediction {
        class: best,
        confidence: p[best],
    }
}

pub fn prediction_accuracy(preds: &[Prediction], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.class == y)
        .count();
    hits as f64 / preds.len() as f64
}

/// Unsupervised adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptLoss {
    EntropyMin,
    RobustPseudoLabel {
        #[serde(default = "default_q")]
        q: f64,
    },
}

fn default_q() -> f64 {
    0.8
}

impl AdaptLoss {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AdaptLoss::EntropyMin => Ok(()),
            AdaptLoss::RobustPseudoLabel { q } if q > 0.0 && q <= 1.0 => Ok(()),
            AdaptLoss::RobustPseudoLabel { q } => Err(Error::Config(format!(
                "pseudo-label exponent q must lie in (0, 1], got {q}"
            ))),
        }
    }

    pub fn grad(&self, shape: &Shape, theta: &[f64], x: &Features) -> Result<ParameterVector> {
        match *self {
            AdaptLoss::EntropyMin => shape.entropy_grad(theta, x),
            AdaptLoss::RobustPseudoLabel { q } => shape.rpl_grad(theta, x, q),
        }
    }
}

/// SGD with heavy-ball momentum: `v <- m v + g; theta <- theta - lr v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: ParameterVector,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, num_params: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: ParameterVector::zeros(num_params),
        }
    }

    pub fn velocity(&self) -> &ParameterVector {
        &self.velocity
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != theta.len() || grad.len() != self.velocity.len() {
            return Err(Error::DimensionMismatch {
                expected: theta.len(),
                got: grad.len(),
            });
        }
        for ((w, v), &g) in theta.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g;
            *w -= self.learning_rate * *v;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.velocity.fill(0.0);
    }
}

/// Predictions of the previous and current snapshots on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub prev: Vec<Prediction>,
    pub curr: Vec<Prediction>,
    /// Previous snapshot's probability of each current predicted class.
    pub prev_on_curr: Vec<f64>,
}

impl PredictionPair {
    /// Previous-snapshot predictions with confidences chosen by `reading`.
    pub fn previous(&self, reading: ConfidenceReading) -> Vec<Prediction> {
        match reading {
            ConfidenceReading::OwnArgmax => self.prev.clone(),
            ConfidenceReading::ChangedClass => self
                .prev
                .iter()
                .zip(&self.prev_on_curr)
                .map(|(p, &c)| Prediction {
                    class: p.class,
                    confidence: c,
                })
                .collect(),
        }
    }
}

/// Pretrained source weights together with their clean holdout accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub shape: Shape,
    pub theta: ParameterVector,
    pub holdout_accuracy: f64,
}

/// An adapting model: live parameters, the frozen source weights, the
/// previous-step snapshot and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    shape: Shape,
    pub theta: ParameterVector,
    theta_source: ParameterVector,
    theta_prev_snapshot: ParameterVector,
    pub optimizer: Sgd,
}

impl ModelState {
    pub fn from_source(source: &SourceModel, learning_rate: f64, momentum: f64) -> Result<Self> {
        source.shape.check_theta(&source.theta)?;
        Ok(Self {
            shape: source.shape,
            theta: source.theta.clone(),
            theta_source: source.theta.clone(),
            theta_prev_snapshot: source.theta.clone(),
            optimizer: Sgd::new(learning_rate, momentum, source.shape.num_params()),
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn theta_source(&self) -> &ParameterVector {
        &self.theta_source
    }

    pub fn theta_prev_snapshot(&self) -> &ParameterVector {
        &self.theta_prev_snapshot
    }

    /// Applies one optimizer step with `grad`.
    pub fn sgd_step(&mut self, grad: &[f64]) -> Result<()> {
        self.optimizer.step(&mut self.theta, grad)
    }

    /// Predicts `x` with the previous snapshot and the current parameters,
    /// then snapshots the current parameters and takes one adaptation step.
    pub fn adapt_batch(&mut self, x: &Features, loss: AdaptLoss) -> Result<PredictionPair> {
        let (prev, prev_probs) = self
            .shape
            .predict_with_probs(&self.theta_prev_snapshot, x)?;
        let curr = self.shape.predict(&self.theta, x)?;
        let prev_on_curr = curr
            .iter()
            .enumerate()
            .map(|(i, c)| prev_probs[i * self.shape.classes + c.class])
            .collect();
        self.theta_prev_snapshot.copy_from_slice(&self.theta);
        let grad = loss.grad(&self.shape, &self.theta, x)?;
        self.sgd_step(&grad)?;
        if !self.theta.is_finite() {
            return Err(Error::Diverged(
                "adapted parameters became non-finite".into(),
            ));
        }
        Ok(PredictionPair {
            prev,
            curr,
            prev_on_curr,
        })
    }

    /// Overwrites the live parameters, e.g. after a re-initialization, and
    /// clears the optimizer state.
    pub fn reinitialize(&mut self, theta: ParameterVector) -> Result<()> {
        self.shape.check_theta(&theta)?;
        self.theta = theta;
        self.optimizer.reset();
        Ok(())
    }
}

/// Small random initial weights drawn from `N(0, 0.01^2)`, zero biases.
pub fn init_params(shape: &Shape, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let mut theta = ParameterVector::zeros(shape.num_params());
    for w in theta[..shape.classes * shape.features].iter_mut() {
        *w = normal.sample(&mut rng);
    }
    theta
}

/// Supervised minibatch SGD on labeled source batches starting from `init`.
/// Returns the trained source model scored on `holdout`.
pub fn pretrain_source(
    shape: Shape,
    init: ParameterVector,
    train: &[LabeledBatch],
    holdout: &LabeledBatch,
    epochs: usize,
    learning_rate: f64,
) -> Result<SourceModel> {
    shape.check_theta(&init)?;
    let mut theta = init;
    let mut sgd = Sgd::new(learning_rate, 0.0, shape.num_params());
    for epoch in 0..epochs {
        for batch in train {
            let (loss, grad) = shape.cross_entropy_grad(&theta, &batch.features, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite source loss in epoch {epoch}"
                )));
            }
            sgd.step(&mut theta, &grad)?;
        }
        if !theta.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite source weights in epoch {epoch}"
            )));
        }
    }
    let holdout_accuracy = shape.accuracy(&theta, &holdout.features, &holdout.labels)?;
    Ok(SourceModel {
        shape,
        theta,
        holdout_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_instance(
        seed: u64,
        classes: usize,
        dim: usize,
        n: usize,
    ) -> (Shape, Vec<f64>, Features) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(classes, dim).unwrap();
        let theta: Vec<f64> = (0..shape.num_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        (shape, theta, Features::new(dim, x).unwrap())
    }

    fn naive_softmax(shape: &Shape, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = (0..shape.classes)
            .map(|k| {
                let mut s = theta[shape.classes * shape.features + k];
                for j in 0..shape.features {
                    s += theta[k * shape.features + j] * x[j];
                }
                s
            })
            .collect();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let sum: f64 = e.iter().sum();
        e.iter().map(|v| v / sum).collect()
    }

    #[test]
    fn zero_weights_give_uniform() {
        let shape = Shape::new(4, 3).unwrap();
        let p = shape
            .softmax_forward(&vec![0.0; shape.num_params()], &[1.0, -2.0, 3.0])
            .unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logits() {
        let shape = Shape::new(2, 1).unwrap();
        // Biases alone produce logits [10, -10].
        let theta = [0.0, 0.0, 10.0, -10.0];
        let p = shape.softmax_forward(&theta, &[0.0]).unwrap();
        let tail = 1.0 / (1.0 + 20f64.exp());
        assert!((p[1] - tail).abs() < 1e-15);
        assert!((p[1] - 2.061e-9).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_naive_softmax() {
        for seed in 0..20 {
            let (shape, theta, x) = random_instance(seed, 4, 5, 3);
            for row in x.rows() {
                let p = shape.softmax_forward(&theta, row).unwrap();
                let q = naive_softmax(&shape, &theta, row);
                for (a, b) in p.iter().zip(&q) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn forward_rejects_non_finite_and_bad_dims() {
        let shape = Shape::new(2, 2).unwrap();
        let theta = vec![0.0; shape.num_params()];
        assert!(shape.softmax_forward(&theta, &[f64::NAN, 0.0]).is_err());
        assert!(shape.softmax_forward(&theta, &[0.0]).is_err());
        assert!(shape.softmax_forward(&theta[..3], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn argmax_tie_break_and_confidence() {
        assert_eq!(
            argmax(&[0.5, 0.5]),
            Prediction {
                class: 0,
                confidence: 0.5
            }
        );
        assert_eq!(
            argmax(&[0.1, 0.7, 0.2]),
            Prediction {
                class: 1,
                confidence: 0.7
            }
        );
    }

    #[test]
    fn predict_matches_scan_oracle() {
        let (shape, theta, x) = random_instance(3, 4, 5, 50);
        let preds = shape.predict(&theta, &x).unwrap();
        for (row, pred) in x.rows().zip(&preds) {
            let p = naive_softmax(&shape, &theta, row);
            let mut best = 0;
            for k in 0..p.len() {
                if p[k] > p[best] {
                    best = k;
                }
            }
            assert_eq!(pred.class, best);
            assert!((pred.confidence - p[best]).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_rejects_empty_batch() {
        let shape = Shape::new(2, 2).unwrap();
        let x = Features::new(2, vec![]).unwrap();
        assert!(matches!(
            shape.predict(&[0.0; 6], &x),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn entropy_gradient_vanishes_when_saturated() {
        let shape = Shape::new(3, 2).unwrap();
        let mut theta = vec![0.0; shape.num_params()];
        theta[6] = 60.0;
        let x = Features::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5]]).unwrap();
        let g = shape.entropy_grad(&theta, &x).unwrap();
        assert!(g.norm() < 1e-6, "norm {}", g.norm());
    }

    #[test]
    fn entropy_bias_gradient_sums_to_zero() {
        let shape = Shape::new(4, 2).unwrap();
        let theta = vec![0.0; shape.num_params()];
        let x = Features::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let g = shape.entropy_grad(&theta, &x).unwrap();
        let bias_sum: f64 = g[8..].iter().sum();
        assert!(bias_sum.abs() < 1e-15);
    }

    #[test]
    fn rpl_zero_at_certain_prediction() {
        let shape = Shape::new(2, 1).unwrap();
        // Logit gap large enough that p_y rounds to exactly 1.
        let theta = [0.0, 0.0, 40.0, -40.0];
        let x = Features::from_rows(&[vec![0.0]]).unwrap();
        assert_eq!(shape.rpl_loss(&theta, &x, 0.8).unwrap(), 0.0);
        let g = shape.rpl_grad(&theta, &x, 0.8).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-30));
    }

    #[test]
    fn rpl_with_unit_exponent_is_one_minus_confidence() {
        let (shape, theta, x) = random_instance(17, 3, 4, 1);
        let p = naive_softmax(&shape, &theta, x.row(0));
        let top = p.iter().cloned().fold(f64::MIN, f64::max);
        let loss = shape.rpl_loss(&theta, &x, 1.0).unwrap();
        assert!((loss - (1.0 - top)).abs() < 1e-12);
    }

    fn naive_entropy(shape: &Shape, theta: &[f64], x: &Features) -> f64 {
        x.rows()
            .map(|r| {
                -naive_softmax(shape, theta, r)
                    .iter()
                    .map(|p| p * (p + 1e-12).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / x.len() as f64
    }

    fn naive_gce(shape: &Shape, theta: &[f64], x: &Features, labels: &[usize], q: f64) -> f64 {
        x.rows()
            .zip(labels)
            .map(|(r, &y)| (1.0 - naive_softmax(shape, theta, r)[y].powf(q)) / q)
            .sum::<f64>()
            / x.len() as f64
    }

    fn central_diff<F: Fn(&[f64]) -> f64>(f: F, theta: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let mut t = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                t[i] = theta[i] + h;
                let up = f(&t);
                t[i] = theta[i] - h;
                let down = f(&t);
                t[i] = theta[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = a.iter().chain(b).map(|v| v * v).sum::<f64>().sqrt();
        diff / scale.max(1e-8)
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (shape, theta, x) = random_instance(100 + seed, 3, 4, 6);
            let g = shape.entropy_grad(&theta, &x).unwrap();
            let fd = central_diff(|t| naive_entropy(&shape, t, &x), &theta);
            assert!(rel_err(&g, &fd) < 1e-4, "seed {seed}: {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn rpl_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (shape, theta, x) = random_instance(200 + seed, 4, 3, 5);
            let labels: Vec<usize> = shape
                .predict(&theta, &x)
                .unwrap()
                .iter()
                .map(|p| p.class)
                .collect();
            let g = shape.rpl_grad(&theta, &x, 0.8).unwrap();
            let fd = central_diff(|t| naive_gce(&shape, t, &x, &labels, 0.8), &theta);
            assert!(rel_err(&g, &fd) < 1e-4, "seed {seed}: {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut sgd = Sgd::new(0.1, 0.0, 3);
        let mut theta = vec![1.0, 2.0, 3.0];
        sgd.step(&mut theta, &[1.0, 1.0, 1.0]).unwrap();
        for (a, b) in theta.iter().zip([0.9, 1.9, 2.9]) {
            assert!((a - b).abs() < 1e-15);
        }
        let before = theta.clone();
        let mut sgd = Sgd::new(0.1, 0.0, 3);
        sgd.step(&mut theta, &[0.0; 3]).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn momentum_matches_unrolled_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grads: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (lr, m) = (0.05, 0.9);
        let mut sgd = Sgd::new(lr, m, 4);
        let mut theta = vec![0.5; 4];
        for g in &grads {
            sgd.step(&mut theta, g).unwrap();
        }
        // theta_T = theta_0 - lr * sum_t sum_{s<=t} m^(t-s) g_s
        for i in 0..4 {
            let mut expected = 0.5;
            for t in 0..grads.len() {
                let v: f64 = (0..=t).map(|s| m.powi((t - s) as i32) * grads[s][i]).sum();
                expected -= lr * v;
            }
            assert!((theta[i] - expected).abs() < 1e-12);
        }
    }

    fn toy_source(shape: Shape) -> SourceModel {
        let theta = init_params(&shape, 1);
        SourceModel {
            shape,
            theta,
            holdout_accuracy: 0.0,
        }
    }

    #[test]
    fn frozen_learner_produces_no_flips() {
        let shape = Shape::new(3, 4).unwrap();
        let mut model = ModelState::from_source(&toy_source(shape), 0.0, 0.9).unwrap();
        let (_, _, x) = random_instance(8, 3, 4, 16);
        for _ in 0..5 {
            let pair = model.adapt_batch(&x, AdaptLoss::EntropyMin).unwrap();
            assert_eq!(pair.prev, pair.curr);
        }
        assert_eq!(model.theta, *model.theta_source());
    }

    #[test]
    fn snapshot_tracks_pre_step_parameters() {
        let shape = Shape::new(3, 4).unwrap();
        let mut model = ModelState::from_source(&toy_source(shape), 0.05, 0.9).unwrap();
        let source = model.theta_source().clone();
        let (_, _, x) = random_instance(8, 3, 4, 16);
        for _ in 0..5 {
            let before = model.theta.clone();
            model
                .adapt_batch(&x, AdaptLoss::RobustPseudoLabel { q: 0.8 })
                .unwrap();
            assert_eq!(*model.theta_prev_snapshot(), before);
            assert_ne!(model.theta, before);
        }
        model.reinitialize(source.clone()).unwrap();
        assert_eq!(*model.theta_source(), source);
        assert!(model.optimizer.velocity().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn changed_class_reading_uses_previous_probability_of_current_class() {
        let shape = Shape::new(3, 4).unwrap();
        let mut model = ModelState::from_source(&toy_source(shape), 0.5, 0.9).unwrap();
        let (_, _, x) = random_instance(9, 3, 4, 32);
        for _ in 0..4 {
            let snapshot = model.theta_prev_snapshot().clone();
            let pair = model.adapt_batch(&x, AdaptLoss::EntropyMin).unwrap();
            assert_eq!(pair.previous(ConfidenceReading::OwnArgmax), pair.prev);
            let changed = pair.previous(ConfidenceReading::ChangedClass);
            for ((row, c), (p, q)) in x.rows().zip(&pair.curr).zip(pair.prev.iter().zip(&changed)) {
                let probs = naive_softmax(&shape, &snapshot, row);
                assert!((q.confidence - probs[c.class]).abs() < 1e-12);
                assert_eq!(q.class, p.class);
                if p.class == c.class {
                    assert_eq!(q.confidence, p.confidence);
                }
            }
        }
    }

    #[test]
    fn adapt_loss_validation() {
        assert!(AdaptLoss::RobustPseudoLabel { q: 0.0 }.validate().is_err());
        assert!(AdaptLoss::RobustPseudoLabel { q: 1.5 }.validate().is_err());
        assert!(AdaptLoss::RobustPseudoLabel { q: 1.0 }.validate().is_ok());
    }

    fn gaussian_batches(seed: u64, n_batches: usize, shuffle_labels: bool) -> Vec<LabeledBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n_batches)
            .map(|_| {
                let mut data = Vec::new();
                let mut labels = Vec::new();
                for _ in 0..32 {
                    let y: usize = rng.random_range(0..2);
                    let c = if y == 0 { -2.0 } else { 2.0 };
                    data.push(c + normal.sample(&mut rng));
                    data.push(c + normal.sample(&mut rng));
                    labels.push(if shuffle_labels {
                        rng.random_range(0..2)
                    } else {
                        y
                    });
                }
                LabeledBatch {
                    features: Features::new(2, data).unwrap(),
                    labels,
                    domain_index: 0,
                }
            })
            .collect()
    }

    fn merge(batches: &[LabeledBatch]) -> LabeledBatch {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            data.extend_from_slice(b.features.as_slice());
            labels.extend_from_slice(&b.labels);
        }
        LabeledBatch {
            features: Features::new(batches[0].features.dim(), data).unwrap(),
            labels,
            domain_index: 0,
        }
    }

    #[test]
    fn pretraining_separable_gaussians() {
        let shape = Shape::new(2, 2).unwrap();
        let train = gaussian_batches(1, 20, false);
        let holdout = merge(&gaussian_batches(2, 10, false));
        let src = pretrain_source(shape, init_params(&shape, 0), &train, &holdout, 5, 0.1).unwrap();
        assert!(src.holdout_accuracy >= 0.95, "{}", src.holdout_accuracy);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let shape = Shape::new(2, 2).unwrap();
        let init = init_params(&shape, 3);
        let train = gaussian_batches(1, 4, false);
        let holdout = merge(&gaussian_batches(2, 2, false));
        let src = pretrain_source(shape, init.clone(), &train, &holdout, 0, 0.1).unwrap();
        assert_eq!(src.theta, init);
    }

    #[test]
    fn shuffled_labels_stay_at_chance() {
        let shape = Shape::new(2, 2).unwrap();
        let train = gaussian_batches(5, 20, true);
        let holdout = merge(&gaussian_batches(6, 40, true));
        let src = pretrain_source(shape, init_params(&shape, 0), &train, &holdout, 5, 0.1).unwrap();
        assert!(
            (src.holdout_accuracy - 0.5).abs() <= 0.05,
            "{}",
            src.holdout_accuracy
        );
    }

    #[test]
    fn divergence_is_reported() {
        let shape = Shape::new(2, 2).unwrap();
        let train = gaussian_batches(1, 4, false);
        let holdout = merge(&gaussian_batches(2, 2, false));
        let r = pretrain_source(
            shape,
            init_params(&shape, 0),
            &train,
            &holdout,
            3,
            f64::INFINITY,
        );
        assert!(matches!(r, Err(Error::Diverged(_))));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(seed in any::<u64>(), scale in 0.1..50.0f64) {
            let (shape, theta, x) = random_instance(seed, 4, 5, 4);
            let theta: Vec<f64> = theta.iter().map(|v| v * scale).collect();
            for row in x.rows() {
                let p = shape.softmax_forward(&theta, row).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
