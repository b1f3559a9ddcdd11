//! Minimal dense-network machinery: activations, losses, Adam, and a seeded
//! minibatch training loop. Gradients are hand-derived per architecture (see
//! [`proxnet`] and [`fnn`]); there is no general-purpose autodiff here.
//!
//! Batches are laid out one sample per column. Minibatch gradients are
//! accumulated over fixed-width column chunks (in parallel when enabled) and
//! reduced in chunk order, so training is bit-reproducible for a given seed.

pub mod checkpoint;
pub mod fnn;
pub mod proxnet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{chunk_ranges, GRAD_CHUNK};
use crate::rng::{mix_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// Soft-thresholding with a fixed shrinkage level.
    SoftThreshold(f64),
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::SoftThreshold(eta) => crate::solvers::soft_threshold(x, *eta),
            Activation::Identity => x,
        }
    }

    /// Subgradient, taken as 0 at the kinks (x = 0 for ReLU, |x| = eta for
    /// soft thresholding).
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::SoftThreshold(eta) => {
                if x.abs() > *eta {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// Distance from a pre-activation to the nearest non-differentiable
    /// point. Finite-difference oracles use this to reject operating points
    /// where the subgradient convention would dominate the comparison.
    pub fn kink_distance(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.abs(),
            Activation::SoftThreshold(eta) => (x.abs() - eta).abs(),
            Activation::Identity => f64::INFINITY,
        }
    }

    pub fn apply_inplace(&self, x: &mut Array2<f64>) {
        x.mapv_inplace(|v| self.apply(v));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    /// Quadratic within `delta` of zero, linear outside: e^2/2 for |e| <=
    /// delta, else delta |e| - delta^2/2.
    Huber(f64),
    /// Half mean-square: e^2/2 per entry.
    Mse,
}

impl Loss {
    #[inline]
    pub fn value(&self, e: f64) -> f64 {
        match self {
            Loss::Mse => 0.5 * e * e,
            Loss::Huber(delta) => {
                if e.abs() <= *delta {
                    0.5 * e * e
                } else {
                    delta * e.abs() - 0.5 * delta * delta
                }
            }
        }
    }

    /// d(value)/de.
    #[inline]
    pub fn derivative(&self, e: f64) -> f64 {
        match self {
            Loss::Mse => e,
            Loss::Huber(delta) => e.clamp(-*delta, *delta),
        }
    }
}

/// Per-epoch learning-rate schedule applied to the starting rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the starting rate to (near) zero across the
    /// run; useful when fine-tuning from a strong initialization.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Starting learning rate; see `lr_schedule`.
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub loss: Loss,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            loss: Loss::Huber(1.0),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Learning rate in force during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = epoch as f64 / self.epochs.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parse("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parse("learning rate must be finite and >= 0".into()));
        }
        if let Loss::Huber(d) = self.loss {
            if d <= 0.0 {
                return Err(Error::Parse("huber delta must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A trainable feed-forward style model over fixed-size inputs. Tensors are
/// exposed in a stable order shared by gradients, Adam state, and
/// checkpoints.
pub trait NetModel {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Forward pass; `input` has one sample per column.
    fn forward_batch(&self, input: &Array2<f64>) -> Array2<f64>;
    /// Mean per-entry loss over the batch and the gradient of that mean with
    /// respect to every tensor.
    fn loss_and_grad(
        &self,
        input: &Array2<f64>,
        target: &Array2<f64>,
        loss: Loss,
    ) -> (f64, Vec<Array2<f64>>);
    fn tensors(&self) -> Vec<&Array2<f64>>;
    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>>;
}

/// First/second moment accumulators for Adam, one pair per tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new_for(tensors: &[&Array2<f64>]) -> Self {
        AdamState {
            m: tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
            v: tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over a parameter list at learning rate
/// `lr` (callers apply the schedule).
pub fn adam_step_tensors(
    params: Vec<&mut Array2<f64>>,
    grads: &[Array2<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .into_iter()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
            });
    }
}

pub fn adam_step<M: NetModel>(
    model: &mut M,
    grads: &[Array2<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) {
    adam_step_tensors(model.tensors_mut(), grads, state, cfg, lr);
}

/// Gathers dataset rows (samples x dim) into a column-per-sample batch.
pub fn gather_columns(data: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    let dim = data.ncols();
    let mut out = Array2::zeros((dim, indices.len()));
    for (col, &idx) in indices.iter().enumerate() {
        out.column_mut(col).assign(&data.row(idx));
    }
    out
}

/// Mean loss and gradients for a set of sample indices, accumulated over
/// fixed-width chunks so the reduction order never depends on the thread
/// count.
pub fn batch_loss_and_grad<M: NetModel + Sync>(
    model: &M,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    indices: &[usize],
    loss: Loss,
) -> (f64, Vec<Array2<f64>>) {
    let total = indices.len();
    let ranges = chunk_ranges(total, GRAD_CHUNK);
    let parts = crate::par::map_indexed(&ranges, |_, range| {
        let idx = &indices[range.clone()];
        let z = gather_columns(inputs, idx);
        let t = gather_columns(targets, idx);
        let (l, g) = model.loss_and_grad(&z, &t, loss);
        (l, g, idx.len())
    });
    let mut loss_total = 0.0;
    let mut grads: Option<Vec<Array2<f64>>> = None;
    for (l, g, count) in parts {
        let weight = count as f64 / total as f64;
        loss_total += l * weight;
        match grads.as_mut() {
            None => {
                let mut g = g;
                for t in g.iter_mut() {
                    t.mapv_inplace(|x| x * weight);
                }
                grads = Some(g);
            }
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    a.zip_mut_with(b, |x, &y| *x += y * weight);
                }
            }
        }
    }
    (loss_total, grads.expect("non-empty batch"))
}

/// Seeded minibatch Adam loop. Returns the trained model and the per-epoch
/// mean training loss. Fully deterministic for a given config.
pub fn train_estimator<M: NetModel + Clone + Sync>(
    model: &M,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<(M, Vec<f64>)> {
    cfg.validate()?;
    let n = inputs.nrows();
    if n == 0 || targets.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} input rows vs {} target rows",
            n,
            targets.nrows()
        )));
    }
    if inputs.ncols() != model.input_dim() || targets.ncols() != model.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "dataset is {}->{}, model is {}->{}",
            inputs.ncols(),
            targets.ncols(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    let mut trained = model.clone();
    let mut adam = AdamState::new_for(&trained.tensors());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::seed_from(mix_seed(cfg.seed, epoch as u64));
        rng.shuffle(&mut order);
        let lr = cfg.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) =
                batch_loss_and_grad(&trained, inputs, targets, batch, cfg.loss);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            adam_step(&mut trained, &grads, &mut adam, cfg, lr);
            epoch_loss += loss * batch.len() as f64;
        }
        history.push(epoch_loss / n as f64);
    }
    Ok((trained, history))
}

/// Uniform Glorot initialization: limit = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.uniform_in(-limit, limit))
}

/// Evaluates a model on a row-major dataset, returning predictions row-major.
pub fn predict_rows<M: NetModel + Sync>(model: &M, inputs: &Array2<f64>) -> Array2<f64> {
    let n = inputs.nrows();
    let mut out = Array2::zeros((n, model.output_dim()));
    let ranges = chunk_ranges(n, 64);
    let parts = crate::par::map_indexed(&ranges, |_, range| {
        let idx: Vec<usize> = range.clone().collect();
        let z = gather_columns(inputs, &idx);
        (range.clone(), model.forward_batch(&z))
    });
    for (range, block) in parts {
        for (col, row_idx) in range.enumerate() {
            out.row_mut(row_idx).assign(&block.column(col));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn huber_boundary_and_tails() {
        let delta = 0.7;
        let l = Loss::Huber(delta);
        assert_eq!(l.value(0.0), 0.0);
        assert_abs_diff_eq!(l.value(delta), delta * delta / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l.value(3.0 * delta), 2.5 * delta * delta, epsilon = 1e-15);
        assert_abs_diff_eq!(l.derivative(0.3), 0.3, epsilon = 1e-15);
        assert_eq!(l.derivative(5.0), delta);
        assert_eq!(l.derivative(-5.0), -delta);
    }

    #[test]
    fn activation_kinks_have_zero_subgradient() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::SoftThreshold(0.5).derivative(0.5), 0.0);
        assert_eq!(Activation::SoftThreshold(0.5).derivative(-0.5), 0.0);
        assert_eq!(Activation::SoftThreshold(0.5).derivative(0.6), 1.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut w = Array2::from_elem((2, 2), 1.5);
        let grads = vec![Array2::zeros((2, 2))];
        let mut state = AdamState::new_for(&[&w]);
        let cfg = TrainConfig::default();
        adam_step_tensors(vec![&mut w], &grads, &mut state, &cfg, cfg.learning_rate);
        assert!(w.iter().all(|&x| x == 1.5));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        // One step from zero state: mhat = g, vhat = g^2, so the update is
        // -lr * g / (|g| + eps) regardless of beta values.
        let g = 0.37;
        let mut w = Array2::from_elem((1, 1), 2.0);
        let grads = vec![Array2::from_elem((1, 1), g)];
        let mut state = AdamState::new_for(&[&w]);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        adam_step_tensors(vec![&mut w], &grads, &mut state, &cfg, cfg.learning_rate);
        let want = 2.0 - 0.01 * g / (g.abs() + cfg.eps);
        assert_abs_diff_eq!(w[[0, 0]], want, epsilon = 1e-12);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut w = Array2::from_elem((2, 3), 0.5);
            let grads = vec![Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64 * 0.1)];
            let mut state = AdamState::new_for(&[&w]);
            let cfg = TrainConfig::default();
            for _ in 0..5 {
                adam_step_tensors(vec![&mut w], &grads, &mut state, &cfg, cfg.learning_rate);
            }
            w
        };
        assert_eq!(run(), run());
    }
}
