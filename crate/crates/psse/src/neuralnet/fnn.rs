//! Plain feed-forward baseline: affine layers with a shared activation on
//! every hidden layer and a linear read-out.

use ndarray::{Array1, Array2};

use crate::neuralnet::{glorot_uniform, Activation, Loss, NetModel};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct Fnn {
    /// (weight: out x in, bias: out x 1) per layer, input to output.
    pub layers: Vec<(Array2<f64>, Array2<f64>)>,
    pub activation: Activation,
}

impl Fnn {
    /// `dims = [input, hidden..., output]`; weights Glorot-uniform, biases
    /// zero.
    pub fn random(dims: &[usize], activation: Activation, seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut rng = Rng::seed_from(seed);
        let layers = dims
            .windows(2)
            .map(|w| (glorot_uniform(w[1], w[0], &mut rng), Array2::zeros((w[1], 1))))
            .collect();
        Fnn { layers, activation }
    }

    /// The estimation baseline: `hidden_layers` hidden layers whose width
    /// equals the input dimension, mapping measurements to states.
    pub fn estimator_baseline(
        m: usize,
        state_dim: usize,
        hidden_layers: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut dims = vec![m; hidden_layers + 1];
        dims.push(state_dim);
        Self::random(&dims, activation, seed)
    }

    pub fn forward_one(&self, z: &Array1<f64>) -> Array1<f64> {
        let mut x = z.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut pre = w.dot(&x) + &b.column(0);
            if i != last {
                pre.mapv_inplace(|v| self.activation.apply(v));
            }
            x = pre;
        }
        x
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    /// See [`crate::neuralnet::proxnet::ProxLinearNet::kink_margin`].
    pub fn kink_margin(&self, z: &Array1<f64>) -> f64 {
        let mut x = z.clone();
        let mut margin = f64::INFINITY;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut pre = w.dot(&x) + &b.column(0);
            if i != last {
                for &v in pre.iter() {
                    margin = margin.min(self.activation.kink_distance(v));
                }
                pre.mapv_inplace(|v| self.activation.apply(v));
            }
            x = pre;
        }
        margin
    }
}

impl NetModel for Fnn {
    fn input_dim(&self) -> usize {
        self.layers[0].0.ncols()
    }

    fn output_dim(&self) -> usize {
        self.layers.last().unwrap().0.nrows()
    }

    fn forward_batch(&self, input: &Array2<f64>) -> Array2<f64> {
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut pre = w.dot(&x) + b;
            if i != last {
                self.activation.apply_inplace(&mut pre);
            }
            x = pre;
        }
        debug_assert!(x.iter().all(|v| v.is_finite()), "non-finite forward output");
        x
    }

    fn loss_and_grad(
        &self,
        input: &Array2<f64>,
        target: &Array2<f64>,
        loss: Loss,
    ) -> (f64, Vec<Array2<f64>>) {
        let batch = input.ncols();
        let last = self.layers.len() - 1;
        let mut x = input.clone();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let pre = w.dot(&x) + b;
            layer_inputs.push(x);
            let mut post = pre.clone();
            if i != last {
                self.activation.apply_inplace(&mut post);
            }
            pre_acts.push(pre);
            x = post;
        }

        let entries = (self.output_dim() * batch) as f64;
        let mut loss_total = 0.0;
        let mut g = Array2::zeros(x.dim());
        ndarray::Zip::from(&mut g).and(&x).and(target).for_each(|g, &p, &t| {
            let e = p - t;
            loss_total += loss.value(e);
            *g = loss.derivative(e) / entries;
        });
        loss_total /= entries;

        let mut grads_rev: Vec<(Array2<f64>, Array2<f64>)> = Vec::with_capacity(self.layers.len());
        for (i, (w, _b)) in self.layers.iter().enumerate().rev() {
            let mut g_pre = g;
            if i != last {
                ndarray::Zip::from(&mut g_pre)
                    .and(&pre_acts[i])
                    .for_each(|gp, &pre| *gp *= self.activation.derivative(pre));
            }
            let d_w = g_pre.dot(&layer_inputs[i].t());
            let d_b = {
                let sums = g_pre.sum_axis(ndarray::Axis(1));
                let mut col = Array2::zeros((sums.len(), 1));
                col.column_mut(0).assign(&sums);
                col
            };
            g = w.t().dot(&g_pre);
            grads_rev.push((d_w, d_b));
        }
        let mut grads = Vec::with_capacity(2 * self.layers.len());
        for (d_w, d_b) in grads_rev.into_iter().rev() {
            grads.push(d_w);
            grads.push(d_b);
        }
        (loss_total, grads)
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (w, b) in &self.layers {
            out.push(w);
            out.push(b);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (w, b) in &mut self.layers {
            out.push(w);
            out.push(b);
        }
        out
    }
}
