//! The unrolled prox-linear estimator network.
//!
//! Each "block" is one outer linearization of the LAV solver, unrolled into
//! `K` affine-plus-threshold layers sharing the block's input matrix `A_i`
//! (the measurement vector is skip-connected into every layer). The output
//! layer reads the state as `B_u u + B_z z + bias`. Tied to a solver trace,
//! the network reproduces the solver's output exactly; untied, every tensor
//! trains independently.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::grid::StateVector;
use crate::measurement::{jacobian_at, QuadraticForm};
use crate::neuralnet::{glorot_uniform, Activation, Loss, NetModel};
use crate::rng::Rng;
use crate::solvers::{
    ista_coeffs, pinv_with_angle_ref, EtaRule, ProxLinearConfig, SolveTrace,
};

#[derive(Debug, Clone)]
pub struct ProxBlock {
    /// Skip-connection matrix applied to the measurement vector (M x M).
    pub a: Array2<f64>,
    /// Per-layer recurrence weights and biases: (W (M x M), b (M x 1)).
    pub layers: Vec<(Array2<f64>, Array2<f64>)>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct ProxLinearNet {
    pub m: usize,
    pub state_dim: usize,
    pub blocks: Vec<ProxBlock>,
    /// Output read-out: state = out_u * u + out_z * z + out_bias.
    pub out_u: Array2<f64>,
    pub out_z: Array2<f64>,
    pub out_bias: Array2<f64>,
}

impl ProxLinearNet {
    /// Randomly initialized untied network with `n_blocks` blocks of
    /// `layers_per_block` layers.
    pub fn random(
        m: usize,
        state_dim: usize,
        n_blocks: usize,
        layers_per_block: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut rng = Rng::seed_from(seed);
        let blocks = (0..n_blocks)
            .map(|_| ProxBlock {
                a: glorot_uniform(m, m, &mut rng),
                layers: (0..layers_per_block)
                    .map(|_| (glorot_uniform(m, m, &mut rng), Array2::zeros((m, 1))))
                    .collect(),
                activation,
            })
            .collect();
        ProxLinearNet {
            m,
            state_dim,
            blocks,
            out_u: glorot_uniform(state_dim, m, &mut rng),
            out_z: glorot_uniform(state_dim, m, &mut rng),
            out_bias: Array2::zeros((state_dim, 1)),
        }
    }

    /// Ties every block to the affine ISTA map of the solver linearized at
    /// `v_init` (the data-free warm start used before training): all blocks
    /// share the left inverse computed at `v_init`, and the output layer
    /// reads `(B (u + z) + v_init) / 2`. A Gaussian perturbation of scale
    /// `perturb` is then added to every tensor to break ties.
    pub fn solver_tied(
        forms: &[QuadraticForm],
        cfg: &ProxLinearConfig,
        v_init: &StateVector,
        perturb: f64,
        seed: u64,
    ) -> Result<Self> {
        let m = forms.len();
        let jac = jacobian_at(forms, v_init)?;
        let b_op = pinv_with_angle_ref(&jac, v_init)?;
        let lambda =
            crate::linalg::power_iteration_lambda_max(m, 20, |x| b_op.t().dot(&b_op.dot(x)));
        if lambda <= 0.0 {
            return Err(Error::RankDeficient { index: 0, value: 0.0 });
        }
        // The tied construction is data-free, so the adaptive mu rule gets
        // the correlation scale of the initialization point itself,
        // median |B' v_init|, as its stand-in for the reconstruction error.
        let median_corr = {
            let mut mags: Vec<f64> =
                b_op.t().dot(v_init.values()).iter().map(|x| x.abs()).collect();
            mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mags[mags.len() / 2]
        };
        let mut blocks = Vec::with_capacity(cfg.outer_blocks);
        for block in 0..cfg.outer_blocks {
            let mu = cfg.mu_for(block, m, median_corr);
            let eta = match &cfg.eta {
                EtaRule::StabilityBound => 2.0 * mu / (m as f64 * lambda),
                EtaRule::Fixed(e) => *e,
            };
            let coeffs = ista_coeffs(&b_op, v_init.values(), mu, eta);
            blocks.push(block_from_coeffs(
                &coeffs.a,
                &coeffs.w,
                &coeffs.bias,
                eta,
                cfg.inner_iters,
            ));
        }
        let mut net = ProxLinearNet {
            m,
            state_dim: v_init.dim(),
            blocks,
            out_u: b_op.mapv(|x| x / 2.0),
            out_z: b_op.mapv(|x| x / 2.0),
            out_bias: column(&v_init.values().mapv(|x| x / 2.0)),
        };
        if perturb > 0.0 {
            let mut rng = Rng::seed_from(seed);
            for t in net.tensors_mut() {
                t.mapv_inplace(|x| x + perturb * rng.normal());
            }
        }
        Ok(net)
    }

    /// Ties the network to an executed solver trajectory: block `i` gets the
    /// coefficients the solver used at its `i`-th linearization point. The
    /// trace must have been recorded with `record_operators = true`. With
    /// soft-threshold activations the resulting network reproduces the
    /// solver's returned state exactly.
    pub fn tied_from_trace(trace: &SolveTrace, inner_iters: usize) -> Result<Self> {
        let ops = trace.operators.as_ref().ok_or_else(|| {
            Error::Parse("trace has no recorded operators; set record_operators".into())
        })?;
        if trace.accepted.iter().any(|&a| !a) {
            return Err(Error::Parse(
                "trace contains a rejected block; the unrolled network cannot represent it".into(),
            ));
        }
        let n_blocks = ops.len();
        if n_blocks == 0 || trace.iterates.len() != n_blocks + 1 {
            return Err(Error::DimensionMismatch(format!(
                "trace has {} operators and {} iterates",
                n_blocks,
                trace.iterates.len()
            )));
        }
        let m = ops[0].ncols();
        let state_dim = ops[0].nrows();
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let coeffs = ista_coeffs(
                &ops[i],
                trace.iterates[i].values(),
                trace.mus[i],
                trace.etas[i],
            );
            blocks.push(block_from_coeffs(
                &coeffs.a,
                &coeffs.w,
                &coeffs.bias,
                trace.etas[i],
                inner_iters,
            ));
        }
        let last = n_blocks - 1;
        Ok(ProxLinearNet {
            m,
            state_dim,
            blocks,
            out_u: ops[last].mapv(|x| x / 2.0),
            out_z: ops[last].mapv(|x| x / 2.0),
            out_bias: column(&trace.iterates[last].values().mapv(|x| x / 2.0)),
        })
    }

    pub fn hidden_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.layers.len()).sum()
    }

    /// Closed-form parameter tally: per block M^2 for A plus K (M^2 + M) for
    /// the layers, plus the two read-out matrices and the output bias.
    pub fn param_count(&self) -> usize {
        let per_block: usize = self
            .blocks
            .iter()
            .map(|b| self.m * self.m + b.layers.len() * (self.m * self.m + self.m))
            .sum();
        per_block + 2 * self.state_dim * self.m + self.state_dim
    }

    /// Forward pass on a single measurement vector, arithmetically matched to
    /// the solver's inner loop (same operation order).
    pub fn forward_one(&self, z: &Array1<f64>) -> Array1<f64> {
        assert_eq!(z.len(), self.m, "measurement dimension mismatch");
        let mut u = Array1::zeros(self.m);
        for block in &self.blocks {
            let az = block.a.dot(z);
            for (w, b) in &block.layers {
                let azb = &az + &b.column(0);
                let mut pre = w.dot(&u) + &azb;
                pre.mapv_inplace(|x| block.activation.apply(x));
                u = pre;
            }
        }
        self.out_u.dot(&u) + self.out_z.dot(z) + &self.out_bias.column(0)
    }

    /// Smallest distance of any pre-activation to an activation kink over the
    /// forward pass; oracle tests use it to pick well-conditioned operating
    /// points for finite differences.
    pub fn kink_margin(&self, z: &Array1<f64>) -> f64 {
        let mut u = Array1::zeros(self.m);
        let mut margin = f64::INFINITY;
        for block in &self.blocks {
            let az = block.a.dot(z);
            for (w, b) in &block.layers {
                let azb = &az + &b.column(0);
                let mut pre = w.dot(&u) + &azb;
                for &x in pre.iter() {
                    margin = margin.min(block.activation.kink_distance(x));
                }
                pre.mapv_inplace(|x| block.activation.apply(x));
                u = pre;
            }
        }
        margin
    }
}

fn block_from_coeffs(
    a: &Array2<f64>,
    w: &Array2<f64>,
    bias: &Array1<f64>,
    eta: f64,
    layers: usize,
) -> ProxBlock {
    ProxBlock {
        a: a.clone(),
        layers: (0..layers)
            .map(|_| (w.clone(), column(bias)))
            .collect(),
        activation: Activation::SoftThreshold(eta),
    }
}

fn column(v: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((v.len(), 1));
    out.column_mut(0).assign(v);
    out
}

impl NetModel for ProxLinearNet {
    fn input_dim(&self) -> usize {
        self.m
    }

    fn output_dim(&self) -> usize {
        self.state_dim
    }

    fn forward_batch(&self, input: &Array2<f64>) -> Array2<f64> {
        let batch = input.ncols();
        let mut u = Array2::zeros((self.m, batch));
        for block in &self.blocks {
            let az = block.a.dot(input);
            for (w, b) in &block.layers {
                let mut pre = w.dot(&u) + &az + b;
                block.activation.apply_inplace(&mut pre);
                u = pre;
            }
        }
        let out = self.out_u.dot(&u) + self.out_z.dot(input) + &self.out_bias;
        debug_assert!(out.iter().all(|x| x.is_finite()), "non-finite forward output");
        out
    }

    fn loss_and_grad(
        &self,
        input: &Array2<f64>,
        target: &Array2<f64>,
        loss: Loss,
    ) -> (f64, Vec<Array2<f64>>) {
        let batch = input.ncols();
        // Forward, keeping each layer's input and pre-activation.
        let mut u = Array2::zeros((self.m, batch));
        let mut layer_inputs = Vec::new();
        let mut pre_acts = Vec::new();
        for block in &self.blocks {
            let az = block.a.dot(input);
            for (w, b) in &block.layers {
                let pre = w.dot(&u) + &az + b;
                layer_inputs.push(u);
                let mut post = pre.clone();
                block.activation.apply_inplace(&mut post);
                pre_acts.push(pre);
                u = post;
            }
        }
        let pred = self.out_u.dot(&u) + self.out_z.dot(input) + &self.out_bias;

        let entries = (self.state_dim * batch) as f64;
        let mut loss_total = 0.0;
        let mut g_pred = Array2::zeros(pred.dim());
        ndarray::Zip::from(&mut g_pred)
            .and(&pred)
            .and(target)
            .for_each(|g, &p, &t| {
                let e = p - t;
                loss_total += loss.value(e);
                *g = loss.derivative(e) / entries;
            });
        loss_total /= entries;

        let d_out_u = g_pred.dot(&u.t());
        let d_out_z = g_pred.dot(&input.t());
        let d_out_bias = column(&g_pred.sum_axis(ndarray::Axis(1)));
        let mut g_u = self.out_u.t().dot(&g_pred);

        // Walk the layers backwards, accumulating the shared A gradient per
        // block.
        let mut d_blocks: Vec<(Array2<f64>, Vec<(Array2<f64>, Array2<f64>)>)> = Vec::new();
        let mut layer_idx = pre_acts.len();
        for block in self.blocks.iter().rev() {
            let mut d_a = Array2::zeros((self.m, self.m));
            let mut d_layers: Vec<(Array2<f64>, Array2<f64>)> = Vec::new();
            for (w, _b) in block.layers.iter().rev() {
                layer_idx -= 1;
                let pre = &pre_acts[layer_idx];
                let mut g_pre = g_u;
                ndarray::Zip::from(&mut g_pre).and(pre).for_each(|g, &x| {
                    *g *= block.activation.derivative(x);
                });
                let d_w = g_pre.dot(&layer_inputs[layer_idx].t());
                let d_b = column(&g_pre.sum_axis(ndarray::Axis(1)));
                d_a += &g_pre.dot(&input.t());
                g_u = w.t().dot(&g_pre);
                d_layers.push((d_w, d_b));
            }
            d_layers.reverse();
            d_blocks.push((d_a, d_layers));
        }
        d_blocks.reverse();

        let mut grads = Vec::with_capacity(self.tensors().len());
        for (d_a, d_layers) in d_blocks {
            grads.push(d_a);
            for (d_w, d_b) in d_layers {
                grads.push(d_w);
                grads.push(d_b);
            }
        }
        grads.push(d_out_u);
        grads.push(d_out_z);
        grads.push(d_out_bias);
        (loss_total, grads)
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for block in &self.blocks {
            out.push(&block.a);
            for (w, b) in &block.layers {
                out.push(w);
                out.push(b);
            }
        }
        out.push(&self.out_u);
        out.push(&self.out_z);
        out.push(&self.out_bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.a);
            for (w, b) in &mut block.layers {
                out.push(w);
                out.push(b);
            }
        }
        out.push(&mut self.out_u);
        out.push(&mut self.out_z);
        out.push(&mut self.out_bias);
        out
    }
}
