//! One-step state forecasting: a stacked recurrent network trained with
//! backpropagation through time, a VAR(1) least-squares baseline, window
//! dataset construction, and forecast-driven imputation of missing
//! measurements.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::grid::StateVector;
use crate::linalg::{check_rank, householder_qr, solve_upper, RANK_TOL};
use crate::measurement::{evaluate_measurements, MeasurementVector, QuadraticForm};
use crate::neuralnet::{
    adam_step_tensors, glorot_uniform, Activation, AdamState, Loss, TrainConfig,
};
use crate::par::{chunk_ranges, GRAD_CHUNK};
use crate::rng::{mix_seed, Rng};

/// Stacked recurrent forecaster. Layer `l` updates
/// `s_t^l = f(W_in[l] s_t^{l-1} + W_rec[l] s_{t-1}^l + bias[l])` with
/// `s_t^0` the input state, hidden states starting at zero; the forecast is
/// an affine read-out of the top hidden state after the last step.
#[derive(Debug, Clone)]
pub struct RnnForecaster {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    /// Number of lagged states fed to the network (present included).
    pub window: usize,
    pub w_in: Vec<Array2<f64>>,
    pub w_rec: Vec<Array2<f64>>,
    pub bias: Vec<Array2<f64>>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
    pub activation: Activation,
}

impl RnnForecaster {
    pub fn random(
        input_dim: usize,
        widths: &[usize],
        window: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        assert!(!widths.is_empty() && window >= 1);
        let mut rng = Rng::seed_from(seed);
        let mut w_in = Vec::new();
        let mut w_rec = Vec::new();
        let mut bias = Vec::new();
        let mut prev = input_dim;
        for &w in widths {
            w_in.push(glorot_uniform(w, prev, &mut rng));
            w_rec.push(glorot_uniform(w, w, &mut rng));
            bias.push(Array2::zeros((w, 1)));
            prev = w;
        }
        RnnForecaster {
            input_dim,
            widths: widths.to_vec(),
            window,
            w_in,
            w_rec,
            bias,
            w_out: glorot_uniform(input_dim, prev, &mut rng),
            b_out: Array2::zeros((input_dim, 1)),
            activation,
        }
    }

    /// Initialization at the last-value-persistence solution: identity input
    /// paths with a positive bias shift keep every ReLU active, and the
    /// read-out removes the accumulated shift, so the untrained network
    /// forecasts `v_t` exactly (plus `jitter`-scaled noise that breaks ties
    /// for training). Requires every hidden width to equal the input width.
    pub fn persistence(
        input_dim: usize,
        layers: usize,
        window: usize,
        activation: Activation,
        seed: u64,
        jitter: f64,
    ) -> Self {
        assert!(layers >= 1 && window >= 1);
        let mut rng = Rng::seed_from(seed);
        let shift = 1.0;
        let mut noisy = |rows: usize, cols: usize, base: &dyn Fn(usize, usize) -> f64| {
            Array2::from_shape_fn((rows, cols), |(i, j)| base(i, j) + jitter * rng.normal())
        };
        let eye = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
        let zero = |_: usize, _: usize| 0.0;
        let mut w_in = Vec::new();
        let mut w_rec = Vec::new();
        let mut bias = Vec::new();
        for _ in 0..layers {
            w_in.push(noisy(input_dim, input_dim, &eye));
            w_rec.push(noisy(input_dim, input_dim, &zero));
            bias.push(noisy(input_dim, 1, &|_, _| shift));
        }
        let w_out = noisy(input_dim, input_dim, &eye);
        let b_out = noisy(input_dim, 1, &|_, _| -(layers as f64) * shift);
        RnnForecaster {
            input_dim,
            widths: vec![input_dim; layers],
            window,
            w_in,
            w_rec,
            bias,
            w_out,
            b_out,
            activation,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len()
    }

    /// Forward over a batch of windows; `window[tau]` holds the inputs at lag
    /// step `tau` (oldest first), one sample per column.
    pub fn forward_batch(&self, window: &[Array2<f64>]) -> Array2<f64> {
        assert_eq!(window.len(), self.window, "window length mismatch");
        let batch = window[0].ncols();
        let layers = self.layer_count();
        let mut hidden: Vec<Array2<f64>> = self
            .widths
            .iter()
            .map(|&w| Array2::zeros((w, batch)))
            .collect();
        for x in window {
            for l in 0..layers {
                let below = if l == 0 { x } else { &hidden[l - 1] };
                let mut pre = self.w_in[l].dot(below) + self.w_rec[l].dot(&hidden[l]) + &self.bias[l];
                self.activation.apply_inplace(&mut pre);
                hidden[l] = pre;
            }
        }
        let out = self.w_out.dot(&hidden[layers - 1]) + &self.b_out;
        debug_assert!(out.iter().all(|x| x.is_finite()), "non-finite forecast");
        out
    }

    /// One-step forecast from the last `window` rows of a time-major series,
    /// predicting the state at `target_index`.
    pub fn forecast(&self, series: &Array2<f64>, target_index: usize) -> Result<Array1<f64>> {
        if target_index < self.window || target_index > series.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "target {target_index} needs {} history rows",
                self.window
            )));
        }
        let window: Vec<Array2<f64>> = (target_index - self.window..target_index)
            .map(|t| {
                let mut col = Array2::zeros((self.input_dim, 1));
                col.column_mut(0).assign(&series.row(t));
                col
            })
            .collect();
        let out = self.forward_batch(&window);
        Ok(out.column(0).to_owned())
    }

    /// Smallest distance of any pre-activation to an activation kink across
    /// the whole unrolled window; used by finite-difference oracles to avoid
    /// operating points where the subgradient convention dominates.
    pub fn kink_margin(&self, window: &[Array2<f64>]) -> f64 {
        let batch = window[0].ncols();
        let layers = self.layer_count();
        let mut margin = f64::INFINITY;
        let mut hidden: Vec<Array2<f64>> = self
            .widths
            .iter()
            .map(|&w| Array2::zeros((w, batch)))
            .collect();
        for x in window {
            for l in 0..layers {
                let below = if l == 0 { x } else { &hidden[l - 1] };
                let mut pre =
                    self.w_in[l].dot(below) + self.w_rec[l].dot(&hidden[l]) + &self.bias[l];
                for &v in pre.iter() {
                    margin = margin.min(self.activation.kink_distance(v));
                }
                self.activation.apply_inplace(&mut pre);
                hidden[l] = pre;
            }
        }
        margin
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for l in 0..self.layer_count() {
            out.push(&self.w_in[l]);
            out.push(&self.w_rec[l]);
            out.push(&self.bias[l]);
        }
        out.push(&self.w_out);
        out.push(&self.b_out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for ((w_in, w_rec), bias) in self
            .w_in
            .iter_mut()
            .zip(self.w_rec.iter_mut())
            .zip(self.bias.iter_mut())
        {
            out.push(w_in);
            out.push(w_rec);
            out.push(bias);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    /// Mean loss over the batch and exact gradients through all time steps
    /// and layers (backpropagation through time).
    pub fn loss_and_grad(
        &self,
        window: &[Array2<f64>],
        target: &Array2<f64>,
        loss: Loss,
    ) -> (f64, Vec<Array2<f64>>) {
        let r = self.window;
        let layers = self.layer_count();
        let batch = target.ncols();

        // Forward, keeping every pre-activation and hidden state.
        let mut states: Vec<Vec<Array2<f64>>> = Vec::with_capacity(r);
        let mut pres: Vec<Vec<Array2<f64>>> = Vec::with_capacity(r);
        let mut hidden: Vec<Array2<f64>> = self
            .widths
            .iter()
            .map(|&w| Array2::zeros((w, batch)))
            .collect();
        for x in window {
            let mut step_states = Vec::with_capacity(layers);
            let mut step_pres = Vec::with_capacity(layers);
            for l in 0..layers {
                let below = if l == 0 { x } else { &step_states[l - 1] };
                let pre = self.w_in[l].dot(below) + self.w_rec[l].dot(&hidden[l]) + &self.bias[l];
                let mut post = pre.clone();
                self.activation.apply_inplace(&mut post);
                step_pres.push(pre);
                step_states.push(post);
            }
            hidden = step_states.clone();
            states.push(step_states);
            pres.push(step_pres);
        }
        let pred = self.w_out.dot(&states[r - 1][layers - 1]) + &self.b_out;

        let entries = (self.input_dim * batch) as f64;
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

        let d_w_out = g_pred.dot(&states[r - 1][layers - 1].t());
        let d_b_out = sum_columns(&g_pred);
        let mut d_w_in: Vec<Array2<f64>> =
            self.w_in.iter().map(|w| Array2::zeros(w.dim())).collect();
        let mut d_w_rec: Vec<Array2<f64>> =
            self.w_rec.iter().map(|w| Array2::zeros(w.dim())).collect();
        let mut d_bias: Vec<Array2<f64>> =
            self.bias.iter().map(|b| Array2::zeros(b.dim())).collect();

        // g_state[tau][l]: gradient flowing into s_tau^l.
        let mut g_state: Vec<Vec<Array2<f64>>> = (0..r)
            .map(|_| {
                self.widths
                    .iter()
                    .map(|&w| Array2::zeros((w, batch)))
                    .collect()
            })
            .collect();
        g_state[r - 1][layers - 1] = self.w_out.t().dot(&g_pred);

        for tau in (0..r).rev() {
            for l in (0..layers).rev() {
                let mut g_pre = std::mem::replace(&mut g_state[tau][l], Array2::zeros((0, 0)));
                ndarray::Zip::from(&mut g_pre)
                    .and(&pres[tau][l])
                    .for_each(|g, &x| *g *= self.activation.derivative(x));
                let below = if l == 0 { &window[tau] } else { &states[tau][l - 1] };
                d_w_in[l] += &g_pre.dot(&below.t());
                if tau > 0 {
                    d_w_rec[l] += &g_pre.dot(&states[tau - 1][l].t());
                    g_state[tau - 1][l] += &self.w_rec[l].t().dot(&g_pre);
                }
                d_bias[l] += &sum_columns(&g_pre);
                if l > 0 {
                    g_state[tau][l - 1] += &self.w_in[l].t().dot(&g_pre);
                }
            }
        }

        let mut grads = Vec::new();
        for l in 0..layers {
            grads.push(std::mem::take(&mut d_w_in[l]));
            grads.push(std::mem::take(&mut d_w_rec[l]));
            grads.push(std::mem::take(&mut d_bias[l]));
        }
        grads.push(d_w_out);
        grads.push(d_b_out);
        (loss_total, grads)
    }
}

fn sum_columns(a: &Array2<f64>) -> Array2<f64> {
    let sums = a.sum_axis(Axis(1));
    let mut col = Array2::zeros((sums.len(), 1));
    col.column_mut(0).assign(&sums);
    col
}

/// Sliding one-step-ahead windows over a time-major state series. `targets`
/// are the time indices being predicted; the window for target `g` is rows
/// `g - window .. g`.
#[derive(Debug, Clone)]
pub struct WindowedSeries {
    pub series: Array2<f64>,
    pub window: usize,
    pub targets: Vec<usize>,
}

impl WindowedSeries {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Materializes a batch: `window` input matrices (oldest lag first) and
    /// the target matrix, one sample per column.
    pub fn batch(&self, indices: &[usize]) -> (Vec<Array2<f64>>, Array2<f64>) {
        let dim = self.series.ncols();
        let mut inputs: Vec<Array2<f64>> = (0..self.window)
            .map(|_| Array2::zeros((dim, indices.len())))
            .collect();
        let mut target = Array2::zeros((dim, indices.len()));
        for (col, &wi) in indices.iter().enumerate() {
            let g = self.targets[wi];
            for (tau, input) in inputs.iter_mut().enumerate() {
                input.column_mut(col).assign(&self.series.row(g - self.window + tau));
            }
            target.column_mut(col).assign(&self.series.row(g));
        }
        (inputs, target)
    }
}

/// Splits a series into train/test window sets at time index `split`
/// (samples before `split` are training). Windows never straddle the
/// boundary, so the two sets share no time index.
pub fn make_window_dataset(
    series: &Array2<f64>,
    window: usize,
    split: usize,
) -> Result<(WindowedSeries, WindowedSeries)> {
    let t_total = series.nrows();
    if window < 1 {
        return Err(Error::Parse("window must be at least 1".into()));
    }
    if t_total <= window + 1 {
        return Err(Error::SeriesTooShort {
            need: window + 1,
            got: t_total,
        });
    }
    let train_targets: Vec<usize> = (window..split.min(t_total)).collect();
    let test_targets: Vec<usize> = ((split + window).max(window)..t_total).collect();
    Ok((
        WindowedSeries {
            series: series.clone(),
            window,
            targets: train_targets,
        },
        WindowedSeries {
            series: series.clone(),
            window,
            targets: test_targets,
        },
    ))
}

fn rnn_batch_loss_and_grad(
    model: &RnnForecaster,
    data: &WindowedSeries,
    indices: &[usize],
    loss: Loss,
) -> (f64, Vec<Array2<f64>>) {
    let total = indices.len();
    let ranges = chunk_ranges(total, GRAD_CHUNK);
    let parts = crate::par::map_indexed(&ranges, |_, range| {
        let idx = &indices[range.clone()];
        let (window, target) = data.batch(idx);
        let (l, g) = model.loss_and_grad(&window, &target, loss);
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

/// Seeded minibatch Adam loop over a window dataset; the recurrent analogue
/// of [`crate::neuralnet::train_estimator`].
pub fn train_rnn(
    model: &RnnForecaster,
    data: &WindowedSeries,
    cfg: &TrainConfig,
) -> Result<(RnnForecaster, Vec<f64>)> {
    cfg.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::SeriesTooShort {
            need: data.window + 1,
            got: 0,
        });
    }
    if data.series.ncols() != model.input_dim || data.window != model.window {
        return Err(Error::DimensionMismatch(format!(
            "dataset ({} dims, window {}) vs model ({}, {})",
            data.series.ncols(),
            data.window,
            model.input_dim,
            model.window
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
            let (loss, grads) = rnn_batch_loss_and_grad(&trained, data, batch, cfg.loss);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            adam_step_tensors(trained.tensors_mut(), &grads, &mut adam, cfg, lr);
            epoch_loss += loss * batch.len() as f64;
        }
        history.push(epoch_loss / n as f64);
    }
    Ok((trained, history))
}

/// First-order vector autoregression `v_{t+1} ~ A v_t + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarParams {
    pub a: Array2<f64>,
    pub c: Array1<f64>,
}

/// Least-squares fit over the series rows. Falls back to a ridge (1e-8) when
/// the regression is rank deficient, e.g. for short or constant series.
pub fn var1_fit(series: &Array2<f64>) -> Result<VarParams> {
    let t_total = series.nrows();
    let dim = series.ncols();
    if t_total < 2 {
        return Err(Error::SeriesTooShort {
            need: 2,
            got: t_total,
        });
    }
    let rows = t_total - 1;
    let mut x = Array2::zeros((rows, dim + 1));
    for t in 0..rows {
        for j in 0..dim {
            x[[t, j]] = series[[t, j]];
        }
        x[[t, dim]] = 1.0;
    }

    let solve_with = |x_use: &Array2<f64>, ridge: bool| -> Result<Array2<f64>> {
        let (x_mat, extra) = if ridge {
            let lambda_sqrt = 1e-4; // sqrt of the 1e-8 ridge
            let mut aug = Array2::zeros((rows + dim + 1, dim + 1));
            aug.slice_mut(ndarray::s![..rows, ..]).assign(x_use);
            for j in 0..dim + 1 {
                aug[[rows + j, j]] = lambda_sqrt;
            }
            (aug, dim + 1)
        } else {
            if rows < dim + 1 {
                return Err(Error::IllConditioned);
            }
            (x_use.clone(), 0)
        };
        let (q, r) = householder_qr(&x_mat);
        check_rank(&r, RANK_TOL).map_err(|_| Error::IllConditioned)?;
        let qt = q.t();
        let mut theta = Array2::zeros((dim + 1, dim));
        for out in 0..dim {
            let mut rhs = Array1::zeros(dim + 1);
            for k in 0..dim + 1 {
                let mut acc = 0.0;
                for t in 0..rows {
                    acc += qt[[k, t]] * series[[t + 1, out]];
                }
                rhs[k] = acc;
            }
            let _ = extra; // augmented target rows are zero
            let col = solve_upper(&r, &rhs);
            theta.column_mut(out).assign(&col);
        }
        Ok(theta)
    };

    let theta = match solve_with(&x, false) {
        Ok(theta) => theta,
        Err(Error::IllConditioned) => {
            log::warn!("VAR(1) regression is ill-conditioned; refitting with ridge 1e-8");
            solve_with(&x, true)?
        }
        Err(e) => return Err(e),
    };

    let mut a = Array2::zeros((dim, dim));
    let mut c = Array1::zeros(dim);
    for out in 0..dim {
        for j in 0..dim {
            a[[out, j]] = theta[[j, out]];
        }
        c[out] = theta[[dim, out]];
    }
    Ok(VarParams { a, c })
}

pub fn var1_predict(params: &VarParams, v_t: &Array1<f64>) -> Array1<f64> {
    params.a.dot(v_t) + &params.c
}

/// A measurement vector completed from a forecast: missing entries are
/// replaced by the measurement function evaluated at the forecast state.
#[derive(Debug, Clone)]
pub struct ImputedMeasurements {
    pub values: Array1<f64>,
    /// True where the entry came from the forecast rather than telemetry.
    pub imputed: Vec<bool>,
}

pub fn impute_with_forecast(
    z: &MeasurementVector,
    forecast: &StateVector,
    forms: &[QuadraticForm],
) -> Result<ImputedMeasurements> {
    if z.len() != forms.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} measurements vs {} forms",
            z.len(),
            forms.len()
        )));
    }
    let virtual_z = evaluate_measurements(forms, forecast)?;
    let mut values = z.values.clone();
    let mut imputed = vec![false; z.len()];
    for m in 0..z.len() {
        if !z.mask[m] {
            values[m] = virtual_z[m];
            imputed[m] = true;
        }
    }
    Ok(ImputedMeasurements { values, imputed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::fnn::Fnn;
    use crate::neuralnet::NetModel;
    use approx::assert_abs_diff_eq;

    fn window_of(series: &Array2<f64>, r: usize, g: usize) -> Vec<Array2<f64>> {
        (g - r..g)
            .map(|t| {
                let mut col = Array2::zeros((series.ncols(), 1));
                col.column_mut(0).assign(&series.row(t));
                col
            })
            .collect()
    }

    #[test]
    fn zero_network_forecasts_zero() {
        let mut net = RnnForecaster::random(3, &[4, 4], 5, Activation::Relu, 1);
        for t in net.tensors_mut() {
            t.fill(0.0);
        }
        let mut rng = Rng::seed_from(2);
        let series = Array2::from_shape_fn((8, 3), |_| rng.normal());
        let out = net.forecast(&series, 6).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn copy_network_is_last_value_persistence() {
        // L=1, identity activation, W_rec = 0, W_in = I, W_out = I.
        let mut net = RnnForecaster::random(3, &[3], 4, Activation::Identity, 1);
        for t in net.tensors_mut() {
            t.fill(0.0);
        }
        for i in 0..3 {
            net.w_in[0][[i, i]] = 1.0;
            net.w_out[[i, i]] = 1.0;
        }
        let mut rng = Rng::seed_from(3);
        let series = Array2::from_shape_fn((10, 3), |_| rng.normal());
        let out = net.forecast(&series, 7).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(out[j], series[[6, j]], epsilon = 1e-14);
        }
    }

    #[test]
    fn forward_matches_literal_recursion() {
        let net = RnnForecaster::random(2, &[3, 2], 3, Activation::Relu, 7);
        let mut rng = Rng::seed_from(8);
        let series = Array2::from_shape_fn((5, 2), |_| rng.normal());
        let got = net.forecast(&series, 4).unwrap();

        // Literal step-by-step re-evaluation.
        let mut s1 = vec![0.0; 3];
        let mut s2 = vec![0.0; 2];
        for t in 1..4 {
            let x = [series[[t, 0]], series[[t, 1]]];
            let mut s1_new = vec![0.0; 3];
            for i in 0..3 {
                let mut acc = net.bias[0][[i, 0]];
                for j in 0..2 {
                    acc += net.w_in[0][[i, j]] * x[j];
                }
                for j in 0..3 {
                    acc += net.w_rec[0][[i, j]] * s1[j];
                }
                s1_new[i] = acc.max(0.0);
            }
            let mut s2_new = vec![0.0; 2];
            for i in 0..2 {
                let mut acc = net.bias[1][[i, 0]];
                for j in 0..3 {
                    acc += net.w_in[1][[i, j]] * s1_new[j];
                }
                for j in 0..2 {
                    acc += net.w_rec[1][[i, j]] * s2[j];
                }
                s2_new[i] = acc.max(0.0);
            }
            s1 = s1_new;
            s2 = s2_new;
        }
        for i in 0..2 {
            let mut acc = net.b_out[[i, 0]];
            for j in 0..2 {
                acc += net.w_out[[i, j]] * s2[j];
            }
            assert_abs_diff_eq!(got[i], acc, epsilon = 1e-13);
        }
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let net = RnnForecaster::random(2, &[3, 3], 4, Activation::Relu, 21);
        let mut rng = Rng::seed_from(100);
        let series = Array2::from_shape_fn((9, 2), |_| rng.normal());
        let window = window_of(&series, 4, 6);
        let mut target = Array2::zeros((2, 1));
        target.column_mut(0).assign(&series.row(6));
        let (_, grads) = net.loss_and_grad(&window, &target, Loss::Mse);
        let h = 1e-6;
        for ti in 0..net.tensors().len() {
            let dims = net.tensors()[ti].dim();
            for r in 0..dims.0 {
                for c in 0..dims.1 {
                    let mut up = net.clone();
                    up.tensors_mut()[ti][[r, c]] += h;
                    let mut dn = net.clone();
                    dn.tensors_mut()[ti][[r, c]] -= h;
                    let (lu, _) = up.loss_and_grad(&window, &target, Loss::Mse);
                    let (ld, _) = dn.loss_and_grad(&window, &target, Loss::Mse);
                    let fd = (lu - ld) / (2.0 * h);
                    let got = grads[ti][[r, c]];
                    let tol = (1e-5 * fd.abs().max(got.abs())).max(1e-8);
                    assert!(
                        (fd - got).abs() <= tol,
                        "tensor {ti} ({r},{c}): fd {fd} vs {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn window_one_reduces_to_feedforward() {
        // With r = 1 the recurrent path never fires, so gradients for the
        // input weights match an FNN with the same weights.
        let rnn = RnnForecaster::random(3, &[4, 3], 1, Activation::Relu, 33);
        let mut fnn = Fnn::random(&[3, 4, 3, 3], Activation::Relu, 0);
        fnn.layers[0].0.assign(&rnn.w_in[0]);
        fnn.layers[0].1.assign(&rnn.bias[0]);
        fnn.layers[1].0.assign(&rnn.w_in[1]);
        fnn.layers[1].1.assign(&rnn.bias[1]);
        fnn.layers[2].0.assign(&rnn.w_out);
        fnn.layers[2].1.assign(&rnn.b_out);

        let mut rng = Rng::seed_from(44);
        let x = Array2::from_shape_fn((3, 5), |_| rng.normal());
        let t = Array2::from_shape_fn((3, 5), |_| rng.normal());
        let window = vec![x.clone()];

        let rnn_out = rnn.forward_batch(&window);
        let fnn_out = fnn.forward_batch(&x);
        for (a, b) in rnn_out.iter().zip(fnn_out.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-13);
        }

        let (lr, gr) = rnn.loss_and_grad(&window, &t, Loss::Mse);
        let (lf, gf) = fnn.loss_and_grad(&x, &t, Loss::Mse);
        assert_abs_diff_eq!(lr, lf, epsilon = 1e-13);
        // RNN tensor order: [w_in0, w_rec0, b0, w_in1, w_rec1, b1, w_out, b_out]
        // FNN tensor order: [w0, b0, w1, b1, w2, b2]
        let pairs = [(0, 0), (2, 1), (3, 2), (5, 3), (6, 4), (7, 5)];
        for (ri, fi) in pairs {
            for (a, b) in gr[ri].iter().zip(gf[fi].iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        // Recurrent weights see a zero initial state, so their gradient is 0.
        assert!(gr[1].iter().all(|&x| x == 0.0));
        assert!(gr[4].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn window_dataset_counts_and_split_hygiene() {
        let series = Array2::zeros((5, 2));
        let (train, test) = make_window_dataset(&series, 3, 5).unwrap();
        assert_eq!(train.len() + test.len(), 2); // length r+2 gives 2 windows
        assert!(matches!(
            make_window_dataset(&Array2::zeros((4, 2)), 3, 2),
            Err(Error::SeriesTooShort { .. })
        ));

        let series = Array2::zeros((100, 2));
        let (train, test) = make_window_dataset(&series, 10, 60).unwrap();
        // No test window may touch a time index < split.
        for &g in &test.targets {
            assert!(g - 10 >= 60);
        }
        for &g in &train.targets {
            assert!(g < 60);
        }
        assert_eq!(train.len(), 60 - 10);
        assert_eq!(test.len(), (100 - 60) - 10);
    }

    #[test]
    fn window_counts_match_protocol_formula() {
        let series = Array2::zeros((7676, 2));
        let (train, test) = make_window_dataset(&series, 10, 6176).unwrap();
        assert_eq!(train.len(), 6166);
        assert_eq!(test.len(), 1490);
    }

    #[test]
    fn forecast_is_causal() {
        let net = RnnForecaster::random(2, &[3], 4, Activation::Relu, 9);
        let mut rng = Rng::seed_from(10);
        let mut series = Array2::from_shape_fn((12, 2), |_| rng.normal());
        let before = net.forecast(&series, 8).unwrap();
        // Perturb strictly future rows; the forecast must not move.
        for t in 8..12 {
            for j in 0..2 {
                series[[t, j]] += 100.0;
            }
        }
        let after = net.forecast(&series, 8).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn var_recovers_linear_dynamics() {
        // Generator: damped double rotation, so every direction stays excited
        // while the one-step relation holds exactly.
        let dim = 3;
        let mut rng = Rng::seed_from(17);
        let (s1, c1) = (0.7_f64.sin(), 0.7_f64.cos());
        let (s2, c2) = (0.4_f64.sin(), 0.4_f64.cos());
        let r01 = ndarray::array![[c1, -s1, 0.0], [s1, c1, 0.0], [0.0, 0.0, 1.0]];
        let r12 = ndarray::array![[1.0, 0.0, 0.0], [0.0, c2, -s2], [0.0, s2, c2]];
        let a_true = r01.dot(&r12).mapv(|x| 0.98 * x);
        let c_true = Array1::from_shape_fn(dim, |_| rng.normal() * 0.1);
        let mut series = Array2::zeros((60, dim));
        let mut v = Array1::from_shape_fn(dim, |_| rng.normal());
        for t in 0..60 {
            series.row_mut(t).assign(&v);
            v = a_true.dot(&v) + &c_true;
        }
        let params = var1_fit(&series).unwrap();
        for (a, b) in params.a.iter().zip(a_true.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        for (a, b) in params.c.iter().zip(c_true.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        // One-step prediction on the generator series is exact.
        let last = series.row(58).to_owned();
        let pred = var1_predict(&params, &last);
        for (p, w) in pred.iter().zip(series.row(59).iter()) {
            assert_abs_diff_eq!(p, w, epsilon = 1e-8);
        }
    }

    #[test]
    fn var_constant_series_uses_ridge() {
        let mut series = Array2::zeros((30, 2));
        series.fill(0.7);
        let params = var1_fit(&series).unwrap();
        let pred = var1_predict(&params, &Array1::from_elem(2, 0.7));
        for p in pred.iter() {
            assert_abs_diff_eq!(p, &0.7, epsilon = 1e-8);
        }
    }

    #[test]
    fn imputation_replaces_only_missing_entries() {
        let grid = crate::grid::parse_matpower_case(crate::cases::CASE14).unwrap();
        let adm = crate::grid::build_admittance(&grid).unwrap();
        let plan = crate::measurement::MeasurementPlan::default_for(&grid);
        let forms = crate::measurement::build_measurement_matrices(&adm, &plan).unwrap();
        let truth = crate::grid::solve_power_flow(&grid, 1e-10, 30).unwrap().state;
        let z = evaluate_measurements(&forms, &truth).unwrap();
        let m = forms.len();

        let full = MeasurementVector {
            values: z.clone(),
            mask: vec![true; m],
            noise_sigmas: Array1::zeros(m),
            seed: 0,
        };
        let same = impute_with_forecast(&full, &truth, &forms).unwrap();
        assert_eq!(same.values, z);
        assert!(same.imputed.iter().all(|&f| !f));

        let mut masked = full.clone();
        for i in 0..m {
            masked.mask[i] = i % 3 != 0;
            if !masked.mask[i] {
                masked.values[i] = 0.0;
            }
        }
        let fixed = impute_with_forecast(&masked, &truth, &forms).unwrap();
        for i in 0..m {
            assert_abs_diff_eq!(fixed.values[i], z[i], epsilon = 1e-12);
            assert_eq!(fixed.imputed[i], i % 3 == 0);
        }

        let all_missing = MeasurementVector {
            values: Array1::zeros(m),
            mask: vec![false; m],
            noise_sigmas: Array1::zeros(m),
            seed: 0,
        };
        let virt = impute_with_forecast(&all_missing, &truth, &forms).unwrap();
        assert_eq!(virt.values, z);
    }

    #[test]
    fn training_learns_a_constant_series() {
        let dim = 3;
        let mut series = Array2::zeros((40, dim));
        for t in 0..40 {
            for j in 0..dim {
                series[[t, j]] = 0.5 + 0.1 * j as f64;
            }
        }
        let (train, _) = make_window_dataset(&series, 4, 38).unwrap();
        let net = RnnForecaster::random(dim, &[dim], 4, Activation::Relu, 5);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-2,
            loss: Loss::Mse,
            seed: 3,
            ..Default::default()
        };
        let (trained, history) = train_rnn(&net, &train, &cfg).unwrap();
        assert!(history.last().unwrap() < &1e-6, "loss {:?}", history.last());
        let pred = trained.forecast(&series, 20).unwrap();
        for j in 0..dim {
            assert!((pred[j] - series[[20, j]]).abs() <= 1e-4 * 10.0);
        }
        // Determinism.
        let (again, _) = train_rnn(&net, &train, &cfg).unwrap();
        for (a, b) in trained.tensors().iter().zip(again.tensors().iter()) {
            assert_eq!(a, b);
        }
    }
}
