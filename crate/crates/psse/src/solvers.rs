//! Iterative state estimators: the least-absolute-value prox-linear solver
//! with an ISTA inner loop, and a Gauss-Newton weighted least-squares
//! baseline.
//!
//! Every SCADA-type measurement is invariant under a common rotation of all
//! bus voltages, so the measurement Jacobian always has the rotation
//! generator in its null space. Both solvers pin that direction with a
//! zero-weight gauge row when inverting, and optionally rotate the final
//! estimate onto a caller-supplied angle reference.

use std::time::Instant;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::grid::StateVector;
use crate::linalg::{
    check_rank, householder_qr, power_iteration_lambda_max, solve_upper, LuFactor, RANK_TOL,
};
use crate::measurement::{evaluate_measurements, jacobian_at, QuadraticForm};

/// Entry-wise soft-thresholding: the proximal map of `eta * |x|`.
pub fn soft_threshold(x: f64, eta: f64) -> f64 {
    if x > eta {
        x - eta
    } else if x < -eta {
        x + eta
    } else {
        0.0
    }
}

pub fn soft_threshold_inplace(x: &mut Array1<f64>, eta: f64) {
    x.mapv_inplace(|v| soft_threshold(v, eta));
}

/// Mean absolute residual `(1/M) * sum_m |z_m - v' H_m v|`.
pub fn lav_objective(forms: &[QuadraticForm], z: &Array1<f64>, v: &StateVector) -> Result<f64> {
    if z.len() != forms.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} measurements vs {} forms",
            z.len(),
            forms.len()
        )));
    }
    let h = evaluate_measurements(forms, v)?;
    Ok(z.iter()
        .zip(h.iter())
        .map(|(zi, hi)| (zi - hi).abs())
        .sum::<f64>()
        / forms.len() as f64)
}

/// Strict left pseudo-inverse of a full-column-rank matrix via Householder
/// QR, with the rank check on the R diagonal.
pub fn pseudo_inverse(j: &Array2<f64>) -> Result<Array2<f64>> {
    crate::linalg::pinv_full_rank(j, RANK_TOL)
}

/// Angle reference used to fix the rotation gauge of an estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleRef {
    /// Internal bus index whose angle is pinned.
    pub bus: usize,
    /// Target angle in radians.
    pub angle: f64,
}

/// Unit vector along the rotation generator at `v`: per bus, the direction
/// `(-v_im, v_re)`. Measurement rows are orthogonal to it at `v`.
pub fn rotation_direction(v: &StateVector) -> Array1<f64> {
    let vals = v.values();
    let mut w = Array1::zeros(vals.len());
    for n in 0..v.n_buses() {
        w[2 * n] = -vals[2 * n + 1];
        w[2 * n + 1] = vals[2 * n];
    }
    let norm = w.dot(&w).sqrt();
    if norm > 0.0 {
        w.mapv_inplace(|x| x / norm);
    }
    w
}

/// Left inverse of the measurement Jacobian with the rotation direction at
/// `v` pinned: QR of `[J; sqrt(kappa) w']`, giving `B J = I - w w'` exactly.
/// Genuine unobservability (rank below 2N-1) still surfaces as
/// `RankDeficient`.
pub fn pinv_with_angle_ref(j: &Array2<f64>, v: &StateVector) -> Result<Array2<f64>> {
    let (m, dim) = j.dim();
    if v.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "jacobian has {dim} columns, state has {} entries",
            v.dim()
        )));
    }
    let w = rotation_direction(v);
    let frob2: f64 = j.iter().map(|x| x * x).sum();
    let kappa = (frob2 / dim as f64).max(f64::MIN_POSITIVE);
    let scale = kappa.sqrt();
    let mut augmented = Array2::zeros((m + 1, dim));
    augmented.slice_mut(ndarray::s![..m, ..]).assign(j);
    for c in 0..dim {
        augmented[[m, c]] = scale * w[c];
    }
    let (q, r) = householder_qr(&augmented);
    check_rank(&r, RANK_TOL)?;
    // B = R^-1 * (first m columns of Q'); the gauge row contributes zero
    // right-hand side.
    let qt = q.t();
    let mut b = Array2::zeros((dim, m));
    for col in 0..m {
        let rhs = qt.column(col).to_owned();
        let x = solve_upper(&r, &rhs);
        b.column_mut(col).assign(&x);
    }
    Ok(b)
}

/// The affine ISTA layer map for one outer iteration:
/// `u <- S_eta(w u + a z + bias)` with
/// `w = I - c B'B`, `a = -c B'B`, `bias = c B' v_ref`, `c = eta M / (2 mu)`.
#[derive(Debug, Clone)]
pub struct IstaCoeffs {
    pub w: Array2<f64>,
    pub a: Array2<f64>,
    pub bias: Array1<f64>,
    pub eta: f64,
}

pub fn ista_coeffs(b_op: &Array2<f64>, v_ref: &Array1<f64>, mu: f64, eta: f64) -> IstaCoeffs {
    let m = b_op.ncols();
    let c = eta * m as f64 / (2.0 * mu);
    let mut g = b_op.t().dot(b_op);
    g.mapv_inplace(|x| c * x);
    let mut w = g.clone();
    w.mapv_inplace(|x| -x);
    for i in 0..m {
        w[[i, i]] += 1.0;
    }
    let a = {
        let mut a = g;
        a.mapv_inplace(|x| -x);
        a
    };
    let bias = b_op.t().dot(v_ref).mapv(|x| c * x);
    IstaCoeffs { w, a, bias, eta }
}

/// Runs `iters` ISTA iterations on the Lasso reformulation of the prox-linear
/// subproblem, starting from `u0`. Returns the final iterate and the
/// infinity-norm of the last update.
pub fn ista_solve(
    b_op: &Array2<f64>,
    z: &Array1<f64>,
    v_ref: &Array1<f64>,
    mu: f64,
    eta: f64,
    iters: usize,
    u0: &Array1<f64>,
) -> (Array1<f64>, f64) {
    let coeffs = ista_coeffs(b_op, v_ref, mu, eta);
    ista_iterate(&coeffs, z, iters, u0)
}

pub fn ista_iterate(
    coeffs: &IstaCoeffs,
    z: &Array1<f64>,
    iters: usize,
    u0: &Array1<f64>,
) -> (Array1<f64>, f64) {
    let az_bias = coeffs.a.dot(z) + &coeffs.bias;
    let mut u = u0.clone();
    let mut last_delta = 0.0;
    for _ in 0..iters {
        let mut next = coeffs.w.dot(&u) + &az_bias;
        soft_threshold_inplace(&mut next, coeffs.eta);
        last_delta = u
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        u = next;
    }
    (u, last_delta)
}

/// Step-size rule for the outer prox-linear iteration.
///
/// `mu` controls which residual coordinates the inner Lasso treats as
/// ell-1 (left large, i.e. distrusted) versus quadratically fitted: a
/// coordinate activates when its correlation `|B_m' (B(u+z) - v)|` exceeds
/// `2 mu / M`. Large fixed values therefore reduce the iteration to plain
/// least-squares reconstruction; the adaptive rule keeps the threshold at a
/// fixed fraction of the current peak correlation, so gross errors stay
/// damped all the way to convergence.
#[derive(Debug, Clone)]
pub enum MuRule {
    /// mu_i = (M/2) * multiple * median_m |B_m' (B(u+z) - v_i)|. Far from
    /// convergence the bulk correlations are large, so the threshold sits
    /// above everything and the update is a plain quadratic step; near
    /// convergence the bulk drops to the noise scale and only gross-error
    /// coordinates (several times the median) stay ell-1 damped.
    Adaptive { multiple: f64 },
    /// mu_i = M/2, making the quadratic weight M/(2 mu) equal one. Note this
    /// leaves the soft threshold inert at realistic residual scales.
    HalfM,
    Fixed(f64),
    Schedule(Vec<f64>),
}

/// ISTA step-size rule.
#[derive(Debug, Clone)]
pub enum EtaRule {
    /// eta = 2 mu / (M lambda_max(B'B)), the descent bound, with lambda_max
    /// estimated by 20 power-iteration steps. At mu = M/2 this is
    /// 1/lambda_max.
    StabilityBound,
    /// Explicit eta for the nominal mu; scaled proportionally if the
    /// safeguard shrinks mu.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct ProxLinearConfig {
    /// Number of outer linearization blocks to run.
    pub outer_blocks: usize,
    /// ISTA iterations per outer block.
    pub inner_iters: usize,
    pub mu: MuRule,
    pub eta: EtaRule,
    /// Starting state; all-ones rectangular when absent.
    pub init_state: Option<StateVector>,
    /// Rotate the final estimate onto this angle reference.
    pub angle_ref: Option<AngleRef>,
    /// Consecutive mu halvings allowed before declaring divergence.
    pub max_backtracks: usize,
    /// Keep the per-block left inverses in the trace (needed to tie an
    /// unrolled network to the solver trajectory).
    pub record_operators: bool,
}

impl Default for ProxLinearConfig {
    fn default() -> Self {
        ProxLinearConfig {
            outer_blocks: 16,
            inner_iters: 250,
            mu: MuRule::Adaptive { multiple: 3.0 },
            eta: EtaRule::StabilityBound,
            init_state: None,
            angle_ref: None,
            max_backtracks: 20,
            record_operators: false,
        }
    }
}

impl ProxLinearConfig {
    /// Nominal (pre-backtracking) mu for one outer block. `peak_correlation`
    /// is the median of `|B_m' (B(u+z) - v_i)|` at the block's linearization
    /// point; only the adaptive rule reads it.
    pub fn mu_for(&self, block: usize, m: usize, peak_correlation: f64) -> f64 {
        match &self.mu {
            MuRule::Adaptive { multiple } => {
                (m as f64 / 2.0 * multiple * peak_correlation).max(f64::MIN_POSITIVE)
            }
            MuRule::HalfM => m as f64 / 2.0,
            MuRule::Fixed(mu) => *mu,
            MuRule::Schedule(s) => s[block.min(s.len() - 1)],
        }
    }
}

/// Per-solve diagnostics: outer iterates, objectives, accepted step sizes,
/// inner residuals, and wall-clock block timings.
#[derive(Debug, Clone, Default)]
pub struct SolveTrace {
    pub iterates: Vec<StateVector>,
    pub objectives: Vec<f64>,
    pub inner_residuals: Vec<f64>,
    pub mus: Vec<f64>,
    pub etas: Vec<f64>,
    /// False for a block whose safeguard exhausted its budget; the solver
    /// keeps the previous iterate and stops there (only possible for the
    /// final recorded block).
    pub accepted: Vec<bool>,
    pub operators: Option<Vec<Array2<f64>>>,
    pub seconds: Vec<f64>,
}

impl SolveTrace {
    pub fn to_json(&self) -> String {
        #[derive(serde::Serialize)]
        struct TraceFile<'a> {
            schema: &'static str,
            objectives: &'a [f64],
            inner_residuals: &'a [f64],
            mus: &'a [f64],
            etas: &'a [f64],
            seconds: &'a [f64],
        }
        serde_json::to_string_pretty(&TraceFile {
            schema: "trace/1",
            objectives: &self.objectives,
            inner_residuals: &self.inner_residuals,
            mus: &self.mus,
            etas: &self.etas,
            seconds: &self.seconds,
        })
        .expect("trace serialization cannot fail")
    }
}

/// Prox-linear solver for the LAV estimate.
///
/// Each outer block linearizes the quadratic measurement model at the current
/// iterate, solves the resulting Lasso subproblem with `inner_iters` ISTA
/// steps (warm-started from the previous block), and averages back:
/// `v_next = (B (u* + z) + v) / 2`. A backtracking safeguard halves `mu`
/// (scaling `eta` with it) until the LAV objective stops increasing.
pub fn prox_linear_lav(
    forms: &[QuadraticForm],
    z: &Array1<f64>,
    cfg: &ProxLinearConfig,
) -> Result<(StateVector, SolveTrace)> {
    let m = forms.len();
    if m == 0 || z.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} measurements vs {} forms",
            z.len(),
            m
        )));
    }
    let dim = forms[0].dim();
    if m < dim {
        return Err(Error::DimensionMismatch(format!(
            "observability requires M >= 2N, got M = {m}, 2N = {dim}"
        )));
    }
    let mut v = match &cfg.init_state {
        Some(s) => {
            if s.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "init state dimension {} vs 2N = {dim}",
                    s.dim()
                )));
            }
            s.clone()
        }
        None => StateVector::new(Array1::ones(dim))?,
    };

    let mut trace = SolveTrace {
        operators: cfg.record_operators.then(Vec::new),
        ..Default::default()
    };
    let mut objective = lav_objective(forms, z, &v)?;
    if !objective.is_finite() {
        return Err(Error::Diverged {
            iters: 0,
            mismatch: objective,
        });
    }
    trace.iterates.push(v.clone());
    trace.objectives.push(objective);

    let mut u_warm = Array1::zeros(m);
    for block in 0..cfg.outer_blocks {
        let started = Instant::now();
        let jac = jacobian_at(forms, &v)?;
        let b_op = pinv_with_angle_ref(&jac, &v)?;
        let lambda = power_iteration_lambda_max(m, 20, |x| b_op.t().dot(&b_op.dot(x)));
        let median_corr = {
            let recon_err = b_op.dot(&(&u_warm + z)) - v.values();
            let mut mags: Vec<f64> =
                b_op.t().dot(&recon_err).iter().map(|x| x.abs()).collect();
            mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mags[mags.len() / 2]
        };
        let mu_base = cfg.mu_for(block, m, median_corr);

        let mut accepted = None;
        for attempt in 0..=cfg.max_backtracks {
            let mu = mu_base / (1u64 << attempt.min(62)) as f64;
            let eta = match &cfg.eta {
                EtaRule::StabilityBound => {
                    if lambda > 0.0 {
                        2.0 * mu / (m as f64 * lambda)
                    } else {
                        return Err(Error::RankDeficient { index: 0, value: 0.0 });
                    }
                }
                EtaRule::Fixed(e) => e * (mu / mu_base),
            };
            let (u_cand, resid) =
                ista_solve(&b_op, z, v.values(), mu, eta, cfg.inner_iters, &u_warm);
            let raw = (b_op.dot(&(&u_cand + z)) + v.values()) / 2.0;
            let Ok(v_cand) = StateVector::new(raw) else {
                continue; // non-finite candidate: shrink the step
            };
            let obj_cand = lav_objective(forms, z, &v_cand)?;
            if obj_cand.is_finite() && obj_cand <= objective * (1.0 + 1e-12) + 1e-15 {
                accepted = Some((u_cand, v_cand, obj_cand, resid, mu, eta));
                break;
            }
        }
        let Some((u_acc, v_acc, obj_acc, resid, mu, eta)) = accepted else {
            // Every step size failed to decrease the objective. With a
            // fixed inner iteration count this is the expected signature of
            // stationarity (the candidate wiggles at the inner solver's
            // accuracy), so keep the current iterate and stop. Further
            // blocks would replay the same rejection.
            trace.iterates.push(v.clone());
            trace.objectives.push(objective);
            trace.inner_residuals.push(f64::NAN);
            trace.mus.push(mu_base / (1u64 << cfg.max_backtracks.min(62)) as f64);
            trace.etas.push(f64::NAN);
            trace.accepted.push(false);
            trace.seconds.push(started.elapsed().as_secs_f64());
            if let Some(ops) = trace.operators.as_mut() {
                ops.push(b_op);
            }
            break;
        };
        u_warm = u_acc;
        v = v_acc;
        objective = obj_acc;
        trace.iterates.push(v.clone());
        trace.objectives.push(objective);
        trace.inner_residuals.push(resid);
        trace.mus.push(mu);
        trace.etas.push(eta);
        trace.accepted.push(true);
        trace.seconds.push(started.elapsed().as_secs_f64());
        if let Some(ops) = trace.operators.as_mut() {
            ops.push(b_op);
        }
    }

    let out = match cfg.angle_ref {
        Some(gauge) => v.align_angle(gauge.bus, gauge.angle),
        None => v,
    };
    Ok((out, trace))
}

/// Gauss-Newton iteration on the weighted least-squares criterion.
///
/// Updates `v <- v + (G'WG)^-1 G'W (z - h(v))` with `G = 2 J(v)` the true
/// measurement gradient; the gauge direction is pinned the same way as in the
/// prox-linear solver. Stops when the step infinity-norm drops below `tol`
/// or the iteration budget runs out.
pub fn gauss_newton_wls(
    forms: &[QuadraticForm],
    z: &Array1<f64>,
    weights: &Array1<f64>,
    init: &StateVector,
    max_iter: usize,
    tol: f64,
    angle_ref: Option<AngleRef>,
) -> Result<(StateVector, SolveTrace)> {
    let m = forms.len();
    if z.len() != m || weights.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} measurements, {} weights, {} forms",
            z.len(),
            weights.len(),
            m
        )));
    }
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::Parse("weights must be positive".into()));
    }
    let dim = forms[0].dim();
    if m < dim {
        return Err(Error::DimensionMismatch(format!(
            "observability requires M >= 2N, got M = {m}, 2N = {dim}"
        )));
    }

    let mut v = init.clone();
    let mut trace = SolveTrace::default();
    let wls = |v: &StateVector| -> Result<f64> {
        let h = evaluate_measurements(forms, v)?;
        Ok(z.iter()
            .zip(h.iter())
            .zip(weights.iter())
            .map(|((zi, hi), wi)| wi * (zi - hi) * (zi - hi))
            .sum::<f64>()
            / m as f64)
    };
    trace.iterates.push(v.clone());
    trace.objectives.push(wls(&v)?);

    for it in 0..max_iter {
        let started = Instant::now();
        let jac = jacobian_at(forms, &v)?;
        let residual = {
            let h = evaluate_measurements(forms, &v)?;
            z - &h
        };
        // gain = G'WG + kappa w w', rhs = G'W r, with G = 2 J.
        let mut weighted = jac.clone();
        for (mut row, &wi) in weighted.rows_mut().into_iter().zip(weights.iter()) {
            row.mapv_inplace(|x| 2.0 * wi * x);
        }
        let g = jac.mapv(|x| 2.0 * x);
        let mut gain = g.t().dot(&weighted);
        let rhs = weighted.t().dot(&residual);
        let w = rotation_direction(&v);
        let kappa = {
            let tr: f64 = (0..dim).map(|i| gain[[i, i]]).sum();
            (tr / dim as f64).max(f64::MIN_POSITIVE)
        };
        for i in 0..dim {
            for j in 0..dim {
                gain[[i, j]] += kappa * w[i] * w[j];
            }
        }
        let step = LuFactor::new(&gain)
            .map_err(|_| Error::SingularGain)?
            .solve(&rhs);
        let step_norm = step.iter().fold(0.0_f64, |a, &s| a.max(s.abs()));
        let raw = v.values() + &step;
        v = StateVector::new(raw).map_err(|_| Error::Diverged {
            iters: it + 1,
            mismatch: f64::INFINITY,
        })?;
        let obj = wls(&v)?;
        if !obj.is_finite() {
            return Err(Error::Diverged {
                iters: it + 1,
                mismatch: obj,
            });
        }
        trace.iterates.push(v.clone());
        trace.objectives.push(obj);
        trace.inner_residuals.push(step_norm);
        trace.seconds.push(started.elapsed().as_secs_f64());
        if step_norm <= tol {
            break;
        }
    }

    let out = match angle_ref {
        Some(gauge) => v.align_angle(gauge.bus, gauge.angle),
        None => v,
    };
    Ok((out, trace))
}
