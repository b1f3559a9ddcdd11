//! Newton-Raphson AC power flow in polar coordinates. Used to synthesize
//! ground-truth states; the result is converted to the rectangular
//! [`StateVector`] the estimators work with.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{build_admittance, AdmittanceModel, BusType, GridModel, StateVector};
use crate::linalg::LuFactor;

/// Voltage initialization for the Newton iteration.
#[derive(Debug, Clone, Default)]
pub enum PfInit {
    /// Magnitudes and angles from the case file (generator setpoints applied).
    #[default]
    CaseValues,
    /// 1.0 p.u. magnitude, zero angle everywhere (setpoints still applied).
    Flat,
    /// Explicit starting state.
    State(StateVector),
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub state: StateVector,
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Solves the power flow with default initialization from the case values.
pub fn solve_power_flow(grid: &GridModel, tol: f64, max_iter: usize) -> Result<PowerFlowSolution> {
    let adm = build_admittance(grid)?;
    solve_power_flow_with(grid, &adm, tol, max_iter, PfInit::CaseValues)
}

/// Power flow with a caller-supplied admittance model (so repeated solves over
/// a load series build the ybus once) and explicit initialization.
pub fn solve_power_flow_with(
    grid: &GridModel,
    adm: &AdmittanceModel,
    tol: f64,
    max_iter: usize,
    init: PfInit,
) -> Result<PowerFlowSolution> {
    if tol <= 0.0 {
        return Err(Error::Parse("power flow tolerance must be positive".into()));
    }
    let n = grid.n_buses();
    grid.slack_index()?;

    // Net scheduled injections and per-bus generator voltage setpoints.
    let mut p_spec = Array1::zeros(n);
    let mut q_spec = Array1::zeros(n);
    for (i, bus) in grid.buses.iter().enumerate() {
        p_spec[i] = -bus.pd;
        q_spec[i] = -bus.qd;
    }
    let mut vset: Vec<Option<f64>> = vec![None; n];
    for g in &grid.gens {
        p_spec[g.bus] += g.pg;
        q_spec[g.bus] += g.qg;
        if vset[g.bus].is_none() {
            vset[g.bus] = Some(g.vset);
        }
    }

    let mut bus_types: Vec<BusType> = grid.buses.iter().map(|b| b.bus_type).collect();
    for (i, t) in bus_types.iter_mut().enumerate() {
        if *t == BusType::Pv && vset[i].is_none() {
            log::warn!(
                "bus {} is PV but has no in-service generator; treating as PQ",
                grid.buses[i].id
            );
            *t = BusType::Pq;
        }
    }
    let pv: Vec<usize> = (0..n).filter(|&i| bus_types[i] == BusType::Pv).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| bus_types[i] == BusType::Pq).collect();
    let pvpq: Vec<usize> = pv.iter().chain(pq.iter()).copied().collect();
    let (npv, npq) = (pv.len(), pq.len());

    let (mut vm, mut va): (Vec<f64>, Vec<f64>) = match init {
        PfInit::CaseValues => (
            grid.buses.iter().map(|b| b.vm_init).collect(),
            grid.buses.iter().map(|b| b.va_init).collect(),
        ),
        PfInit::Flat => (vec![1.0; n], vec![0.0; n]),
        PfInit::State(sv) => {
            if sv.n_buses() != n {
                return Err(Error::DimensionMismatch(format!(
                    "init state has {} buses, grid has {n}",
                    sv.n_buses()
                )));
            }
            (sv.magnitudes(), sv.angles())
        }
    };
    // Setpoints pin the magnitude at generator buses and both quantities at
    // the slack.
    for (i, bus) in grid.buses.iter().enumerate() {
        match bus_types[i] {
            BusType::Slack => {
                vm[i] = vset[i].unwrap_or(bus.vm_init);
                va[i] = bus.va_init;
            }
            BusType::Pv => vm[i] = vset[i].unwrap_or(bus.vm_init),
            BusType::Pq => {}
        }
    }

    let voltages = |vm: &[f64], va: &[f64]| -> Vec<Complex64> {
        vm.iter()
            .zip(va.iter())
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    };
    let mismatch = |v: &[Complex64]| -> (Vec<Complex64>, f64) {
        let mut i_bus = vec![Complex64::ZERO; n];
        for r in 0..n {
            let mut acc = Complex64::ZERO;
            for c in 0..n {
                acc += adm.ybus[[r, c]] * v[c];
            }
            i_bus[r] = acc;
        }
        let mut ds = vec![Complex64::ZERO; n];
        let mut worst = 0.0_f64;
        for r in 0..n {
            let s = v[r] * i_bus[r].conj();
            ds[r] = s - Complex64::new(p_spec[r], q_spec[r]);
        }
        for &i in &pvpq {
            worst = worst.max(ds[i].re.abs());
        }
        for &i in &pq {
            worst = worst.max(ds[i].im.abs());
        }
        (ds, worst)
    };

    let mut v = voltages(&vm, &va);
    let (mut ds, mut worst) = mismatch(&v);
    let mut iterations = 0;

    while worst > tol {
        if iterations >= max_iter {
            return Err(Error::Diverged {
                iters: iterations,
                mismatch: worst,
            });
        }
        // Complex power sensitivities, then the real Jacobian blocks.
        let mut i_bus = vec![Complex64::ZERO; n];
        for r in 0..n {
            let mut acc = Complex64::ZERO;
            for c in 0..n {
                acc += adm.ybus[[r, c]] * v[c];
            }
            i_bus[r] = acc;
        }
        let dim = npv + 2 * npq;
        let mut jac = Array2::zeros((dim, dim));
        let mut rhs = Array1::zeros(dim);

        // ds/d(angle_j) = j*v_i*conj(delta_ij*i_i - y_ij*v_j)
        // ds/d(mag_j)   = v_i*conj(y_ij*vnorm_j) + conj(i_i)*delta_ij*vnorm_i
        let dva = |i: usize, j: usize| -> Complex64 {
            let delta = if i == j { i_bus[i] } else { Complex64::ZERO };
            Complex64::i() * v[i] * (delta - adm.ybus[[i, j]] * v[j]).conj()
        };
        let dvm = |i: usize, j: usize| -> Complex64 {
            let vnorm_j = v[j] / vm[j].max(1e-12);
            let mut out = v[i] * (adm.ybus[[i, j]] * vnorm_j).conj();
            if i == j {
                out += i_bus[i].conj() * vnorm_j;
            }
            out
        };

        for (row, &i) in pvpq.iter().enumerate() {
            for (col, &j) in pvpq.iter().enumerate() {
                jac[[row, col]] = dva(i, j).re;
            }
            for (col, &j) in pq.iter().enumerate() {
                jac[[row, npv + npq + col]] = dvm(i, j).re;
            }
            rhs[row] = -ds[i].re;
        }
        for (row, &i) in pq.iter().enumerate() {
            for (col, &j) in pvpq.iter().enumerate() {
                jac[[npv + npq + row, col]] = dva(i, j).im;
            }
            for (col, &j) in pq.iter().enumerate() {
                jac[[npv + npq + row, npv + npq + col]] = dvm(i, j).im;
            }
            rhs[npv + npq + row] = -ds[i].im;
        }

        let step = LuFactor::new(&jac)
            .map_err(|_| Error::SingularJacobian)?
            .solve(&rhs);
        for (k, &i) in pvpq.iter().enumerate() {
            va[i] += step[k];
        }
        for (k, &i) in pq.iter().enumerate() {
            vm[i] += step[npv + npq + k];
        }
        v = voltages(&vm, &va);
        let (ds_new, worst_new) = mismatch(&v);
        ds = ds_new;
        worst = worst_new;
        if !worst.is_finite() {
            return Err(Error::Diverged {
                iters: iterations + 1,
                mismatch: worst,
            });
        }
        iterations += 1;
    }
    let _ = ds;

    Ok(PowerFlowSolution {
        state: StateVector::from_polar(&vm, &va)?,
        iterations,
        max_mismatch: worst,
    })
}
