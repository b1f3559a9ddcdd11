//! Quadratic measurement model: each SCADA quantity (squared voltage
//! magnitude, nodal injection, branch flow) equals `v' H_m v` for a sparse
//! symmetric matrix `H_m` over the rectangular state vector.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{AdmittanceModel, GridModel, StateVector};
use crate::rng::Rng;

pub const PLAN_SCHEMA: &str = "plan/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasurementKind {
    /// Squared voltage magnitude |V_n|^2 at a bus.
    Vmag2,
    /// Active / reactive nodal injection at a bus.
    Pinj,
    Qinj,
    /// Active / reactive flow at the from ("forwarding") end of a branch.
    PflowF,
    QflowF,
    /// Active / reactive flow at the to ("terminal") end of a branch.
    PflowT,
    QflowT,
}

impl MeasurementKind {
    pub fn is_bus_quantity(self) -> bool {
        matches!(
            self,
            MeasurementKind::Vmag2 | MeasurementKind::Pinj | MeasurementKind::Qinj
        )
    }
}

/// An ordered list of measured quantities. `location` is an internal bus
/// index for bus quantities and a branch index for flow quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    pub entries: Vec<(MeasurementKind, usize)>,
}

impl MeasurementPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The default experiment plan: every squared voltage magnitude plus the
    /// active and reactive flows at the forwarding end of every in-service
    /// branch. Observable (M >= 2N) on any connected grid.
    pub fn default_for(grid: &GridModel) -> MeasurementPlan {
        let mut entries = Vec::new();
        for n in 0..grid.n_buses() {
            entries.push((MeasurementKind::Vmag2, n));
        }
        for (b, br) in grid.branches.iter().enumerate() {
            if br.in_service {
                entries.push((MeasurementKind::PflowF, b));
            }
        }
        for (b, br) in grid.branches.iter().enumerate() {
            if br.in_service {
                entries.push((MeasurementKind::QflowF, b));
            }
        }
        MeasurementPlan { entries }
    }

    /// Default plan extended with all nodal injections.
    pub fn with_injections(grid: &GridModel) -> MeasurementPlan {
        let mut plan = Self::default_for(grid);
        for n in 0..grid.n_buses() {
            plan.entries.push((MeasurementKind::Pinj, n));
            plan.entries.push((MeasurementKind::Qinj, n));
        }
        plan
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct PlanFile<'a> {
            schema: &'static str,
            entries: &'a [(MeasurementKind, usize)],
        }
        Ok(serde_json::to_string_pretty(&PlanFile {
            schema: PLAN_SCHEMA,
            entries: &self.entries,
        })?)
    }

    pub fn from_json(text: &str) -> Result<MeasurementPlan> {
        #[derive(Deserialize)]
        struct PlanFile {
            schema: String,
            entries: Vec<(MeasurementKind, usize)>,
        }
        let file: PlanFile = serde_json::from_str(text)?;
        if file.schema != PLAN_SCHEMA {
            return Err(Error::SchemaMismatch {
                expected: PLAN_SCHEMA.into(),
                found: file.schema,
            });
        }
        Ok(MeasurementPlan {
            entries: file.entries,
        })
    }
}

/// Sparse symmetric quadratic form for one measurement. Entries hold both
/// triangles so `v' H v` and `v' H` are plain scatter loops.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub kind: MeasurementKind,
    pub location: usize,
    dim: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl QuadraticForm {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, u32, f64)] {
        &self.entries
    }

    /// v' H v
    pub fn eval(&self, v: &Array1<f64>) -> f64 {
        let mut acc = 0.0;
        for &(a, b, val) in &self.entries {
            acc += val * v[a as usize] * v[b as usize];
        }
        acc
    }

    /// Row vector v' H (half the gradient of `eval`).
    pub fn left_mul(&self, v: &Array1<f64>, out: &mut [f64]) {
        for &(a, b, val) in &self.entries {
            out[b as usize] += val * v[a as usize];
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut h = Array2::zeros((self.dim, self.dim));
        for &(a, b, val) in &self.entries {
            h[[a as usize, b as usize]] += val;
        }
        h
    }
}

/// Accumulates `gamma * v_a * v_b` terms, splitting each across (a,b) and
/// (b,a) so the stored matrix is symmetric by construction.
struct FormBuilder {
    dim: usize,
    acc: BTreeMap<(u32, u32), f64>,
}

impl FormBuilder {
    fn new(dim: usize) -> Self {
        FormBuilder {
            dim,
            acc: BTreeMap::new(),
        }
    }

    fn add(&mut self, a: usize, b: usize, gamma: f64) {
        if gamma == 0.0 {
            return;
        }
        let (a, b) = (a as u32, b as u32);
        if a == b {
            *self.acc.entry((a, a)).or_insert(0.0) += gamma;
        } else {
            *self.acc.entry((a, b)).or_insert(0.0) += gamma / 2.0;
            *self.acc.entry((b, a)).or_insert(0.0) += gamma / 2.0;
        }
    }

    fn finish(self, kind: MeasurementKind, location: usize) -> QuadraticForm {
        let entries = self
            .acc
            .into_iter()
            .filter(|&(_, v)| v != 0.0)
            .map(|((a, b), v)| (a, b, v))
            .collect();
        QuadraticForm {
            kind,
            location,
            dim: self.dim,
            entries,
        }
    }
}

const RE: usize = 0;
const IM: usize = 1;

fn coord(bus: usize, part: usize) -> usize {
    2 * bus + part
}

/// Adds the quadratic expansion of `Re/Im{ V_s * conj(y_self V_s + y_other V_o) }`.
///
/// With (a,b) the rectangular parts of V_s and (c,d) of V_o:
///   P =  g_self (a^2 + b^2) + g_other (ac + bd) + b_other (bc - ad)
///   Q = -b_self (a^2 + b^2) + g_other (bc - ad) - b_other (ac + bd)
fn add_flow_terms(
    builder: &mut FormBuilder,
    s: usize,
    o: usize,
    y_self: Complex64,
    y_other: Complex64,
    reactive: bool,
) {
    let (sr, si) = (coord(s, RE), coord(s, IM));
    let (or_, oi) = (coord(o, RE), coord(o, IM));
    if !reactive {
        builder.add(sr, sr, y_self.re);
        builder.add(si, si, y_self.re);
        builder.add(sr, or_, y_other.re);
        builder.add(si, oi, y_other.re);
        builder.add(si, or_, y_other.im);
        builder.add(sr, oi, -y_other.im);
    } else {
        builder.add(sr, sr, -y_self.im);
        builder.add(si, si, -y_self.im);
        builder.add(si, or_, y_other.re);
        builder.add(sr, oi, -y_other.re);
        builder.add(sr, or_, -y_other.im);
        builder.add(si, oi, -y_other.im);
    }
}

/// Builds the quadratic form of every plan entry against the grid's
/// admittance data.
pub fn build_measurement_matrices(
    adm: &AdmittanceModel,
    plan: &MeasurementPlan,
) -> Result<Vec<QuadraticForm>> {
    let n = adm.n_buses();
    let dim = 2 * n;
    let mut forms = Vec::with_capacity(plan.len());
    for (index, &(kind, loc)) in plan.entries.iter().enumerate() {
        if kind.is_bus_quantity() && loc >= n {
            return Err(Error::PlanLocationInvalid {
                index,
                what: "bus",
                id: loc,
            });
        }
        if !kind.is_bus_quantity() && loc >= adm.branch_adm.len() {
            return Err(Error::PlanLocationInvalid {
                index,
                what: "branch",
                id: loc,
            });
        }
        let mut builder = FormBuilder::new(dim);
        match kind {
            MeasurementKind::Vmag2 => {
                builder.add(coord(loc, RE), coord(loc, RE), 1.0);
                builder.add(coord(loc, IM), coord(loc, IM), 1.0);
            }
            MeasurementKind::Pinj | MeasurementKind::Qinj => {
                // S_n = V_n conj(sum_k Y_nk V_k): one flow-style term per
                // nonzero ybus entry in row n.
                let reactive = kind == MeasurementKind::Qinj;
                for k in 0..n {
                    let y = adm.ybus[[loc, k]];
                    if y == Complex64::ZERO {
                        continue;
                    }
                    if k == loc {
                        add_flow_terms(&mut builder, loc, loc, y, Complex64::ZERO, reactive);
                    } else {
                        add_flow_terms(&mut builder, loc, k, Complex64::ZERO, y, reactive);
                    }
                }
            }
            MeasurementKind::PflowF | MeasurementKind::QflowF => {
                let ba = &adm.branch_adm[loc];
                let reactive = kind == MeasurementKind::QflowF;
                add_flow_terms(&mut builder, ba.from, ba.to, ba.y_ff, ba.y_ft, reactive);
            }
            MeasurementKind::PflowT | MeasurementKind::QflowT => {
                let ba = &adm.branch_adm[loc];
                let reactive = kind == MeasurementKind::QflowT;
                add_flow_terms(&mut builder, ba.to, ba.from, ba.y_tt, ba.y_tf, reactive);
            }
        }
        forms.push(builder.finish(kind, loc));
    }
    Ok(forms)
}

/// Evaluates every measurement function at `v` (noiseless).
pub fn evaluate_measurements(forms: &[QuadraticForm], v: &StateVector) -> Result<Array1<f64>> {
    check_dims(forms, v)?;
    let values = v.values();
    Ok(Array1::from_iter(forms.iter().map(|f| f.eval(values))))
}

/// Measurement Jacobian-like matrix whose m-th row is `v' H_m`. The gradient
/// of `v' H_m v` is twice this row; solvers that need the true gradient apply
/// the factor themselves.
pub fn jacobian_at(forms: &[QuadraticForm], v: &StateVector) -> Result<Array2<f64>> {
    check_dims(forms, v)?;
    let values = v.values();
    let mut jac = Array2::zeros((forms.len(), v.dim()));
    for (m, form) in forms.iter().enumerate() {
        let mut row = jac.row_mut(m);
        form.left_mul(values, row.as_slice_mut().expect("row is contiguous"));
    }
    Ok(jac)
}

fn check_dims(forms: &[QuadraticForm], v: &StateVector) -> Result<()> {
    for f in forms {
        if f.dim() != v.dim() {
            return Err(Error::DimensionMismatch(format!(
                "form dimension {} vs state dimension {}",
                f.dim(),
                v.dim()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation applied to every flow / injection channel.
    pub sigma_flow: f64,
    /// Standard deviation applied to squared-magnitude channels.
    pub sigma_mag: f64,
}

impl NoiseConfig {
    pub fn sigma_for(&self, kind: MeasurementKind) -> f64 {
        if kind == MeasurementKind::Vmag2 {
            self.sigma_mag
        } else {
            self.sigma_flow
        }
    }
}

/// A (possibly incomplete) measurement snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub values: Array1<f64>,
    pub mask: Vec<bool>,
    pub noise_sigmas: Array1<f64>,
    pub seed: u64,
}

impl MeasurementVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Adds independent Gaussian noise per channel: `sigma_mag` on squared
/// magnitudes, `sigma_flow` elsewhere. Deterministic in `seed`.
pub fn add_gaussian_noise(
    z: &Array1<f64>,
    plan: &MeasurementPlan,
    noise: &NoiseConfig,
    seed: u64,
) -> MeasurementVector {
    assert_eq!(z.len(), plan.len(), "z and plan must agree");
    let mut rng = Rng::seed_from(seed);
    let mut values = z.clone();
    let mut sigmas = Array1::zeros(z.len());
    for (m, &(kind, _)) in plan.entries.iter().enumerate() {
        let sigma = noise.sigma_for(kind);
        sigmas[m] = sigma;
        if sigma > 0.0 {
            values[m] += sigma * rng.normal();
        }
    }
    MeasurementVector {
        values,
        mask: vec![true; z.len()],
        noise_sigmas: sigmas,
        seed,
    }
}
