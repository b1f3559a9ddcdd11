//! Grid model: case parsing, bus admittance, and AC power flow.

mod admittance;
mod matpower;
mod powerflow;

pub use admittance::{build_admittance, AdmittanceModel, BranchAdmittance};
pub use matpower::parse_matpower_case;
pub use powerflow::{solve_power_flow, solve_power_flow_with, PfInit, PowerFlowSolution};

use ndarray::Array1;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const GRID_SCHEMA: &str = "grid/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

/// A bus after parsing: quantities in per-unit, angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// Original id from the case file; buses are renumbered to their position
    /// in `GridModel::buses` internally.
    pub id: usize,
    pub bus_type: BusType,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm_init: f64,
    pub va_init: f64,
}

/// A branch between internal bus indices. `tap_ratio` is 1.0 for plain lines;
/// `phase_shift` is in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    pub tap_ratio: f64,
    pub phase_shift: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gen {
    /// Internal bus index.
    pub bus: usize,
    pub pg: f64,
    pub qg: f64,
    pub vset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub gens: Vec<Gen>,
}

impl GridModel {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Internal index of the unique slack bus.
    pub fn slack_index(&self) -> Result<usize> {
        let mut found = None;
        for (i, b) in self.buses.iter().enumerate() {
            if b.bus_type == BusType::Slack {
                if found.is_some() {
                    return Err(Error::MultipleSlackBus);
                }
                found = Some(i);
            }
        }
        found.ok_or(Error::NoSlackBus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_buses() < 2 {
            return Err(Error::Parse("a grid needs at least 2 buses".into()));
        }
        self.slack_index()?;
        let mut seen = std::collections::HashSet::new();
        for b in &self.buses {
            if !seen.insert(b.id) {
                return Err(Error::DuplicateBusId(b.id));
            }
        }
        for br in &self.branches {
            if br.from >= self.n_buses() || br.to >= self.n_buses() {
                return Err(Error::Parse(format!(
                    "branch references bus index {} outside 0..{}",
                    br.from.max(br.to),
                    self.n_buses()
                )));
            }
            if br.from == br.to {
                return Err(Error::Parse(format!(
                    "branch connects bus index {} to itself",
                    br.from
                )));
            }
        }
        for g in &self.gens {
            if g.bus >= self.n_buses() {
                return Err(Error::Parse(format!(
                    "generator references bus index {} outside 0..{}",
                    g.bus,
                    self.n_buses()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct GridFile<'a> {
            schema: &'static str,
            #[serde(flatten)]
            model: &'a GridModel,
        }
        Ok(serde_json::to_string_pretty(&GridFile {
            schema: GRID_SCHEMA,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<GridModel> {
        #[derive(Deserialize)]
        struct GridFile {
            schema: String,
            #[serde(flatten)]
            model: GridModel,
        }
        let file: GridFile = serde_json::from_str(text)?;
        if file.schema != GRID_SCHEMA {
            return Err(Error::SchemaMismatch {
                expected: GRID_SCHEMA.into(),
                found: file.schema,
            });
        }
        file.model.validate()?;
        Ok(file.model)
    }

    /// SHA-256 of the normalized grid JSON; recorded in datasets so results
    /// can be traced back to the exact grid that produced them.
    pub fn fingerprint(&self) -> String {
        let json = self.to_json().expect("grid serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// System state in rectangular coordinates:
/// `[v_1^re, v_1^im, ..., v_N^re, v_N^im]`, per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    values: Array1<f64>,
}

impl StateVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.len() % 2 != 0 || values.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "state vector length must be even and positive, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch(
                "state vector entries must be finite".into(),
            ));
        }
        Ok(StateVector { values })
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from_vec(values))
    }

    /// Flat profile: 1 + j0 at every bus.
    pub fn flat(n_buses: usize) -> Self {
        let mut values = Array1::zeros(2 * n_buses);
        for n in 0..n_buses {
            values[2 * n] = 1.0;
        }
        StateVector { values }
    }

    pub fn from_polar(vm: &[f64], va: &[f64]) -> Result<Self> {
        if vm.len() != va.len() {
            return Err(Error::DimensionMismatch(
                "magnitude/angle length mismatch".into(),
            ));
        }
        let mut values = Array1::zeros(2 * vm.len());
        for n in 0..vm.len() {
            values[2 * n] = vm[n] * va[n].cos();
            values[2 * n + 1] = vm[n] * va[n].sin();
        }
        Ok(StateVector { values })
    }

    pub fn n_buses(&self) -> usize {
        self.values.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }

    pub fn complex(&self, bus: usize) -> Complex64 {
        Complex64::new(self.values[2 * bus], self.values[2 * bus + 1])
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        (0..self.n_buses()).map(|n| self.complex(n).norm()).collect()
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.n_buses()).map(|n| self.complex(n).arg()).collect()
    }

    /// Rotates every bus voltage by `dtheta` radians.
    pub fn rotate(&self, dtheta: f64) -> StateVector {
        let (sin, cos) = dtheta.sin_cos();
        let mut values = Array1::zeros(self.values.len());
        for n in 0..self.n_buses() {
            let re = self.values[2 * n];
            let im = self.values[2 * n + 1];
            values[2 * n] = re * cos - im * sin;
            values[2 * n + 1] = re * sin + im * cos;
        }
        StateVector { values }
    }

    /// Rotates the whole state so the angle at `bus` equals `target` radians.
    /// All SCADA-type measurements are invariant under a common rotation, so
    /// estimators use this to land on the same angle reference as the ground
    /// truth.
    pub fn align_angle(&self, bus: usize, target: f64) -> StateVector {
        let current = self.complex(bus).arg();
        self.rotate(target - current)
    }
}
