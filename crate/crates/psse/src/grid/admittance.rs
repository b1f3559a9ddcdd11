//! Bus admittance assembly with the standard branch model: series admittance
//! `1/(r + jx)`, half the charging susceptance at each terminal, and an ideal
//! phase-shifting transformer of ratio `tap * e^{j*shift}` on the from side.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::GridModel;

/// Terminal admittance coefficients of one branch, defined so the terminal
/// currents are `i_f = y_ff v_f + y_ft v_t` and `i_t = y_tf v_f + y_tt v_t`.
/// Out-of-service branches carry all-zero coefficients.
#[derive(Debug, Clone, Copy)]
pub struct BranchAdmittance {
    pub from: usize,
    pub to: usize,
    pub y_ff: Complex64,
    pub y_ft: Complex64,
    pub y_tf: Complex64,
    pub y_tt: Complex64,
}

#[derive(Debug, Clone)]
pub struct AdmittanceModel {
    pub ybus: Array2<Complex64>,
    pub branch_adm: Vec<BranchAdmittance>,
}

impl AdmittanceModel {
    pub fn n_buses(&self) -> usize {
        self.ybus.nrows()
    }
}

pub fn build_admittance(grid: &GridModel) -> Result<AdmittanceModel> {
    let n = grid.n_buses();
    let mut ybus = Array2::from_elem((n, n), Complex64::ZERO);
    let mut branch_adm = Vec::with_capacity(grid.branches.len());

    for br in &grid.branches {
        if !br.in_service {
            branch_adm.push(BranchAdmittance {
                from: br.from,
                to: br.to,
                y_ff: Complex64::ZERO,
                y_ft: Complex64::ZERO,
                y_tf: Complex64::ZERO,
                y_tt: Complex64::ZERO,
            });
            continue;
        }
        if br.r == 0.0 && br.x == 0.0 {
            return Err(Error::ZeroImpedanceBranch {
                from: grid.buses[br.from].id,
                to: grid.buses[br.to].id,
            });
        }
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let charge = Complex64::new(0.0, br.b_charging / 2.0);
        let tap = Complex64::from_polar(br.tap_ratio, br.phase_shift);
        let adm = BranchAdmittance {
            from: br.from,
            to: br.to,
            y_ff: (ys + charge) / (tap * tap.conj()),
            y_ft: -ys / tap.conj(),
            y_tf: -ys / tap,
            y_tt: ys + charge,
        };
        ybus[[br.from, br.from]] += adm.y_ff;
        ybus[[br.from, br.to]] += adm.y_ft;
        ybus[[br.to, br.from]] += adm.y_tf;
        ybus[[br.to, br.to]] += adm.y_tt;
        branch_adm.push(adm);
    }

    for (n_idx, bus) in grid.buses.iter().enumerate() {
        ybus[[n_idx, n_idx]] += Complex64::new(bus.gs, bus.bs);
    }

    Ok(AdmittanceModel { ybus, branch_adm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, Bus, BusType};
    use approx::assert_abs_diff_eq;

    fn line(from: usize, to: usize, r: f64, x: f64) -> Branch {
        Branch {
            from,
            to,
            r,
            x,
            b_charging: 0.0,
            tap_ratio: 1.0,
            phase_shift: 0.0,
            in_service: true,
        }
    }

    fn bus(id: usize, bus_type: BusType) -> Bus {
        Bus {
            id,
            bus_type,
            pd: 0.0,
            qd: 0.0,
            gs: 0.0,
            bs: 0.0,
            vm_init: 1.0,
            va_init: 0.0,
        }
    }

    fn grid_of(buses: Vec<Bus>, branches: Vec<Branch>) -> GridModel {
        GridModel {
            base_mva: 100.0,
            buses,
            branches,
            gens: vec![],
        }
    }

    #[test]
    fn two_bus_reactive_line() {
        let grid = grid_of(
            vec![bus(1, BusType::Slack), bus(2, BusType::Pq)],
            vec![line(0, 1, 0.0, 0.1)],
        );
        let adm = build_admittance(&grid).unwrap();
        // Direct complex arithmetic: y = 1/(j0.1) = -j10.
        assert_abs_diff_eq!(adm.ybus[[0, 0]].im, -10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(adm.ybus[[0, 1]].im, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(adm.ybus[[1, 0]].im, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(adm.ybus[[1, 1]].im, -10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(adm.ybus[[0, 0]].re, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_service_branch_contributes_nothing() {
        let mut grid = grid_of(
            vec![bus(1, BusType::Slack), bus(2, BusType::Pq)],
            vec![line(0, 1, 0.0, 0.1)],
        );
        grid.branches[0].in_service = false;
        grid.buses[0].bs = 0.3;
        let adm = build_admittance(&grid).unwrap();
        assert_eq!(adm.ybus[[0, 1]], Complex64::ZERO);
        assert_eq!(adm.ybus[[1, 0]], Complex64::ZERO);
        assert_eq!(adm.ybus[[1, 1]], Complex64::ZERO);
        // Only the bus shunt remains on the diagonal.
        assert_abs_diff_eq!(adm.ybus[[0, 0]].im, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn triangle_of_identical_lines_is_symmetric() {
        let grid = grid_of(
            vec![bus(1, BusType::Slack), bus(2, BusType::Pq), bus(3, BusType::Pq)],
            vec![
                line(0, 1, 0.01, 0.1),
                line(1, 2, 0.01, 0.1),
                line(2, 0, 0.01, 0.1),
            ],
        );
        let adm = build_admittance(&grid).unwrap();
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(0.01, 0.1);
        for i in 0..3 {
            let diag = adm.ybus[[i, i]];
            assert_abs_diff_eq!(diag.re, 2.0 * ys.re, epsilon = 1e-12);
            assert_abs_diff_eq!(diag.im, 2.0 * ys.im, epsilon = 1e-12);
            for j in 0..3 {
                assert_eq!(adm.ybus[[i, j]], adm.ybus[[j, i]]);
            }
        }
    }

    #[test]
    fn zero_impedance_branch_is_rejected() {
        let grid = grid_of(
            vec![bus(1, BusType::Slack), bus(2, BusType::Pq)],
            vec![line(0, 1, 0.0, 0.0)],
        );
        assert!(matches!(
            build_admittance(&grid),
            Err(Error::ZeroImpedanceBranch { from: 1, to: 2 })
        ));
    }

    #[test]
    fn renumbering_permutes_ybus() {
        // Permutation equivariance: relabel buses 0,1,2 -> 2,0,1 and check
        // the rebuilt ybus is the permuted original.
        let grid = grid_of(
            vec![bus(1, BusType::Slack), bus(2, BusType::Pq), bus(3, BusType::Pq)],
            vec![line(0, 1, 0.01, 0.1), line(1, 2, 0.02, 0.2)],
        );
        let adm = build_admittance(&grid).unwrap();

        let perm = [2usize, 0, 1]; // new index of old bus i
        let mut buses: Vec<Bus> = vec![bus(0, BusType::Pq); 3];
        for (old, bus_def) in grid.buses.iter().enumerate() {
            buses[perm[old]] = bus_def.clone();
        }
        let branches = grid
            .branches
            .iter()
            .map(|br| Branch {
                from: perm[br.from],
                to: perm[br.to],
                ..br.clone()
            })
            .collect();
        let permuted = grid_of(buses, branches);
        let adm_p = build_admittance(&permuted).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(adm.ybus[[i, j]], adm_p.ybus[[perm[i], perm[j]]]);
            }
        }
    }
}
