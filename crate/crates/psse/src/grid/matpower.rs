//! Parser for the MATPOWER `.m` case subset: the `baseMVA` scalar and the
//! `bus`, `branch`, and (optional) `gen` matrix blocks. Power quantities are
//! converted to per-unit and angles to radians on the way in; original bus
//! ids are kept for reporting while everything downstream uses contiguous
//! internal indices.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::{Branch, Bus, BusType, Gen, GridModel};

const BUS_COLS: usize = 13;
const BRANCH_COLS: usize = 13;
const GEN_COLS: usize = 10;

pub fn parse_matpower_case(text: &str) -> Result<GridModel> {
    let cleaned = strip_comments(text);
    let base_mva = parse_scalar(&cleaned, "baseMVA").ok_or(Error::MissingBlock("baseMVA"))?;
    if !(base_mva.is_finite() && base_mva > 0.0) {
        return Err(Error::Parse(format!("baseMVA must be positive, got {base_mva}")));
    }
    let bus_rows = parse_matrix(&cleaned, "bus").ok_or(Error::MissingBlock("bus"))?;
    let branch_rows = parse_matrix(&cleaned, "branch").ok_or(Error::MissingBlock("branch"))?;
    let gen_rows = parse_matrix(&cleaned, "gen").unwrap_or_default();

    for name in known_extra_blocks(&cleaned) {
        log::warn!("ignoring unsupported case block `{name}`");
    }

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut index_of = HashMap::new();
    for (row_no, row) in bus_rows.iter().enumerate() {
        if row.len() < BUS_COLS {
            return Err(Error::MalformedRow {
                block: "bus",
                row: row_no,
                expected: BUS_COLS,
                found: row.len(),
            });
        }
        let id = row[0] as usize;
        let bus_type = match row[1] as i64 {
            1 => BusType::Pq,
            2 => BusType::Pv,
            3 => BusType::Slack,
            other => {
                return Err(Error::Parse(format!(
                    "bus {id}: unsupported bus type {other}"
                )))
            }
        };
        if index_of.insert(id, buses.len()).is_some() {
            return Err(Error::DuplicateBusId(id));
        }
        buses.push(Bus {
            id,
            bus_type,
            pd: row[2] / base_mva,
            qd: row[3] / base_mva,
            gs: row[4] / base_mva,
            bs: row[5] / base_mva,
            vm_init: row[7],
            va_init: row[8].to_radians(),
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (row_no, row) in branch_rows.iter().enumerate() {
        if row.len() < BRANCH_COLS {
            return Err(Error::MalformedRow {
                block: "branch",
                row: row_no,
                expected: BRANCH_COLS,
                found: row.len(),
            });
        }
        let from_id = row[0] as usize;
        let to_id = row[1] as usize;
        let from = *index_of.get(&from_id).ok_or(Error::Parse(format!(
            "branch row {row_no}: unknown bus id {from_id}"
        )))?;
        let to = *index_of.get(&to_id).ok_or(Error::Parse(format!(
            "branch row {row_no}: unknown bus id {to_id}"
        )))?;
        // A tap of 0 is the MATPOWER convention for "no transformer".
        let tap = if row[8] == 0.0 { 1.0 } else { row[8] };
        branches.push(Branch {
            from,
            to,
            r: row[2],
            x: row[3],
            b_charging: row[4],
            tap_ratio: tap,
            phase_shift: row[9].to_radians(),
            in_service: row[10] != 0.0,
        });
    }

    let mut gens = Vec::with_capacity(gen_rows.len());
    for (row_no, row) in gen_rows.iter().enumerate() {
        if row.len() < GEN_COLS {
            return Err(Error::MalformedRow {
                block: "gen",
                row: row_no,
                expected: GEN_COLS,
                found: row.len(),
            });
        }
        let bus_id = row[0] as usize;
        let bus = *index_of.get(&bus_id).ok_or(Error::Parse(format!(
            "gen row {row_no}: unknown bus id {bus_id}"
        )))?;
        if row[7] == 0.0 {
            log::warn!("skipping out-of-service generator at bus {bus_id}");
            continue;
        }
        gens.push(Gen {
            bus,
            pg: row[1] / base_mva,
            qg: row[2] / base_mva,
            vset: row[5],
        });
    }

    let grid = GridModel {
        base_mva,
        buses,
        branches,
        gens,
    };
    grid.validate()?;
    Ok(grid)
}

fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|line| match line.find('%') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_scalar(text: &str, name: &str) -> Option<f64> {
    let pos = find_assignment(text, name)?;
    let rest = &text[pos..];
    let end = rest.find(';')?;
    rest[..end].trim().parse().ok()
}

/// Finds `mpc.<name> =` (or bare `<name> =`) and returns the byte offset just
/// past the `=`.
fn find_assignment(text: &str, name: &str) -> Option<usize> {
    for pattern in [format!("mpc.{name}"), name.to_string()] {
        let mut search_from = 0;
        while let Some(found) = text[search_from..].find(&pattern) {
            let at = search_from + found;
            let after = &text[at + pattern.len()..];
            let trimmed = after.trim_start();
            if let Some(rest) = trimmed.strip_prefix('=') {
                let consumed = after.len() - trimmed.len() + 1;
                let _ = rest;
                return Some(at + pattern.len() + consumed);
            }
            search_from = at + pattern.len();
        }
    }
    None
}

fn parse_matrix(text: &str, name: &str) -> Option<Vec<Vec<f64>>> {
    let pos = find_assignment(text, name)?;
    let rest = text[pos..].trim_start();
    let body = rest.strip_prefix('[')?;
    let end = body.find(']')?;
    let body = &body[..end];
    let mut rows = Vec::new();
    for raw_row in body.split(';') {
        let fields: Vec<f64> = raw_row
            .split_whitespace()
            .filter_map(|tok| tok.parse().ok())
            .collect();
        let n_tokens = raw_row.split_whitespace().count();
        if n_tokens != fields.len() {
            return Some(vec![vec![]]); // non-numeric garbage -> malformed row
        }
        if !fields.is_empty() {
            rows.push(fields);
        }
    }
    Some(rows)
}

fn known_extra_blocks(text: &str) -> Vec<String> {
    ["gencost", "dcline", "bus_name"]
        .iter()
        .filter(|name| find_assignment(text, name).is_some())
        .map(|s| s.to_string())
        .collect()
}
