//! Built-in benchmark case files in MATPOWER format, usable directly with
//! [`crate::grid::parse_matpower_case`] or through the CLI by name.

/// IEEE 14-bus test system.
pub const CASE14: &str = include_str!("../cases/case14.m");

/// IEEE 57-bus test system.
pub const CASE57: &str = include_str!("../cases/case57.m");

/// Looks a built-in case up by name (`case14` / `case57`).
pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "case14" => Some(CASE14),
        "case57" => Some(CASE57),
        _ => None,
    }
}
