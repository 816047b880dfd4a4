//! Shared formatting helpers for CSV emission.

/// Fixed 17-significant-digit scientific formatting; round-trips every
/// finite `f64` and keeps outputs byte-stable across runs.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}
