//! Decimal rendering for numeric CSV output.

/// 17 significant digits; parses back to the identical `f64`.
pub fn f17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}
