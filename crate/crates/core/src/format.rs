//! Number formatting shared by every text export.

/// Six significant digits, fixed notation (`0.250000`, `1.50000`, `123457`).
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Six digits after the decimal point.
pub fn fixed6(x: f64) -> String {
    format!("{x:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig6(0.25), "0.250000");
        assert_eq!(sig6(1.5), "1.50000");
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(-0.001), "-0.00100000");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(-0.0), "0");
        assert_eq!(sig6(1.0), "1.00000");
    }

    #[test]
    fn fixed_digits() {
        assert_eq!(fixed6(0.65), "0.650000");
        assert_eq!(fixed6(1.0), "1.000000");
    }
}
