//! Number formatting shared by the CSV writers.

/// 17 significant digits; parses back to the identical `f64`.
pub(crate) fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

pub(crate) fn parse(field: &str) -> Option<f64> {
    match field.trim() {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        s => s.parse().ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bits() {
        for v in [0.1, 1.0 / 3.0, 6.02214076e23, -2.5e-310, 0.0, f64::INFINITY] {
            assert_eq!(parse(&num(v)).unwrap().to_bits(), v.to_bits());
        }
    }
}
