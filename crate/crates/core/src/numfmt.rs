//! Plain-decimal float formatting with 17 significant digits.
//!
//! Seventeen significant digits identify every `f64` uniquely, so values
//! written this way parse back bit-exactly.

use std::fmt::Write;

pub fn sig17(x: f64) -> String {
    let mut s = String::new();
    write_sig17(&mut s, x);
    s
}

pub fn write_sig17(out: &mut String, x: f64) {
    debug_assert!(x.is_finite());
    if x == 0.0 {
        out.push_str(if x.is_sign_negative() {
            "-0.0000000000000000"
        } else {
            "0.0000000000000000"
        });
        return;
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (16 - exponent).max(0) as usize;
    let _ = write!(out, "{x:.decimals$}");
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(sig17(0.5), "0.50000000000000000");
        assert_eq!(sig17(-2.0), "-2.0000000000000000");
        assert_eq!(sig17(0.005), "0.0050000000000000001");
        assert_eq!(sig17(0.0), "0.0000000000000000");
    }

    proptest! {
        #[test]
        fn round_trips(x in proptest::num::f64::NORMAL) {
            prop_assume!(x.abs() < 1e100 && x.abs() > 1e-100);
            let s = sig17(x);
            prop_assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }
}
