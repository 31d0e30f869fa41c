//! Decimal and hexadecimal float text.

/// Shortest decimal that rounds to `v` at 9 significant digits.
///
/// Writing the parsed result again yields the same text.
pub fn sig9(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    let a = rounded.abs();
    if a != 0.0 && !(1e-4..1e16).contains(&a) {
        format!("{rounded:e}")
    } else {
        format!("{rounded}")
    }
}

/// Full-precision decimal that parses back to the same bits.
pub fn exact(v: f64) -> String {
    format!("{v}")
}

/// C99-style hexadecimal float, e.g. `0x1.8p+1` for 3.
pub fn hex(v: f64) -> String {
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if exp_bits == 0x7ff {
        return if frac == 0 { format!("{sign}inf") } else { "nan".into() };
    }
    if exp_bits == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 { (0, -1022) } else { (1, exp_bits - 1023) };
    let digits = format!("{frac:013x}");
    let digits = digits.trim_end_matches('0');
    let exp_sign = if exp < 0 { '-' } else { '+' };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{}", exp.abs())
    } else {
        format!("{sign}0x{lead}.{digits}p{exp_sign}{}", exp.abs())
    }
}

/// Parses [`hex`] output, including `inf`, `-inf` and `nan`.
pub fn parse_hex(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        "nan" => Some(f64::NAN),
        _ => hexf_parse::parse_hexf64(s, false).ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_examples() {
        assert_eq!(hex(3.0), "0x1.8p+1");
        assert_eq!(hex(1.0), "0x1p+0");
        assert_eq!(hex(-0.1), "-0x1.999999999999ap-4");
        assert_eq!(hex(-0.0), "-0x0p+0");
    }

    #[test]
    fn hex_round_trips_bits() {
        let specials = [
            0.0,
            -0.0,
            f64::MIN_POSITIVE,
            f64::MIN_POSITIVE / 3.0,
            f64::from_bits(1),
            f64::MAX,
            -f64::MAX,
            1e-300,
            core::f64::consts::PI,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ];
        for v in specials {
            assert_eq!(parse_hex(&hex(v)).unwrap().to_bits(), v.to_bits(), "{v:e} -> {}", hex(v));
        }
        let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
        for _ in 0..10_000 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = f64::from_bits(x);
            if v.is_nan() {
                continue;
            }
            assert_eq!(parse_hex(&hex(v)).unwrap().to_bits(), v.to_bits());
        }
        assert!(parse_hex("nan").unwrap().is_nan());
    }

    #[test]
    fn sig9_is_idempotent() {
        for v in [0.1, 1.0 / 3.0, -123456.789012, 6.02214076e23, 1e-9, 0.0, 2.5, 9.999999999e-5, -3.3e-300] {
            let s = sig9(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(sig9(back), s);
            assert!((back - v).abs() <= 5e-9 * v.abs());
        }
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(0.30000000000000004), "0.3");
        assert_eq!(sig9(2.358579024e-16), "2.35857902e-16");
        assert_eq!(sig9(-1.5e20), "-1.5e20");
    }
}
