//! Canonical JSON output: declaration-order fields and floats rounded to
//! 9 significant digits, so identical inputs give byte-identical files.

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

pub const SIGNIFICANT_DIGITS: usize = 9;

/// Rounds `v` to 9 significant digits. Non-finite values map to `None`.
pub fn round_sig(v: f64) -> Option<f64> {
    if !v.is_finite() {
        return None;
    }
    if v == 0.0 {
        return Some(0.0);
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v).parse().ok()
}

fn canonicalise(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => match n.as_f64().and_then(round_sig) {
            Some(r) => serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number),
            None => Value::Null,
        },
        Value::Array(a) => Value::Array(a.into_iter().map(canonicalise).collect()),
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, canonicalise(v))).collect()),
        other => other,
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let v = canonicalise(serde_json::to_value(value)?);
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_to_nine_digits() {
        assert_eq!(round_sig(1.0 / 3.0), Some(0.333333333));
        assert_eq!(round_sig(123456789.123), Some(123456789.0));
        assert_eq!(round_sig(f64::NAN), None);
        assert_eq!(round_sig(-0.0), Some(0.0));
    }

    #[test]
    fn keeps_field_order_and_nulls_non_finite() {
        #[derive(Serialize)]
        struct R {
            z: f64,
            a: f64,
            n: usize,
        }
        let s = to_json(&R { z: std::f64::consts::SQRT_2, a: f64::INFINITY, n: 3 }).unwrap();
        assert_eq!(s, "{\n  \"z\": 1.41421356,\n  \"a\": null,\n  \"n\": 3\n}\n");
    }
}
