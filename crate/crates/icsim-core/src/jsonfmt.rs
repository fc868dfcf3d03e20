//! Stable JSON rendering for snapshots and reports.
//!
//! Keys are emitted in lexicographic order (the default `serde_json` map is a
//! BTreeMap) and every float is rounded to at most six significant digits
//! before serialization. Rounding happens on the value, not the text, so
//! serialize -> parse -> serialize is byte-stable.

use serde::Serialize;
use serde_json::Value;

/// Rounds a finite float to six significant digits.
///
/// The round-trip goes through scientific notation with five fractional
/// digits, which is exact to re-parse; applying it twice is a fixed point.
pub fn round_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return 0.0;
    }
    format!("{:.5e}", v).parse().unwrap_or(v)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if n.is_f64() {
                    if let Some(r) = serde_json::Number::from_f64(round_sig(f)) {
                        *v = Value::Number(r);
                    }
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Serializes `value` with sorted keys and floats rounded to six significant
/// digits. Integral JSON numbers are left untouched.
pub fn to_stable_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    serde_json::to_string(&v)
}

/// Pretty variant of [`to_stable_string`] for files meant to be read by people.
pub fn to_stable_string_pretty<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    serde_json::to_string_pretty(&v)
}
