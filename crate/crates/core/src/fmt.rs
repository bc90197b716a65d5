//! Fixed-precision float output shared by every CSV/JSON writer.

use serde_json::Value;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn f17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// JSON number carrying exactly the [`f17`] digits; non-finite values map to `null`.
pub fn json_num(x: f64) -> Value {
    if x.is_finite() {
        serde_json::from_str(&f17(x)).unwrap_or(Value::Null)
    } else {
        Value::Null
    }
}
