//! Diff-stable report output: sorted keys, floats fixed at three decimals.

use serde::Serialize;
use serde_json::Value;

pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn round_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n.as_f64().map(round3).and_then(serde_json::Number::from_f64).map_or(Value::Null, Value::Number),
        Value::Array(items) => Value::Array(items.into_iter().map(round_floats).collect()),
        // serde_json's default map is ordered, so keys come out sorted
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, round_floats(v))).collect()),
        other => other,
    }
}

/// Pretty JSON with sorted keys and every float rounded to three decimals.
pub fn to_report_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("reports serialize");
    let mut s = serde_json::to_string_pretty(&round_floats(v)).expect("reports serialize");
    s.push('\n');
    s
}

/// Label stamped into reports built from generated corpora.
pub const SYNTHETIC_NOTE: &str = "synthetic seeded corpus with scripted model: checks shape and properties, not absolute scores";
