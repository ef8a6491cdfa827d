//! Canonical JSON: UTF-8, object keys sorted bytewise, no insignificant
//! whitespace.

use serde::Serialize;
use serde_json::Value;

/// Serialize `value` canonically.
///
/// Going through [`Value`] sorts every object's keys, because the map type
/// behind it orders `String` keys bytewise.
pub fn to_vec<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<Vec<u8>> {
    let tree = serde_json::to_value(value)?;
    serde_json::to_vec(&sorted(tree))
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    // Serializer output is always UTF-8.
    Ok(String::from_utf8(to_vec(value)?).expect("json is utf-8"))
}

// Re-sorts explicitly so the output stays canonical even if another crate in
// the build turns on serde_json's insertion-order feature.
fn sorted(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}
