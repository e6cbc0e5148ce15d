//! Canonical request serialization and fixture keys.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::Endpoint;
use crate::error::Result;

/// Serialize a JSON value with object keys sorted at every level and no
/// insignificant whitespace. Numbers use serde_json's shortest round-trip form.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// Lowercase hex SHA-256 over `endpoint name + '\n' + canonical JSON body`.
pub fn canonical_key(endpoint: Endpoint, body: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(endpoint.name().as_bytes());
    hasher.update(b"\n");
    hasher.update(canonical_json(body).as_bytes());
    hex::encode(hasher.finalize())
}

/// Key for any serializable request.
pub fn canonical_request_key<T: Serialize>(endpoint: Endpoint, request: &T) -> Result<String> {
    Ok(canonical_key(endpoint, &serde_json::to_value(request)?))
}
