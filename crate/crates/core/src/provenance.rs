//! Provenance record embedded in every JSON/CSV output.

use serde::Serialize;
use serde_json::{json, Value};

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// `{"tool": "seenough", "version": ..., "config": <resolved config>}`.
pub fn record<C: Serialize>(config: &C) -> Value {
    json!({
        "tool": "seenough",
        "version": version_string(),
        "config": serde_json::to_value(config).unwrap_or(Value::Null),
    })
}

/// A `# `-prefixed CSV comment line carrying the provenance record.
pub fn csv_comment(record: &Value) -> String {
    format!("# provenance: {record}\n")
}
