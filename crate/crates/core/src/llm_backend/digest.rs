use serde_json::Value;
use sha2::{Digest, Sha256};

use super::types::{ChatRequest, MessageRole};

fn normalize_text(text: &str) -> String {
    text.replace("\r\n", "\n")
        .lines()
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

/// JSON with object keys sorted, so argument order never affects the digest.
fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let fields: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", fields.join(","))
        }
        Value::Array(items) => {
            let items: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", items.join(","))
        }
        other => other.to_string(),
    }
}

fn role_tag(role: MessageRole) -> &'static str {
    match role {
        MessageRole::System => "system",
        MessageRole::User => "user",
        MessageRole::Assistant => "assistant",
        MessageRole::Tool => "tool",
    }
}

/// SHA-256 over the normalized conversation.
///
/// Covers message roles and texts, tool-call names and arguments, and the
/// offered tool names. Call ids, model name and sampling settings are left
/// out so that cosmetic or volatile differences do not invalidate fixtures.
pub fn request_digest(request: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    for schema in &request.tool_schemas {
        hasher.update(b"tool:");
        hasher.update(schema.name.as_bytes());
        hasher.update([0x1f]);
    }
    for message in &request.messages {
        hasher.update([0x1e]);
        hasher.update(role_tag(message.role).as_bytes());
        hasher.update([0x1f]);
        if let Some(name) = &message.name {
            hasher.update(name.as_bytes());
        }
        hasher.update([0x1f]);
        hasher.update(normalize_text(&message.content).as_bytes());
        for call in &message.tool_calls {
            hasher.update([0x1f]);
            hasher.update(call.name.as_bytes());
            hasher.update(canonical_json(&call.args).as_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
