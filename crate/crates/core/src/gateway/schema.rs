//! Declarative reply schemas. Every structured model reply is checked against
//! one of these before it leaves the gateway.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "values", rename_all = "snake_case")]
pub enum FieldKind {
    String,
    Bool,
    Integer,
    IntegerList,
    StringList,
    Enum(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaField {
    pub name: String,
    pub kind: FieldKind,
    pub required: bool,
}

/// Field-and-enum description a reply object must satisfy. `name` doubles as
/// the task label the scripted backend keys its rules on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSchema {
    pub name: String,
    pub fields: Vec<SchemaField>,
}

impl ResponseSchema {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), fields: Vec::new() }
    }

    pub fn required(mut self, name: &str, kind: FieldKind) -> Self {
        self.fields.push(SchemaField { name: name.to_string(), kind, required: true });
        self
    }

    pub fn optional(mut self, name: &str, kind: FieldKind) -> Self {
        self.fields.push(SchemaField { name: name.to_string(), kind, required: false });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Checks `reply` against the schema. Unknown extra fields are tolerated;
    /// missing required fields, wrong types and out-of-enum values are not.
    pub fn validate(&self, reply: &Value) -> Result<(), String> {
        let Value::Object(obj) = reply else {
            return Err(format!("expected a JSON object, got {}", kind_of(reply)));
        };
        for field in &self.fields {
            match obj.get(&field.name) {
                None | Some(Value::Null) if field.required => return Err(format!("missing required field `{}`", field.name)),
                None | Some(Value::Null) => {}
                Some(v) => check_kind(&field.name, &field.kind, v)?,
            }
        }
        Ok(())
    }

    /// JSON Schema rendering for providers with native structured output.
    pub fn to_json_schema(&self) -> Value {
        let mut props = Map::new();
        let mut required = Vec::new();
        for f in &self.fields {
            let schema = match &f.kind {
                FieldKind::String => json!({"type": "string"}),
                FieldKind::Bool => json!({"type": "boolean"}),
                FieldKind::Integer => json!({"type": "integer"}),
                FieldKind::IntegerList => json!({"type": "array", "items": {"type": "integer"}}),
                FieldKind::StringList => json!({"type": "array", "items": {"type": "string"}}),
                FieldKind::Enum(values) => json!({"type": "string", "enum": values}),
            };
            props.insert(f.name.clone(), schema);
            if f.required {
                required.push(Value::String(f.name.clone()));
            }
        }
        json!({"type": "object", "properties": props, "required": required})
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn check_kind(name: &str, kind: &FieldKind, v: &Value) -> Result<(), String> {
    let ok = match kind {
        FieldKind::String => v.is_string(),
        FieldKind::Bool => v.is_boolean(),
        FieldKind::Integer => v.is_i64() || v.is_u64(),
        FieldKind::IntegerList => v.as_array().is_some_and(|a| a.iter().all(|x| x.is_i64() || x.is_u64())),
        FieldKind::StringList => v.as_array().is_some_and(|a| a.iter().all(Value::is_string)),
        FieldKind::Enum(values) => {
            return match v.as_str() {
                Some(s) if values.iter().any(|allowed| allowed == s) => Ok(()),
                Some(s) => Err(format!("field `{name}`: `{s}` is not one of {values:?}")),
                None => Err(format!("field `{name}`: expected enum string, got {}", kind_of(v))),
            }
        }
    };
    if ok {
        Ok(())
    } else {
        Err(format!("field `{name}`: expected {kind:?}, got {}", kind_of(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_schema() -> ResponseSchema {
        ResponseSchema::new("scope_classification")
            .required("class", FieldKind::Enum(vec!["A".into(), "B".into()]))
            .optional("notes", FieldKind::StringList)
    }

    #[test]
    fn accepts_valid_reply() {
        assert!(class_schema().validate(&json!({"class": "A"})).is_ok());
        assert!(class_schema().validate(&json!({"class": "B", "notes": ["x"], "extra": 1})).is_ok());
    }

    #[test]
    fn rejects_free_text_and_bad_enum() {
        assert!(class_schema().validate(&json!("Within Scope")).is_err());
        assert!(class_schema().validate(&json!({"class": "C"})).is_err());
        assert!(class_schema().validate(&json!({})).is_err());
        assert!(class_schema().validate(&json!({"class": "A", "notes": [1]})).is_err());
    }

    #[test]
    fn json_schema_lists_required() {
        let s = class_schema().to_json_schema();
        assert_eq!(s["required"], json!(["class"]));
        assert_eq!(s["properties"]["class"]["enum"], json!(["A", "B"]));
    }
}
