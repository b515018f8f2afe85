//! Strict parsing of model replies into typed payloads.
//!
//! A reply must be one JSON object. Two deviations are recovered: the
//! object wrapped in a single markdown code fence, and prose before or
//! after exactly one balanced object. Everything else is rejected.

use serde_json::{Map, Value};

use crate::corpus::EntityType;
use crate::error::{Error, Result};

/// Which payload shape a reply is validated against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputSchema {
    /// `{"entities": [{"text", "type"}]}`
    Ner,
    /// `{"<key>": [{"category", "confidence", "reasoning"}]}`
    Hpo { key: String },
    /// `{"labels": [..]}`
    MultiLabel,
    /// `{"score": 0-9, "rationale"}`
    Score,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawAssertion {
    pub category: String,
    pub confidence: f64,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedOutput {
    Ner(Vec<(String, EntityType)>),
    Hpo(Vec<RawAssertion>),
    MultiLabel(Vec<String>),
    Score { score: u8, rationale: String },
}

pub fn parse_model_output(raw: &str, schema: &OutputSchema) -> Result<ParsedOutput> {
    let object = extract_object(raw)?;
    match schema {
        OutputSchema::Ner => parse_ner(&object),
        OutputSchema::Hpo { key } => parse_hpo(&object, key),
        OutputSchema::MultiLabel => parse_multilabel(&object),
        OutputSchema::Score => parse_score(&object),
    }
}

fn parse_failure(raw: &str, reason: impl Into<String>) -> Error {
    Error::OutputParse {
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

/// Locates and parses the single JSON object carried by `raw`.
pub fn extract_object(raw: &str) -> Result<Map<String, Value>> {
    let trimmed = raw.trim();
    let candidate = if trimmed.starts_with("```") {
        unfence(trimmed).ok_or_else(|| parse_failure(raw, "unterminated code fence"))?
    } else if let Ok(value) = serde_json::from_str::<Value>(trimmed) {
        // complete JSON: only an object is acceptable, never one nested
        // inside an array or other value
        if !value.is_object() {
            return Err(parse_failure(raw, "top-level JSON value is not an object"));
        }
        trimmed
    } else {
        let spans = balanced_objects(trimmed);
        match spans.len() {
            0 => return Err(parse_failure(raw, "no complete JSON object found")),
            1 => &trimmed[spans[0].0..spans[0].1],
            n => return Err(parse_failure(raw, format!("expected one JSON object, found {n}"))),
        }
    };
    match serde_json::from_str::<Value>(candidate) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(parse_failure(raw, "top-level JSON value is not an object")),
        Err(e) => Err(parse_failure(raw, format!("invalid JSON: {e}"))),
    }
}

/// Body of a reply that is exactly one fenced block (```` ``` ```` or
/// ```` ```json ````).
fn unfence(text: &str) -> Option<&str> {
    let body = text.strip_prefix("```")?;
    let newline = body.find('\n')?;
    let lang = body[..newline].trim();
    if !(lang.is_empty() || lang.eq_ignore_ascii_case("json")) {
        return None;
    }
    let inner = body[newline + 1..].trim_end().strip_suffix("```")?;
    Some(inner.trim())
}

/// Byte spans of top-level balanced `{...}` groups. Quotes only count as
/// string delimiters inside a group, so stray quotes in prose are harmless.
fn balanced_objects(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if depth > 0 && in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' if depth > 0 => in_string = true,
            '{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    spans.push((start, i + 1));
                }
            }
            _ => {}
        }
    }
    spans
}

fn only_fields(obj: &Map<String, Value>, allowed: &[&str], path: &str) -> Result<()> {
    if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::schema(format!("{path}{extra}"), "unexpected field"));
    }
    Ok(())
}

fn required<'a>(obj: &'a Map<String, Value>, field: &str, path: &str) -> Result<&'a Value> {
    obj.get(field)
        .ok_or_else(|| Error::schema(format!("{path}{field}"), "missing required field"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::schema(path, "expected an array"))
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::schema(path, "expected an object"))
}

fn as_string(v: &Value, path: &str) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::schema(path, "expected a string"))
}

fn parse_ner(obj: &Map<String, Value>) -> Result<ParsedOutput> {
    only_fields(obj, &["entities"], "")?;
    let items = as_array(required(obj, "entities", "")?, "entities")?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let path = format!("entities[{i}].");
        let entity = as_object(item, &format!("entities[{i}]"))?;
        only_fields(entity, &["text", "type"], &path)?;
        let text = as_string(required(entity, "text", &path)?, &format!("{path}text"))?;
        let ty = as_string(required(entity, "type", &path)?, &format!("{path}type"))?;
        let ty = ty
            .parse::<EntityType>()
            .map_err(|_| Error::schema(format!("{path}type"), format!("unknown entity type `{ty}`")))?;
        out.push((text, ty));
    }
    Ok(ParsedOutput::Ner(out))
}

/// Numbers pass through; numeric strings are coerced.
fn coerce_confidence(v: &Value, path: &str) -> Result<f64> {
    let value = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .ok_or_else(|| Error::schema(path, "confidence must be a number"))?;
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::schema(path, format!("confidence {value} outside [0, 1]")));
    }
    Ok(value)
}

fn parse_hpo(obj: &Map<String, Value>, key: &str) -> Result<ParsedOutput> {
    if obj.len() != 1 || !obj.contains_key(key) {
        let found: Vec<&str> = obj.keys().map(String::as_str).collect();
        return Err(Error::schema(
            key,
            format!("expected exactly one top-level key `{key}`, found {found:?}"),
        ));
    }
    let items = as_array(&obj[key], key)?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let path = format!("{key}[{i}].");
        let a = as_object(item, &format!("{key}[{i}]"))?;
        only_fields(a, &["category", "confidence", "reasoning"], &path)?;
        let category = as_string(required(a, "category", &path)?, &format!("{path}category"))?;
        let confidence = coerce_confidence(required(a, "confidence", &path)?, &format!("{path}confidence"))?;
        let reasoning = as_string(required(a, "reasoning", &path)?, &format!("{path}reasoning"))?;
        out.push(RawAssertion {
            category,
            confidence,
            reasoning,
        });
    }
    Ok(ParsedOutput::Hpo(out))
}

fn parse_multilabel(obj: &Map<String, Value>) -> Result<ParsedOutput> {
    only_fields(obj, &["labels"], "")?;
    let items = as_array(required(obj, "labels", "")?, "labels")?;
    let labels = items
        .iter()
        .enumerate()
        .map(|(i, v)| as_string(v, &format!("labels[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParsedOutput::MultiLabel(labels))
}

fn parse_score(obj: &Map<String, Value>) -> Result<ParsedOutput> {
    only_fields(obj, &["score", "rationale"], "")?;
    let score = required(obj, "score", "")?;
    let score = score
        .as_u64()
        .filter(|s| *s <= 9)
        .ok_or_else(|| Error::schema("score", format!("expected an integer in 0..=9, found {score}")))?;
    let rationale = as_string(required(obj, "rationale", "")?, "rationale")?;
    Ok(ParsedOutput::Score {
        score: score as u8,
        rationale,
    })
}
