//! Shared helpers for reading and writing on-disk artifacts.
//!
//! Every artifact this crate produces is deterministic: floating-point values
//! are written with 17 significant digits (one leading digit plus 16
//! fractional), which round-trips every finite `f64` exactly, and no artifact
//! ever embeds wall-clock time or host-dependent state. Readers go through
//! [`serde_json::Value`] with the accessors below so that malformed documents
//! produce a uniform `artifact_invalid` error naming the offending field.

use crate::error::{Error, Result};
use serde_json::Value;

/// Format a float with enough digits to round-trip exactly.
///
/// The output is a valid JSON number. Non-finite inputs are a programming
/// error in the caller (JSON has no representation for them), so they are
/// rejected loudly rather than silently written as `null`.
pub(crate) fn fmt_f64(x: f64) -> String {
    assert!(x.is_finite(), "artifact writers must not emit non-finite floats, got {x}");
    format!("{x:.16e}")
}

/// Escape a string for embedding in a JSON document.
pub(crate) fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

fn missing(path: &str) -> Error {
    Error::Artifact(format!("missing or mistyped field `{path}`"))
}

/// Fetch an object field, with a readable error naming the path.
pub(crate) fn get<'a>(v: &'a Value, path: &str) -> Result<&'a Value> {
    v.get(path).ok_or_else(|| missing(path))
}

pub(crate) fn get_f64(v: &Value, path: &str) -> Result<f64> {
    get(v, path)?.as_f64().ok_or_else(|| missing(path))
}

pub(crate) fn get_u64(v: &Value, path: &str) -> Result<u64> {
    get(v, path)?.as_u64().ok_or_else(|| missing(path))
}

pub(crate) fn get_usize(v: &Value, path: &str) -> Result<usize> {
    Ok(get_u64(v, path)? as usize)
}

pub(crate) fn get_str<'a>(v: &'a Value, path: &str) -> Result<&'a str> {
    get(v, path)?.as_str().ok_or_else(|| missing(path))
}

pub(crate) fn get_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    get(v, path)?.as_array().ok_or_else(|| missing(path))
}

/// Render `[a, b, c]` with exact floats.
pub(crate) fn json_f64_array(xs: &[f64]) -> String {
    let body: Vec<String> = xs.iter().map(|&x| fmt_f64(x)).collect();
    format!("[{}]", body.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_round_trips_exactly() {
        for &x in &[0.0, -0.0, 1.0, std::f64::consts::PI, 1.0 / 3.0, 1e-300, -2.5e300, f64::MIN_POSITIVE] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x} -> {s} -> {back}");
            // And the rendered text must be a legal JSON number.
            let v: Value = serde_json::from_str(&s).unwrap();
            assert_eq!(v.as_f64().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn escaping_handles_quotes_and_control_characters() {
        assert_eq!(json_escape("plain"), "plain");
        assert_eq!(json_escape("a\"b\\c\n"), "a\\\"b\\\\c\\n");
        let doc = format!("{{\"s\":\"{}\"}}", json_escape("tab\there"));
        let v: Value = serde_json::from_str(&doc).unwrap();
        assert_eq!(v["s"], "tab\there");
    }

    #[test]
    fn accessors_name_the_missing_field() {
        let v: Value = serde_json::from_str(r#"{"a": 1}"#).unwrap();
        let err = get_f64(&v, "b").unwrap_err();
        assert!(err.to_string().contains("`b`"), "unexpected message: {err}");
    }
}
