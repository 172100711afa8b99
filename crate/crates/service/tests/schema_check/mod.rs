//! Checks a JSON value against the subset of JSON Schema (draft 2020-12) that
//! `schemas/api.schema.json` uses. Any other keyword is a hard failure, so the
//! schema cannot quietly grow a rule nobody checks.

use regex::Regex;
use serde_json::Value;

const IGNORED: &[&str] = &["$schema", "$id", "$defs", "title", "description"];

pub struct Checker<'a> {
    root: &'a Value,
}

impl<'a> Checker<'a> {
    pub fn new(root: &'a Value) -> Self {
        Checker { root }
    }

    /// Every violation of `schema` by `v`, as `path: reason`.
    pub fn errors(&self, schema: &Value, v: &Value) -> Vec<String> {
        let mut out = Vec::new();
        self.walk(schema, v, "", &mut out);
        out
    }

    fn resolve(&self, r: &str) -> &'a Value {
        let ptr = r.strip_prefix('#').unwrap_or_else(|| panic!("only local refs: {r}"));
        self.root.pointer(ptr).unwrap_or_else(|| panic!("dangling ref {r}"))
    }

    fn walk(&self, schema: &Value, v: &Value, at: &str, out: &mut Vec<String>) {
        let obj = match schema {
            Value::Bool(true) => return,
            Value::Bool(false) => {
                out.push(format!("{at}: nothing is allowed here"));
                return;
            }
            Value::Object(o) => o,
            other => panic!("schema node is not an object: {other}"),
        };
        for (k, rule) in obj {
            match k.as_str() {
                "$ref" => self.walk(self.resolve(rule.as_str().unwrap()), v, at, out),
                "type" => {
                    let ok = match rule {
                        Value::String(t) => has_type(v, t),
                        Value::Array(ts) => ts.iter().any(|t| has_type(v, t.as_str().unwrap())),
                        _ => panic!("bad type rule {rule}"),
                    };
                    if !ok {
                        out.push(format!("{at}: {v} is not of type {rule}"));
                    }
                }
                "enum" => {
                    if !rule.as_array().unwrap().contains(v) {
                        out.push(format!("{at}: {v} not in {rule}"));
                    }
                }
                "minimum" => {
                    if let Some(x) = v.as_f64() {
                        if x < rule.as_f64().unwrap() {
                            out.push(format!("{at}: {x} < {rule}"));
                        }
                    }
                }
                "maximum" => {
                    if let Some(x) = v.as_f64() {
                        if x > rule.as_f64().unwrap() {
                            out.push(format!("{at}: {x} > {rule}"));
                        }
                    }
                }
                "minLength" => {
                    if let Some(s) = v.as_str() {
                        if (s.chars().count() as u64) < rule.as_u64().unwrap() {
                            out.push(format!("{at}: string shorter than {rule}"));
                        }
                    }
                }
                "pattern" => {
                    if let Some(s) = v.as_str() {
                        if !Regex::new(rule.as_str().unwrap()).unwrap().is_match(s) {
                            out.push(format!("{at}: {s:?} does not match {rule}"));
                        }
                    }
                }
                "minItems" => {
                    if let Some(a) = v.as_array() {
                        if (a.len() as u64) < rule.as_u64().unwrap() {
                            out.push(format!("{at}: fewer than {rule} items"));
                        }
                    }
                }
                "uniqueItems" => {
                    if let (Some(a), Some(true)) = (v.as_array(), rule.as_bool()) {
                        for (i, x) in a.iter().enumerate() {
                            if a[..i].contains(x) {
                                out.push(format!("{at}/{i}: duplicate item"));
                            }
                        }
                    }
                }
                "items" => {
                    if let Some(a) = v.as_array() {
                        for (i, x) in a.iter().enumerate() {
                            self.walk(rule, x, &format!("{at}/{i}"), out);
                        }
                    }
                }
                "required" => {
                    if let Some(o) = v.as_object() {
                        for name in rule.as_array().unwrap() {
                            if !o.contains_key(name.as_str().unwrap()) {
                                out.push(format!("{at}: missing {name}"));
                            }
                        }
                    }
                }
                "properties" => {
                    if let Some(o) = v.as_object() {
                        for (name, sub) in rule.as_object().unwrap() {
                            if let Some(x) = o.get(name) {
                                self.walk(sub, x, &format!("{at}/{name}"), out);
                            }
                        }
                    }
                }
                "additionalProperties" => {
                    if let Some(o) = v.as_object() {
                        let known = obj.get("properties").and_then(Value::as_object);
                        for (name, x) in o {
                            if !known.is_some_and(|p| p.contains_key(name)) {
                                self.walk(rule, x, &format!("{at}/{name}"), out);
                            }
                        }
                    }
                }
                "propertyNames" => {
                    if let Some(o) = v.as_object() {
                        for name in o.keys() {
                            self.walk(rule, &Value::String(name.clone()), &format!("{at}/{name}"), out);
                        }
                    }
                }
                "oneOf" => {
                    let hits = rule
                        .as_array()
                        .unwrap()
                        .iter()
                        .filter(|s| self.errors(s, v).is_empty())
                        .count();
                    if hits != 1 {
                        out.push(format!("{at}: matches {hits} branches of oneOf"));
                    }
                }
                other if IGNORED.contains(&other) => {}
                other => panic!("unsupported schema keyword {other}"),
            }
        }
    }
}

fn has_type(v: &Value, t: &str) -> bool {
    match t {
        "null" => v.is_null(),
        "boolean" => v.is_boolean(),
        "string" => v.is_string(),
        "array" => v.is_array(),
        "object" => v.is_object(),
        "number" => v.is_number(),
        "integer" => v.is_i64() || v.is_u64() || v.as_f64().is_some_and(|x| x.fract() == 0.0),
        other => panic!("unknown type {other}"),
    }
}

#[cfg(test)]
mod self_check {
    use super::*;
    use serde_json::json;

    #[test]
    fn checker_rejects_what_it_should() {
        let root = json!({"$defs": {"P": {"type": "object", "required": ["n"],
            "properties": {"n": {"type": "integer", "minimum": 0}},
            "additionalProperties": false}}});
        let c = Checker::new(&root);
        let s = json!({"$ref": "#/$defs/P"});
        assert!(c.errors(&s, &json!({"n": 3})).is_empty());
        assert_eq!(c.errors(&s, &json!({"n": -1})).len(), 1);
        assert_eq!(c.errors(&s, &json!({"n": 1.5})).len(), 1);
        assert_eq!(c.errors(&s, &json!({})).len(), 1);
        assert_eq!(c.errors(&s, &json!({"n": 1, "x": 2})).len(), 1);
        let one = json!({"oneOf": [{"type": "null"}, {"$ref": "#/$defs/P"}]});
        assert!(c.errors(&one, &Value::Null).is_empty());
        assert_eq!(c.errors(&one, &json!("x")).len(), 1);
        let pat = json!({"type": "string", "pattern": "^a+$", "minLength": 2});
        assert!(c.errors(&pat, &json!("aa")).is_empty());
        assert_eq!(c.errors(&pat, &json!("a")).len(), 1);
        assert_eq!(c.errors(&pat, &json!("ab")).len(), 1);
    }
}
