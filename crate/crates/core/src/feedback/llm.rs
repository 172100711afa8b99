//! Automated feedback from a chat-completion endpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use chrono::Utc;
use serde_json::{json, Value};

use super::{FeedbackSet, FeedbackSource, Verdict};
use crate::error::{Error, Result};

pub const SYSTEM_PROMPT_TEMPLATE: &str = include_str!("../../prompts/system.txt");
const TASK_PLACEHOLDER: &str = "{classification_task_description}";

/// Built-in task description for a named dataset task.
pub fn task_description(task: &str) -> Option<&'static str> {
    let text = match task {
        "waterbirds" => include_str!("../../prompts/tasks/waterbirds.txt"),
        "metashift" => include_str!("../../prompts/tasks/metashift.txt"),
        "celeba" => include_str!("../../prompts/tasks/celeba.txt"),
        _ => return None,
    };
    Some(text.trim_end())
}

pub fn system_prompt(task_description: &str) -> String {
    SYSTEM_PROMPT_TEMPLATE
        .trim_end()
        .replace(TASK_PLACEHOLDER, task_description.trim())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmEndpoint {
    /// Full URL of the chat-completion route.
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub auth_header: String,
    pub timeout: Duration,
}

impl LlmEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        LlmEndpoint {
            url: url.into(),
            model: "gpt-3.5-turbo".into(),
            api_key: None,
            auth_header: "Authorization".into(),
            timeout: Duration::from_secs(60),
        }
    }

    /// Reads `CBDEBUG_LLM_URL`, `CBDEBUG_LLM_KEY` and, optionally,
    /// `CBDEBUG_LLM_MODEL` / `CBDEBUG_LLM_AUTH_HEADER`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var("CBDEBUG_LLM_URL")
            .map_err(|_| Error::config("CBDEBUG_LLM_URL", "not set"))?;
        let mut ep = LlmEndpoint::new(url);
        ep.api_key = std::env::var("CBDEBUG_LLM_KEY").ok();
        if let Ok(model) = std::env::var("CBDEBUG_LLM_MODEL") {
            ep.model = model;
        }
        if let Ok(h) = std::env::var("CBDEBUG_LLM_AUTH_HEADER") {
            ep.auth_header = h;
        }
        Ok(ep)
    }

    pub fn request_body(&self, system: &str, concept_name: &str) -> Value {
        json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": concept_name},
            ],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Judgement {
    Spurious,
    NotSpurious,
    Abstain,
}

/// Reads the leading `SPURIOUS` / `NOT SPURIOUS` token of a reply. Anything
/// else is an abstention. The remainder becomes the justification.
pub fn parse_reply(text: &str) -> (Judgement, Option<String>) {
    let body = text.trim_start_matches(|c: char| !c.is_alphanumeric());
    let upper = body.to_uppercase();
    let (judgement, token_len) = if let Some(len) = leading_token(&upper, "NOT SPURIOUS") {
        (Judgement::NotSpurious, len)
    } else if let Some(len) = leading_token(&upper, "SPURIOUS") {
        (Judgement::Spurious, len)
    } else {
        let trimmed = text.trim();
        let just = (!trimmed.is_empty()).then(|| trimmed.to_string());
        return (Judgement::Abstain, just);
    };
    let rest = body
        .get(token_len..)
        .unwrap_or("")
        .trim_start_matches(|c: char| {
            c.is_whitespace() || matches!(c, ':' | '-' | '.' | ',' | '\u{2014}' | '\u{2013}' | '*')
        })
        .trim();
    (judgement, (!rest.is_empty()).then(|| rest.to_string()))
}

fn leading_token(upper: &str, token: &str) -> Option<usize> {
    let rest = upper.strip_prefix(token)?;
    match rest.chars().next() {
        Some(c) if c.is_alphanumeric() || c == '_' => None,
        _ => Some(token.len()),
    }
}

fn reply_text(v: &Value) -> Option<&str> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
}

/// Asks the endpoint about every concept, one request each, in the given
/// order. Unparseable replies abstain and count as not spurious.
pub fn llm_oracle(
    concepts: &[(usize, String)],
    task_description: &str,
    endpoint: &LlmEndpoint,
) -> Result<FeedbackSet> {
    for (id, name) in concepts {
        if name.trim().is_empty() {
            return Err(Error::config(
                "concepts",
                format!("concept {id} has no display name"),
            ));
        }
    }
    let system = system_prompt(task_description);
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(endpoint.timeout))
        .build()
        .into();

    let mut c_spur = BTreeSet::new();
    let mut verdicts = BTreeMap::new();
    let mut warnings = Vec::new();
    for (id, name) in concepts {
        let body = endpoint.request_body(&system, name);
        let mut req = agent.post(&endpoint.url);
        if let Some(key) = &endpoint.api_key {
            let value = if endpoint.auth_header.eq_ignore_ascii_case("authorization") {
                format!("Bearer {key}")
            } else {
                key.clone()
            };
            req = req.header(endpoint.auth_header.as_str(), value);
        }
        let transport = |e: ureq::Error| Error::LlmTransport {
            concept_id: *id,
            message: e.to_string(),
        };
        let mut resp = req.send_json(&body).map_err(transport)?;
        let parsed: Option<Value> = resp.body_mut().read_json().ok();
        let text = parsed.as_ref().and_then(reply_text).unwrap_or("");
        let (judgement, justification) = parse_reply(text);
        if judgement == Judgement::Abstain {
            let msg = format!("concept {id} ({name}): unparseable reply, treated as not spurious");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        if judgement == Judgement::Spurious {
            c_spur.insert(*id);
        }
        verdicts.insert(
            *id,
            Verdict {
                spurious: judgement == Judgement::Spurious,
                abstain: judgement == Judgement::Abstain,
                justification,
            },
        );
    }
    Ok(FeedbackSet {
        c_spur,
        source: FeedbackSource::LlmOracle,
        verdicts,
        created_at: Utc::now(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_leading_tokens() {
        assert_eq!(
            parse_reply("SPURIOUS \u{2014} background scenery"),
            (Judgement::Spurious, Some("background scenery".into()))
        );
        assert_eq!(
            parse_reply("NOT SPURIOUS. It is a beak shape."),
            (Judgement::NotSpurious, Some("It is a beak shape.".into()))
        );
        assert_eq!(
            parse_reply("**Spurious**: water"),
            (Judgement::Spurious, Some("water".into()))
        );
        assert_eq!(parse_reply("NOT SPURIOUS"), (Judgement::NotSpurious, None));
        assert_eq!(parse_reply("SPURIOUSLY odd").0, Judgement::Abstain);
        assert_eq!(parse_reply("I think it is spurious").0, Judgement::Abstain);
        assert_eq!(parse_reply(""), (Judgement::Abstain, None));
    }

    #[test]
    fn prompt_is_filled() {
        let p = system_prompt(task_description("waterbirds").unwrap());
        assert!(
            p.contains("The classification task is: distinguish between WATERBIRDS and LANDBIRDS.")
        );
        assert!(!p.contains(TASK_PLACEHOLDER));
        assert!(
            p.ends_with("Respond only with SPURIOUS or NOT SPURIOUS and a brief justification.")
        );
        assert!(task_description("imagenet").is_none());
    }

    #[test]
    fn request_uses_zero_temperature() {
        let ep = LlmEndpoint::new("http://localhost:1/v1/chat/completions");
        let body = ep.request_body("sys", "water");
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "water");
    }

    #[test]
    fn unreachable_endpoint_is_retriable() {
        let mut ep = LlmEndpoint::new("http://127.0.0.1:9/v1/chat/completions");
        ep.timeout = Duration::from_secs(2);
        let err = llm_oracle(&[(3, "water".into())], "t", &ep).unwrap_err();
        assert!(err.is_retriable());
        assert!(matches!(err, Error::LlmTransport { concept_id: 3, .. }));
    }

    #[test]
    fn missing_names_are_rejected() {
        let ep = LlmEndpoint::new("http://127.0.0.1:9/");
        assert!(matches!(
            llm_oracle(&[(0, " ".into())], "t", &ep),
            Err(Error::Config { .. })
        ));
    }
}
