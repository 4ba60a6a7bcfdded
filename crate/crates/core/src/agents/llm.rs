//! LLM-backed agents.
//!
//! The transport posts `{"model", "messages", "temperature"}` as JSON and
//! accepts either a chat-completion style JSON reply
//! (`choices[0].message.content`), a `{"text": ...}` object, or plain text.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::prompt::{build_prompt, PromptTemplate};
use super::wire::{parse_response, AgentProposal, MalformedReason};
use super::{Agent, AgentContext, AgentError, DEFAULT_RETRIES};

/// Environment variable holding the bearer credential.
pub const API_KEY_ENV: &str = "LFG_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage {
            role: role.to_owned(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("transport failure: {0}")]
pub struct TransportError(pub String);

/// Something that turns a chat request into generated text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// Connection settings for the HTTP transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmSettings {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        LlmSettings {
            base_url: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.7,
            timeout_secs: 60,
        }
    }
}

pub struct HttpTransport {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    /// Reads the credential from [`API_KEY_ENV`] if set.
    pub fn new(settings: &LlmSettings) -> Self {
        Self::with_key(settings, std::env::var(API_KEY_ENV).ok())
    }

    pub fn with_key(settings: &LlmSettings, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .build()
            .into();
        HttpTransport {
            url: settings.base_url.clone(),
            api_key,
            agent,
        }
    }
}

/// Pulls the generated text out of a response body.
pub fn extract_text(body: &str) -> String {
    let Ok(json) = serde_json::from_str::<Value>(body) else {
        return body.to_owned();
    };
    let pointers = ["/choices/0/message/content", "/choices/0/text", "/text", "/content"];
    pointers
        .iter()
        .find_map(|p| json.pointer(p).and_then(Value::as_str))
        .map(str::to_owned)
        .unwrap_or_else(|| body.to_owned())
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| TransportError(e.to_string()))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(extract_text(&body))
    }
}

/// An agent whose proposals come from a language model.
pub struct LlmAgent {
    transport: Box<dyn ChatTransport>,
    template: PromptTemplate,
    strategy: String,
    model: String,
    temperature: f64,
    retries: usize,
}

impl LlmAgent {
    pub fn new(transport: Box<dyn ChatTransport>, settings: &LlmSettings, strategy: impl Into<String>) -> Self {
        LlmAgent {
            transport,
            template: PromptTemplate::default(),
            strategy: strategy.into(),
            model: settings.model.clone(),
            temperature: settings.temperature,
            retries: DEFAULT_RETRIES,
        }
    }

    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }
}

enum Failure {
    Transport(TransportError),
    Malformed(MalformedReason),
}

impl Agent for LlmAgent {
    fn strategy(&self) -> String {
        self.strategy.clone()
    }

    /// Up to `1 + retries` attempts. A malformed reply is fed back to the
    /// model on the next attempt. If no attempt reached the model the agent
    /// is unavailable; otherwise an exhausted budget degrades to an empty
    /// proposal carrying the last error.
    fn propose(&self, ctx: &AgentContext) -> Result<AgentProposal, AgentError> {
        let mut messages = vec![
            ChatMessage::new("system", self.template.system.clone()),
            ChatMessage::new("user", build_prompt(ctx, &self.template, &self.strategy)),
        ];
        let attempts = 1 + self.retries;
        let mut last = None;
        let mut reached = false;
        for _ in 0..attempts {
            let request = ChatRequest {
                model: self.model.clone(),
                messages: messages.clone(),
                temperature: self.temperature,
            };
            let text = match self.transport.complete(&request) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("agent {}: {e}", ctx.agent_id);
                    last = Some(Failure::Transport(e));
                    continue;
                }
            };
            reached = true;
            let parsed = parse_response(&text)
                .map_err(|e| e.0)
                .and_then(|p| ctx.validate(p));
            match parsed {
                Ok(p) => return Ok(p),
                Err(reason) => {
                    log::warn!("agent {}: malformed reply: {reason}", ctx.agent_id);
                    messages.push(ChatMessage::new("assistant", text));
                    messages.push(ChatMessage::new(
                        "user",
                        format!("Your reply was rejected ({reason}). Answer again using exactly the format above."),
                    ));
                    last = Some(Failure::Malformed(reason));
                }
            }
        }
        let last = match last {
            Some(Failure::Transport(e)) => e.to_string(),
            Some(Failure::Malformed(r)) => format!("malformed response: {r}"),
            None => "no attempts".into(),
        };
        if reached {
            Ok(AgentProposal::empty(format!(
                "degraded after {attempts} attempt(s): {last}"
            )))
        } else {
            Err(AgentError::AgentUnavailable { attempts, last })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{FeatureExpr, FeatureSubset};
    use std::sync::Mutex;

    /// Replays canned replies in order; `None` simulates a transport failure.
    struct Scripted {
        replies: Mutex<Vec<Option<String>>>,
        seen: Mutex<Vec<ChatRequest>>,
    }

    impl Scripted {
        fn new(replies: Vec<Option<&str>>) -> Self {
            Scripted {
                replies: Mutex::new(replies.into_iter().rev().map(|r| r.map(str::to_owned)).collect()),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl ChatTransport for &'static Scripted {
        fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
            self.seen.lock().unwrap().push(request.clone());
            self.replies
                .lock()
                .unwrap()
                .pop()
                .flatten()
                .ok_or_else(|| TransportError("connection refused".into()))
        }
    }

    fn agent(replies: Vec<Option<&str>>) -> (LlmAgent, &'static Scripted) {
        let t: &'static Scripted = Box::leak(Box::new(Scripted::new(replies)));
        (LlmAgent::new(Box::new(t), &LlmSettings::default(), "test"), t)
    }

    fn ctx() -> AgentContext {
        AgentContext::new(0, FeatureSubset::new(["f1", "f2"].map(FeatureExpr::base), None))
    }

    #[test]
    fn accepts_valid_reply() {
        let (a, t) = agent(vec![Some("```\nGEN multiply f1 f2\nRATIONALE: x\n```")]);
        let p = a.propose(&ctx()).unwrap();
        assert_eq!(p.generate_count(), 1);
        let req = &t.seen.lock().unwrap()[0];
        assert_eq!(req.messages[0].role, "system");
        assert_eq!(req.model, "gpt-3.5-turbo");
    }

    #[test]
    fn retries_malformed_then_succeeds() {
        let (a, t) = agent(vec![Some("GEN modulo f1 f2"), Some("GEN sqrt f1")]);
        let p = a.propose(&ctx()).unwrap();
        assert_eq!(p.generate_count(), 1);
        let seen = t.seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].messages.last().unwrap().content.contains("rejected"));
    }

    #[test]
    fn degrades_after_budget() {
        let (a, _) = agent(vec![Some("nonsense"), Some("GEN log f9"), Some("GEN log f1 f2")]);
        let p = a.propose(&ctx()).unwrap();
        assert!(p.is_empty());
        assert!(p.rationale.starts_with("degraded after 3 attempt(s)"));
    }

    #[test]
    fn transport_down_is_unavailable() {
        let (a, t) = agent(vec![None, None, None]);
        assert!(matches!(
            a.propose(&ctx()),
            Err(AgentError::AgentUnavailable { attempts: 3, .. })
        ));
        assert_eq!(t.seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn extracts_text_from_known_shapes() {
        assert_eq!(extract_text(r#"{"choices":[{"message":{"content":"hi"}}]}"#), "hi");
        assert_eq!(extract_text(r#"{"text":"yo"}"#), "yo");
        assert_eq!(extract_text("GEN sqrt f1"), "GEN sqrt f1");
    }
}
