//! Chat-completions client. Talks to any OpenAI-compatible endpoint with
//! temperature 0 and a single system + user message per consultation, so a
//! given prompt always maps to one request shape.
//!
//! Configuration comes from the environment:
//! - `ICSIM_LLM_BASE_URL` (required), e.g. `http://localhost:8000/v1`
//! - `ICSIM_LLM_MODEL` (required)
//! - `ICSIM_LLM_API_KEY` (optional; sent as a bearer token when present)

use std::time::Duration;

use serde_json::{json, Value};
use ureq::Agent;

use crate::decision::prompt::DecisionPrompt;
use crate::decision::{Decider, DeciderError};

pub const TIMEOUT_S: u64 = 60;

#[derive(Debug, Clone)]
pub struct LlmConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout_s: u64,
}

impl LlmConfig {
    pub fn from_env() -> Result<LlmConfig, DeciderError> {
        let base_url = std::env::var("ICSIM_LLM_BASE_URL")
            .map_err(|_| DeciderError::Transport("ICSIM_LLM_BASE_URL is not set".into()))?;
        let model = std::env::var("ICSIM_LLM_MODEL")
            .map_err(|_| DeciderError::Transport("ICSIM_LLM_MODEL is not set".into()))?;
        let api_key = std::env::var("ICSIM_LLM_API_KEY").ok();
        Ok(LlmConfig { base_url, model, api_key, timeout_s: TIMEOUT_S })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

pub struct LlmDecider {
    config: LlmConfig,
    latency_s: f64,
    agent: Agent,
}

impl LlmDecider {
    pub fn new(config: LlmConfig, latency_s: f64) -> LlmDecider {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .build()
            .into();
        LlmDecider { config, latency_s, agent }
    }

    pub fn from_env(latency_s: f64) -> Result<LlmDecider, DeciderError> {
        Ok(LlmDecider::new(LlmConfig::from_env()?, latency_s))
    }

    fn request_body(&self, prompt: &DecisionPrompt) -> Value {
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": prompt.system()},
                {"role": "user", "content": prompt.user()},
            ],
        })
    }
}

impl Decider for LlmDecider {
    fn name(&self) -> String {
        format!("llm:{}", self.config.model)
    }
    fn latency_s(&self) -> f64 {
        self.latency_s
    }
    /// A live model may answer differently when shown its own schema error.
    fn retryable(&self) -> bool {
        true
    }
    fn decide(&mut self, prompt: &DecisionPrompt) -> Result<String, DeciderError> {
        let mut req = self.agent.post(&self.config.endpoint());
        if let Some(key) = &self.config.api_key {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(prompt))
            .map_err(|e| DeciderError::Transport(e.to_string()))?;
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| DeciderError::Transport(format!("bad response body: {e}")))?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                DeciderError::Transport("response has no choices[0].message.content".into())
            })?;
        Ok(content.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::prompt::{build_prompt, FewShotLibrary};
    use crate::scenario::Scenario;
    use crate::snapshot::{StateSnapshot, ViolationInfo};
    use crate::telemetry::{BreachKind, TelemetryLog};
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn test_prompt() -> DecisionPrompt {
        let sc = Scenario::from_yaml(crate::scenario::MINIMAL).unwrap();
        let state = sc.initial_state();
        let routes = crate::actuator::initial_routes(&sc.topology, &sc.pods, &state);
        let mut log = TelemetryLog::new(sc.telemetry);
        for p in &sc.pods {
            log.set_replicas(&p.id, &state.placement[&p.id], 0.0);
        }
        let agg = log.aggregate(10.0, &sc.topology, &state);
        let violation =
            ViolationInfo { kind: BreachKind::Upper, ema_s: 3.4, upper_s: 3.0, lower_s: 1.0 };
        let snap = StateSnapshot::capture(
            10.0,
            violation.clone(),
            &sc.topology,
            &sc.pods,
            &state,
            &routes,
            &agg,
            sc.bounds,
        );
        build_prompt(&snap, &sc.intent, &violation, &FewShotLibrary::empty())
    }

    /// One-shot HTTP stub: accepts a single connection, captures the request,
    /// replies with a canned chat-completions body.
    fn stub_server(reply: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 65536];
            let mut req = Vec::new();
            loop {
                let n = stream.read(&mut buf).unwrap();
                req.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&req);
                if let Some(head_end) = text.find("\r\n\r\n") {
                    let len = text
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if req.len() >= head_end + 4 + len {
                        break;
                    }
                }
            }
            let body = reply.as_bytes();
            let head = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                body.len()
            );
            stream.write_all(head.as_bytes()).unwrap();
            stream.write_all(body).unwrap();
            String::from_utf8_lossy(&req).into_owned()
        });
        (format!("http://{addr}/v1"), handle)
    }

    #[test]
    fn posts_temperature_zero_and_returns_content() {
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"{\"source\":{\"category\":\"cpu_shortage\"}}"}}]}"#;
        let (base, handle) = stub_server(reply);
        let mut d = LlmDecider::new(
            LlmConfig { base_url: base, model: "test-model".into(), api_key: Some("sk-x".into()), timeout_s: 5 },
            13.4,
        );
        assert_eq!(d.name(), "llm:test-model");
        assert!(d.retryable());

        let body = d.decide(&test_prompt()).unwrap();
        assert!(body.contains("cpu_shortage"));

        let req = handle.join().unwrap();
        assert!(req.starts_with("POST /v1/chat/completions"));
        assert!(req.contains("authorization: Bearer sk-x"));
        let json_start = req.find("\r\n\r\n").unwrap() + 4;
        let sent: Value = serde_json::from_str(&req[json_start..]).unwrap();
        assert_eq!(sent["temperature"], 0);
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["messages"].as_array().unwrap().len(), 2);
        assert_eq!(sent["messages"][0]["role"], "system");
        assert_eq!(sent["messages"][1]["role"], "user");
    }

    #[test]
    fn missing_content_is_a_transport_error() {
        let (base, handle) = stub_server(r#"{"choices":[]}"#);
        let mut d = LlmDecider::new(
            LlmConfig { base_url: base, model: "m".into(), api_key: None, timeout_s: 5 },
            0.0,
        );
        let err = d.decide(&test_prompt()).unwrap_err();
        assert!(matches!(err, DeciderError::Transport(_)));
        handle.join().unwrap();
    }

    #[test]
    fn connection_refused_is_a_transport_error() {
        // Bind then drop to get a port nothing listens on.
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let mut d = LlmDecider::new(
            LlmConfig { base_url: format!("http://{addr}/v1"), model: "m".into(), api_key: None, timeout_s: 1 },
            0.0,
        );
        assert!(matches!(d.decide(&test_prompt()), Err(DeciderError::Transport(_))));
    }
}
