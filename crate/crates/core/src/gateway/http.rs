//! OpenAI-compatible and Llama-3 (Ollama-style) chat adapters.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, CompletionRequest, GatewayError};

pub const ENV_LLM_URL: &str = "MEDCASCADE_LLM_URL";
pub const ENV_LLM_KEY: &str = "MEDCASCADE_LLM_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HttpFlavor {
    /// `POST {url}/chat/completions`, bearer token required.
    OpenAi,
    /// `POST {url}/api/chat`, token optional.
    Llama3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpSettings {
    pub flavor: HttpFlavor,
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl HttpSettings {
    /// Apply `MEDCASCADE_LLM_URL` / `MEDCASCADE_LLM_KEY` overrides.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_LLM_URL) {
            self.url = url;
        }
        if let Ok(key) = std::env::var(ENV_LLM_KEY) {
            self.api_key = Some(key);
        }
        self
    }
}

pub struct HttpBackend {
    settings: HttpSettings,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { settings, agent }
    }

    fn endpoint(&self) -> String {
        let base = self.settings.url.trim_end_matches('/');
        match self.settings.flavor {
            HttpFlavor::OpenAi => format!("{base}/chat/completions"),
            HttpFlavor::Llama3 => format!("{base}/api/chat"),
        }
    }

    fn body(&self, req: &CompletionRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &req.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": req.prompt}));
        match self.settings.flavor {
            HttpFlavor::OpenAi => json!({
                "model": self.settings.model,
                "messages": messages,
                "max_tokens": req.max_output_tokens,
                "temperature": req.temperature,
            }),
            HttpFlavor::Llama3 => json!({
                "model": self.settings.model,
                "messages": messages,
                "stream": false,
                "options": {"temperature": req.temperature, "num_predict": req.max_output_tokens},
            }),
        }
    }

    fn extract(&self, v: &Value) -> Option<String> {
        let content = match self.settings.flavor {
            HttpFlavor::OpenAi => v.pointer("/choices/0/message/content"),
            HttpFlavor::Llama3 => v.pointer("/message/content"),
        }?;
        content.as_str().map(str::to_string)
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        let key = self.settings.api_key.as_deref().filter(|k| !k.is_empty());
        if self.settings.flavor == HttpFlavor::OpenAi && key.is_none() {
            return Err(GatewayError::AuthError(format!("no API key (set {ENV_LLM_KEY})")));
        }
        let mut call = self.agent.post(&self.endpoint()).header("Content-Type", "application/json");
        if let Some(k) = key {
            call = call.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = match call.send_json(self.body(req)) {
            Ok(r) => r,
            Err(ureq::Error::BadUri(u)) => {
                return Err(GatewayError::InvalidRequest(format!("bad backend url `{u}`")))
            }
            Err(e) => return Err(GatewayError::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::AuthError(format!("status {status}"))),
            408 | 429 | 500..=599 => return Err(GatewayError::Transient(format!("status {status}"))),
            _ => {
                let body: String = text.chars().take(200).collect();
                return Err(GatewayError::Rejected { status, body });
            }
        }
        let value: Value = serde_json::from_str(&text).map_err(|_| GatewayError::ResponseEmpty)?;
        match self.extract(&value) {
            Some(s) if !s.trim().is_empty() => Ok(s),
            _ => Err(GatewayError::ResponseEmpty),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, ResponseCache, RetryPolicy};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serve canned `(status, body)` replies, one per connection, recording
    /// request bodies.
    fn serve(replies: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut head = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line.to_ascii_lowercase().starts_with("content-length:") {
                        len = line[15..].trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(format!("{head}{}", String::from_utf8_lossy(&buf)));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), seen)
    }

    fn settings(flavor: HttpFlavor, url: String, key: Option<&str>) -> HttpSettings {
        HttpSettings { flavor, url, model: "m".into(), api_key: key.map(str::to_string), timeout_secs: 5 }
    }

    #[test]
    fn openai_invalid_key_is_auth_error() {
        let (url, _) = serve(vec![(401, r#"{"error":"bad key"}"#)]);
        let gw = Gateway::new(ResponseCache::in_memory())
            .register("openai", HttpBackend::new(settings(HttpFlavor::OpenAi, url, Some("wrong"))));
        let err = gw.complete(&CompletionRequest::new("REFINE: x", "openai")).unwrap_err();
        assert!(matches!(err, GatewayError::AuthError(_)), "{err:?}");
    }

    #[test]
    fn openai_missing_key_never_dials() {
        let backend = HttpBackend::new(settings(HttpFlavor::OpenAi, "http://127.0.0.1:9".into(), None));
        assert!(matches!(
            backend.complete(&CompletionRequest::new("x", "openai")),
            Err(GatewayError::AuthError(_))
        ));
    }

    #[test]
    fn openai_success_and_request_shape() {
        let (url, seen) = serve(vec![(200, r#"{"choices":[{"message":{"content":"refined"}}]}"#)]);
        let backend = HttpBackend::new(settings(HttpFlavor::OpenAi, url, Some("k")));
        let req = CompletionRequest::new("REFINE: x", "openai").with_system("sys");
        assert_eq!(backend.complete(&req).unwrap(), "refined");
        let raw = seen.lock().unwrap()[0].clone();
        assert!(raw.starts_with("POST /chat/completions"));
        assert!(raw.contains("Bearer k"));
        let body: Value = serde_json::from_str(raw.split("\r\n\r\n").nth(1).unwrap()).unwrap();
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "REFINE: x");
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn llama_retries_server_errors() {
        let (url, _) = serve(vec![(503, "{}"), (200, r#"{"message":{"role":"assistant","content":"ok"}}"#)]);
        let gw = Gateway::new(ResponseCache::in_memory())
            .register("llama3", HttpBackend::new(settings(HttpFlavor::Llama3, url, None)))
            .with_retry(RetryPolicy { max_retries: 2, base_delay_ms: 1, max_delay_ms: 1 });
        assert_eq!(gw.complete(&CompletionRequest::new("NER: x", "llama3")).unwrap(), "ok");
        assert_eq!(gw.backend_calls(), 2);
    }

    #[test]
    fn empty_content_is_response_empty() {
        let (url, _) = serve(vec![(200, r#"{"choices":[{"message":{"content":""}}]}"#)]);
        let backend = HttpBackend::new(settings(HttpFlavor::OpenAi, url, Some("k")));
        assert!(matches!(
            backend.complete(&CompletionRequest::new("x", "openai")),
            Err(GatewayError::ResponseEmpty)
        ));
    }

    #[test]
    fn unreachable_backend_exhausts_retries() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let gw = Gateway::new(ResponseCache::in_memory())
            .register("llama3", HttpBackend::new(settings(HttpFlavor::Llama3, url, None)))
            .with_retry(RetryPolicy { max_retries: 1, base_delay_ms: 1, max_delay_ms: 1 });
        assert!(matches!(
            gw.complete(&CompletionRequest::new("x", "llama3")),
            Err(GatewayError::BackendUnavailable { attempts: 2, .. })
        ));
    }
}
