//! Chat-completions client over HTTP with bounded exponential backoff.

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::embed::normalize;
use super::{ChatBackend, ChatPrompt, GatewayError, ModelReply, Usage};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Model id for `/embeddings`; when absent the hashing embedder is used.
    pub embedding_model: Option<String>,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub seed: Option<u64>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key: None,
            embedding_model: None,
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            seed: None,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(Value),
    Retry(GatewayError),
    Fail(GatewayError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, url: &str, body: &Value, retries: u32) -> Attempt {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(GatewayError::Transport {
                    message: e.to_string(),
                    retries,
                })
            }
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        match status {
            200..=299 => match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fail(GatewayError::Remote {
                    status,
                    body: format!("unparseable response: {e}"),
                    retries,
                }),
            },
            429 => Attempt::Retry(GatewayError::RateLimit { retries }),
            500..=599 => Attempt::Retry(GatewayError::Remote {
                status,
                body: text,
                retries,
            }),
            _ => Attempt::Fail(GatewayError::Remote {
                status,
                body: text,
                retries,
            }),
        }
    }

    fn post_with_retry(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.endpoint(path);
        let mut backoff = self.config.initial_backoff;
        let mut retries = 0;
        loop {
            match self.attempt(&url, body, retries) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if retries >= self.config.max_retries => return Err(e),
                Attempt::Retry(e) => {
                    tracing::warn!(error = %e, retries, "model call failed, backing off");
                    thread::sleep(backoff);
                    backoff *= 2;
                    retries += 1;
                }
            }
        }
    }

    pub fn embed_remote(&self, text: &str) -> Option<Result<Vec<f64>, GatewayError>> {
        let model = self.config.embedding_model.as_ref()?;
        let result = self
            .post_with_retry("embeddings", &json!({ "model": model, "input": text }))
            .and_then(|v| {
                let arr = v["data"][0]["embedding"].as_array().ok_or_else(|| GatewayError::Remote {
                    status: 200,
                    body: "response lacks data[0].embedding".into(),
                    retries: 0,
                })?;
                let mut out: Vec<f64> = arr.iter().filter_map(Value::as_f64).collect();
                normalize(&mut out);
                Ok(out)
            });
        Some(result)
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, prompt: &ChatPrompt) -> Result<ModelReply, GatewayError> {
        let messages: Vec<Value> = prompt
            .messages
            .iter()
            .map(|m| json!({ "role": m.role.as_str(), "content": m.content }))
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": prompt.temperature,
            "max_tokens": prompt.max_tokens,
        });
        if let Some(seed) = self.config.seed {
            body["seed"] = json!(seed);
        }
        let v = self.post_with_retry("chat/completions", &body)?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        let usage = Usage {
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok(ModelReply {
            text,
            usage,
            backend_tag: format!("http:{}", self.config.model),
        })
    }

    fn tag(&self) -> &str {
        "http"
    }

    fn embed(&self, text: &str) -> Option<Result<Vec<f64>, GatewayError>> {
        if text.trim().is_empty() {
            return None;
        }
        self.embed_remote(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Serves the given raw HTTP responses, one per connection, then stops.
    fn serve(responses: Vec<String>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            for resp in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 8192];
                let _ = stream.read(&mut buf);
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        format!("http://{addr}/v1")
    }

    fn http_response(status: &str, body: &str) -> String {
        format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
    }

    fn backend(base_url: String) -> HttpBackend {
        HttpBackend::new(HttpConfig {
            base_url,
            model: "test-model".into(),
            initial_backoff: Duration::from_millis(5),
            timeout: Duration::from_secs(5),
            ..HttpConfig::default()
        })
    }

    #[test]
    fn retries_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"content":"hello"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;
        let url = serve(vec![
            http_response("503 Service Unavailable", "{}"),
            http_response("429 Too Many Requests", "{}"),
            http_response("200 OK", ok),
        ]);
        let reply = backend(url).complete(&ChatPrompt::new("s", "u")).unwrap();
        assert_eq!(reply.text, "hello");
        assert_eq!(reply.usage.prompt_tokens, 3);
    }

    #[test]
    fn gives_up_after_retry_budget() {
        let url = serve(vec![http_response("500 Internal Server Error", "boom"); 4]);
        let err = backend(url).complete(&ChatPrompt::new("s", "u")).unwrap_err();
        assert!(matches!(err, GatewayError::Remote { status: 500, retries: 3, .. }), "{err:?}");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let url = serve(vec![http_response("401 Unauthorized", "no key")]);
        let err = backend(url).complete(&ChatPrompt::new("s", "u")).unwrap_err();
        assert!(matches!(err, GatewayError::Remote { status: 401, retries: 0, .. }));
    }
}
