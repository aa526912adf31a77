use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{BackendKind, GatewayError, ModelGateway, ModelRequest, ModelResponse};

pub const API_KEY_ENV: &str = "REFLECTSQL_API_KEY";

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

#[derive(Clone)]
pub struct HttpConfig {
    /// Base URL without the `/v1/chat/completions` suffix.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub request_timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            max_retries: 3,
            initial_backoff: Duration::from_secs(1),
            request_timeout: Duration::from_secs(120),
        }
    }

    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

impl std::fmt::Debug for HttpConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpConfig")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("max_retries", &self.max_retries)
            .finish()
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

enum Attempt {
    Retryable(String),
    Final(GatewayError),
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    sleep: Sleeper,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| GatewayError::Transport { attempts: 0, message: e.to_string() })?;
        Ok(HttpBackend { config, client, sleep: Arc::new(std::thread::sleep) })
    }

    /// Replaces the backoff sleeper; tests use this to avoid real waits.
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    fn body(&self, request: &ModelRequest) -> serde_json::Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, Attempt> {
        let mut builder = self.client.post(self.config.endpoint()).json(body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retryable(format!("HTTP {status}")));
        }
        let text = response.text().map_err(|e| Attempt::Retryable(e.to_string()))?;
        if !status.is_success() {
            return Err(Attempt::Final(GatewayError::BadResponse(format!("HTTP {status}: {text}"))));
        }
        let parsed: ChatCompletion = serde_json::from_str(&text)
            .map_err(|e| Attempt::Final(GatewayError::BadResponse(format!("undecodable body: {e}"))))?;
        match parsed.choices.into_iter().next().and_then(|c| c.message.content) {
            Some(content) if !content.is_empty() => Ok(content),
            _ => Err(Attempt::Final(GatewayError::BadResponse("empty completion".into()))),
        }
    }
}

impl ModelGateway for HttpBackend {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let body = self.body(request);
        let started = Instant::now();
        let mut backoff = self.config.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(text) => {
                    let latency_ms = started.elapsed().as_millis() as u64;
                    return Ok(ModelResponse { text, latency_ms, backend: BackendKind::Http });
                }
                Err(Attempt::Final(err)) => return Err(err),
                Err(Attempt::Retryable(message)) => {
                    if attempts > self.config.max_retries {
                        return Err(GatewayError::Transport { attempts, message });
                    }
                    tracing::warn!(attempt = attempts, %message, "transient model endpoint failure, backing off");
                    (self.sleep)(backoff);
                    backoff *= 2;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::CallTag;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Mutex;

    /// Serves one canned HTTP response per connection, in order.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; content_length];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}"), handle)
    }

    fn completion(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn backend(url: &str, sleeps: Arc<Mutex<Vec<Duration>>>) -> HttpBackend {
        let mut config = HttpConfig::new(url, "test-model");
        config.api_key = Some("k".into());
        HttpBackend::new(config).unwrap().with_sleeper(move |d| sleeps.lock().unwrap().push(d))
    }

    #[test]
    fn sends_system_and_user_messages() {
        let (url, server) = serve(vec![(200, completion("SELECT 1;"))]);
        let sleeps = Arc::new(Mutex::new(Vec::new()));
        let out = backend(&url, sleeps.clone())
            .complete(&ModelRequest::new(CallTag::Judge, "sys", "usr"))
            .unwrap();
        assert_eq!(out.text, "SELECT 1;");
        assert_eq!(out.backend, BackendKind::Http);
        let bodies = server.join().unwrap();
        let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(body["messages"][0], json!({"role": "system", "content": "sys"}));
        assert_eq!(body["messages"][1], json!({"role": "user", "content": "usr"}));
        assert_eq!(body["temperature"], json!(0.0));
        assert_eq!(body["max_tokens"], json!(512));
        assert!(sleeps.lock().unwrap().is_empty());
    }

    #[test]
    fn retries_server_errors_with_doubling_backoff() {
        let (url, server) = serve(vec![
            (503, "{}".into()),
            (500, "{}".into()),
            (429, "{}".into()),
            (200, completion("ok")),
        ]);
        let sleeps = Arc::new(Mutex::new(Vec::new()));
        let out = backend(&url, sleeps.clone()).complete(&ModelRequest::new(CallTag::Critic, "s", "u")).unwrap();
        assert_eq!(out.text, "ok");
        assert_eq!(server.join().unwrap().len(), 4);
        assert_eq!(*sleeps.lock().unwrap(), vec![Duration::from_secs(1), Duration::from_secs(2), Duration::from_secs(4)]);
    }

    #[test]
    fn gives_up_after_retry_budget() {
        let (url, server) = serve(vec![(502, "{}".into()); 4]);
        let sleeps = Arc::new(Mutex::new(Vec::new()));
        let err = backend(&url, sleeps).complete(&ModelRequest::new(CallTag::Critic, "s", "u")).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 4, .. }));
        server.join().unwrap();
    }

    #[test]
    fn well_formed_client_error_is_not_retried() {
        let (url, server) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
        let sleeps = Arc::new(Mutex::new(Vec::new()));
        let err = backend(&url, sleeps.clone()).complete(&ModelRequest::new(CallTag::Critic, "s", "u")).unwrap_err();
        assert!(matches!(err, GatewayError::BadResponse(_)));
        assert!(sleeps.lock().unwrap().is_empty());
        server.join().unwrap();
    }

    #[test]
    fn refused_connection_is_a_transport_failure() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let sleeps = Arc::new(Mutex::new(Vec::new()));
        let err = backend(&url, sleeps.clone()).complete(&ModelRequest::new(CallTag::Critic, "s", "u")).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 4, .. }));
        assert_eq!(sleeps.lock().unwrap().len(), 3);
    }

    #[test]
    fn debug_redacts_key() {
        let mut config = HttpConfig::new("http://x", "m");
        config.api_key = Some("secret".into());
        assert!(!format!("{config:?}").contains("secret"));
    }
}
