use std::time::{Duration, Instant};

use fluidbench_core::{RequestStatus, RequestTrace, TokenEvent};
use futures::StreamExt;
use reqwest::header::{HeaderMap, HeaderName, HeaderValue, AUTHORIZATION, CONTENT_TYPE};
use serde_json::{json, Value};

use crate::sse::SseParser;
use crate::ClientError;

pub const DEFAULT_PATH: &str = "/v1/chat/completions";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);
/// Declares the prompt length so cooperating servers need no tokenizer.
pub const PROMPT_TOKENS_HEADER: &str = "x-prompt-tokens";

const CHARS_PER_TOKEN: usize = 4;

/// How many tokens a single content-bearing stream event is worth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenCountMode {
    /// Each event is one token.
    #[default]
    PerChunk,
    /// `ceil(chars / 4)` tokens per event, at least one.
    CharsHeuristic,
}

impl TokenCountMode {
    pub fn count(self, content: &str) -> u32 {
        match self {
            Self::PerChunk => 1,
            Self::CharsHeuristic => {
                let chars = content.chars().count().div_ceil(CHARS_PER_TOKEN).max(1);
                u32::try_from(chars).unwrap_or(u32::MAX)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub path: String,
    pub model: String,
    pub auth_token: Option<String>,
    pub extra_headers: Vec<(String, String)>,
    pub timeout: Duration,
    pub token_mode: TokenCountMode,
    /// Send the prompt length in [`PROMPT_TOKENS_HEADER`].
    pub declare_prompt_tokens: bool,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            path: DEFAULT_PATH.into(),
            model: model.into(),
            auth_token: None,
            extra_headers: Vec::new(),
            timeout: DEFAULT_TIMEOUT,
            token_mode: TokenCountMode::default(),
            declare_prompt_tokens: true,
        }
    }

    /// Read the bearer token from the named environment variable.
    pub fn with_auth_env(mut self, var: &str) -> Result<Self, ClientError> {
        let token = std::env::var(var).map_err(|_| ClientError::MissingAuth(var.to_owned()))?;
        self.auth_token = Some(token);
        Ok(self)
    }

    pub fn url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if self.path.starts_with('/') {
            format!("{base}{}", self.path)
        } else {
            format!("{base}/{}", self.path)
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.timeout.is_zero() {
            return Err(ClientError::Config("request timeout must be positive".into()));
        }
        reqwest::Url::parse(&self.url())
            .map_err(|e| ClientError::Config(format!("endpoint url {}: {e}", self.url())))?;
        Ok(())
    }

    fn headers(&self) -> Result<HeaderMap, ClientError> {
        let mut map = HeaderMap::new();
        map.insert(CONTENT_TYPE, HeaderValue::from_static("application/json"));
        if let Some(token) = &self.auth_token {
            let value = HeaderValue::from_str(&format!("Bearer {token}"))
                .map_err(|_| ClientError::Config("auth token is not a valid header value".into()))?;
            map.insert(AUTHORIZATION, value);
        }
        for (k, v) in &self.extra_headers {
            let name = HeaderName::from_bytes(k.as_bytes())
                .map_err(|_| ClientError::Config(format!("bad header name {k:?}")))?;
            let value =
                HeaderValue::from_str(v).map_err(|_| ClientError::Config(format!("bad value for header {k}")))?;
            map.insert(name, value);
        }
        Ok(map)
    }
}

/// One prompt to send.
#[derive(Debug, Clone)]
pub(crate) struct Prompt<'a> {
    pub request_id: &'a str,
    pub text: &'a str,
    pub prompt_tokens: u32,
    pub max_tokens: u32,
}

#[derive(Debug, Clone)]
pub struct StreamClient {
    http: reqwest::Client,
    config: EndpointConfig,
    url: String,
}

enum Outcome {
    Done,
    Failed(String),
}

impl StreamClient {
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let http = reqwest::Client::builder()
            .default_headers(config.headers()?)
            .tcp_nodelay(true)
            .build()?;
        let url = config.url();
        Ok(Self { http, config, url })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Send one streaming request and record its trace. Timestamps are
    /// seconds since `epoch`. Failures never surface as errors: they end up
    /// in the trace status with whatever events arrived before them.
    pub async fn dispatch_request(
        &self,
        epoch: Instant,
        request_id: &str,
        prompt: &str,
        prompt_tokens: u32,
        max_tokens: u32,
    ) -> RequestTrace {
        self.dispatch(
            epoch,
            Prompt {
                request_id,
                text: prompt,
                prompt_tokens,
                max_tokens,
            },
        )
        .await
    }

    pub(crate) async fn dispatch(&self, epoch: Instant, prompt: Prompt<'_>) -> RequestTrace {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt.text}],
            "max_tokens": prompt.max_tokens,
            "stream": true,
        });
        let mut req = self.http.post(&self.url).body(body.to_string());
        if self.config.declare_prompt_tokens {
            req = req.header(PROMPT_TOKENS_HEADER, prompt.prompt_tokens.to_string());
        }
        req = req.header("x-request-id", prompt.request_id);

        let mut events = Vec::new();
        let dispatched = Instant::now();
        let dispatch_time = dispatched.duration_since(epoch).as_secs_f64();
        let deadline = tokio::time::Instant::from_std(dispatched + self.config.timeout);
        let stream = self.stream_events(req, epoch, &mut events);
        let status = match tokio::time::timeout_at(deadline, stream).await {
            Ok(Outcome::Done) if !events.is_empty() => RequestStatus::Completed,
            Ok(Outcome::Done) => {
                tracing::warn!(request_id = prompt.request_id, "stream finished without content");
                RequestStatus::Errored
            }
            Ok(Outcome::Failed(reason)) => {
                tracing::warn!(request_id = prompt.request_id, %reason, "request failed");
                RequestStatus::Errored
            }
            Err(_) => RequestStatus::TimedOut,
        };
        RequestTrace {
            request_id: prompt.request_id.to_owned(),
            dispatch_time,
            prompt_token_count: prompt.prompt_tokens,
            events,
            status,
        }
    }

    async fn stream_events(
        &self,
        req: reqwest::RequestBuilder,
        epoch: Instant,
        events: &mut Vec<TokenEvent>,
    ) -> Outcome {
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) => return Outcome::Failed(format!("send: {e}")),
        };
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            return Outcome::Failed(format!("http {status}: {}", text.chars().take(200).collect::<String>()));
        }
        let mut body = resp.bytes_stream();
        let mut parser = SseParser::new();
        let mut last = 0.0f64;
        while let Some(chunk) = body.next().await {
            let bytes = match chunk {
                Ok(b) => b,
                Err(e) => return Outcome::Failed(format!("stream: {e}")),
            };
            // One arrival instant for everything in this read: frames that
            // share a packet are indistinguishable from a burst.
            let at = epoch.elapsed().as_secs_f64().max(last);
            last = at;
            for data in parser.push(&bytes) {
                if data == "[DONE]" {
                    return Outcome::Done;
                }
                let frame: Value = match serde_json::from_str(&data) {
                    Ok(v) => v,
                    Err(e) => return Outcome::Failed(format!("bad frame: {e}")),
                };
                if let Some(err) = frame.get("error") {
                    return Outcome::Failed(format!("server error frame: {err}"));
                }
                let content = frame["choices"][0]["delta"]["content"].as_str().unwrap_or("");
                if !content.is_empty() {
                    events.push(TokenEvent::new(at, self.config.token_mode.count(content)));
                }
            }
        }
        Outcome::Failed("stream ended before [DONE]".into())
    }
}
