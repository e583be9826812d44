//! OpenAI-compatible chat-completions policy.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::fanout::{fan_out, Gate};
use super::Policy;
use crate::error::{Error, Result};
use crate::mdp::{ActionSegment, EngineConfig, TrajectoryState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay_ms: 250 }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, counting from 1.
    pub fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub concurrency_limit: usize,
    /// Largest `n` sent in one request; larger counts are split.
    pub max_choices_per_request: usize,
    /// Forward the candidate seed as the request `seed` field.
    pub send_seed: bool,
    /// Send the partial answer as a trailing assistant message instead of
    /// appending it to the user message.
    pub assistant_prefix: bool,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    /// Bearer token. Never serialized.
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: String::new(),
            model_name: String::new(),
            temperature: 0.7,
            concurrency_limit: 4,
            max_choices_per_request: 16,
            send_seed: true,
            assistant_prefix: true,
            timeout_ms: 120_000,
            retry: RetryPolicy::default(),
            api_key: None,
        }
    }
}

impl HttpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() {
            return Err(Error::usage("http policy needs an endpoint"));
        }
        if self.concurrency_limit == 0 || self.max_choices_per_request == 0 {
            return Err(Error::usage("concurrency_limit and max_choices_per_request must be at least 1"));
        }
        if self.retry.attempts == 0 {
            return Err(Error::usage("retry attempts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub(crate) struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Message>,
    max_tokens: u32,
    n: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Message {
    role: &'static str,
    content: Content,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum Content {
    Text(String),
    Parts(Vec<Part>),
}

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Part {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Serialize)]
struct ImageUrl {
    url: String,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<usize>,
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    completion_tokens: Option<u64>,
}

pub struct HttpPolicy {
    cfg: HttpConfig,
    engine: EngineConfig,
    client: reqwest::blocking::Client,
    url: String,
    gate: Gate,
}

impl std::fmt::Debug for HttpPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpPolicy").field("url", &self.url).field("model", &self.cfg.model_name).finish()
    }
}

impl HttpPolicy {
    pub fn new(cfg: HttpConfig, engine: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Backend { attempts: 0, message: e.to_string() })?;
        let url = format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/'));
        let gate = Gate::new(cfg.concurrency_limit);
        Ok(HttpPolicy { cfg, engine, client, url, gate })
    }

    /// The exact JSON body sent for `n` continuations of `state`.
    pub fn request_body(&self, state: &TrajectoryState, n: usize, seed: u64) -> Result<String> {
        let problem = state.problem();
        let partial = state.response_text();
        let mut messages =
            vec![Message { role: "system", content: Content::Text(self.engine.prompt_template.clone()) }];
        let mut question = problem.prompt.clone();
        if !partial.is_empty() && !self.cfg.assistant_prefix {
            question.push_str("\n\n");
            question.push_str(&partial);
        }
        let user = match &problem.media {
            Some(url) => Content::Parts(vec![
                Part::ImageUrl { image_url: ImageUrl { url: url.clone() } },
                Part::Text { text: question },
            ]),
            None => Content::Text(question),
        };
        messages.push(Message { role: "user", content: user });
        if !partial.is_empty() && self.cfg.assistant_prefix {
            messages.push(Message { role: "assistant", content: Content::Text(partial) });
        }
        let req = ChatRequest {
            model: &self.cfg.model_name,
            messages,
            max_tokens: self.engine.segment_length,
            n,
            temperature: self.cfg.temperature,
            seed: self.cfg.send_seed.then_some(seed),
        };
        Ok(serde_json::to_string(&req)?)
    }

    fn post(&self, body: &str) -> Result<String> {
        let mut last = String::new();
        for attempt in 1..=self.cfg.retry.attempts {
            let outcome = {
                let _permit = self.gate.acquire();
                let mut req =
                    self.client.post(&self.url).header("content-type", "application/json").body(body.to_string());
                if let Some(key) = &self.cfg.api_key {
                    req = req.bearer_auth(key);
                }
                req.send().and_then(|r| {
                    let status = r.status();
                    r.text().map(|t| (status, t))
                })
            };
            match outcome {
                Ok((status, text)) if status.is_success() => return Ok(text),
                Ok((status, text)) => {
                    last = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(Error::Backend { attempts: attempt, message: last });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < self.cfg.retry.attempts {
                std::thread::sleep(self.cfg.retry.delay(attempt));
            }
        }
        Err(Error::Backend { attempts: self.cfg.retry.attempts, message: last })
    }

    fn request(&self, state: &TrajectoryState, n: usize, seed: u64) -> Result<Vec<ActionSegment>> {
        let body = self.request_body(state, n, seed)?;
        let text = self.post(&body)?;
        parse_response(&text, n, self.engine.segment_length)
    }
}

/// Turns a chat-completions body into `n` segments.
///
/// A choice stopped by `length` is a full non-terminal segment of `L` tokens.
/// Any other finish is end-of-sequence. Terminal choices share the reported
/// completion tokens left after the full segments, split in proportion to
/// their word counts; without usage, each counts its words. Counts are
/// clamped to `1..=L`.
pub(crate) fn parse_response(text: &str, n: usize, segment_length: u32) -> Result<Vec<ActionSegment>> {
    let resp: ChatResponse =
        serde_json::from_str(text).map_err(|e| Error::Protocol(format!("malformed response body: {e}")))?;
    let mut choices = resp.choices;
    if choices.len() < n {
        return Err(Error::Protocol(format!("expected {n} choices, got {}", choices.len())));
    }
    if choices.iter().all(|c| c.index.is_some()) {
        choices.sort_by_key(|c| c.index);
    }
    choices.truncate(n);
    let l = u64::from(segment_length);
    let mut texts = Vec::with_capacity(n);
    for c in choices {
        let content = c.message.content.ok_or_else(|| Error::Protocol("choice without message content".into()))?;
        let cut = c.finish_reason.as_deref() == Some("length");
        texts.push((content, !cut));
    }
    let words = |s: &str| s.split_whitespace().count().max(1) as u64;
    let full = texts.iter().filter(|(_, terminal)| !terminal).count() as u64;
    let terminal_words: u64 = texts.iter().filter(|(_, t)| *t).map(|(s, _)| words(s)).sum();
    let budget = resp.usage.and_then(|u| u.completion_tokens).map(|total| total.saturating_sub(full * l));
    texts
        .into_iter()
        .map(|(content, terminal)| {
            let tokens = if !terminal {
                l
            } else {
                let w = words(&content);
                match budget {
                    Some(b) if terminal_words > 0 => b * w / terminal_words,
                    _ => w,
                }
                .clamp(1, l)
            };
            ActionSegment::new(content, tokens as u32, terminal, segment_length)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Protocol(e.to_string()))
}

impl Policy for HttpPolicy {
    fn engine(&self) -> &EngineConfig {
        &self.engine
    }

    fn concurrency_limit(&self) -> usize {
        self.cfg.concurrency_limit
    }

    /// Splits the seeds into chunks of at most `max_choices_per_request`;
    /// each chunk is one request carrying its first seed.
    fn generate(&self, state: &TrajectoryState, seeds: &[u64]) -> Result<Vec<ActionSegment>> {
        let chunks: Vec<&[u64]> = seeds.chunks(self.cfg.max_choices_per_request).collect();
        let results =
            fan_out(chunks.len(), self.cfg.concurrency_limit, |i| self.request(state, chunks[i].len(), chunks[i][0]));
        let mut out = Vec::with_capacity(seeds.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}
