//! A deterministic stand-in for a browser-driven chatbot: threads, streamed
//! answers, scripted faults and HTTP-shaped transcripts for provenance.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::provenance::{FieldRule, ResponseSchema, SessionTranscript};

pub const MOCK_BACKEND_ID: &str = "mock-gpt";
pub const MOCK_SERVER_NAME: &str = "chat.mock.invalid";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendFault {
    ServerError,
    RateLimited,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("unknown thread {0}")]
    UnknownThread(String),
    #[error("no thread selected")]
    NoThread,
    #[error("a response is still streaming")]
    Busy,
    #[error("thread {0} has no completed exchange")]
    NothingToFetch(String),
}

/// What the proxy's driver can do with a chatbot page.
pub trait ChatbotBackend: Send {
    fn id(&self) -> &str;
    fn new_thread(&mut self) -> String;
    fn open_thread(&mut self, thread_id: &str) -> Result<(), BackendError>;
    fn current_thread(&self) -> Option<String>;
    fn submit(&mut self, text: &str) -> Result<(), BackendError>;
    fn is_streaming(&self) -> bool;
    /// Text rendered so far for the in-flight answer.
    fn streamed(&self) -> String;
    fn last_error(&self) -> Option<BackendFault>;
    /// The finished answer of the latest submission, once streaming stops.
    fn last_response(&self) -> Option<String>;
    /// Re-fetches the latest exchange of a thread as an HTTP transcript.
    fn fetch_conversation(&self, thread_id: &str) -> Result<SessionTranscript, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEntry {
    /// Zero-based count of `submit` calls.
    pub index: u64,
    pub fault: BackendFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockChatbotConfig {
    pub seed: u64,
    pub tokens_per_second: f64,
    pub chars_per_token: f64,
    pub min_response_chars: usize,
    pub max_response_chars: usize,
    pub fault_plan: Vec<FaultEntry>,
}

impl Default for MockChatbotConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tokens_per_second: 75.0,
            chars_per_token: 4.0,
            min_response_chars: 800,
            max_response_chars: 1600,
            fault_plan: Vec::new(),
        }
    }
}

impl MockChatbotConfig {
    pub fn stream_ms(&self, chars: usize) -> u64 {
        (chars as f64 / (self.tokens_per_second * self.chars_per_token) * 1000.0).round() as u64
    }

    pub fn sample_len(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min_response_chars..=self.max_response_chars)
    }
}

#[derive(Debug, Clone)]
struct Exchange {
    user_message_id: String,
    reply_message_id: String,
    query: String,
    response: String,
    timestamp_secs: u64,
}

#[derive(Debug, Clone)]
struct Inflight {
    started_ms: u64,
    duration_ms: u64,
    response: String,
}

pub struct MockChatbot {
    cfg: MockChatbotConfig,
    clock: Arc<dyn Clock>,
    rng: ChaCha8Rng,
    account_token: String,
    threads: BTreeMap<String, Vec<Exchange>>,
    current: Option<String>,
    submits: u64,
    inflight: Option<Inflight>,
    last_error: Option<BackendFault>,
}

impl MockChatbot {
    pub fn new(cfg: MockChatbotConfig, clock: Arc<dyn Clock>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let account_token = hex_id(&mut rng, 24);
        Self {
            cfg,
            clock,
            rng,
            account_token,
            threads: BTreeMap::new(),
            current: None,
            submits: 0,
            inflight: None,
            last_error: None,
        }
    }

    pub fn config(&self) -> &MockChatbotConfig {
        &self.cfg
    }

    pub fn thread_messages(&self, thread_id: &str) -> Option<Vec<(String, String)>> {
        self.threads
            .get(thread_id)
            .map(|t| t.iter().map(|e| (e.query.clone(), e.response.clone())).collect())
    }

    fn answer(&mut self, query: &str) -> String {
        let len = self.cfg.sample_len(&mut self.rng);
        let mut text = String::new();
        if let Some(nonce) = requested_prefix(query) {
            text.push_str(nonce);
            text.push(' ');
        }
        let rest = len.saturating_sub(text.len());
        text.push_str(&lorem(&mut self.rng, rest));
        text
    }
}

/// The challenge template asks the model to open with a marker string.
pub fn requested_prefix(query: &str) -> Option<&str> {
    const CUE: &str = "Begin your answer with the string \"";
    let start = query.find(CUE)? + CUE.len();
    let len = query[start..].find('"')?;
    Some(&query[start..start + len])
}

impl ChatbotBackend for MockChatbot {
    fn id(&self) -> &str {
        MOCK_BACKEND_ID
    }

    fn new_thread(&mut self) -> String {
        let id = uuid_like(&mut self.rng);
        self.threads.insert(id.clone(), Vec::new());
        self.current = Some(id.clone());
        id
    }

    fn open_thread(&mut self, thread_id: &str) -> Result<(), BackendError> {
        if !self.threads.contains_key(thread_id) {
            return Err(BackendError::UnknownThread(thread_id.to_string()));
        }
        self.current = Some(thread_id.to_string());
        Ok(())
    }

    fn current_thread(&self) -> Option<String> {
        self.current.clone()
    }

    fn submit(&mut self, text: &str) -> Result<(), BackendError> {
        let thread = self.current.clone().ok_or(BackendError::NoThread)?;
        if self.is_streaming() {
            return Err(BackendError::Busy);
        }
        let index = self.submits;
        self.submits += 1;
        self.inflight = None;
        self.last_error = self.cfg.fault_plan.iter().find(|f| f.index == index).map(|f| f.fault);
        if self.last_error.is_some() {
            return Ok(());
        }
        let response = self.answer(text);
        let now = self.clock.now_ms();
        let exchange = Exchange {
            user_message_id: uuid_like(&mut self.rng),
            reply_message_id: uuid_like(&mut self.rng),
            query: text.to_string(),
            response: response.clone(),
            timestamp_secs: now / 1000,
        };
        self.threads.get_mut(&thread).expect("current thread exists").push(exchange);
        self.inflight = Some(Inflight {
            started_ms: now,
            duration_ms: self.cfg.stream_ms(response.len()),
            response,
        });
        Ok(())
    }

    fn is_streaming(&self) -> bool {
        self.inflight
            .as_ref()
            .is_some_and(|i| self.clock.now_ms() < i.started_ms + i.duration_ms)
    }

    fn streamed(&self) -> String {
        let Some(i) = &self.inflight else {
            return String::new();
        };
        let elapsed = self.clock.now_ms().saturating_sub(i.started_ms);
        if elapsed >= i.duration_ms {
            return i.response.clone();
        }
        let n = (i.response.len() as u64 * elapsed / i.duration_ms.max(1)) as usize;
        i.response.chars().take(n).collect()
    }

    fn last_error(&self) -> Option<BackendFault> {
        self.last_error
    }

    fn last_response(&self) -> Option<String> {
        if self.is_streaming() {
            return None;
        }
        self.inflight.as_ref().map(|i| i.response.clone())
    }

    fn fetch_conversation(&self, thread_id: &str) -> Result<SessionTranscript, BackendError> {
        let thread = self
            .threads
            .get(thread_id)
            .ok_or_else(|| BackendError::UnknownThread(thread_id.to_string()))?;
        let ex = thread
            .last()
            .ok_or_else(|| BackendError::NothingToFetch(thread_id.to_string()))?;
        Ok(exchange_transcript(&ExchangeParts {
            thread_id,
            continues_thread: thread.len() > 1,
            user_message_id: &ex.user_message_id,
            reply_message_id: &ex.reply_message_id,
            query: &ex.query,
            response: &ex.response,
            account_token: &self.account_token,
            timestamp_secs: ex.timestamp_secs,
        }))
    }
}

#[derive(Serialize)]
struct Author<'a> {
    role: &'a str,
}

#[derive(Serialize)]
struct Content<'a> {
    content_type: &'a str,
    parts: [&'a str; 1],
}

#[derive(Serialize)]
struct RequestMessage<'a> {
    id: &'a str,
    author: Author<'a>,
    content: Content<'a>,
}

#[derive(Serialize)]
struct RequestBody<'a> {
    action: &'a str,
    conversation_id: Option<&'a str>,
    model: &'a str,
    messages: [RequestMessage<'a>; 1],
}

#[derive(Serialize)]
struct ResponseMessage<'a> {
    id: &'a str,
    author: Author<'a>,
    content: Content<'a>,
    status: &'a str,
}

#[derive(Serialize)]
struct ResponseBody<'a> {
    message: ResponseMessage<'a>,
    conversation_id: &'a str,
    error: Option<&'a str>,
}

/// One request/response pair of a conversation.
pub struct ExchangeParts<'a> {
    pub thread_id: &'a str,
    /// A thread's first request carries no conversation id; the backend
    /// assigns one in its reply.
    pub continues_thread: bool,
    pub user_message_id: &'a str,
    pub reply_message_id: &'a str,
    pub query: &'a str,
    pub response: &'a str,
    pub account_token: &'a str,
    pub timestamp_secs: u64,
}

/// Serializes one exchange the way the backend's HTTP API carries it.
pub fn exchange_transcript(ex: &ExchangeParts) -> SessionTranscript {
    let ExchangeParts {
        thread_id,
        continues_thread,
        user_message_id,
        reply_message_id,
        query,
        response,
        account_token,
        timestamp_secs,
    } = *ex;
    let req_body = serde_json::to_string(&RequestBody {
        action: "next",
        conversation_id: continues_thread.then_some(thread_id),
        model: "mock-1",
        messages: [RequestMessage {
            id: user_message_id,
            author: Author { role: "user" },
            content: Content {
                content_type: "text",
                parts: [query],
            },
        }],
    })
    .expect("serializes");
    let resp_body = serde_json::to_string(&ResponseBody {
        message: ResponseMessage {
            id: reply_message_id,
            author: Author { role: "assistant" },
            content: Content {
                content_type: "text",
                parts: [response],
            },
            status: "finished_successfully",
        },
        conversation_id: thread_id,
        error: None,
    })
    .expect("serializes");
    let request = format!(
        "POST /backend-api/conversation HTTP/1.1\r\nHost: {MOCK_SERVER_NAME}\r\nAuthorization: Bearer {account_token}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{req_body}",
        req_body.len()
    );
    let response = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nSet-Cookie: __session={account_token}; Secure; HttpOnly\r\nContent-Length: {}\r\n\r\n{resp_body}",
        resp_body.len()
    );
    SessionTranscript {
        request: request.into_bytes(),
        response: response.into_bytes(),
        server_name: MOCK_SERVER_NAME.to_string(),
        timestamp: timestamp_secs,
    }
}

impl ResponseSchema {
    /// Layout of the mock backend's conversation response.
    pub fn mock_v1() -> Self {
        let field = |path: &str, redactable: bool| FieldRule {
            path: path.to_string(),
            redactable,
            max_len: redactable.then_some(64),
        };
        Self {
            name: MOCK_BACKEND_ID.to_string(),
            version: 1,
            server_name: MOCK_SERVER_NAME.to_string(),
            redactable_head: true,
            fields: vec![
                field("message.id", true),
                field("message.author.role", false),
                field("message.content.content_type", false),
                field("message.content.parts[0]", false),
                field("message.status", false),
                field("conversation_id", true),
                field("error", false),
            ],
            content_path: "message.content.parts[0]".to_string(),
        }
    }
}

const WORDS: &[&str] = &[
    "lorem", "ipsum", "dolor", "sit", "amet", "consectetur", "adipiscing", "elit", "sed", "do", "eiusmod",
    "tempor", "incididunt", "ut", "labore", "et", "dolore", "magna", "aliqua", "enim", "ad", "minim",
    "veniam", "quis", "nostrud", "exercitation", "ullamco", "laboris", "nisi", "aliquip", "ex", "ea",
    "commodo", "consequat", "duis", "aute", "irure", "in", "reprehenderit", "voluptate", "velit", "esse",
    "cillum", "fugiat", "nulla", "pariatur", "excepteur", "sint", "occaecat", "cupidatat", "non",
    "proident", "sunt", "culpa", "qui", "officia", "deserunt", "mollit", "anim", "id", "est", "laborum",
];

/// Filler prose of exactly `len` bytes.
pub fn lorem(rng: &mut impl Rng, len: usize) -> String {
    let mut out = String::with_capacity(len + 16);
    let mut sentence_start = true;
    while out.len() < len {
        let mut word = WORDS[rng.gen_range(0..WORDS.len())].to_string();
        if sentence_start {
            word[..1].make_ascii_uppercase();
            sentence_start = false;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word);
        if rng.gen_ratio(1, 12) {
            out.push('.');
            sentence_start = true;
        }
    }
    out.truncate(len);
    out
}

pub(crate) fn hex_id(rng: &mut impl Rng, bytes: usize) -> String {
    (0..bytes).map(|_| format!("{:02x}", rng.gen::<u8>())).collect()
}

fn uuid_like(rng: &mut impl Rng) -> String {
    let h = hex_id(rng, 16);
    format!("{}-{}-{}-{}-{}", &h[..8], &h[8..12], &h[12..16], &h[16..20], &h[20..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::provenance::{plan_reveal, scan_body};

    fn bot(faults: Vec<FaultEntry>) -> (MockChatbot, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(1_700_000_000_000));
        let cfg = MockChatbotConfig {
            seed: 3,
            fault_plan: faults,
            ..Default::default()
        };
        (MockChatbot::new(cfg, clock.clone()), clock)
    }

    #[test]
    fn streamed_text_matches_fetched_transcript() {
        let (mut b, clock) = bot(vec![]);
        let t = b.new_thread();
        b.submit("What is the capital of Peru?").unwrap();
        assert!(b.is_streaming());
        assert!(b.last_response().is_none());
        clock.advance(60_000);
        let answer = b.last_response().unwrap();
        assert!((800..=1600).contains(&answer.len()));
        assert_eq!(b.streamed(), answer);

        let tr = b.fetch_conversation(&t).unwrap();
        let sep = tr.response.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
        let body: serde_json::Value = serde_json::from_slice(&tr.response[sep + 4..]).unwrap();
        assert_eq!(body["message"]["content"]["parts"][0], answer.as_str());
        let masked: Vec<_> = tr.response[sep + 4..].iter().map(|b| Some(*b)).collect();
        let leaves = scan_body(&masked, Some(&ResponseSchema::mock_v1())).unwrap();
        ResponseSchema::mock_v1().check_leaves(&leaves).unwrap();
        plan_reveal(&tr, &ResponseSchema::mock_v1(), "What is the capital of Peru?").unwrap();
        assert!(plan_reveal(&tr, &ResponseSchema::mock_v1(), "nowhere in it").is_err());
    }

    #[test]
    fn fault_plan_fires_at_its_index() {
        let (mut b, clock) = bot(vec![FaultEntry {
            index: 2,
            fault: BackendFault::ServerError,
        }]);
        b.new_thread();
        for i in 0..4 {
            b.submit("q").unwrap();
            let want = (i == 2).then_some(BackendFault::ServerError);
            assert_eq!(b.last_error(), want, "submit {i}");
            clock.advance(60_000);
        }
    }

    #[test]
    fn threads_do_not_interleave() {
        let (mut b, clock) = bot(vec![]);
        let a = b.new_thread();
        b.submit("first in a").unwrap();
        clock.advance(60_000);
        let c = b.new_thread();
        b.submit("first in c").unwrap();
        clock.advance(60_000);
        b.open_thread(&a).unwrap();
        b.submit("second in a").unwrap();
        let qa: Vec<_> = b.thread_messages(&a).unwrap().into_iter().map(|m| m.0).collect();
        let qc: Vec<_> = b.thread_messages(&c).unwrap().into_iter().map(|m| m.0).collect();
        assert_eq!(qa, ["first in a", "second in a"]);
        assert_eq!(qc, ["first in c"]);
        assert!(b.open_thread("nope").is_err());
    }

    #[test]
    fn honours_marker_request() {
        let (mut b, clock) = bot(vec![]);
        b.new_thread();
        b.submit("Name a river. Begin your answer with the string \"0123abcd4567ef89\".").unwrap();
        clock.advance(60_000);
        assert!(b.last_response().unwrap().starts_with("0123abcd4567ef89 "));
    }
}
