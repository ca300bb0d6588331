//! The chatbot page driver: select thread, type, submit, wait for the stream
//! to finish, check for errors, read the answer. Every failed attempt costs
//! a fixed retry delay.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chatbot::{BackendFault, ChatbotBackend};
use crate::clock::ManualClock;
use crate::crypto::{verify_signature, AgreementPublicKey, Signature, SigningPublicKey};
use crate::protocol::{ownership_message, QueryId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverWaits {
    pub select_thread_ms: u64,
    pub enter_query_ms: u64,
    pub submit_ms: u64,
    pub poll_ms: u64,
    pub retry_ms: u64,
    pub max_attempts: u32,
    pub stream_timeout_ms: u64,
}

impl Default for DriverWaits {
    fn default() -> Self {
        Self {
            select_thread_ms: 3_000,
            enter_query_ms: 1_000,
            submit_ms: 3_000,
            poll_ms: 1_000,
            retry_ms: 60_000,
            max_attempts: 3,
            stream_timeout_ms: 300_000,
        }
    }
}

impl DriverWaits {
    /// No artificial delays; streaming is polled every millisecond.
    pub fn zero() -> Self {
        Self {
            select_thread_ms: 0,
            enter_query_ms: 0,
            submit_ms: 0,
            poll_ms: 0,
            retry_ms: 0,
            max_attempts: 3,
            stream_timeout_ms: 0,
        }
    }

    pub fn mandated_ms(&self) -> u64 {
        self.select_thread_ms + self.enter_query_ms + self.submit_ms
    }
}

/// How the driver waits. Live agents sleep; the simulator advances a
/// virtual clock.
pub trait Pause {
    fn pause(&mut self, ms: u64);
}

pub struct SleepPause;

impl Pause for SleepPause {
    fn pause(&mut self, ms: u64) {
        std::thread::sleep(Duration::from_millis(ms));
    }
}

pub struct ClockPause(pub Arc<ManualClock>);

impl Pause for ClockPause {
    fn pause(&mut self, ms: u64) {
        self.0.advance(ms);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverPhase {
    SelectThread,
    EnterQuery,
    Submit,
    WaitStream,
    CheckError,
    Retrieve,
    Done,
    RetryWait,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryJob {
    pub query_id: QueryId,
    pub query_text: String,
    pub backend_id: String,
    pub thread_id: Option<String>,
    pub thread_ownership_sig: Option<Signature>,
    pub client_agreement_pub: AgreementPublicKey,
    pub client_signing_pub: SigningPublicKey,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriverOutcome {
    pub response: String,
    pub thread_id: String,
    pub attempts: u32,
    pub elapsed_ms: u64,
    /// Phases entered, with the elapsed time at entry.
    pub trace: Vec<(DriverPhase, u64)>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DriverError {
    #[error("thread ownership signature does not verify")]
    OwnershipInvalid,
    #[error("backend {0} is not available on this proxy")]
    UnsupportedBackend(String),
    #[error("gave up after {attempts} attempts: {last}")]
    MaxAttemptsExceeded { attempts: u32, last: String },
}

#[derive(Debug, Clone)]
struct ThreadOwner {
    latest: QueryId,
    owner: SigningPublicKey,
}

/// Who may continue which thread: the holder of the signing key used for the
/// thread's latest query.
#[derive(Debug, Clone, Default)]
pub struct ThreadBook {
    threads: BTreeMap<String, ThreadOwner>,
}

impl ThreadBook {
    pub fn check_followup(&self, job: &QueryJob) -> Result<(), DriverError> {
        let Some(thread) = &job.thread_id else { return Ok(()) };
        let (Some(sig), Some(owner)) = (&job.thread_ownership_sig, self.threads.get(thread)) else {
            return Err(DriverError::OwnershipInvalid);
        };
        if verify_signature(&ownership_message(&owner.latest), &sig.0, &owner.owner) {
            Ok(())
        } else {
            Err(DriverError::OwnershipInvalid)
        }
    }

    pub fn record(&mut self, thread_id: &str, latest: QueryId, owner: SigningPublicKey) {
        self.threads.insert(thread_id.to_string(), ThreadOwner { latest, owner });
    }
}

struct Timeline<'a> {
    pause: &'a mut dyn Pause,
    elapsed: u64,
    trace: Vec<(DriverPhase, u64)>,
}

impl Timeline<'_> {
    fn enter(&mut self, phase: DriverPhase) {
        self.trace.push((phase, self.elapsed));
    }

    fn wait(&mut self, ms: u64) {
        self.pause.pause(ms);
        self.elapsed += ms;
    }
}

fn attempt(job: &QueryJob, backend: &mut dyn ChatbotBackend, w: &DriverWaits, t: &mut Timeline) -> Result<(String, String), String> {
    t.enter(DriverPhase::SelectThread);
    match &job.thread_id {
        Some(id) => backend.open_thread(id).map_err(|e| e.to_string())?,
        None => {
            backend.new_thread();
        }
    }
    t.wait(w.select_thread_ms);

    t.enter(DriverPhase::EnterQuery);
    t.wait(w.enter_query_ms);

    t.enter(DriverPhase::Submit);
    backend.submit(&job.query_text).map_err(|e| e.to_string())?;
    t.wait(w.submit_ms);

    t.enter(DriverPhase::WaitStream);
    // polls at least every millisecond so a virtual clock always moves
    let poll = w.poll_ms.max(1);
    let mut waited = 0;
    while backend.is_streaming() {
        if waited >= w.stream_timeout_ms && w.stream_timeout_ms > 0 {
            return Err("response never finished streaming".into());
        }
        t.wait(poll);
        waited += poll;
    }

    t.enter(DriverPhase::CheckError);
    if let Some(fault) = backend.last_error() {
        return Err(match fault {
            BackendFault::ServerError => "backend reported a server error".into(),
            BackendFault::RateLimited => "backend rate limited the account".into(),
        });
    }

    t.enter(DriverPhase::Retrieve);
    let response = backend.last_response().ok_or("no response rendered")?;
    let thread = backend.current_thread().ok_or("no thread selected")?;
    Ok((response, thread))
}

/// Runs one query through the backend. Follow-ups are refused before the
/// backend is touched unless their ownership signature checks out.
pub fn handle_query(
    job: &QueryJob,
    backend: &mut dyn ChatbotBackend,
    book: &ThreadBook,
    waits: &DriverWaits,
    pause: &mut dyn Pause,
) -> Result<DriverOutcome, DriverError> {
    book.check_followup(job)?;
    if backend.id() != job.backend_id {
        return Err(DriverError::UnsupportedBackend(job.backend_id.clone()));
    }
    let mut t = Timeline {
        pause,
        elapsed: 0,
        trace: Vec::new(),
    };
    let max = waits.max_attempts.max(1);
    let mut last = String::new();
    for n in 1..=max {
        match attempt(job, backend, waits, &mut t) {
            Ok((response, thread_id)) => {
                t.enter(DriverPhase::Done);
                return Ok(DriverOutcome {
                    response,
                    thread_id,
                    attempts: n,
                    elapsed_ms: t.elapsed,
                    trace: t.trace,
                });
            }
            Err(e) => {
                log::debug!("attempt {n} for {} failed: {e}", job.query_id);
                last = e;
                if n < max {
                    t.enter(DriverPhase::RetryWait);
                    t.wait(waits.retry_ms);
                }
            }
        }
    }
    Err(DriverError::MaxAttemptsExceeded { attempts: max, last })
}
