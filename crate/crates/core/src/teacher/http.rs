use std::fmt;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::Deserialize;

use super::{Teacher, TeacherReply, TeacherRequest, Usage};
use crate::error::{Error, Result};

/// Environment variable holding the teacher credential.
pub const API_KEY_VAR: &str = "TEACHER_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubled after each failure.
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Slots {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Deserialize)]
struct WireUsage {
    input_tokens: u64,
    output_tokens: u64,
}

#[derive(Deserialize)]
struct WireReply {
    content: String,
    usage: WireUsage,
}

/// Generic chat endpoint: POSTs the request JSON and reads
/// `{content, usage: {input_tokens, output_tokens}}`.
pub struct HttpTeacher {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    slots: Slots,
}

impl fmt::Debug for HttpTeacher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpTeacher")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

impl HttpTeacher {
    /// Reads the credential from `TEACHER_API_KEY` when set.
    pub fn new(endpoint: &str, max_in_flight: usize, retry: RetryPolicy, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Configuration(format!("cannot build HTTP client: {e}")))?;
        Ok(HttpTeacher {
            endpoint: endpoint.to_owned(),
            api_key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
            client,
            retry,
            slots: Slots::new(max_in_flight),
        })
    }

    fn attempt(&self, request: &TeacherRequest) -> std::result::Result<TeacherReply, (bool, String)> {
        let mut call = self.client.post(&self.endpoint).json(request);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call
            .send()
            .map_err(|e| (true, format!("request failed: {}", e.without_url())))?;
        let status = resp.status();
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            return Err((retryable, format!("endpoint answered {status}")));
        }
        let wire: WireReply = resp
            .json()
            .map_err(|e| (false, format!("malformed reply body: {}", e.without_url())))?;
        Ok(TeacherReply::from_text(
            wire.content,
            Usage {
                input_tokens: wire.usage.input_tokens,
                output_tokens: wire.usage.output_tokens,
            },
        ))
    }
}

impl Teacher for HttpTeacher {
    fn complete(&self, request: &TeacherRequest) -> Result<TeacherReply> {
        let _slot = self.slots.acquire();
        let mut delay = self.retry.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Ok(reply) => return Ok(reply),
                Err((retryable, message)) => {
                    if !retryable || attempts >= self.retry.attempts {
                        return Err(Error::Transport { attempts, message });
                    }
                    log::warn!("teacher call attempt {attempts} failed: {message}; retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
}
