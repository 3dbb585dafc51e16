//! In-process transports for tests and dry runs.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use super::{HttpReply, Transport, TransportError};

type Responder = dyn Fn(&str, &str) -> HttpReply + Send + Sync;

/// Answers each POST with `responder(url, body)` and records the request.
pub struct MockTransport {
    responder: Box<Responder>,
    script: Mutex<VecDeque<HttpReply>>,
    requests: Mutex<Vec<(String, String)>>,
}

impl MockTransport {
    pub fn new(responder: impl Fn(&str, &str) -> HttpReply + Send + Sync + 'static) -> Self {
        MockTransport {
            responder: Box::new(responder),
            script: Mutex::new(VecDeque::new()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Replays `replies` in order, then answers 500.
    pub fn scripted(replies: Vec<HttpReply>) -> Self {
        let t = Self::new(|_, _| HttpReply::status(500, "script exhausted"));
        *t.script.lock().unwrap() = replies.into();
        t
    }

    /// `(url, body)` of every request so far.
    pub fn requests(&self) -> Vec<(String, String)> {
        self.requests.lock().unwrap().clone()
    }
}

impl Transport for MockTransport {
    fn post_json(
        &self,
        url: &str,
        _bearer: Option<&str>,
        body: &str,
        _timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        self.requests.lock().unwrap().push((url.to_string(), body.to_string()));
        if let Some(reply) = self.script.lock().unwrap().pop_front() {
            return Ok(reply);
        }
        Ok((self.responder)(url, body))
    }
}
