//! Events pushed to console clients.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// `{type, run_id, payload}` as sent on the event stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "type")]
    pub kind: String,
    pub run_id: Option<String>,
    pub payload: serde_json::Value,
}

impl Event {
    pub fn new(kind: &str, run_id: Option<&str>, payload: serde_json::Value) -> Self {
        Self { kind: kind.into(), run_id: run_id.map(Into::into), payload }
    }
}

pub const SESSION_CREATED: &str = "session_created";
pub const RUN_CREATED: &str = "run_created";
pub const STAGE: &str = "stage";
pub const REWARD: &str = "reward";
pub const RUN_COMPLETED: &str = "run_completed";

/// Lets an event through at most once per `interval`.
#[derive(Clone, Debug)]
pub struct Throttle {
    interval: Duration,
    last: Option<Instant>,
}

impl Throttle {
    pub fn new(interval: Duration) -> Self {
        Self { interval, last: None }
    }

    pub fn ready(&mut self, now: Instant) -> bool {
        match self.last {
            Some(t) if now.saturating_duration_since(t) < self.interval => false,
            _ => {
                self.last = Some(now);
                true
            }
        }
    }
}
