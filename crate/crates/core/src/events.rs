//! In-memory log of what the platform did, in order. Tests and operators use
//! it to check message flows; it never leaves the process.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::ids::{ClientId, GameId, InstanceId};

/// Non-secret handle for a session, safe to log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct SessionRef(pub u64);

impl fmt::Display for SessionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SessionOpened { session: SessionRef, game: GameId, guest: bool },
    Joined { session: SessionRef, game: GameId },
    Queued { session: SessionRef, game: GameId, position: usize },
    WaitTimedOut { session: SessionRef, game: GameId },
    InstanceFormed { instance: InstanceId, game: GameId, members: usize },
    /// A message was POSTed to the GM.
    ToGm { instance: Option<InstanceId>, sender: &'static str, topic: String },
    LoadSent { instance: InstanceId, session: SessionRef },
    Ready { instance: InstanceId, client: ClientId },
    Started { instance: InstanceId },
    Delivered { instance: InstanceId, session: SessionRef, topic: String, broadcast: bool },
    Discarded { instance: InstanceId, topic: String, reason: String },
    OverReceived { instance: InstanceId },
    Closed { instance: InstanceId, scored: bool },
    Dropped { instance: InstanceId, client: ClientId },
    GmFault { instance: InstanceId, class: &'static str },
    Aborted { instance: InstanceId, reason: String },
    SessionExpired { session: SessionRef },
}

#[derive(Debug, Clone, Serialize)]
pub struct LoggedEvent {
    pub seq: u64,
    /// Time since the platform started.
    pub at: Duration,
    #[serde(flatten)]
    pub event: Event,
}

pub struct EventLog {
    started: Instant,
    cap: usize,
    inner: Mutex<(u64, VecDeque<LoggedEvent>)>,
}

impl EventLog {
    pub fn new(cap: usize) -> Self {
        EventLog {
            started: Instant::now(),
            cap,
            inner: Mutex::new((0, VecDeque::new())),
        }
    }

    pub fn record(&self, event: Event) {
        tracing::debug!(?event, "platform event");
        let mut guard = self.inner.lock().unwrap();
        let (seq, log) = &mut *guard;
        *seq += 1;
        if log.len() == self.cap {
            log.pop_front();
        }
        log.push_back(LoggedEvent {
            seq: *seq,
            at: self.started.elapsed(),
            event,
        });
    }

    pub fn snapshot(&self) -> Vec<LoggedEvent> {
        self.inner.lock().unwrap().1.iter().cloned().collect()
    }

    /// Events concerning one instance, in order.
    pub fn for_instance(&self, id: &InstanceId) -> Vec<Event> {
        self.snapshot()
            .into_iter()
            .map(|e| e.event)
            .filter(|e| e.instance() == Some(id))
            .collect()
    }
}

impl Event {
    pub fn instance(&self) -> Option<&InstanceId> {
        match self {
            Event::InstanceFormed { instance, .. }
            | Event::LoadSent { instance, .. }
            | Event::Ready { instance, .. }
            | Event::Started { instance }
            | Event::Delivered { instance, .. }
            | Event::Discarded { instance, .. }
            | Event::OverReceived { instance }
            | Event::Closed { instance, .. }
            | Event::Dropped { instance, .. }
            | Event::GmFault { instance, .. }
            | Event::Aborted { instance, .. } => Some(instance),
            Event::ToGm { instance, .. } => instance.as_ref(),
            _ => None,
        }
    }
}
