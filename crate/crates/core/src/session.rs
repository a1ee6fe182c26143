//! Client sessions and their ordered outboxes.
//!
//! An outbox hands out messages by absolute sequence number. A poll with
//! cursor `c` acknowledges everything below `c` and returns everything from
//! `c` on, so a client that always passes back the cursor it was given sees
//! each message exactly once and in enqueue order.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use tokio::sync::Notify;
use xtribe_protocol::Message;

use crate::ids::{ClientId, GameId, InstanceId, SessionToken};
use crate::users::Identity;

#[derive(Debug)]
pub struct Outbox {
    /// Sequence number of `pending[0]`.
    base: u64,
    pending: VecDeque<Message>,
    capacity: usize,
    overflowed: u64,
}

impl Outbox {
    pub fn new(capacity: usize) -> Self {
        Outbox {
            base: 0,
            pending: VecDeque::new(),
            capacity: capacity.max(1),
            overflowed: 0,
        }
    }

    /// Sequence number the next pushed message will get.
    pub fn end(&self) -> u64 {
        self.base + self.pending.len() as u64
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Messages discarded because the session stopped draining its outbox.
    pub fn overflowed(&self) -> u64 {
        self.overflowed
    }

    pub fn push(&mut self, message: Message) -> u64 {
        if self.pending.len() == self.capacity {
            self.pending.pop_front();
            self.base += 1;
            self.overflowed += 1;
        }
        self.pending.push_back(message);
        self.end() - 1
    }

    /// Acknowledges everything before `cursor` and returns the rest along
    /// with the cursor to pass next time. A cursor outside the retained range
    /// replays from the earliest retained message.
    pub fn take_from(&mut self, cursor: Option<u64>) -> (Vec<Message>, u64) {
        let start = match cursor {
            Some(c) if c >= self.base && c <= self.end() => {
                let acked = (c - self.base) as usize;
                self.pending.drain(..acked);
                self.base = c;
                c
            }
            _ => self.base,
        };
        let out = self.pending.iter().cloned().collect();
        (out, start + self.pending.len() as u64)
    }
}

/// How a session currently relates to a game instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seat {
    pub instance_id: InstanceId,
    pub client_id: ClientId,
}

#[derive(Debug)]
pub struct ClientSession {
    pub token: SessionToken,
    pub identity: Identity,
    pub current_game: Option<GameId>,
    /// Most recent instance, kept after it ends so late sends can be told why
    /// they were refused.
    pub current_instance: Option<Seat>,
    pub queued: bool,
    pub outbox: Outbox,
    pub last_seen: Instant,
    /// Scores credited to a guest, shown in-session only.
    pub local_scores: HashMap<GameId, f64>,
    pub wake: Arc<Notify>,
}

impl ClientSession {
    pub fn new(token: SessionToken, identity: Identity, game: GameId, outbox_capacity: usize, now: Instant) -> Self {
        ClientSession {
            token,
            identity,
            current_game: Some(game),
            current_instance: None,
            queued: false,
            outbox: Outbox::new(outbox_capacity),
            last_seen: now,
            local_scores: HashMap::new(),
            wake: Arc::new(Notify::new()),
        }
    }

    pub fn touch(&mut self, now: Instant) {
        if now > self.last_seen {
            self.last_seen = now;
        }
    }

    pub fn deliver(&mut self, message: Message) {
        self.outbox.push(message);
        self.wake.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(n: u64) -> Message {
        Message::new(format!("m{n}"))
    }

    #[test]
    fn fifo_and_exactly_once_with_monotone_cursor() {
        let mut o = Outbox::new(16);
        o.push(msg(0));
        o.push(msg(1));
        let (got, next) = o.take_from(Some(0));
        assert_eq!(got.iter().map(|m| m.topic.as_str()).collect::<Vec<_>>(), ["m0", "m1"]);
        assert_eq!(next, 2);
        let (got, next) = o.take_from(Some(next));
        assert!(got.is_empty());
        assert_eq!(next, 2);
        o.push(msg(2));
        let (got, next) = o.take_from(Some(next));
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].topic, "m2");
        assert_eq!(next, 3);
        assert!(o.is_empty() || o.len() == 1);
    }

    #[test]
    fn invalid_cursor_replays_from_earliest_retained() {
        let mut o = Outbox::new(16);
        for n in 0..3 {
            o.push(msg(n));
        }
        o.take_from(Some(1)); // acks m0
        let (got, next) = o.take_from(Some(99));
        assert_eq!(got.iter().map(|m| m.topic.as_str()).collect::<Vec<_>>(), ["m1", "m2"]);
        assert_eq!(next, 3);
        let (got, _) = o.take_from(Some(0));
        assert_eq!(got.len(), 2);
        let (got, _) = o.take_from(None);
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn capacity_drops_oldest() {
        let mut o = Outbox::new(2);
        for n in 0..3 {
            o.push(msg(n));
        }
        assert_eq!(o.overflowed(), 1);
        let (got, next) = o.take_from(Some(0));
        assert_eq!(got[0].topic, "m1");
        assert_eq!(next, 3);
    }
}
