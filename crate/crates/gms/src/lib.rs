//! Reference Game Managers.
//!
//! A GM is any HTTP endpoint that accepts a form-encoded `message` and
//! answers with zero or more messages. [`server::router`] wraps any
//! [`GmHandler`] into such an endpoint.

pub mod broadcast;
pub mod minority;
pub mod server;

use xtribe_protocol::Message;

/// Game logic behind a GM endpoint.
pub trait GmHandler: Send + Sync + 'static {
    fn handle(&self, message: Message) -> Vec<Message>;
}

impl<F> GmHandler for F
where
    F: Fn(Message) -> Vec<Message> + Send + Sync + 'static,
{
    fn handle(&self, message: Message) -> Vec<Message> {
        self(message)
    }
}

pub use broadcast::BroadcastGm;
pub use minority::{compute_winner, MinorityGm, Outcome};
