//! The default GM: every client message is echoed to all players of its
//! instance. It keeps no state.

use xtribe_protocol::{Endpoint, Message};

use crate::GmHandler;

pub fn broadcast_gm_handle(m: &Message) -> Vec<Message> {
    if m.sender != Some(Endpoint::Client) {
        return Vec::new();
    }
    let Some(instance) = m.instance_id.clone() else {
        return Vec::new();
    };
    let mut out = Message::new(m.topic.clone())
        .addressed_to(Endpoint::Client)
        .broadcast()
        .in_instance(instance);
    out.params = m.params.clone();
    vec![out]
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BroadcastGm;

impl GmHandler for BroadcastGm {
    fn handle(&self, message: Message) -> Vec<Message> {
        broadcast_gm_handle(&message)
    }
}
