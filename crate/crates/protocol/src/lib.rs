//! Message envelope and wire codec.
//!
//! Every byte exchanged between browser interfaces, the platform and the
//! researcher-hosted game managers is one of the [`Message`] objects defined
//! here, serialized as a JSON object. The codec is strict about the envelope
//! (endpoints, topic, addressing rules) and lenient about everything else:
//! unknown fields survive a decode/encode cycle in [`Message::extensions`].

mod codec;
mod message;

pub use codec::{
    decode_gm_response, decode_message, decode_message_bytes, encode_gm_response, encode_message,
    DecodeError,
};
pub use message::{ClientId, Endpoint, InstanceId, Message, SystemTopic, Violation};

/// Field names used on the wire. Every other crate refers to these rather
/// than spelling the strings out.
pub mod fields {
    pub const SENDER: &str = "sender";
    pub const RECIPIENT: &str = "recipient";
    pub const TOPIC: &str = "topic";
    pub const PARAMS: &str = "params";
    pub const INSTANCE_ID: &str = "instanceId";
    pub const CLIENT_ID: &str = "clientId";
    pub const BROADCAST: &str = "broadcast";

    pub const ALL: [&str; 7] = [
        SENDER,
        RECIPIENT,
        TOPIC,
        PARAMS,
        INSTANCE_ID,
        CLIENT_ID,
        BROADCAST,
    ];
}

/// Name of the form variable carrying an encoded message in POSTs to a GM.
pub const FORM_VARIABLE: &str = "message";
