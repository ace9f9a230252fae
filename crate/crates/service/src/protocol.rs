//! Wire protocol: JSON text messages tagged by `"type"`, and binary frame
//! messages in the [`FrameOut`] layout.

use serde::{Deserialize, Serialize};

pub use aapt_core::stream::{FrameOut, FRAME_MAGIC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum SessionMessage {
    /// Opens a session from a world seed (its first rendered view) or from
    /// a base64 RGB8 image of the model's frame size.
    StartSession {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt_id: Option<usize>,
    },
    /// Acknowledges `StartSession`; controls are accepted from here on.
    SessionStarted { session_id: u64, width: u16, height: u16, fps: f32 },
    /// Camera deltas for the next generated frame, in pixels and radians
    /// per pixel frame.
    Control {
        dx: f32,
        dy: f32,
        #[serde(default)]
        dzoom: f32,
        #[serde(default)]
        drot: f32,
    },
    /// Sent after the frames of each generated latent frame.
    Stats { frame_index: u32, latent_index: usize, step_ms: f64, nfe: usize },
    Error { code: String, text: String },
    EndSession {},
}

/// Error codes carried by [`SessionMessage::Error`].
pub mod codes {
    pub const CLOSED: &str = "closed";
    pub const NOT_STARTED: &str = "not_started";
    pub const ALREADY_STARTED: &str = "already_started";
    pub const BAD_REQUEST: &str = "bad_request";
    pub const INTERNAL: &str = "internal";
}

impl SessionMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn error(code: &str, text: impl Into<String>) -> Self {
        SessionMessage::Error { code: code.into(), text: text.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_is_tagged_by_type() {
        let m = SessionMessage::Control { dx: 1.0, dy: 0.0, dzoom: 0.0, drot: 0.0 };
        let j = m.to_json();
        assert!(j.contains("\"type\":\"Control\""), "{j}");
        assert_eq!(SessionMessage::from_json(&j).unwrap(), m);
        let s = SessionMessage::from_json(r#"{"type":"StartSession","seed":7}"#).unwrap();
        assert_eq!(s, SessionMessage::StartSession { seed: Some(7), image: None, prompt_id: None });
        assert_eq!(SessionMessage::from_json(r#"{"type":"Control","dx":2,"dy":1}"#).unwrap(), SessionMessage::Control { dx: 2.0, dy: 1.0, dzoom: 0.0, drot: 0.0 });
        assert_eq!(SessionMessage::from_json(r#"{"type":"EndSession"}"#).unwrap(), SessionMessage::EndSession {});
        assert!(SessionMessage::from_json(r#"{"type":"Nope"}"#).is_err());
    }
}
