//! Wire format of interactive sessions. Every message is one UTF-8 JSON
//! object sent as one websocket text frame, tagged by `kind`.

use groundtrack_core::tracker::{Branch, FrameResult};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// One tracklet as shown to a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackletView {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub conf: f64,
    /// Display color derived only from the id.
    pub color: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionMessage {
    /// Server greeting with the scenario's dimensions.
    Hello {
        version: u32,
        frames: usize,
        grid_w: usize,
        grid_h: usize,
        prompt: String,
        vocabulary: Vec<String>,
    },
    /// Client asks for the next frame.
    FrameRequest { frame: usize },
    /// Client replaces the prompt from the next frame on.
    PromptChange { prompt: String },
    FrameResult {
        frame: usize,
        prompt: String,
        branch: Branch,
        tracklets: Vec<TrackletView>,
    },
    /// `fatal` errors close the session; others are warnings.
    Error { message: String, fatal: bool },
    End { frames: usize },
}

impl SessionMessage {
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("session messages always serialize")
    }

    /// Parses and checks per-message invariants.
    pub fn from_text(s: &str) -> Result<Self, String> {
        let m: SessionMessage = serde_json::from_str(s).map_err(|e| format!("malformed message: {e}"))?;
        if let SessionMessage::PromptChange { prompt } = &m {
            if prompt.trim().is_empty() {
                return Err("prompt_change needs non-empty text".into());
            }
        }
        Ok(m)
    }

    pub fn error(message: impl Into<String>, fatal: bool) -> Self {
        Self::Error {
            message: message.into(),
            fatal,
        }
    }

    pub fn frame_result(r: &FrameResult) -> Self {
        Self::FrameResult {
            frame: r.frame,
            prompt: r.prompt.clone(),
            branch: r.branch,
            tracklets: r
                .tracklets
                .iter()
                .map(|t| TrackletView {
                    id: t.id,
                    bbox: t.bbox.to_array(),
                    conf: t.conf,
                    color: id_color(t.id),
                })
                .collect(),
        }
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `#rrggbb` color that depends only on the id. Channels stay in 64..=223
/// so boxes remain visible on both dark and light frames.
pub fn id_color(id: u64) -> String {
    let h = mix(id);
    let c = |shift: u32| 64 + ((h >> shift) & 0xff) as u8 % 160;
    format!("#{:02x}{:02x}{:02x}", c(0), c(8), c(16))
}

/// Checks that a stream of server messages honours the ordering rules.
#[derive(Debug, Default)]
pub struct StreamChecker {
    last_frame: Option<usize>,
    ended: bool,
}

impl StreamChecker {
    pub fn observe(&mut self, m: &SessionMessage) -> Result<(), String> {
        if self.ended {
            return Err("message after end".into());
        }
        match m {
            SessionMessage::FrameResult { frame, .. } => {
                if self.last_frame.is_some_and(|l| *frame <= l) {
                    return Err(format!("frame {frame} after frame {}", self.last_frame.unwrap()));
                }
                self.last_frame = Some(*frame);
            }
            SessionMessage::End { .. } => self.ended = true,
            _ => {}
        }
        Ok(())
    }
}
