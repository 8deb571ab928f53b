//! Edge-offloaded closed-loop vision pipeline.
//!
//! A client captures synthetic camera frames, JPEG-compresses them and streams
//! them over a framed TCP protocol to an edge server, which detects objects,
//! picks a grip pattern and answers with either a compact control command or an
//! annotated frame. A store-and-forward proxy in between emulates WiFi or 5G
//! link conditions, and the [`metrics`] and [`report`] modules turn the
//! per-frame bookkeeping into latency, rate, bandwidth and drop-rate summaries.

pub mod client;
pub mod clock;
pub mod detect;
pub mod experiment;
pub mod grip;
pub mod imaging;
pub mod metrics;
pub mod netem;
pub mod protocol;
pub mod report;
pub mod server;

pub use detect::{BBox, Detection};
pub use grip::{Grip, GripCommand, GripPolicy};
pub use imaging::{CompressedFrame, RawFrame, SceneObject, SyntheticScene};
pub use protocol::{MsgType, WireMessage};

/// Session mode negotiated in the handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Downlink carries a padded JSON grip command.
    Control,
    /// Downlink carries the annotated, re-encoded frame.
    Ar,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Control => "control",
            Mode::Ar => "ar",
        }
    }

    pub fn to_wire(self) -> u8 {
        match self {
            Mode::Control => 0,
            Mode::Ar => 1,
        }
    }

    pub fn from_wire(b: u8) -> Option<Self> {
        match b {
            0 => Some(Mode::Control),
            1 => Some(Mode::Ar),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "control" | "json" => Ok(Mode::Control),
            "ar" => Ok(Mode::Ar),
            other => Err(format!("unknown mode `{other}` (expected control|ar)")),
        }
    }
}
