//! Typed payloads carried inside [`WireMessage`]s.

use serde::{Deserialize, Serialize};

use super::{MsgType, ProtocolError, WireMessage};
use crate::detect::Detection;
use crate::grip::Grip;
use crate::Mode;

pub const CODEC_JPEG: u8 = 1;
/// Default serialized size of a control JSON document.
pub const DEFAULT_CONTROL_PAD: u32 = 750;

fn malformed(kind: &'static str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::Payload {
        kind,
        reason: reason.into(),
    }
}

fn be_u64(b: &[u8]) -> u64 {
    u64::from_be_bytes(b[..8].try_into().unwrap())
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b[..4].try_into().unwrap())
}

/// Session parameters sent by the client when it connects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub mode: Mode,
    pub quality: u8,
    pub width: u16,
    pub height: u16,
    pub fps: u8,
    /// Target size of each downlink body: the control JSON in control mode,
    /// the annotated JPEG in AR mode.
    pub pad_target_bytes: u32,
}

impl Hello {
    pub const LEN: usize = 11;

    pub fn to_bytes(&self) -> [u8; Self::LEN] {
        let mut b = [0u8; Self::LEN];
        b[0] = self.mode.to_wire();
        b[1] = self.quality;
        b[2..4].copy_from_slice(&self.width.to_be_bytes());
        b[4..6].copy_from_slice(&self.height.to_be_bytes());
        b[6] = self.fps;
        b[7..11].copy_from_slice(&self.pad_target_bytes.to_be_bytes());
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, ProtocolError> {
        if b.len() != Self::LEN {
            return Err(malformed("HELLO", format!("{} bytes, expected {}", b.len(), Self::LEN)));
        }
        let mode = Mode::from_wire(b[0]).ok_or_else(|| malformed("HELLO", format!("mode {}", b[0])))?;
        if !(1..=100).contains(&b[1]) {
            return Err(malformed("HELLO", format!("quality {}", b[1])));
        }
        Ok(Self {
            mode,
            quality: b[1],
            width: u16::from_be_bytes([b[2], b[3]]),
            height: u16::from_be_bytes([b[4], b[5]]),
            fps: b[6],
            pad_target_bytes: be_u32(&b[7..]),
        })
    }
}

/// Client → server frame: timestamps for the echo plus the encoded image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameUpload {
    pub capture_ts: u64,
    pub send_ts: u64,
    pub codec: u8,
    pub image: Vec<u8>,
}

impl FrameUpload {
    pub const PREFIX_LEN: usize = 17;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(Self::PREFIX_LEN + self.image.len());
        b.extend_from_slice(&self.capture_ts.to_be_bytes());
        b.extend_from_slice(&self.send_ts.to_be_bytes());
        b.push(self.codec);
        b.extend_from_slice(&self.image);
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, ProtocolError> {
        if b.len() < Self::PREFIX_LEN {
            return Err(malformed("FRAME_UPLOAD", format!("{} bytes", b.len())));
        }
        if b[16] != CODEC_JPEG {
            return Err(malformed("FRAME_UPLOAD", format!("codec {}", b[16])));
        }
        Ok(Self {
            capture_ts: be_u64(b),
            send_ts: be_u64(&b[8..]),
            codec: b[16],
            image: b[Self::PREFIX_LEN..].to_vec(),
        })
    }
}

/// The 20-byte prefix of every server response: the client's timestamps,
/// echoed untouched, and the server's measured processing time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Echo {
    pub capture_ts: u64,
    pub send_ts: u64,
    pub server_proc_us: u32,
}

impl Echo {
    pub const LEN: usize = 20;
}

/// Body of CONTROL_RESULT (JSON) or ANNOTATED_FRAME (JPEG).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultPayload {
    pub echo: Echo,
    pub body: Vec<u8>,
}

impl ResultPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(Echo::LEN + self.body.len());
        b.extend_from_slice(&self.echo.capture_ts.to_be_bytes());
        b.extend_from_slice(&self.echo.send_ts.to_be_bytes());
        b.extend_from_slice(&self.echo.server_proc_us.to_be_bytes());
        b.extend_from_slice(&self.body);
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, ProtocolError> {
        if b.len() < Echo::LEN {
            return Err(malformed("result", format!("{} bytes", b.len())));
        }
        Ok(Self {
            echo: Echo {
                capture_ts: be_u64(b),
                send_ts: be_u64(&b[8..]),
                server_proc_us: be_u32(&b[16..]),
            },
            body: b[Echo::LEN..].to_vec(),
        })
    }

    pub fn into_message(self, msg_type: MsgType, frame_id: u64) -> WireMessage {
        WireMessage::new(msg_type, frame_id, self.to_bytes())
    }
}

/// The JSON grip command returned in control mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPayload {
    pub frame_id: u64,
    pub grip: Grip,
    pub confidence: f64,
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub pad: String,
}

impl ControlPayload {
    /// Serialize, padding the `pad` field with spaces so the document is
    /// exactly `target` bytes when the unpadded form is shorter.
    pub fn to_padded_json(&self, target: usize) -> Vec<u8> {
        let mut doc = self.clone();
        doc.pad.clear();
        let bare = serde_json::to_vec(&doc).expect("control payload serializes");
        if bare.len() >= target {
            return bare;
        }
        doc.pad = " ".repeat(target - bare.len());
        serde_json::to_vec(&doc).expect("control payload serializes")
    }

    pub fn parse(body: &[u8]) -> Result<Self, ProtocolError> {
        serde_json::from_slice(body).map_err(|e| malformed("CONTROL_RESULT", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::BBox;
    use crate::imaging::PaletteClass;
    use crate::protocol::{encode_message, HEADER_LEN};

    #[test]
    fn hello_layout() {
        let h = Hello {
            mode: Mode::Ar,
            quality: 90,
            width: 640,
            height: 480,
            fps: 30,
            pad_target_bytes: 750,
        };
        let b = h.to_bytes();
        assert_eq!(b, [1, 90, 0x02, 0x80, 0x01, 0xE0, 30, 0, 0, 0x02, 0xEE]);
        assert_eq!(Hello::parse(&b).unwrap(), h);
        assert!(Hello::parse(&b[..10]).is_err());
        let mut bad = b;
        bad[0] = 7;
        assert!(Hello::parse(&bad).is_err());
    }

    #[test]
    fn upload_round_trip() {
        let u = FrameUpload {
            capture_ts: 1,
            send_ts: 2,
            codec: CODEC_JPEG,
            image: vec![0xFF, 0xD8, 0xFF, 0xD9],
        };
        assert_eq!(FrameUpload::parse(&u.to_bytes()).unwrap(), u);
        assert!(FrameUpload::parse(&[0; 16]).is_err());
    }

    #[test]
    fn padded_control_result_is_794_bytes() {
        let payload = ControlPayload {
            frame_id: 42,
            grip: Grip::Palmar,
            confidence: 0.93,
            detections: vec![Detection {
                class: PaletteClass::Cup,
                confidence: 0.93,
                bbox: BBox::new(100, 100, 80, 80),
            }],
            pad: String::new(),
        };
        let json = payload.to_padded_json(DEFAULT_CONTROL_PAD as usize);
        assert_eq!(json.len(), 750);
        let parsed = ControlPayload::parse(&json).unwrap();
        assert_eq!(parsed.grip, Grip::Palmar);
        assert_eq!(parsed.detections, payload.detections);
        let msg = ResultPayload {
            echo: Echo {
                capture_ts: 1,
                send_ts: 2,
                server_proc_us: 13_000,
            },
            body: json,
        }
        .into_message(MsgType::ControlResult, 42);
        assert_eq!(encode_message(&msg).unwrap().len(), HEADER_LEN + 20 + 750);
    }

    #[test]
    fn echo_prefix_round_trip() {
        let r = ResultPayload {
            echo: Echo {
                capture_ts: u64::MAX,
                send_ts: 7,
                server_proc_us: 33_000,
            },
            body: b"{}".to_vec(),
        };
        let b = r.to_bytes();
        assert_eq!(b.len(), 22);
        assert_eq!(ResultPayload::parse(&b).unwrap(), r);
        assert!(ResultPayload::parse(&b[..19]).is_err());
    }
}
