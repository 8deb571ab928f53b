//! Framed, bidirectional wire protocol between client, proxy and server.
//!
//! Every message is a 24-byte big-endian header followed by the payload:
//!
//! ```text
//! magic "EPLP" | version u8 | msg_type u8 | flags u16 | frame_id u64 | payload_len u32 | crc32 u32
//! ```
//!
//! The CRC (IEEE) covers the payload only. A bad magic, version or oversized
//! length breaks framing and is fatal for the connection; a CRC mismatch or an
//! unknown type only invalidates that message and decoding resumes at the next
//! header.

mod codec;
mod payload;

pub use codec::{
    encode_message, Decoder, FrameDecoder, MessageReader, RawMessage, ReadEvent, StreamError,
};
pub use payload::{
    ControlPayload, Echo, FrameUpload, Hello, ResultPayload, CODEC_JPEG, DEFAULT_CONTROL_PAD,
};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EPLP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const MAX_PAYLOAD: u32 = 4 * 1024 * 1024;

pub const DEFAULT_SERVER_PORT: u16 = 9750;
pub const DEFAULT_PROXY_PORT: u16 = 9751;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    HelloAck = 0x02,
    FrameUpload = 0x10,
    ControlResult = 0x11,
    AnnotatedFrame = 0x12,
    Bye = 0x7F,
}

impl MsgType {
    pub const ALL: [MsgType; 6] = [
        MsgType::Hello,
        MsgType::HelloAck,
        MsgType::FrameUpload,
        MsgType::ControlResult,
        MsgType::AnnotatedFrame,
        MsgType::Bye,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == b)
    }

    /// Session-control messages, as opposed to per-frame data.
    pub fn is_control(self) -> bool {
        matches!(self, MsgType::Hello | MsgType::HelloAck | MsgType::Bye)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Hello => "HELLO",
            MsgType::HelloAck => "HELLO_ACK",
            MsgType::FrameUpload => "FRAME_UPLOAD",
            MsgType::ControlResult => "CONTROL_RESULT",
            MsgType::AnnotatedFrame => "ANNOTATED_FRAME",
            MsgType::Bye => "BYE",
        }
    }
}

/// Parsed fixed header. `msg_type` stays raw so unknown types can be reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireHeader {
    pub version: u8,
    pub msg_type: u8,
    pub flags: u16,
    pub frame_id: u64,
    pub payload_len: u32,
    pub payload_crc32: u32,
}

impl WireHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = self.version;
        out[5] = self.msg_type;
        out[6..8].copy_from_slice(&self.flags.to_be_bytes());
        out[8..16].copy_from_slice(&self.frame_id.to_be_bytes());
        out[16..20].copy_from_slice(&self.payload_len.to_be_bytes());
        out[20..24].copy_from_slice(&self.payload_crc32.to_be_bytes());
        out
    }

    /// Parse and check the framing fields (magic, version, length bound).
    pub fn parse(b: &[u8; HEADER_LEN]) -> Result<Self, ProtocolError> {
        let magic: [u8; 4] = b[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(ProtocolError::BadMagic(magic));
        }
        if b[4] != VERSION {
            return Err(ProtocolError::BadVersion(b[4]));
        }
        let payload_len = u32::from_be_bytes(b[16..20].try_into().unwrap());
        if payload_len > MAX_PAYLOAD {
            return Err(ProtocolError::TooLarge(payload_len as usize));
        }
        Ok(Self {
            version: b[4],
            msg_type: b[5],
            flags: u16::from_be_bytes(b[6..8].try_into().unwrap()),
            frame_id: u64::from_be_bytes(b[8..16].try_into().unwrap()),
            payload_len,
            payload_crc32: u32::from_be_bytes(b[20..24].try_into().unwrap()),
        })
    }
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub flags: u16,
    pub frame_id: u64,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, frame_id: u64, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            flags: 0,
            frame_id,
            payload,
        }
    }

    pub fn hello(hello: &Hello) -> Self {
        Self::new(MsgType::Hello, 0, hello.to_bytes().to_vec())
    }

    pub fn hello_ack() -> Self {
        Self::new(MsgType::HelloAck, 0, Vec::new())
    }

    pub fn bye() -> Self {
        Self::new(MsgType::Bye, 0, Vec::new())
    }

    pub fn frame_upload(frame_id: u64, upload: &FrameUpload) -> Self {
        Self::new(MsgType::FrameUpload, frame_id, upload.to_bytes())
    }

    pub fn header(&self) -> WireHeader {
        WireHeader {
            version: VERSION,
            msg_type: self.msg_type as u8,
            flags: self.flags,
            frame_id: self.frame_id,
            payload_len: self.payload.len() as u32,
            payload_crc32: crc32fast::hash(&self.payload),
        }
    }

    /// Size on the wire.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("payload of {0} bytes exceeds the 4 MiB limit")]
    TooLarge(usize),
    #[error("crc mismatch on frame {frame_id} (type 0x{msg_type:02x}): header {expected:08x}, payload {actual:08x}")]
    Crc {
        frame_id: u64,
        msg_type: u8,
        expected: u32,
        actual: u32,
    },
    #[error("unknown message type 0x{msg_type:02x} on frame {frame_id}")]
    UnknownType { frame_id: u64, msg_type: u8 },
    #[error("malformed {kind} payload: {reason}")]
    Payload { kind: &'static str, reason: String },
    #[error("echoed send timestamp {send_ts} is later than now {now}")]
    EchoFromFuture { now: u64, send_ts: u64 },
}

impl ProtocolError {
    /// Whether the byte stream can no longer be framed.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            ProtocolError::BadMagic(_) | ProtocolError::BadVersion(_) | ProtocolError::TooLarge(_)
        )
    }
}

/// Round-trip time in milliseconds from an echoed client send timestamp.
///
/// Both values come from the client's own monotonic clock, so any offset
/// between client and server clocks cancels out.
pub fn rtt_from_echo(now_ns: u64, send_ts_echo: u64) -> Result<f64, ProtocolError> {
    if now_ns < send_ts_echo {
        return Err(ProtocolError::EchoFromFuture {
            now: now_ns,
            send_ts: send_ts_echo,
        });
    }
    Ok((now_ns - send_ts_echo) as f64 / 1e6)
}
