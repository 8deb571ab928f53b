//! Per-frame edge work: decode, detect, decide, respond.

use std::time::Duration;

use thiserror::Error;

use crate::clock;
use crate::detect::{DetectError, Detector};
use crate::grip::{select_grip, Grip, GripPolicy};
use crate::imaging::{annotate_frame, decode_image, pad_jpeg, ImagingError};
use crate::protocol::{
    encode_message, ControlPayload, Echo, FrameUpload, MsgType, ProtocolError, ResultPayload,
    WireMessage,
};
use crate::Mode;

/// What the client asked for in its HELLO.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionParams {
    pub mode: Mode,
    pub quality: u8,
    pub pad_target_bytes: u32,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("expected FRAME_UPLOAD, got {0:?}")]
    NotAnUpload(MsgType),
}

#[derive(Debug, Clone)]
pub struct FrameResponse {
    pub message: WireMessage,
    /// `message` serialized for the wire.
    pub encoded: Vec<u8>,
    pub grip: Grip,
    pub proc_us: u32,
}

/// Process one FRAME_UPLOAD received at `recv_ns`.
///
/// The response is held back until `dwell` has elapsed since `recv_ns`, which
/// stands in for model inference time; real work done before that point is
/// absorbed into it. The client's timestamps are copied into the response
/// untouched.
pub fn handle_frame(
    detector: &dyn Detector,
    policy: &GripPolicy,
    session: &SessionParams,
    msg: &WireMessage,
    recv_ns: u64,
    dwell: Duration,
) -> Result<FrameResponse, FrameError> {
    if msg.msg_type != MsgType::FrameUpload {
        return Err(FrameError::NotAnUpload(msg.msg_type));
    }
    let upload = FrameUpload::parse(&msg.payload)?;
    let pixels = decode_image(&upload.image)?;
    let detections = detector.detect(&pixels)?;
    let command = select_grip(&detections, policy);
    let (msg_type, body) = match session.mode {
        Mode::Control => {
            let doc = ControlPayload {
                frame_id: msg.frame_id,
                grip: command.grip,
                confidence: command.confidence,
                detections,
                pad: String::new(),
            };
            (MsgType::ControlResult, doc.to_padded_json(session.pad_target_bytes as usize))
        }
        Mode::Ar => {
            let annotated = annotate_frame(&pixels, &detections)?;
            let jpeg = crate::imaging::codec_encode_pixels(&annotated, session.quality)?;
            (MsgType::AnnotatedFrame, pad_jpeg(jpeg, session.pad_target_bytes as usize))
        }
    };
    clock::sleep_until_ns(recv_ns + dwell.as_nanos() as u64);
    let proc_us = ((clock::now_ns() - recv_ns) / 1_000).min(u32::MAX as u64) as u32;
    let message = ResultPayload {
        echo: Echo {
            capture_ts: upload.capture_ts,
            send_ts: upload.send_ts,
            server_proc_us: proc_us,
        },
        body,
    }
    .into_message(msg_type, msg.frame_id);
    let encoded = encode_message(&message)?;
    Ok(FrameResponse {
        message,
        encoded,
        grip: command.grip,
        proc_us,
    })
}
