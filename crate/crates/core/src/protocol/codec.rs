use std::io::{self, Read};

use super::{MsgType, ProtocolError, WireHeader, WireMessage, HEADER_LEN, MAX_PAYLOAD};

/// Serialize a message: header followed by payload.
pub fn encode_message(msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    if msg.payload.len() > MAX_PAYLOAD as usize {
        return Err(ProtocolError::TooLarge(msg.payload.len()));
    }
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.extend_from_slice(&msg.header().to_bytes());
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

/// A framed but not yet validated message: the parsed header plus every byte
/// it occupied on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMessage {
    pub header: WireHeader,
    pub bytes: Vec<u8>,
}

impl RawMessage {
    pub fn payload(&self) -> &[u8] {
        &self.bytes[HEADER_LEN..]
    }

    pub fn msg_type(&self) -> Option<MsgType> {
        MsgType::from_u8(self.header.msg_type)
    }

    /// Check the CRC and message type.
    pub fn decode(self) -> Result<WireMessage, ProtocolError> {
        let h = self.header;
        let actual = crc32fast::hash(self.payload());
        if actual != h.payload_crc32 {
            return Err(ProtocolError::Crc {
                frame_id: h.frame_id,
                msg_type: h.msg_type,
                expected: h.payload_crc32,
                actual,
            });
        }
        let msg_type = MsgType::from_u8(h.msg_type).ok_or(ProtocolError::UnknownType {
            frame_id: h.frame_id,
            msg_type: h.msg_type,
        })?;
        let mut bytes = self.bytes;
        bytes.drain(..HEADER_LEN);
        Ok(WireMessage {
            msg_type,
            flags: h.flags,
            frame_id: h.frame_id,
            payload: bytes,
        })
    }
}

/// Incremental splitter of a byte stream into [`RawMessage`]s.
///
/// Accepts bytes at arbitrary boundaries. After a framing error it keeps
/// returning that error.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
    failed: Option<ProtocolError>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start * 2 >= self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet returned as part of a message.
    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    pub fn next_frame(&mut self) -> Option<Result<RawMessage, ProtocolError>> {
        if let Some(err) = &self.failed {
            return Some(Err(err.clone()));
        }
        let avail = &self.buf[self.start..];
        if avail.len() < HEADER_LEN {
            return None;
        }
        let header = match WireHeader::parse(avail[..HEADER_LEN].try_into().unwrap()) {
            Ok(h) => h,
            Err(e) => {
                self.failed = Some(e.clone());
                return Some(Err(e));
            }
        };
        let total = HEADER_LEN + header.payload_len as usize;
        if avail.len() < total {
            return None;
        }
        let bytes = avail[..total].to_vec();
        self.start += total;
        Some(Ok(RawMessage { header, bytes }))
    }
}

/// Incremental message decoder with CRC and type validation.
#[derive(Debug, Default)]
pub struct Decoder {
    frames: FrameDecoder,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.frames.push(bytes);
    }

    /// Next complete message, `None` if more bytes are needed. Errors for
    /// which [`ProtocolError::is_fatal`] is false consume their message.
    pub fn next_message(&mut self) -> Option<Result<WireMessage, ProtocolError>> {
        self.frames.next_frame().map(|r| r.and_then(RawMessage::decode))
    }
}

/// Outcome of reading one message from a stream.
#[derive(Debug)]
pub enum ReadEvent<T> {
    Message(T),
    /// The message was framed correctly but failed validation.
    Corrupt(ProtocolError),
}

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("framing lost: {0}")]
    Framing(ProtocolError),
    #[error("stream ended inside a message ({0} bytes buffered)")]
    Truncated(usize),
}

/// Blocking message reader over any [`Read`] stream.
pub struct MessageReader<R> {
    inner: R,
    frames: FrameDecoder,
    chunk: Box<[u8]>,
}

impl<R: Read> MessageReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            frames: FrameDecoder::new(),
            chunk: vec![0u8; 64 * 1024].into_boxed_slice(),
        }
    }

    /// Next framed message; `Ok(None)` on clean end of stream.
    pub fn next_raw(&mut self) -> Result<Option<RawMessage>, StreamError> {
        loop {
            match self.frames.next_frame() {
                Some(Ok(raw)) => return Ok(Some(raw)),
                Some(Err(e)) => return Err(StreamError::Framing(e)),
                None => {}
            }
            let n = match self.inner.read(&mut self.chunk) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                return match self.frames.buffered() {
                    0 => Ok(None),
                    n => Err(StreamError::Truncated(n)),
                };
            }
            self.frames.push(&self.chunk[..n]);
        }
    }

    /// Next validated message.
    pub fn next_message(&mut self) -> Result<Option<ReadEvent<WireMessage>>, StreamError> {
        Ok(self.next_raw()?.map(|raw| match raw.decode() {
            Ok(m) => ReadEvent::Message(m),
            Err(e) => ReadEvent::Corrupt(e),
        }))
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{FrameUpload, CODEC_JPEG};

    fn upload(frame_id: u64, image_len: usize) -> WireMessage {
        WireMessage::frame_upload(
            frame_id,
            &FrameUpload {
                capture_ts: 10,
                send_ts: 20,
                codec: CODEC_JPEG,
                image: (0..image_len).map(|i| (i * 7) as u8).collect(),
            },
        )
    }

    fn stream(msgs: &[WireMessage]) -> Vec<u8> {
        msgs.iter().flat_map(|m| encode_message(m).unwrap()).collect()
    }

    #[test]
    fn bye_is_24_bytes() {
        let bytes = encode_message(&WireMessage::bye()).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[16..20], &[0, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &[0, 0, 0, 0]);
    }

    #[test]
    fn frame_upload_size() {
        assert_eq!(encode_message(&upload(1, 50_000)).unwrap().len(), 50_041);
    }

    #[test]
    fn oversized_payload_rejected() {
        let m = WireMessage::new(MsgType::FrameUpload, 0, vec![0; MAX_PAYLOAD as usize + 1]);
        assert!(matches!(encode_message(&m), Err(ProtocolError::TooLarge(_))));
    }

    #[test]
    fn two_messages_in_one_buffer() {
        let msgs = [upload(1, 100), WireMessage::bye()];
        let mut d = Decoder::new();
        d.push(&stream(&msgs));
        assert_eq!(d.next_message().unwrap().unwrap(), msgs[0]);
        assert_eq!(d.next_message().unwrap().unwrap(), msgs[1]);
        assert!(d.next_message().is_none());
    }

    #[test]
    fn one_byte_at_a_time() {
        let m = upload(9, 300);
        let bytes = encode_message(&m).unwrap();
        let mut d = Decoder::new();
        for (i, b) in bytes.iter().enumerate() {
            d.push(std::slice::from_ref(b));
            let got = d.next_message();
            if i + 1 < bytes.len() {
                assert!(got.is_none());
            } else {
                assert_eq!(got.unwrap().unwrap(), m);
            }
        }
    }

    #[test]
    fn crc_error_then_resync() {
        let msgs = [upload(1, 64), upload(2, 64), upload(3, 64)];
        let mut bytes = stream(&msgs);
        let first_len = msgs[0].encoded_len();
        bytes[first_len + HEADER_LEN + 5] ^= 0x10;
        let mut d = Decoder::new();
        d.push(&bytes);
        assert_eq!(d.next_message().unwrap().unwrap(), msgs[0]);
        match d.next_message().unwrap() {
            Err(ProtocolError::Crc { frame_id: 2, .. }) => {}
            other => panic!("expected crc error, got {other:?}"),
        }
        assert_eq!(d.next_message().unwrap().unwrap(), msgs[2]);
    }

    #[test]
    fn bad_magic_is_fatal_and_sticky() {
        let mut bytes = stream(&[upload(1, 8), upload(2, 8)]);
        bytes[0] = b'X';
        let mut d = Decoder::new();
        d.push(&bytes);
        let err = d.next_message().unwrap().unwrap_err();
        assert!(err.is_fatal());
        assert!(d.next_message().unwrap().is_err());
    }

    #[test]
    fn unknown_type_is_skipped() {
        let mut odd = WireMessage::bye();
        odd.frame_id = 4;
        let mut bytes = encode_message(&odd).unwrap();
        bytes[5] = 0x55;
        bytes.extend(encode_message(&upload(5, 4)).unwrap());
        let mut d = Decoder::new();
        d.push(&bytes);
        let err = d.next_message().unwrap().unwrap_err();
        assert_eq!(err, ProtocolError::UnknownType { frame_id: 4, msg_type: 0x55 });
        assert!(!err.is_fatal());
        assert_eq!(d.next_message().unwrap().unwrap().frame_id, 5);
    }

    #[test]
    fn oversized_length_is_fatal() {
        let mut bytes = encode_message(&WireMessage::bye()).unwrap();
        bytes[16..20].copy_from_slice(&(MAX_PAYLOAD + 1).to_be_bytes());
        let mut d = Decoder::new();
        d.push(&bytes);
        assert!(d.next_message().unwrap().unwrap_err().is_fatal());
    }

    #[test]
    fn reader_over_stream() {
        let msgs = [upload(1, 70_000), WireMessage::bye()];
        let bytes = stream(&msgs);
        let mut r = MessageReader::new(&bytes[..]);
        for m in &msgs {
            match r.next_message().unwrap() {
                Some(ReadEvent::Message(got)) => assert_eq!(&got, m),
                other => panic!("{other:?}"),
            }
        }
        assert!(r.next_message().unwrap().is_none());
        let mut r = MessageReader::new(&bytes[..bytes.len() - 3]);
        r.next_message().unwrap();
        assert!(matches!(r.next_message(), Err(StreamError::Truncated(21))));
    }
}
