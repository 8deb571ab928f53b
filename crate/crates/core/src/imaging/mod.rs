//! Synthetic camera frames, JPEG coding and AR annotation.

mod annotate;
mod codec;
mod font;
pub mod palette;
mod scene;

pub use annotate::{annotate_frame, annotation_mask};
pub use codec::{decode_image, encode_image, pad_jpeg};
pub(crate) use codec::encode_pixels as codec_encode_pixels;
pub use palette::{Palette, PaletteClass};
pub use scene::{generate_frame, parse_scene_file, parse_scene_line, SceneObject, SyntheticScene};

use thiserror::Error;

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;
/// Bytes in one RGB24 frame.
pub const RAW_LEN: usize = (WIDTH * HEIGHT * 3) as usize;

/// Built-in scene corpus used when no scene file is supplied.
pub const DEFAULT_SCENES: &str = include_str!("../../scenes/default.scenes");

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("scene file line {line}: {msg}")]
    SceneParse { line: usize, msg: String },
    #[error("pixel buffer is {0} bytes, expected {RAW_LEN}")]
    BadBufferLen(usize),
    #[error("jpeg encode failed: {0}")]
    Encode(String),
    #[error("jpeg decode failed: {0}")]
    Decode(String),
    #[error("decoded image is {0}x{1}, expected {WIDTH}x{HEIGHT}")]
    Dimensions(u32, u32),
    #[error("quality {0} outside 1..=100")]
    Quality(u8),
}

/// One uncompressed 640×480 RGB24 camera frame.
#[derive(Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub frame_id: u64,
    /// Capture time on the client's monotonic clock.
    pub capture_ts: u64,
    pixels: Vec<u8>,
}

impl RawFrame {
    pub fn new(frame_id: u64, capture_ts: u64, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if pixels.len() != RAW_LEN {
            return Err(ImagingError::BadBufferLen(pixels.len()));
        }
        Ok(Self {
            frame_id,
            capture_ts,
            pixels,
        })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }
}

impl std::fmt::Debug for RawFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RawFrame")
            .field("frame_id", &self.frame_id)
            .field("capture_ts", &self.capture_ts)
            .field("len", &self.pixels.len())
            .finish()
    }
}

/// A JPEG-encoded frame carrying its capture metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedFrame {
    pub frame_id: u64,
    pub capture_ts: u64,
    pub quality: u8,
    pub bytes: Vec<u8>,
}

#[inline]
pub(crate) fn pixel_index(x: u32, y: u32) -> usize {
    ((y * WIDTH + x) * 3) as usize
}
