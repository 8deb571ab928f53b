use image::ImageFormat;
use jpeg_encoder::{ColorType, Encoder};

use super::{CompressedFrame, ImagingError, RawFrame, HEIGHT, RAW_LEN, WIDTH};

const SOI: [u8; 2] = [0xFF, 0xD8];
const EOI: [u8; 2] = [0xFF, 0xD9];
const COM: u8 = 0xFE;
/// Largest COM segment: 2 marker bytes + 2 length bytes + 65533 data bytes.
const MAX_COM_SEGMENT: usize = 4 + 65533;

/// Baseline JFIF encode of a raw frame at `quality`.
pub fn encode_image(frame: &RawFrame, quality: u8) -> Result<CompressedFrame, ImagingError> {
    let bytes = encode_pixels(frame.pixels(), quality)?;
    Ok(CompressedFrame {
        frame_id: frame.frame_id,
        capture_ts: frame.capture_ts,
        quality,
        bytes,
    })
}

pub(crate) fn encode_pixels(pixels: &[u8], quality: u8) -> Result<Vec<u8>, ImagingError> {
    if !(1..=100).contains(&quality) {
        return Err(ImagingError::Quality(quality));
    }
    if pixels.len() != RAW_LEN {
        return Err(ImagingError::BadBufferLen(pixels.len()));
    }
    let mut out = Vec::with_capacity(64 * 1024);
    Encoder::new(&mut out, quality)
        .encode(pixels, WIDTH as u16, HEIGHT as u16, ColorType::Rgb)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out)
}

/// Decode JPEG bytes into a 640×480 RGB24 buffer.
pub fn decode_image(bytes: &[u8]) -> Result<Vec<u8>, ImagingError> {
    if bytes.len() < 4 || bytes[..2] != SOI || bytes[bytes.len() - 2..] != EOI {
        return Err(ImagingError::Decode(
            "missing SOI/EOI markers (empty or truncated stream)".into(),
        ));
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Jpeg)
        .map_err(|e| ImagingError::Decode(e.to_string()))?;
    if img.width() != WIDTH || img.height() != HEIGHT {
        return Err(ImagingError::Dimensions(img.width(), img.height()));
    }
    Ok(img.into_rgb8().into_raw())
}

/// Grow a JPEG to exactly `target` bytes by inserting COM segments after SOI.
///
/// Decoders skip comment segments, so the image is unchanged; only the wire
/// size grows. Streams already at or above `target` (or within 3 bytes of it,
/// below the minimum segment size) are returned as is.
pub fn pad_jpeg(mut bytes: Vec<u8>, target: usize) -> Vec<u8> {
    if bytes.len() < 2 || bytes[..2] != SOI || bytes.len() + 4 > target {
        return bytes;
    }
    let mut remaining = target - bytes.len();
    let mut padding = Vec::with_capacity(remaining);
    while remaining >= 4 {
        let mut seg = remaining.min(MAX_COM_SEGMENT);
        if (1..4).contains(&(remaining - seg)) {
            // leave room for a final segment of at least 4 bytes
            seg -= 4;
        }
        let len = (seg - 2) as u16;
        padding.extend_from_slice(&[0xFF, COM]);
        padding.extend_from_slice(&len.to_be_bytes());
        padding.resize(padding.len() + seg - 4, b' ');
        remaining -= seg;
    }
    bytes.splice(2..2, padding);
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{generate_frame, parse_scene_line, SyntheticScene};

    fn empty() -> RawFrame {
        generate_frame(&SyntheticScene::new(0, vec![]), 5, 77).unwrap()
    }

    #[test]
    fn encode_keeps_metadata() {
        let c = encode_image(&empty(), 90).unwrap();
        assert_eq!((c.frame_id, c.capture_ts, c.quality), (5, 77, 90));
        assert!(c.bytes.len() < RAW_LEN);
    }

    #[test]
    fn empty_scene_round_trip_within_three() {
        let c = encode_image(&empty(), 90).unwrap();
        let px = decode_image(&c.bytes).unwrap();
        assert_eq!(px.len(), RAW_LEN);
        let worst = px.iter().map(|&v| (v as i32 - 128).abs()).max().unwrap();
        assert!(worst <= 3, "max deviation {worst}");
    }

    #[test]
    fn malformed_input_is_rejected() {
        let c = encode_image(&empty(), 90).unwrap();
        assert!(decode_image(&[]).is_err());
        assert!(decode_image(&c.bytes[..c.bytes.len() / 2]).is_err());
        assert!(decode_image(&c.bytes[..c.bytes.len() - 1]).is_err());
        assert!(decode_image(b"not a jpeg at all").is_err());
    }

    #[test]
    fn quality_out_of_range() {
        assert!(matches!(
            encode_image(&empty(), 0),
            Err(ImagingError::Quality(0))
        ));
        assert!(encode_image(&empty(), 101).is_err());
    }

    #[test]
    fn size_shrinks_with_quality() {
        let scene = parse_scene_line("9;card:301,211,133,87;knife:45,37,180,42;cup:470,300,120,140")
            .unwrap();
        let frame = generate_frame(&scene, 0, 0).unwrap();
        let sizes: Vec<usize> = [90, 70, 50, 30]
            .iter()
            .map(|&q| encode_image(&frame, q).unwrap().bytes.len())
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] > w[1]), "{sizes:?}");
    }

    #[test]
    fn padding_hits_target_and_keeps_image() {
        let c = encode_image(&empty(), 90).unwrap();
        let original = decode_image(&c.bytes).unwrap();
        for target in [c.bytes.len() + 4, 52_000, 140_000, 200_003] {
            let padded = pad_jpeg(c.bytes.clone(), target);
            assert_eq!(padded.len(), target);
            assert_eq!(decode_image(&padded).unwrap(), original);
        }
        // too small to pad, or already bigger
        assert_eq!(pad_jpeg(c.bytes.clone(), c.bytes.len() + 2).len(), c.bytes.len());
        assert_eq!(pad_jpeg(c.bytes.clone(), 10).len(), c.bytes.len());
    }
}
