use super::font::{self, GLYPH_H};
use super::{pixel_index, ImagingError, HEIGHT, RAW_LEN, WIDTH};
use crate::detect::Detection;

/// Outline thickness in pixels.
pub const OUTLINE: u32 = 2;
/// Vertical gap between a label's baseline and the top of its box.
const LABEL_GAP: u32 = 2;

fn label_text(det: &Detection) -> String {
    format!("{} {:.2}", det.class.name(), det.confidence)
}

/// Calls `plot(x, y)` for every pixel the annotation of `det` covers, already
/// clipped to the frame.
fn for_each_annotation_pixel(det: &Detection, mut plot: impl FnMut(u32, u32)) {
    let Some(b) = det.bbox.clipped(WIDTH, HEIGHT) else {
        return;
    };
    for y in b.y..b.bottom() {
        for x in b.x..b.right() {
            let edge = x - b.x < OUTLINE
                || b.right() - 1 - x < OUTLINE
                || y - b.y < OUTLINE
                || b.bottom() - 1 - y < OUTLINE;
            if edge {
                plot(x, y);
            }
        }
    }
    // label above the box, or just inside it when there is no room
    let top = if b.y >= GLYPH_H + LABEL_GAP {
        b.y - GLYPH_H - LABEL_GAP
    } else {
        b.y + OUTLINE + 1
    };
    let text = label_text(det);
    for (dx, dy) in font::text_pixels(&text) {
        let (x, y) = (b.x + dx, top + dy);
        if x < WIDTH && y < HEIGHT {
            plot(x, y);
        }
    }
}

/// Draw 2-px box outlines and a bitmap class label for each detection.
/// Boxes reaching outside the frame are clipped.
pub fn annotate_frame(pixels: &[u8], detections: &[Detection]) -> Result<Vec<u8>, ImagingError> {
    if pixels.len() != RAW_LEN {
        return Err(ImagingError::BadBufferLen(pixels.len()));
    }
    let mut out = pixels.to_vec();
    for det in detections {
        let color = det.class.color();
        for_each_annotation_pixel(det, |x, y| {
            let i = pixel_index(x, y);
            out[i..i + 3].copy_from_slice(&color);
        });
    }
    Ok(out)
}

/// Per-pixel mask (row-major, 640×480) of every pixel `annotate_frame` may
/// write for these detections.
pub fn annotation_mask(detections: &[Detection]) -> Vec<bool> {
    let mut mask = vec![false; (WIDTH * HEIGHT) as usize];
    for det in detections {
        for_each_annotation_pixel(det, |x, y| mask[(y * WIDTH + x) as usize] = true);
    }
    mask
}
