//! Object detections and the palette-color stand-in detector.
//!
//! [`StubDetector`] finds solid palette-colored regions: it classifies a 4×4
//! downsampled grid, joins equal-class cells with 4-connectivity, then tightens
//! each component's box at full resolution. [`ExternalDetector`] hands frames
//! to a child process over a length-prefixed stdio exchange so a real model
//! can be swapped in.

use std::collections::VecDeque;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::palette::{Palette, PaletteClass, MATCH_DISTANCE};
use crate::imaging::{pixel_index, HEIGHT, RAW_LEN, WIDTH};

/// Axis-aligned box in pixels; serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for BBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    /// Exclusive right edge.
    pub fn right(&self) -> u32 {
        self.x.saturating_add(self.w)
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> u32 {
        self.y.saturating_add(self.h)
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.right().min(other.right()).saturating_sub(self.x.max(other.x));
        let h = self.bottom().min(other.bottom()).saturating_sub(self.y.max(other.y));
        w as u64 * h as u64
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// The part of the box inside a `width`×`height` frame, if any.
    pub fn clipped(&self, width: u32, height: u32) -> Option<BBox> {
        let right = self.right().min(width);
        let bottom = self.bottom().min(height);
        (self.x < right && self.y < bottom)
            .then(|| BBox::new(self.x, self.y, right - self.x, bottom - self.y))
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "cls")]
    pub class: PaletteClass,
    #[serde(rename = "conf")]
    pub confidence: f64,
    pub bbox: BBox,
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("frame buffer is {0} bytes, expected {RAW_LEN}")]
    BadFrame(usize),
    #[error("external detector i/o: {0}")]
    Io(#[from] io::Error),
    #[error("external detector returned malformed detections: {0}")]
    Protocol(String),
}

pub trait Detector: Send + Sync {
    fn detect(&self, pixels: &[u8]) -> Result<Vec<Detection>, DetectError>;
}

/// Downsampling factor of the component grid.
pub const CELL: u32 = 4;
/// Smallest reported region in pixels.
pub const MIN_AREA: u64 = 1024;
const GRID_W: u32 = WIDTH / CELL;
const GRID_H: u32 = HEIGHT / CELL;

#[derive(Debug, Clone, Copy, Default)]
pub struct StubDetector;

impl StubDetector {
    fn pixel(pixels: &[u8], x: u32, y: u32) -> [u8; 3] {
        let i = pixel_index(x, y);
        [pixels[i], pixels[i + 1], pixels[i + 2]]
    }

    /// Class of each grid cell, judged by the cell's mean color.
    fn classify_cells(pixels: &[u8]) -> Vec<Option<PaletteClass>> {
        let mut cells = Vec::with_capacity((GRID_W * GRID_H) as usize);
        for gy in 0..GRID_H {
            for gx in 0..GRID_W {
                let mut sum = [0u32; 3];
                for y in gy * CELL..(gy + 1) * CELL {
                    let row = pixel_index(gx * CELL, y);
                    for px in pixels[row..row + (CELL * 3) as usize].chunks_exact(3) {
                        sum[0] += px[0] as u32;
                        sum[1] += px[1] as u32;
                        sum[2] += px[2] as u32;
                    }
                }
                let n = CELL * CELL;
                let mean = [(sum[0] / n) as u8, (sum[1] / n) as u8, (sum[2] / n) as u8];
                cells.push(Palette::classify(mean).map(|(c, _)| c));
            }
        }
        cells
    }

    /// Tighten a grid component to pixel precision. Returns the box, matching
    /// pixel count and mean color distance.
    fn refine(
        pixels: &[u8],
        class: PaletteClass,
        cells: (u32, u32, u32, u32),
    ) -> Option<(BBox, u64, f64)> {
        let (gx0, gy0, gx1, gy1) = cells;
        let x0 = (gx0 * CELL).saturating_sub(CELL);
        let y0 = (gy0 * CELL).saturating_sub(CELL);
        let x1 = ((gx1 + 2) * CELL).min(WIDTH);
        let y1 = ((gy1 + 2) * CELL).min(HEIGHT);
        let limit = (MATCH_DISTANCE * MATCH_DISTANCE) as u32;
        let target = class.color();
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (u32::MAX, u32::MAX, 0, 0);
        let mut count = 0u64;
        let mut dist_sum = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let rgb = Self::pixel(pixels, x, y);
                let d2 = Palette::distance_sq(rgb, target);
                if d2 > limit || Palette::nearest(rgb).0 != class {
                    continue;
                }
                count += 1;
                dist_sum += (d2 as f64).sqrt();
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
        (count > 0).then(|| {
            (
                BBox::new(min_x, min_y, max_x - min_x + 1, max_y - min_y + 1),
                count,
                dist_sum / count as f64,
            )
        })
    }
}

impl Detector for StubDetector {
    fn detect(&self, pixels: &[u8]) -> Result<Vec<Detection>, DetectError> {
        if pixels.len() != RAW_LEN {
            return Err(DetectError::BadFrame(pixels.len()));
        }
        let cells = Self::classify_cells(pixels);
        let mut seen = vec![false; cells.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..cells.len() {
            let Some(class) = cells[start] else { continue };
            if seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let (mut gx0, mut gy0, mut gx1, mut gy1) = (u32::MAX, u32::MAX, 0, 0);
            while let Some(i) = queue.pop_front() {
                let (gx, gy) = (i as u32 % GRID_W, i as u32 / GRID_W);
                gx0 = gx0.min(gx);
                gy0 = gy0.min(gy);
                gx1 = gx1.max(gx);
                gy1 = gy1.max(gy);
                let neighbours = [
                    (gx > 0).then(|| i - 1),
                    (gx + 1 < GRID_W).then(|| i + 1),
                    (gy > 0).then(|| i - GRID_W as usize),
                    (gy + 1 < GRID_H).then(|| i + GRID_W as usize),
                ];
                for n in neighbours.into_iter().flatten() {
                    if !seen[n] && cells[n] == Some(class) {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
            if let Some((bbox, _count, mean_dist)) =
                Self::refine(pixels, class, (gx0, gy0, gx1, gy1))
            {
                if bbox.area() >= MIN_AREA {
                    out.push(Detection {
                        class,
                        confidence: (1.0 - mean_dist / MATCH_DISTANCE).clamp(0.0, 1.0),
                        bbox,
                    });
                }
            }
        }
        Ok(out)
    }
}

fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Read one length-prefixed frame; `Ok(None)` on clean EOF before the prefix.
fn read_frame(r: &mut impl Read, max: usize) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > max {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds {max}"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

const MAX_RESPONSE: usize = 1 << 20;

/// Child-process side of the external detector exchange: reads
/// `u32 length | RGB24 frame` requests from `input` and answers each with
/// `u32 length | JSON detection array`, until EOF.
pub fn serve_detector(
    detector: &dyn Detector,
    input: impl Read,
    output: impl Write,
) -> Result<(), DetectError> {
    let mut input = BufReader::new(input);
    let mut output = BufWriter::new(output);
    while let Some(frame) = read_frame(&mut input, RAW_LEN)? {
        let dets = detector.detect(&frame)?;
        let json = serde_json::to_vec(&dets).map_err(|e| DetectError::Protocol(e.to_string()))?;
        write_frame(&mut output, &json)?;
    }
    Ok(())
}

struct ChildPipes {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Detector running in a separate process; requests are serialized.
pub struct ExternalDetector {
    pipes: Mutex<ChildPipes>,
}

impl ExternalDetector {
    pub fn spawn(mut command: Command) -> Result<Self, DetectError> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            pipes: Mutex::new(ChildPipes {
                child,
                stdin,
                stdout,
            }),
        })
    }
}

impl Detector for ExternalDetector {
    fn detect(&self, pixels: &[u8]) -> Result<Vec<Detection>, DetectError> {
        if pixels.len() != RAW_LEN {
            return Err(DetectError::BadFrame(pixels.len()));
        }
        let mut pipes = self.pipes.lock().unwrap_or_else(|p| p.into_inner());
        write_frame(&mut pipes.stdin, pixels)?;
        let body = read_frame(&mut pipes.stdout, MAX_RESPONSE)?.ok_or_else(|| {
            DetectError::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "detector process closed its output",
            ))
        })?;
        serde_json::from_slice(&body).map_err(|e| DetectError::Protocol(e.to_string()))
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        let pipes = self.pipes.get_mut().unwrap_or_else(|p| p.into_inner());
        let _ = pipes.child.kill();
        let _ = pipes.child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{decode_image, encode_image, generate_frame, parse_scene_line};

    fn detect_line(line: &str, via_jpeg: bool) -> Vec<Detection> {
        let scene = parse_scene_line(line).unwrap();
        let frame = generate_frame(&scene, 0, 0).unwrap();
        let pixels = if via_jpeg {
            decode_image(&encode_image(&frame, 90).unwrap().bytes).unwrap()
        } else {
            frame.into_pixels()
        };
        StubDetector.detect(&pixels).unwrap()
    }

    #[test]
    fn bbox_geometry() {
        let a = BBox::new(0, 0, 10, 10);
        let b = BBox::new(5, 5, 10, 10);
        assert_eq!(a.intersection_area(&b), 25);
        assert!((a.iou(&b) - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.intersection_area(&BBox::new(10, 0, 5, 5)), 0);
        assert_eq!(BBox::new(630, 470, 20, 20).clipped(640, 480), Some(BBox::new(630, 470, 10, 10)));
        assert_eq!(BBox::new(640, 0, 20, 20).clipped(640, 480), None);
    }

    #[test]
    fn bbox_serializes_as_array() {
        let d = Detection {
            class: PaletteClass::Key,
            confidence: 0.5,
            bbox: BBox::new(1, 2, 3, 4),
        };
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, r#"{"cls":"key","conf":0.5,"bbox":[1,2,3,4]}"#);
        assert_eq!(serde_json::from_str::<Detection>(&json).unwrap(), d);
    }

    #[test]
    fn empty_scene_has_no_detections() {
        assert!(detect_line("0", true).is_empty());
    }

    #[test]
    fn exact_on_raw_frames() {
        let dets = detect_line("1;cup:101,99,80,83", false);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, BBox::new(101, 99, 80, 83));
        assert_eq!(dets[0].confidence, 1.0);
    }

    #[test]
    fn cup_after_q90_round_trip() {
        let dets = detect_line("1;cup:100,100,80,80", true);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class, PaletteClass::Cup);
        assert!(dets[0].bbox.iou(&BBox::new(100, 100, 80, 80)) >= 0.9);
        assert!(dets[0].confidence > 0.5);
    }

    #[test]
    fn cup_and_key() {
        let dets = detect_line("2;cup:120,140,90,110;key:400,200,60,140", true);
        let mut classes: Vec<_> = dets.iter().map(|d| d.class).collect();
        classes.sort();
        assert_eq!(classes, vec![PaletteClass::Cup, PaletteClass::Key]);
    }

    #[test]
    fn adjacent_close_colors_stay_separate() {
        // card and knife are the closest palette pair
        let dets = detect_line("3;card:100,100,60,60;knife:160,100,60,60", true);
        let mut classes: Vec<_> = dets.iter().map(|d| (d.class, d.bbox)).collect();
        classes.sort_by_key(|c| c.0);
        assert_eq!(classes.len(), 2, "{classes:?}");
        assert!(classes[0].1.iou(&BBox::new(100, 100, 60, 60)) >= 0.9);
        assert!(classes[1].1.iou(&BBox::new(160, 100, 60, 60)) >= 0.9);
    }

    #[test]
    fn deterministic() {
        let scene = parse_scene_line("9;card:301,211,133,87;knife:45,37,180,42").unwrap();
        let px = decode_image(&encode_image(&generate_frame(&scene, 0, 0).unwrap(), 90).unwrap().bytes)
            .unwrap();
        assert_eq!(StubDetector.detect(&px).unwrap(), StubDetector.detect(&px).unwrap());
    }

    #[test]
    fn rejects_wrong_buffer() {
        assert!(matches!(StubDetector.detect(&[0; 12]), Err(DetectError::BadFrame(12))));
    }

    #[test]
    fn stdio_exchange_round_trip() {
        let scene = parse_scene_line("2;cup:120,140,90,110;key:400,200,60,140").unwrap();
        let px = generate_frame(&scene, 0, 0).unwrap().into_pixels();
        let mut request = Vec::new();
        write_frame(&mut request, &px).unwrap();
        write_frame(&mut request, &px).unwrap();
        let mut response = Vec::new();
        serve_detector(&StubDetector, &request[..], &mut response).unwrap();
        let mut r = &response[..];
        for _ in 0..2 {
            let body = read_frame(&mut r, MAX_RESPONSE).unwrap().unwrap();
            let dets: Vec<Detection> = serde_json::from_slice(&body).unwrap();
            assert_eq!(dets, StubDetector.detect(&px).unwrap());
        }
        assert!(read_frame(&mut r, MAX_RESPONSE).unwrap().is_none());
    }
}
