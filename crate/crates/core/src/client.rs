//! Prosthesis-side pipeline: paced capture, JPEG compression, pipelined upload
//! through a bounded in-flight window, and result correlation.
//!
//! Three threads share one mutex-guarded [`InFlightWindow`]: capture (which
//! also encodes and decides admission), transmit, and receive.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock;
use crate::imaging::{
    encode_image, generate_frame, pad_jpeg, parse_scene_file, ImagingError, SyntheticScene,
    DEFAULT_SCENES, HEIGHT, WIDTH,
};
use crate::metrics::{percentile, Counts, FrameRecord, Outcome};
use crate::protocol::{
    encode_message, rtt_from_echo, ControlPayload, FrameUpload, Hello, MessageReader, MsgType,
    ProtocolError, ReadEvent, ResultPayload, WireMessage, CODEC_JPEG, DEFAULT_CONTROL_PAD,
};
use crate::Mode;

pub const DEFAULT_FPS: u32 = 30;
pub const DEFAULT_QUALITY: u8 = 90;
pub const DEFAULT_WINDOW: usize = 4;
/// Encoded frames are padded to this many image bytes before upload.
pub const DEFAULT_UPLOAD_PAD: usize = 52_000;
/// Annotated frames are padded to this many bytes by the server.
pub const DEFAULT_AR_PAD: u32 = 56_000;
pub const FRAME_EXPIRY: Duration = Duration::from_secs(1);
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub fps: u32,
    pub quality: u8,
    pub mode: Mode,
    pub window: usize,
    pub duration: Duration,
    /// Scenes shown in turn, each held for one second of frames.
    pub scenes: Vec<SyntheticScene>,
    /// Pad uploaded JPEGs to this many bytes; 0 sends them as encoded.
    pub upload_pad_bytes: usize,
    /// Requested response body size; defaults per mode.
    pub response_pad_bytes: Option<u32>,
    pub expiry: Duration,
    /// How long to wait for in-flight results after the last capture.
    pub drain: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            fps: DEFAULT_FPS,
            quality: DEFAULT_QUALITY,
            mode: Mode::Control,
            window: DEFAULT_WINDOW,
            duration: Duration::from_secs(10),
            scenes: parse_scene_file(DEFAULT_SCENES).expect("built-in scenes are valid"),
            upload_pad_bytes: DEFAULT_UPLOAD_PAD,
            response_pad_bytes: None,
            expiry: FRAME_EXPIRY,
            drain: FRAME_EXPIRY,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        let bad = |m: String| Err(ClientError::Config(m));
        if !(1..=60).contains(&self.fps) {
            return bad(format!("fps {} outside 1..=60", self.fps));
        }
        if !(1..=100).contains(&self.quality) {
            return bad(format!("quality {} outside 1..=100", self.quality));
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.scenes.is_empty() {
            return bad("no scenes".into());
        }
        Ok(())
    }

    pub fn response_pad(&self) -> u32 {
        self.response_pad_bytes.unwrap_or(match self.mode {
            Mode::Control => DEFAULT_CONTROL_PAD,
            Mode::Ar => DEFAULT_AR_PAD,
        })
    }

    fn hello(&self) -> Hello {
        Hello {
            mode: self.mode,
            quality: self.quality,
            width: WIDTH as u16,
            height: HEIGHT as u16,
            fps: self.fps as u8,
            pad_target_bytes: self.response_pad(),
        }
    }

    fn scene_for(&self, frame_id: u64) -> &SyntheticScene {
        let k = (frame_id / self.fps as u64) as usize;
        &self.scenes[k % self.scenes.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct InFlight {
    capture_ts: u64,
    admitted_ns: u64,
    uplink_bytes: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CorrelateError {
    #[error("result for frame {0} which is not in flight")]
    Orphan(u64),
    #[error("frame {frame_id}: echoed capture_ts {echoed} != {sent}")]
    EchoMismatch { frame_id: u64, echoed: u64, sent: u64 },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Frames uploaded and awaiting a result. New frames are refused while it is
/// full; in-flight frames are never evicted except by expiry.
#[derive(Debug)]
pub struct InFlightWindow {
    capacity: usize,
    entries: BTreeMap<u64, InFlight>,
    dropped: u64,
    orphans: u64,
}

impl InFlightWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: BTreeMap::new(),
            dropped: 0,
            orphans: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn orphans(&self) -> u64 {
        self.orphans
    }

    pub fn contains(&self, frame_id: u64) -> bool {
        self.entries.contains_key(&frame_id)
    }

    pub fn admit_or_drop(
        &mut self,
        frame_id: u64,
        capture_ts: u64,
        uplink_bytes: u64,
        now_ns: u64,
    ) -> Admission {
        if self.entries.len() >= self.capacity {
            self.dropped += 1;
            return Admission::Dropped;
        }
        self.entries.insert(
            frame_id,
            InFlight {
                capture_ts,
                admitted_ns: now_ns,
                uplink_bytes,
            },
        );
        Admission::Admitted
    }

    /// Match a response to its in-flight frame and produce its record.
    pub fn correlate_result(
        &mut self,
        msg: &WireMessage,
        now_ns: u64,
    ) -> Result<FrameRecord, CorrelateError> {
        let result = ResultPayload::parse(&msg.payload)?;
        let Some(entry) = self.entries.get(&msg.frame_id).copied() else {
            self.orphans += 1;
            return Err(CorrelateError::Orphan(msg.frame_id));
        };
        if result.echo.capture_ts != entry.capture_ts {
            return Err(CorrelateError::EchoMismatch {
                frame_id: msg.frame_id,
                echoed: result.echo.capture_ts,
                sent: entry.capture_ts,
            });
        }
        let rtt_ms = rtt_from_echo(now_ns, result.echo.send_ts)?;
        self.entries.remove(&msg.frame_id);
        Ok(FrameRecord {
            frame_id: msg.frame_id,
            capture_ts_ns: entry.capture_ts,
            rtt_ms: Some(rtt_ms),
            server_proc_ms: Some(result.echo.server_proc_us as f64 / 1e3),
            uplink_bytes: entry.uplink_bytes,
            downlink_bytes: Some(msg.encoded_len() as u64),
            outcome: Outcome::Completed,
        })
    }

    /// Remove frames admitted more than `max_age` ago as lost.
    pub fn expire(&mut self, now_ns: u64, max_age: Duration) -> Vec<FrameRecord> {
        let max_age = max_age.as_nanos() as u64;
        let stale: Vec<u64> = self
            .entries
            .iter()
            .filter(|(_, e)| now_ns.saturating_sub(e.admitted_ns) > max_age)
            .map(|(&id, _)| id)
            .collect();
        stale
            .into_iter()
            .map(|id| self.take(id, Outcome::NetLoss))
            .collect()
    }

    /// Empty the window, marking everything as still in flight at shutdown.
    pub fn drain_expired(&mut self) -> Vec<FrameRecord> {
        let ids: Vec<u64> = self.entries.keys().copied().collect();
        ids.into_iter()
            .map(|id| self.take(id, Outcome::Expired))
            .collect()
    }

    fn take(&mut self, id: u64, outcome: Outcome) -> FrameRecord {
        let e = self.entries.remove(&id).expect("present");
        FrameRecord {
            frame_id: id,
            capture_ts_ns: e.capture_ts,
            rtt_ms: None,
            server_proc_ms: None,
            uplink_bytes: e.uplink_bytes,
            downlink_bytes: None,
            outcome,
        }
    }
}

/// Time from capture to result, given a completed record's RTT and the
/// gap between capture and send.
pub fn capture_to_complete_ms(rtt_ms: f64, capture_ts: u64, send_ts: u64) -> f64 {
    rtt_ms + clock::ns_to_ms(send_ts.saturating_sub(capture_ts))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub mode: Mode,
    pub fps: u32,
    pub window: usize,
    /// One record per capture tick, in frame_id order; written separately as CSV.
    #[serde(skip)]
    pub records: Vec<FrameRecord>,
    pub counts: Counts,
    pub orphans: u64,
    pub echo_errors: u64,
    pub corrupt_messages: u64,
    /// Capture-tick lateness relative to the ideal grid.
    pub cadence_p99_ms: f64,
    pub cadence_max_ms: f64,
    pub grips: BTreeMap<String, u64>,
    /// The server vanished before the session ended.
    pub aborted: bool,
}

impl SessionSummary {
    /// captured = completed + window drops + network losses + in flight at shutdown.
    pub fn is_conserved(&self) -> bool {
        let c = &self.counts;
        c.captured == c.completed + c.window_drop + c.net_loss + c.expired
            && c.captured == self.records.len() as u64
    }
}

struct State {
    window: InFlightWindow,
    records: Vec<FrameRecord>,
    echo_errors: u64,
    corrupt: u64,
    grips: BTreeMap<String, u64>,
    server_closed: bool,
}

enum Outgoing {
    Frame {
        frame_id: u64,
        capture_ts: u64,
        image: Vec<u8>,
    },
    Bye,
}

fn handshake(stream: &TcpStream, hello: &Hello) -> Result<(), ClientError> {
    (&*stream).write_all(&encode_message(&WireMessage::hello(hello))?)?;
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let mut reader = MessageReader::new(stream);
    let reply = reader
        .next_message()
        .map_err(|e| ClientError::Handshake(e.to_string()))?;
    stream.set_read_timeout(None)?;
    match reply {
        Some(ReadEvent::Message(m)) if m.msg_type == MsgType::HelloAck => Ok(()),
        Some(ReadEvent::Message(m)) => Err(ClientError::Handshake(format!(
            "server answered {}",
            m.msg_type.name()
        ))),
        Some(ReadEvent::Corrupt(e)) => Err(ClientError::Handshake(e.to_string())),
        None => Err(ClientError::Handshake("connection closed".into())),
    }
}

/// Run one session against `server` (or a proxy in front of it).
pub fn run_client(config: &ClientConfig, server: SocketAddr) -> Result<SessionSummary, ClientError> {
    config.validate()?;
    let stream = TcpStream::connect_timeout(&server, HANDSHAKE_TIMEOUT)?;
    stream.set_nodelay(true)?;
    handshake(&stream, &config.hello())?;
    info!(
        "connected to {server}: mode {} {} fps window {}",
        config.mode, config.fps, config.window
    );

    let state = Arc::new(Mutex::new(State {
        window: InFlightWindow::new(config.window),
        records: Vec::new(),
        echo_errors: 0,
        corrupt: 0,
        grips: BTreeMap::new(),
        server_closed: false,
    }));
    let tx_failed = Arc::new(AtomicBool::new(false));
    let (out_tx, out_rx) = unbounded::<Outgoing>();

    let transmitter = {
        let stream = stream.try_clone()?;
        let failed = Arc::clone(&tx_failed);
        thread::Builder::new()
            .name("client-tx".into())
            .spawn(move || transmit_loop(stream, out_rx, &failed))?
    };
    let receiver = {
        let stream = stream.try_clone()?;
        let state = Arc::clone(&state);
        let mode = config.mode;
        thread::Builder::new()
            .name("client-rx".into())
            .spawn(move || receive_loop(stream, &state, mode))?
    };

    let lateness = capture_loop(config, &state, &out_tx, &tx_failed)?;

    // let in-flight results arrive, then say goodbye
    let drain_until = clock::now_ns() + config.drain.as_nanos() as u64;
    loop {
        {
            let mut st = state.lock().unwrap();
            let expired = st.window.expire(clock::now_ns(), config.expiry);
            st.records.extend(expired);
            if st.window.is_empty() || st.server_closed {
                break;
            }
        }
        if clock::now_ns() >= drain_until {
            break;
        }
        thread::sleep(Duration::from_millis(2));
    }
    let aborted = tx_failed.load(Ordering::SeqCst) || state.lock().unwrap().server_closed;
    let _ = out_tx.send(Outgoing::Bye);
    drop(out_tx);
    let _ = transmitter.join();
    let deadline = clock::now_ns() + 2_000_000_000;
    while !receiver.is_finished() && clock::now_ns() < deadline {
        thread::sleep(Duration::from_millis(5));
    }
    let _ = stream.shutdown(Shutdown::Both);
    let _ = receiver.join();

    let mut st = state.lock().unwrap();
    let leftovers = st.window.drain_expired();
    st.records.extend(leftovers);
    let mut records = std::mem::take(&mut st.records);
    records.sort_by_key(|r| r.frame_id);
    let mut late_sorted = lateness;
    late_sorted.sort_by(f64::total_cmp);
    let summary = SessionSummary {
        mode: config.mode,
        fps: config.fps,
        window: config.window,
        counts: Counts::of(&records),
        records,
        orphans: st.window.orphans(),
        echo_errors: st.echo_errors,
        corrupt_messages: st.corrupt,
        cadence_p99_ms: percentile(&late_sorted, 99.0),
        cadence_max_ms: late_sorted.last().copied().unwrap_or(f64::NAN),
        grips: std::mem::take(&mut st.grips),
        aborted,
    };
    info!(
        "session done: {} captured, {} completed, {} dropped",
        summary.counts.captured,
        summary.counts.completed,
        summary.counts.dropped()
    );
    Ok(summary)
}

/// Returns per-tick lateness in ms.
fn capture_loop(
    config: &ClientConfig,
    state: &Mutex<State>,
    out: &crossbeam_channel::Sender<Outgoing>,
    tx_failed: &AtomicBool,
) -> Result<Vec<f64>, ClientError> {
    let period_ns = 1e9 / config.fps as f64;
    let total_ticks = (config.duration.as_secs_f64() * config.fps as f64).round() as u64;
    let t0 = clock::now_ns() + 5_000_000;
    let mut lateness = Vec::with_capacity(total_ticks as usize);
    let mut cached: Option<(u32, Vec<u8>)> = None;
    for k in 0..total_ticks {
        let deadline = t0 + (k as f64 * period_ns).round() as u64;
        clock::sleep_until_ns(deadline);
        let capture_ts = clock::now_ns();
        lateness.push(clock::ns_to_ms(capture_ts - deadline));
        if tx_failed.load(Ordering::SeqCst) || state.lock().unwrap().server_closed {
            warn!("connection lost at frame {k}; stopping capture");
            break;
        }
        let scene = config.scene_for(k);
        // pixels depend only on the scene, so the encoded bytes do too
        if cached.as_ref().is_none_or(|(id, _)| *id != scene.scene_id) {
            let frame = generate_frame(scene, k, capture_ts)?;
            let jpeg = encode_image(&frame, config.quality)?.bytes;
            let image = if config.upload_pad_bytes > 0 {
                pad_jpeg(jpeg, config.upload_pad_bytes)
            } else {
                jpeg
            };
            cached = Some((scene.scene_id, image));
        }
        let image = cached.as_ref().expect("just filled").1.clone();
        let upload_len = (crate::protocol::HEADER_LEN + FrameUpload::PREFIX_LEN + image.len()) as u64;
        let admitted = {
            let mut st = state.lock().unwrap();
            let now = clock::now_ns();
            let expired = st.window.expire(now, config.expiry);
            st.records.extend(expired);
            match st.window.admit_or_drop(k, capture_ts, upload_len, now) {
                Admission::Admitted => true,
                Admission::Dropped => {
                    st.records.push(FrameRecord::dropped(k, capture_ts));
                    false
                }
            }
        };
        if admitted {
            let _ = out.send(Outgoing::Frame {
                frame_id: k,
                capture_ts,
                image,
            });
        }
    }
    Ok(lateness)
}

fn transmit_loop(mut stream: TcpStream, out: Receiver<Outgoing>, failed: &AtomicBool) {
    for item in out {
        let msg = match item {
            Outgoing::Frame {
                frame_id,
                capture_ts,
                image,
            } => WireMessage::frame_upload(
                frame_id,
                &FrameUpload {
                    capture_ts,
                    send_ts: clock::now_ns(),
                    codec: CODEC_JPEG,
                    image,
                },
            ),
            Outgoing::Bye => WireMessage::bye(),
        };
        let bytes = match encode_message(&msg) {
            Ok(b) => b,
            Err(e) => {
                warn!("cannot encode frame {}: {e}", msg.frame_id);
                continue;
            }
        };
        if let Err(e) = stream.write_all(&bytes) {
            debug!("send failed: {e}");
            failed.store(true, Ordering::SeqCst);
            return;
        }
    }
}

fn receive_loop(stream: TcpStream, state: &Mutex<State>, mode: Mode) {
    let mut reader = MessageReader::new(&stream);
    loop {
        let event = match reader.next_message() {
            Ok(Some(ev)) => ev,
            Ok(None) => break,
            Err(e) => {
                debug!("receive ended: {e}");
                break;
            }
        };
        let now = clock::now_ns();
        match event {
            ReadEvent::Message(msg) => match msg.msg_type {
                MsgType::ControlResult | MsgType::AnnotatedFrame => {
                    let grip = (mode == Mode::Control)
                        .then(|| {
                            ResultPayload::parse(&msg.payload)
                                .ok()
                                .and_then(|r| ControlPayload::parse(&r.body).ok())
                                .map(|c| c.grip.as_str().to_owned())
                        })
                        .flatten();
                    let mut st = state.lock().unwrap();
                    match st.window.correlate_result(&msg, now) {
                        Ok(rec) => {
                            st.records.push(rec);
                            if let Some(g) = grip {
                                *st.grips.entry(g).or_default() += 1;
                            }
                        }
                        Err(CorrelateError::Orphan(id)) => debug!("orphan result {id}"),
                        Err(e) => {
                            st.echo_errors += 1;
                            warn!("{e}");
                        }
                    }
                }
                MsgType::Bye => {
                    debug!("server said BYE");
                    break;
                }
                other => debug!("ignoring {}", other.name()),
            },
            ReadEvent::Corrupt(e) => {
                state.lock().unwrap().corrupt += 1;
                warn!("corrupt message: {e}");
            }
        }
    }
    state.lock().unwrap().server_closed = true;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Echo;

    fn result_msg(frame_id: u64, capture_ts: u64, send_ts: u64, proc_us: u32) -> WireMessage {
        ResultPayload {
            echo: Echo {
                capture_ts,
                send_ts,
                server_proc_us: proc_us,
            },
            body: vec![b' '; 750],
        }
        .into_message(MsgType::ControlResult, frame_id)
    }

    const MS: u64 = 1_000_000;

    #[test]
    fn admission() {
        let mut w = InFlightWindow::new(4);
        assert_eq!(w.admit_or_drop(0, 0, 10, 0), Admission::Admitted);
        for id in 1..4 {
            assert_eq!(w.admit_or_drop(id, 0, 10, 0), Admission::Admitted);
        }
        assert_eq!(w.admit_or_drop(4, 0, 10, 0), Admission::Dropped);
        assert_eq!(w.dropped(), 1);
        // the newest frame was refused; every earlier frame is still in flight
        assert!((0..4).all(|id| w.contains(id)) && !w.contains(4));
        w.correlate_result(&result_msg(0, 0, 0, 13_000), 40 * MS).unwrap();
        assert_eq!(w.admit_or_drop(5, 0, 10, 0), Admission::Admitted);
    }

    #[test]
    fn correlation() {
        let mut w = InFlightWindow::new(4);
        let send = 100 * MS;
        w.admit_or_drop(7, send - 5 * MS, 52_041, send);
        let rec = w
            .correlate_result(&result_msg(7, send - 5 * MS, send, 13_000), send + 40 * MS)
            .unwrap();
        assert_eq!(rec.rtt_ms, Some(40.0));
        assert_eq!(rec.server_proc_ms, Some(13.0));
        assert_eq!(rec.uplink_bytes, 52_041);
        assert_eq!(rec.downlink_bytes, Some(794));
        assert_eq!(rec.outcome, Outcome::Completed);
        assert_eq!(capture_to_complete_ms(40.0, send - 5 * MS, send), 45.0);
        // a duplicate is an orphan
        let dup = w.correlate_result(&result_msg(7, send - 5 * MS, send, 13_000), send + 41 * MS);
        assert_eq!(dup, Err(CorrelateError::Orphan(7)));
        assert_eq!(w.orphans(), 1);
    }

    #[test]
    fn echo_mismatch_is_rejected() {
        let mut w = InFlightWindow::new(1);
        w.admit_or_drop(1, 10, 1, 10);
        let err = w.correlate_result(&result_msg(1, 11, 10, 0), 20).unwrap_err();
        assert!(matches!(err, CorrelateError::EchoMismatch { .. }));
        assert!(w.contains(1));
    }

    #[test]
    fn expiry() {
        let mut w = InFlightWindow::new(4);
        w.admit_or_drop(1, 0, 5, 0);
        w.admit_or_drop(2, 0, 5, 500 * MS);
        assert!(w.expire(1000 * MS, FRAME_EXPIRY).is_empty());
        let lost = w.expire(1001 * MS, FRAME_EXPIRY);
        assert_eq!(lost.len(), 1);
        assert_eq!((lost[0].frame_id, lost[0].outcome), (1, Outcome::NetLoss));
        assert_eq!(lost[0].uplink_bytes, 5);
        let rest = w.drain_expired();
        assert_eq!((rest[0].frame_id, rest[0].outcome), (2, Outcome::Expired));
        assert!(w.is_empty());
    }

    #[test]
    fn config_checks() {
        let ok = ClientConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(ok.response_pad(), 750);
        let ar = ClientConfig {
            mode: Mode::Ar,
            ..ClientConfig::default()
        };
        assert_eq!(ar.response_pad(), DEFAULT_AR_PAD);
        for bad in [
            ClientConfig { fps: 0, ..ClientConfig::default() },
            ClientConfig { fps: 61, ..ClientConfig::default() },
            ClientConfig { window: 0, ..ClientConfig::default() },
            ClientConfig { scenes: vec![], ..ClientConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn scenes_change_once_per_second() {
        let cfg = ClientConfig::default();
        assert_eq!(cfg.scene_for(0).scene_id, cfg.scene_for(29).scene_id);
        assert_ne!(cfg.scene_for(29).scene_id, cfg.scene_for(30).scene_id);
    }
}
