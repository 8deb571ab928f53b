//! Edge server: accepts sessions, runs frames through a shared worker pool and
//! answers each with a control decision or an annotated frame.

mod frame;
mod reorder;

pub use frame::{handle_frame, FrameError, FrameResponse, SessionParams};
pub use reorder::ReorderBuffer;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Sender};
use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock;
use crate::detect::{DetectError, Detector, ExternalDetector, StubDetector};
use crate::grip::{Grip, GripPolicy};
use crate::protocol::{
    encode_message, Hello, MessageReader, MsgType, ProtocolError, ReadEvent, StreamError,
    WireMessage,
};
use crate::Mode;

pub const DEFAULT_WORKERS: usize = 2;
pub const DEFAULT_SERVICE_TIME_MS: f64 = 13.0;
pub const DEFAULT_SERVICE_TIME_STD_MS: f64 = 0.4;
pub const HELLO_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Which detector backs the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectorKind {
    Stub,
    /// Program and arguments of a process speaking the detector stdio protocol.
    External(Vec<String>),
}

impl DetectorKind {
    /// `stub`, or `external:<command line>`.
    pub fn parse(s: &str) -> Result<Self, ServerError> {
        if s == "stub" {
            return Ok(Self::Stub);
        }
        match s.strip_prefix("external:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(Self::External(
                cmd.split_whitespace().map(str::to_owned).collect(),
            )),
            _ => Err(ServerError::Config(format!(
                "detector `{s}`: expected `stub` or `external:<command>`"
            ))),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Detector>, ServerError> {
        match self {
            Self::Stub => Ok(Arc::new(StubDetector)),
            Self::External(argv) => {
                let mut cmd = Command::new(&argv[0]);
                cmd.args(&argv[1..]);
                Ok(Arc::new(ExternalDetector::spawn(cmd)?))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub workers: usize,
    pub detector: DetectorKind,
    pub policy: GripPolicy,
    /// Floor on per-frame processing time.
    pub service_time_ms: f64,
    /// Spread of the half-normal excess added on top of the floor.
    pub service_time_std_ms: f64,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            workers: DEFAULT_WORKERS,
            detector: DetectorKind::Stub,
            policy: GripPolicy::default(),
            service_time_ms: DEFAULT_SERVICE_TIME_MS,
            service_time_std_ms: DEFAULT_SERVICE_TIME_STD_MS,
            seed: 0,
            log_path: None,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        if self.workers == 0 {
            return Err(ServerError::Config("workers must be at least 1".into()));
        }
        if !(self.service_time_ms.is_finite() && self.service_time_ms >= 0.0) {
            return Err(ServerError::Config(format!(
                "service time {} ms",
                self.service_time_ms
            )));
        }
        if !(self.service_time_std_ms.is_finite() && self.service_time_std_ms >= 0.0) {
            return Err(ServerError::Config(format!(
                "service time std {} ms",
                self.service_time_std_ms
            )));
        }
        self.policy
            .validate()
            .map_err(|e| ServerError::Config(e.to_string()))
    }
}

/// One line of the server log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerLogRow {
    pub frame_id: u64,
    pub recv_ts_ns: u64,
    pub proc_us: u32,
    pub mode: Mode,
    pub grip: Grip,
}

pub struct ServerLog {
    writer: Mutex<csv::Writer<BufWriter<File>>>,
}

impl ServerLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        let writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        Ok(Self {
            writer: Mutex::new(writer),
        })
    }

    pub fn append(&self, row: &ServerLogRow) {
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = w.serialize(row) {
            warn!("server log write failed: {e}");
        }
    }

    pub fn flush(&self) {
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let _ = w.flush();
    }
}

pub fn read_server_log(path: &Path) -> Result<Vec<ServerLogRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// Counters shared by all sessions.
#[derive(Debug, Default)]
pub struct ServerStats {
    pub sessions: AtomicU64,
    pub frames_received: AtomicU64,
    pub responses_sent: AtomicU64,
    pub frame_errors: AtomicU64,
    pub corrupt_messages: AtomicU64,
}

type Job = Box<dyn FnOnce() + Send>;

struct Shared {
    config: ServerConfig,
    detector: Arc<dyn Detector>,
    jobs: Sender<Job>,
    log: Option<ServerLog>,
    stats: Arc<ServerStats>,
}

pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, config: ServerConfig) -> Result<Self, ServerError> {
        config.validate()?;
        let detector = config.detector.build()?;
        let log = match &config.log_path {
            Some(p) => Some(ServerLog::create(p)?),
            None => None,
        };
        let listener = TcpListener::bind(addr)?;
        let (jobs, queue) = bounded::<Job>(256);
        let workers = (0..config.workers)
            .map(|i| {
                let queue = queue.clone();
                thread::Builder::new()
                    .name(format!("worker-{i}"))
                    .spawn(move || {
                        for job in queue {
                            job();
                        }
                    })
            })
            .collect::<io::Result<Vec<_>>>()?;
        Ok(Self {
            listener,
            shared: Arc::new(Shared {
                config,
                detector,
                jobs,
                log,
                stats: Arc::new(ServerStats::default()),
            }),
            workers,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn stats(&self) -> Arc<ServerStats> {
        Arc::clone(&self.shared.stats)
    }

    /// Serve sessions until `shutdown` is set (and a connection arrives to
    /// notice it).
    pub fn run(self, shutdown: Arc<AtomicBool>) -> io::Result<()> {
        info!(
            "server on {} with {} workers",
            self.listener.local_addr()?,
            self.shared.config.workers
        );
        let mut sessions = Vec::new();
        for conn in self.listener.incoming() {
            if shutdown.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let id = self.shared.stats.sessions.fetch_add(1, Ordering::SeqCst);
            let shared = Arc::clone(&self.shared);
            sessions.retain(|h: &JoinHandle<()>| !h.is_finished());
            sessions.push(
                thread::Builder::new()
                    .name(format!("session-{id}"))
                    .spawn(move || {
                        if let Err(e) = serve_session(stream, &shared, id) {
                            debug!("session {id} ended: {e}");
                        }
                    })?,
            );
        }
        for s in sessions {
            let _ = s.join();
        }
        let Server {
            shared, workers, ..
        } = self;
        if let Some(log) = &shared.log {
            log.flush();
        }
        drop(shared);
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }

    /// Run on a background thread.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stats = self.stats();
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&shutdown);
        let thread = thread::Builder::new()
            .name("server-accept".into())
            .spawn(move || {
                if let Err(e) = self.run(flag) {
                    warn!("server stopped: {e}");
                }
            })?;
        Ok(ServerHandle {
            addr,
            stats,
            shutdown,
            thread: Some(thread),
        })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stats: Arc<ServerStats>,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    /// Stop accepting, wait for open sessions to finish and flush the log.
    pub fn stop(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

pub fn default_log_path(dir: &Path) -> PathBuf {
    dir.join("server_log.csv")
}

/// Sample a service time: the floor plus a half-normal excess.
pub fn sample_service_time(rng: &mut impl Rng, floor_ms: f64, std_ms: f64) -> Duration {
    let z: f64 = rng.sample(StandardNormal);
    Duration::from_secs_f64((floor_ms + (z * std_ms).abs()) / 1e3)
}

enum Outbound {
    Result(u64, Option<Vec<u8>>),
}

fn session_seed(seed: u64, session: u64) -> u64 {
    crate::netem::stream_seed(seed, crate::netem::Direction::Downlink, session)
}

fn serve_session(stream: TcpStream, shared: &Arc<Shared>, id: u64) -> Result<(), ServerError> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(HELLO_TIMEOUT))?;
    let mut write_half = stream.try_clone()?;
    let mut reader = MessageReader::new(&stream);

    let hello = match reader.next_message() {
        Ok(Some(ReadEvent::Message(m))) if m.msg_type == MsgType::Hello => Hello::parse(&m.payload),
        Ok(Some(ReadEvent::Message(m))) => Err(ProtocolError::Payload {
            kind: "session",
            reason: format!("expected HELLO, got {}", m.msg_type.name()),
        }),
        Ok(Some(ReadEvent::Corrupt(e))) => Err(e),
        Ok(None) => return Ok(()),
        Err(StreamError::Io(e)) => {
            debug!("session {id}: no HELLO ({e})");
            return Ok(());
        }
        Err(e) => {
            debug!("session {id}: {e}");
            return Ok(());
        }
    };
    let hello = match hello {
        Ok(h) => h,
        Err(e) => {
            warn!("session {id}: bad handshake: {e}");
            let _ = write_half.write_all(&encode_message(&WireMessage::bye()).expect("bye"));
            let _ = stream.shutdown(Shutdown::Both);
            return Ok(());
        }
    };
    write_half.write_all(&encode_message(&WireMessage::hello_ack()).expect("ack"))?;
    stream.set_read_timeout(None)?;
    let params = SessionParams {
        mode: hello.mode,
        quality: hello.quality,
        pad_target_bytes: hello.pad_target_bytes,
    };
    info!(
        "session {id}: mode {} q{} {} fps pad {}",
        params.mode, params.quality, hello.fps, params.pad_target_bytes
    );

    let (out_tx, out_rx) = unbounded::<Outbound>();
    let writer = thread::Builder::new()
        .name(format!("session-{id}-tx"))
        .spawn({
            let stats = Arc::clone(&shared.stats);
            move || {
                let mut order = ReorderBuffer::new();
                let mut ok = true;
                for Outbound::Result(seq, item) in out_rx {
                    for bytes in order.insert(seq, item) {
                        if ok {
                            ok = write_half.write_all(&bytes).is_ok();
                            if ok {
                                stats.responses_sent.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    }
                }
                if ok {
                    let _ = write_half.write_all(&encode_message(&WireMessage::bye()).expect("bye"));
                }
                let _ = write_half.shutdown(Shutdown::Write);
            }
        })?;

    let mut rng = ChaCha8Rng::seed_from_u64(session_seed(shared.config.seed, id));
    let mut seq = 0u64;
    loop {
        let event = match reader.next_message() {
            Ok(Some(ev)) => ev,
            Ok(None) => break,
            Err(e) => {
                debug!("session {id}: {e}");
                break;
            }
        };
        match event {
            ReadEvent::Message(msg) => match msg.msg_type {
                MsgType::FrameUpload => {
                    let recv_ns = clock::now_ns();
                    shared.stats.frames_received.fetch_add(1, Ordering::Relaxed);
                    let dwell = sample_service_time(
                        &mut rng,
                        shared.config.service_time_ms,
                        shared.config.service_time_std_ms,
                    );
                    let job_shared = Arc::clone(shared);
                    let tx = out_tx.clone();
                    let this_seq = seq;
                    seq += 1;
                    let job: Job = Box::new(move || {
                        let item = process(&job_shared, &params, &msg, recv_ns, dwell);
                        let _ = tx.send(Outbound::Result(this_seq, item));
                    });
                    if shared.jobs.send(job).is_err() {
                        break;
                    }
                }
                MsgType::Bye => break,
                other => warn!("session {id}: ignoring unexpected {}", other.name()),
            },
            ReadEvent::Corrupt(ProtocolError::UnknownType { msg_type: t, .. }) => {
                warn!("session {id}: unknown message type {t:#04x}, closing");
                break;
            }
            ReadEvent::Corrupt(e) => {
                shared.stats.corrupt_messages.fetch_add(1, Ordering::Relaxed);
                warn!("session {id}: dropped message: {e}");
            }
        }
    }
    drop(out_tx);
    let _ = writer.join();
    Ok(())
}

fn process(
    shared: &Shared,
    params: &SessionParams,
    msg: &WireMessage,
    recv_ns: u64,
    dwell: Duration,
) -> Option<Vec<u8>> {
    match handle_frame(
        shared.detector.as_ref(),
        &shared.config.policy,
        params,
        msg,
        recv_ns,
        dwell,
    ) {
        Ok(r) => {
            if let Some(log) = &shared.log {
                log.append(&ServerLogRow {
                    frame_id: msg.frame_id,
                    recv_ts_ns: recv_ns,
                    proc_us: r.proc_us,
                    mode: params.mode,
                    grip: r.grip,
                });
            }
            Some(r.encoded)
        }
        Err(e) => {
            shared.stats.frame_errors.fetch_add(1, Ordering::Relaxed);
            warn!("frame {}: {e}", msg.frame_id);
            None
        }
    }
}
