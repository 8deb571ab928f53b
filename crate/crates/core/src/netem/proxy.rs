//! Store-and-forward TCP proxy that applies a [`NetProfile`] per direction.
//!
//! Each accepted connection gets a fresh upstream connection and two pumps.
//! A pump's reader re-frames the byte stream into protocol messages, asks its
//! [`LinkTimeline`] when each one should arrive, and hands it to the pump's
//! writer, which sleeps until that instant before writing. Session-control
//! messages (HELLO, HELLO_ACK, BYE) are never dropped.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::{stream_seed, Delivery, Direction, LinkTimeline, NetProfile};
use crate::clock;
use crate::protocol::{MessageReader, StreamError};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

/// One line of the proxy log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyLogRow {
    pub ts_ns: u64,
    pub direction: Direction,
    pub msg_type: String,
    pub bytes: u64,
    /// Injected one-way delay; empty when the message was dropped.
    pub delay_ms: Option<f64>,
    pub lost: bool,
}

pub struct ProxyLog {
    writer: Mutex<csv::Writer<BufWriter<File>>>,
}

impl ProxyLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = BufWriter::new(File::create(path)?);
        Ok(Self {
            writer: Mutex::new(csv::Writer::from_writer(file)),
        })
    }

    fn append(&self, row: &ProxyLogRow) {
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = w.serialize(row) {
            warn!("proxy log write failed: {e}");
        }
    }

    pub fn flush(&self) {
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let _ = w.flush();
    }
}

pub fn read_proxy_log(path: &Path) -> Result<Vec<ProxyLogRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

enum Pending {
    Data { at: u64, bytes: Vec<u8> },
    Close { at: u64 },
}

fn writer_loop(mut dst: TcpStream, rx: Receiver<Pending>) {
    for item in rx {
        match item {
            Pending::Data { at, bytes } => {
                clock::sleep_until_ns(at);
                if let Err(e) = dst.write_all(&bytes) {
                    debug!("proxy write failed: {e}");
                    return;
                }
            }
            Pending::Close { at } => {
                clock::sleep_until_ns(at);
                break;
            }
        }
    }
    let _ = dst.shutdown(Shutdown::Write);
}

fn reader_loop(
    src: TcpStream,
    tx: Sender<Pending>,
    mut timeline: LinkTimeline,
    direction: Direction,
    log: Option<&ProxyLog>,
) {
    let mut reader = MessageReader::new(&src);
    let mut last_at = 0;
    loop {
        let raw = match reader.next_raw() {
            Ok(Some(raw)) => raw,
            Ok(None) => break,
            Err(StreamError::Framing(e)) => {
                warn!("{}: framing lost ({e}), closing session", direction.as_str());
                let _ = src.shutdown(Shutdown::Both);
                break;
            }
            Err(e) => {
                debug!("{}: {e}", direction.as_str());
                break;
            }
        };
        let now = clock::now_ns();
        let kind = raw.msg_type();
        let exempt = kind.is_some_and(|k| k.is_control());
        let delivery = timeline.schedule(raw.bytes.len(), now, exempt);
        if let Some(log) = log {
            log.append(&ProxyLogRow {
                ts_ns: now,
                direction,
                msg_type: kind
                    .map(|k| k.name().to_string())
                    .unwrap_or_else(|| format!("0x{:02x}", raw.header.msg_type)),
                bytes: raw.bytes.len() as u64,
                delay_ms: match delivery {
                    Delivery::At(at) => Some((at - now) as f64 / 1e6),
                    Delivery::Lost => None,
                },
                lost: delivery == Delivery::Lost,
            });
        }
        if let Delivery::At(at) = delivery {
            last_at = at;
            if tx.send(Pending::Data { at, bytes: raw.bytes }).is_err() {
                break;
            }
        }
    }
    let _ = tx.send(Pending::Close { at: last_at });
}

fn pump(
    src: TcpStream,
    dst: TcpStream,
    timeline: LinkTimeline,
    direction: Direction,
    log: Option<Arc<ProxyLog>>,
) -> io::Result<JoinHandle<()>> {
    let (tx, rx) = unbounded();
    let writer = thread::Builder::new()
        .name(format!("proxy-{}-tx", direction.as_str()))
        .spawn(move || writer_loop(dst, rx))?;
    thread::Builder::new()
        .name(format!("proxy-{}-rx", direction.as_str()))
        .spawn(move || {
            reader_loop(src, tx, timeline, direction, log.as_deref());
            let _ = writer.join();
        })
}

fn run_session(
    client: TcpStream,
    forward: SocketAddr,
    profile: &NetProfile,
    session: u64,
    log: Option<Arc<ProxyLog>>,
) -> io::Result<()> {
    let server = match TcpStream::connect_timeout(&forward, CONNECT_TIMEOUT) {
        Ok(s) => s,
        Err(e) => {
            warn!("upstream {forward} unreachable ({e}); refusing client");
            let _ = client.shutdown(Shutdown::Both);
            return Err(e);
        }
    };
    client.set_nodelay(true)?;
    server.set_nodelay(true)?;
    let up = LinkTimeline::new(
        profile.uplink,
        stream_seed(profile.seed, Direction::Uplink, session),
    );
    let down = LinkTimeline::new(
        profile.downlink,
        stream_seed(profile.seed, Direction::Downlink, session),
    );
    let uplink = pump(client.try_clone()?, server.try_clone()?, up, Direction::Uplink, log.clone())?;
    let downlink = pump(server, client, down, Direction::Downlink, log.clone())?;
    let _ = uplink.join();
    let _ = downlink.join();
    if let Some(log) = &log {
        log.flush();
    }
    Ok(())
}

/// A bound proxy, ready to [`run`](Proxy::run).
pub struct Proxy {
    listener: TcpListener,
    forward: SocketAddr,
    profile: NetProfile,
    log: Option<Arc<ProxyLog>>,
}

impl Proxy {
    pub fn bind(
        listen: impl ToSocketAddrs,
        forward: SocketAddr,
        profile: NetProfile,
    ) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(listen)?,
            forward,
            profile,
            log: None,
        })
    }

    pub fn with_log(mut self, path: &Path) -> io::Result<Self> {
        self.log = Some(Arc::new(ProxyLog::create(path)?));
        Ok(self)
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept and relay sessions until `shutdown` is set (and a connection
    /// arrives to notice it).
    pub fn run(self, shutdown: Arc<AtomicBool>) -> io::Result<()> {
        let sessions = AtomicU64::new(0);
        let profile = Arc::new(self.profile);
        info!(
            "proxy {} -> {} with profile `{}` (seed {})",
            self.listener.local_addr()?,
            self.forward,
            profile.name,
            profile.seed
        );
        for conn in self.listener.incoming() {
            if shutdown.load(Ordering::SeqCst) {
                break;
            }
            let client = match conn {
                Ok(c) => c,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let session = sessions.fetch_add(1, Ordering::SeqCst);
            let profile = Arc::clone(&profile);
            let log = self.log.clone();
            let forward = self.forward;
            thread::Builder::new()
                .name(format!("proxy-session-{session}"))
                .spawn(move || {
                    if let Err(e) = run_session(client, forward, &profile, session, log) {
                        debug!("session {session} ended: {e}");
                    }
                })?;
        }
        if let Some(log) = &self.log {
            log.flush();
        }
        Ok(())
    }

    /// Run on a background thread.
    pub fn spawn(self) -> io::Result<ProxyHandle> {
        let addr = self.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&shutdown);
        let thread = thread::Builder::new()
            .name("proxy-accept".into())
            .spawn(move || {
                if let Err(e) = self.run(flag) {
                    warn!("proxy stopped: {e}");
                }
            })?;
        Ok(ProxyHandle {
            addr,
            shutdown,
            thread: Some(thread),
        })
    }
}

pub struct ProxyHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ProxyHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

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

impl Drop for ProxyHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

/// Convenience for log consumers that only have a directory.
pub fn default_log_path(dir: &Path) -> PathBuf {
    dir.join("proxy_log.csv")
}
