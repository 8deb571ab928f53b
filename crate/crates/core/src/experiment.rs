//! Experiment plans and the orchestrator that runs them.
//!
//! Each cell runs server, proxy and client as separate processes of the same
//! executable on loopback, one cell at a time. The children are driven
//! through these subcommands:
//!
//! ```text
//! serve  --port 0 --workers N --service-time-ms X --seed S --log FILE --exit-on-stdin-eof
//! proxy  --listen 127.0.0.1:0 --forward ADDR --profile FILE --log FILE --exit-on-stdin-eof
//! client --server ADDR --mode M --fps F --quality Q --window W --duration D --out FILE --summary FILE
//! ```
//!
//! `serve` and `proxy` print `LISTENING <addr>` on stdout once bound and shut
//! down cleanly when their stdin closes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::bounded;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::SessionSummary;
use crate::metrics::{aggregate, read_records, series, write_series_csv, Aggregate, AggregateConfig};
use crate::netem::{NetProfile, NetemError};
use crate::Mode;

pub const SEED_ENV: &str = "EDGELOOP_SEED";
pub const LISTENING_PREFIX: &str = "LISTENING ";
const STARTUP_TIMEOUT: Duration = Duration::from_secs(15);
const SHUTDOWN_TIMEOUT: Duration = Duration::from_secs(10);

pub const FRAMES_CSV: &str = "frames.csv";
pub const SERVER_LOG_CSV: &str = "server_log.csv";
pub const PROXY_LOG_CSV: &str = "proxy_log.csv";
pub const SERIES_CSV: &str = "series.csv";
pub const SESSION_JSON: &str = "session.json";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const PROFILE_JSON: &str = "profile.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const PLAN_JSON: &str = "plan.json";
pub const CELLS_DIR: &str = "cells";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Netem(#[from] NetemError),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("{role} failed: {reason}")]
    Child { role: &'static str, reason: String },
}

/// A built-in profile name, a path to a profile file, or an inline profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileRef {
    Named(String),
    Inline(NetProfile),
}

impl ProfileRef {
    pub fn resolve(&self) -> Result<NetProfile, NetemError> {
        match self {
            Self::Named(n) => NetProfile::resolve(n),
            Self::Inline(p) => {
                p.validate()?;
                Ok(p.clone())
            }
        }
    }

    fn label(&self) -> String {
        match self {
            Self::Named(n) => Path::new(n)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| n.clone()),
            Self::Inline(p) => p.name.clone(),
        }
    }
}

fn default_duration() -> f64 {
    60.0
}
fn default_seed() -> u64 {
    1
}
fn default_window() -> usize {
    crate::client::DEFAULT_WINDOW
}
fn default_fps() -> u32 {
    crate::client::DEFAULT_FPS
}
fn default_quality() -> u8 {
    crate::client::DEFAULT_QUALITY
}
fn default_service_time() -> f64 {
    crate::server::DEFAULT_SERVICE_TIME_MS
}
fn default_workers() -> usize {
    crate::server::DEFAULT_WORKERS
}
fn default_warmup() -> f64 {
    crate::metrics::DEFAULT_WARMUP_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Defaults to `<mode>-<profile>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub profile: ProfileRef,
    pub mode: Mode,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_fps")]
    pub fps: u32,
    #[serde(default = "default_quality")]
    pub quality: u8,
    #[serde(default = "default_service_time")]
    pub service_time_ms: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Expected completed-rate (±1/s), for cells that test throughput limits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_completed_rate: Option<f64>,
}

impl Cell {
    pub fn new(profile: &str, mode: Mode) -> Self {
        Self {
            name: None,
            profile: ProfileRef::Named(profile.to_owned()),
            mode,
            duration_s: default_duration(),
            seed: default_seed(),
            window: default_window(),
            fps: default_fps(),
            quality: default_quality(),
            service_time_ms: default_service_time(),
            workers: default_workers(),
            expect_completed_rate: None,
        }
    }

    pub fn name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.mode, self.profile.label()))
    }

    /// The profile this cell runs with, seeded by the cell.
    pub fn resolved_profile(&self) -> Result<NetProfile, NetemError> {
        Ok(self.profile.resolve()?.with_seed(self.seed))
    }

    /// Stable digest of the cell's full configuration.
    pub fn config_hash(&self) -> Result<String, ExperimentError> {
        let profile = self.resolved_profile()?;
        let doc = serde_json::json!({ "cell": self, "profile": profile });
        Ok(sha256_hex(serde_json::to_string(&doc)?.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub name: String,
    pub cells: Vec<Cell>,
    #[serde(default = "default_warmup")]
    pub warmup_s: f64,
    /// Scene file for all clients; the built-in corpus when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenes: Option<PathBuf>,
}

impl Default for ExperimentPlan {
    /// Two calibrated profiles × two modes, 60 s each.
    fn default() -> Self {
        let mut cells = Vec::new();
        for (i, (mode, profile)) in [
            (Mode::Control, "wifi-5ghz"),
            (Mode::Control, "5g-n77"),
            (Mode::Ar, "wifi-5ghz"),
            (Mode::Ar, "5g-n77"),
        ]
        .into_iter()
        .enumerate()
        {
            let mut c = Cell::new(profile, mode);
            c.seed = i as u64 + 1;
            cells.push(c);
        }
        Self {
            name: "default".into(),
            cells,
            warmup_s: default_warmup(),
            scenes: None,
        }
    }
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.cells.is_empty() {
            return Err(ExperimentError::Plan("no cells".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.cells {
            let name = c.name();
            if !seen.insert(name.clone()) {
                return Err(ExperimentError::Plan(format!("duplicate cell name `{name}`")));
            }
            if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(ExperimentError::Plan(format!("bad cell name `{name}`")));
            }
            if !(c.duration_s.is_finite() && c.duration_s > 0.0) {
                return Err(ExperimentError::Plan(format!("{name}: duration {}", c.duration_s)));
            }
            if c.window == 0 || !(1..=60).contains(&c.fps) || !(1..=100).contains(&c.quality) {
                return Err(ExperimentError::Plan(format!("{name}: bad client settings")));
            }
            if c.workers == 0 || !c.service_time_ms.is_finite() || c.service_time_ms < 0.0 {
                return Err(ExperimentError::Plan(format!("{name}: bad server settings")));
            }
            c.resolved_profile()
                .map_err(|e| ExperimentError::Plan(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Replace every cell's seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        for c in &mut self.cells {
            c.seed = seed;
        }
        self
    }

    /// Apply the seed override from the environment, if set.
    pub fn with_env_seed(self) -> Result<Self, ExperimentError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| ExperimentError::Plan(format!("{SEED_ENV}={v} is not a u64")))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub name: String,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub cell: Cell,
    pub profile: NetProfile,
    pub seed: u64,
    pub config_hash: String,
    /// SHA-256 of each file in the cell directory.
    pub files: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan_name: String,
    pub plan_hash: String,
    pub warmup_s: f64,
    pub cells: Vec<CellManifest>,
}

impl Manifest {
    pub fn load(bundle: &Path) -> Result<Self, ExperimentError> {
        Ok(serde_json::from_str(&fs::read_to_string(bundle.join(MANIFEST_JSON))?)?)
    }
}

pub fn cell_dir(bundle: &Path, cell: &str) -> PathBuf {
    bundle.join(CELLS_DIR).join(cell)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// How to launch the child roles.
#[derive(Debug, Clone)]
pub struct Launcher {
    /// Executable providing the `serve`, `proxy` and `client` subcommands.
    pub exe: PathBuf,
}

/// A child that is stopped by closing its stdin.
struct Supervised {
    role: &'static str,
    child: Child,
    stdin: Option<ChildStdin>,
    addr: SocketAddr,
}

impl Supervised {
    fn start(role: &'static str, mut cmd: Command, stderr: &Path) -> Result<Self, ExperimentError> {
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(fs::File::create(stderr)?)
            .spawn()
            .map_err(|e| ExperimentError::Child {
                role,
                reason: format!("spawn: {e}"),
            })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = bounded(1);
        thread::spawn(move || {
            let mut lines = BufReader::new(stdout).lines();
            let addr = lines.find_map(|l| {
                l.ok()?
                    .strip_prefix(LISTENING_PREFIX)
                    .and_then(|a| a.trim().parse::<SocketAddr>().ok())
            });
            let _ = tx.send(addr);
            // keep draining so the child never blocks on a full pipe
            for _ in lines {}
        });
        let mut me = Self {
            role,
            child,
            stdin,
            addr: "0.0.0.0:0".parse().unwrap(),
        };
        match rx.recv_timeout(STARTUP_TIMEOUT) {
            Ok(Some(addr)) => {
                me.addr = addr;
                Ok(me)
            }
            _ => {
                me.kill();
                Err(ExperimentError::Child {
                    role,
                    reason: "did not report a listening address".into(),
                })
            }
        }
    }

    /// Close stdin and wait; kill if it does not exit in time.
    fn stop(mut self) -> Result<(), ExperimentError> {
        drop(self.stdin.take());
        match wait_timeout(&mut self.child, SHUTDOWN_TIMEOUT)? {
            Some(status) if status.success() => Ok(()),
            Some(status) => Err(ExperimentError::Child {
                role: self.role,
                reason: format!("exited with {status}"),
            }),
            None => {
                self.kill();
                Err(ExperimentError::Child {
                    role: self.role,
                    reason: "did not shut down".into(),
                })
            }
        }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Supervised {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            self.kill();
        }
    }
}

fn wait_timeout(child: &mut Child, timeout: Duration) -> io::Result<Option<std::process::ExitStatus>> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(s) = child.try_wait()? {
            return Ok(Some(s));
        }
        if Instant::now() >= deadline {
            return Ok(None);
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn run_cell(
    launcher: &Launcher,
    plan: &ExperimentPlan,
    cell: &Cell,
    dir: &Path,
) -> Result<(), ExperimentError> {
    let profile = cell.resolved_profile()?;
    let profile_path = dir.join(PROFILE_JSON);
    fs::write(&profile_path, profile.to_json())?;

    let mut serve = Command::new(&launcher.exe);
    serve
        .arg("serve")
        .args(["--port", "0"])
        .args(["--workers", &cell.workers.to_string()])
        .args(["--service-time-ms", &cell.service_time_ms.to_string()])
        .args(["--seed", &cell.seed.to_string()])
        .arg("--log")
        .arg(dir.join(SERVER_LOG_CSV))
        .arg("--exit-on-stdin-eof");
    let server = Supervised::start("server", serve, &dir.join("server.stderr.log"))?;

    let mut proxy_cmd = Command::new(&launcher.exe);
    proxy_cmd
        .arg("proxy")
        .args(["--listen", "127.0.0.1:0"])
        .args(["--forward", &server.addr.to_string()])
        .arg("--profile")
        .arg(&profile_path)
        .arg("--log")
        .arg(dir.join(PROXY_LOG_CSV))
        .arg("--exit-on-stdin-eof");
    let proxy = Supervised::start("proxy", proxy_cmd, &dir.join("proxy.stderr.log"))?;

    let mut client = Command::new(&launcher.exe);
    client
        .arg("client")
        .args(["--server", &proxy.addr.to_string()])
        .args(["--mode", cell.mode.as_str()])
        .args(["--fps", &cell.fps.to_string()])
        .args(["--quality", &cell.quality.to_string()])
        .args(["--window", &cell.window.to_string()])
        .args(["--duration", &cell.duration_s.to_string()])
        .arg("--out")
        .arg(dir.join(FRAMES_CSV))
        .arg("--summary")
        .arg(dir.join(SESSION_JSON));
    if let Some(scenes) = &plan.scenes {
        client.arg("--scenes").arg(scenes);
    }
    let mut child = client
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(fs::File::create(dir.join("client.stderr.log"))?)
        .spawn()
        .map_err(|e| ExperimentError::Child {
            role: "client",
            reason: format!("spawn: {e}"),
        })?;
    let limit = Duration::from_secs_f64(cell.duration_s) + Duration::from_secs(30);
    let status = match wait_timeout(&mut child, limit)? {
        Some(s) => s,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ExperimentError::Child {
                role: "client",
                reason: "timed out".into(),
            });
        }
    };
    let stopped = (proxy.stop(), server.stop());
    if !status.success() {
        return Err(ExperimentError::Child {
            role: "client",
            reason: format!("exited with {status}"),
        });
    }
    stopped.0?;
    stopped.1?;

    let records = read_records(&dir.join(FRAMES_CSV))?;
    let agg_cfg = AggregateConfig {
        warmup_s: plan.warmup_s,
        ..Default::default()
    };
    let agg = aggregate(&records, &agg_cfg);
    fs::write(dir.join(AGGREGATE_JSON), serde_json::to_string_pretty(&agg)?)?;
    write_series_csv(&dir.join(SERIES_CSV), &series(&records, agg_cfg.bucket_s))?;
    Ok(())
}

fn hash_files(dir: &Path) -> io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            out.insert(name, sha256_hex(&fs::read(entry.path())?));
        }
    }
    Ok(out)
}

/// Run every cell in order and write the bundle. Failed cells are recorded
/// in the manifest and do not stop the remaining ones.
pub fn run_experiment(
    plan: &ExperimentPlan,
    out: &Path,
    launcher: &Launcher,
) -> Result<Manifest, ExperimentError> {
    plan.validate()?;
    fs::create_dir_all(out.join(CELLS_DIR))?;
    let plan_text = serde_json::to_string_pretty(plan)?;
    fs::write(out.join(PLAN_JSON), &plan_text)?;
    let mut cells = Vec::new();
    for cell in &plan.cells {
        let name = cell.name();
        let dir = cell_dir(out, &name);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        info!("cell {name}: {} s, seed {}", cell.duration_s, cell.seed);
        let started = Instant::now();
        let result = run_cell(launcher, plan, cell, &dir);
        if let Err(e) = &result {
            warn!("cell {name} failed: {e}");
        }
        cells.push(CellManifest {
            status: if result.is_ok() {
                CellStatus::Ok
            } else {
                CellStatus::Failed
            },
            error: result.err().map(|e| e.to_string()),
            profile: cell.resolved_profile()?,
            seed: cell.seed,
            config_hash: cell.config_hash()?,
            files: hash_files(&dir)?,
            wall_time_s: started.elapsed().as_secs_f64(),
            name,
            cell: cell.clone(),
        });
    }
    let manifest = Manifest {
        plan_name: plan.name.clone(),
        plan_hash: sha256_hex(plan_text.as_bytes()),
        warmup_s: plan.warmup_s,
        cells,
    };
    fs::write(out.join(MANIFEST_JSON), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A completed bundle loaded back from disk.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub cells: Vec<CellData>,
}

#[derive(Debug, Clone)]
pub struct CellData {
    pub manifest: CellManifest,
    pub aggregate: Option<Aggregate>,
    pub series: Option<crate::metrics::Series>,
    pub session: Option<SessionSummaryLite>,
}

/// The session fields the report needs, without the per-frame records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummaryLite {
    pub orphans: u64,
    pub echo_errors: u64,
    pub corrupt_messages: u64,
    pub cadence_p99_ms: f64,
    pub aborted: bool,
}

impl From<&SessionSummary> for SessionSummaryLite {
    fn from(s: &SessionSummary) -> Self {
        Self {
            orphans: s.orphans,
            echo_errors: s.echo_errors,
            corrupt_messages: s.corrupt_messages,
            cadence_p99_ms: s.cadence_p99_ms,
            aborted: s.aborted,
        }
    }
}

impl Bundle {
    pub fn load(root: &Path) -> Result<Self, ExperimentError> {
        let manifest = Manifest::load(root)?;
        let cells = manifest
            .cells
            .iter()
            .map(|m| {
                let dir = cell_dir(root, &m.name);
                let ok = m.status == CellStatus::Ok;
                let aggregate = ok
                    .then(|| fs::read_to_string(dir.join(AGGREGATE_JSON)).ok())
                    .flatten()
                    .and_then(|t| serde_json::from_str(&t).ok());
                let series = ok
                    .then(|| read_series_csv(&dir.join(SERIES_CSV)).ok())
                    .flatten();
                let session = fs::read_to_string(dir.join(SESSION_JSON))
                    .ok()
                    .and_then(|t| serde_json::from_str(&t).ok());
                CellData {
                    manifest: m.clone(),
                    aggregate,
                    series,
                    session,
                }
            })
            .collect();
        Ok(Self {
            root: root.to_owned(),
            manifest,
            cells,
        })
    }

    pub fn cell(&self, name: &str) -> Option<&CellData> {
        self.cells.iter().find(|c| c.manifest.name == name)
    }
}

/// Inverse of [`write_series_csv`].
pub fn read_series_csv(path: &Path) -> Result<crate::metrics::Series, ExperimentError> {
    #[derive(Deserialize)]
    struct Row {
        t_s: f64,
        captured: u64,
        sent: u64,
        completed: u64,
        ul_mbps: f64,
        dl_mbps: f64,
    }
    let rows = csv::Reader::from_path(path)?
        .deserialize()
        .collect::<Result<Vec<Row>, _>>()?;
    let bucket_s = match rows.as_slice() {
        [a, b, ..] => b.t_s - a.t_s,
        _ => crate::metrics::DEFAULT_BUCKET_S,
    };
    let bytes = |mbps: f64| (mbps * 1e6 / 8.0 * bucket_s).round() as u64;
    let s = crate::metrics::Series {
        bucket_s,
        captured: rows.iter().map(|r| r.captured).collect(),
        sent: rows.iter().map(|r| r.sent).collect(),
        completed: rows.iter().map(|r| r.completed).collect(),
        ul_bytes: rows.iter().map(|r| bytes(r.ul_mbps)).collect(),
        dl_bytes: rows.iter().map(|r| bytes(r.dl_mbps)).collect(),
    };
    Ok(s)
}
