use std::io::{self, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use log::error;

use edgeloop::client::{run_client, ClientConfig};
use edgeloop::detect::{serve_detector, StubDetector};
use edgeloop::experiment::{run_experiment, Bundle, ExperimentPlan, Launcher, LISTENING_PREFIX, SEED_ENV};
use edgeloop::imaging::parse_scene_file;
use edgeloop::metrics::{aggregate, write_records, AggregateConfig};
use edgeloop::netem::proxy::Proxy;
use edgeloop::netem::NetProfile;
use edgeloop::protocol::{DEFAULT_PROXY_PORT, DEFAULT_SERVER_PORT};
use edgeloop::report::render_report;
use edgeloop::server::{DetectorKind, Server, ServerConfig};
use edgeloop::{GripPolicy, Mode};

#[derive(Parser)]
#[command(name = "edgeloop", version, about = "Edge-offloaded vision control loop")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the edge server.
    Serve(ServeArgs),
    /// Run the link-emulating proxy.
    Proxy(ProxyArgs),
    /// Run one client session.
    Client(ClientArgs),
    /// Run an experiment plan and write a result bundle.
    Experiment(ExperimentArgs),
    /// Render tables and figures from a result bundle.
    Report(ReportArgs),
    /// Serve the stub detector over stdin/stdout.
    #[command(hide = true)]
    DetectorWorker,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, default_value_t = DEFAULT_SERVER_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Grip policy JSON file.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// `stub` or `external:<command>`.
    #[arg(long, default_value = "stub")]
    detector: String,
    #[arg(long, default_value_t = edgeloop::server::DEFAULT_SERVICE_TIME_MS)]
    service_time_ms: f64,
    #[arg(long, default_value_t = edgeloop::server::DEFAULT_SERVICE_TIME_STD_MS)]
    service_time_std_ms: f64,
    #[arg(long, default_value_t = edgeloop::server::DEFAULT_WORKERS)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-frame server log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, hide = true)]
    exit_on_stdin_eof: bool,
}

#[derive(clap::Args)]
struct ProxyArgs {
    #[arg(long, default_value_t = SocketAddr::from(([127, 0, 0, 1], DEFAULT_PROXY_PORT)))]
    listen: SocketAddr,
    #[arg(long, default_value_t = SocketAddr::from(([127, 0, 0, 1], DEFAULT_SERVER_PORT)))]
    forward: SocketAddr,
    /// Built-in profile name or profile JSON file.
    #[arg(long, default_value = "ideal")]
    profile: String,
    /// Override the profile's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-message proxy log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, hide = true)]
    exit_on_stdin_eof: bool,
}

#[derive(clap::Args)]
struct ClientArgs {
    #[arg(long, default_value_t = SocketAddr::from(([127, 0, 0, 1], DEFAULT_PROXY_PORT)))]
    server: SocketAddr,
    #[arg(long, default_value = "control")]
    mode: Mode,
    #[arg(long, default_value_t = edgeloop::client::DEFAULT_FPS)]
    fps: u32,
    #[arg(long, default_value_t = edgeloop::client::DEFAULT_QUALITY)]
    quality: u8,
    #[arg(long, default_value_t = edgeloop::client::DEFAULT_WINDOW)]
    window: usize,
    /// Session length in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Scene file; the built-in corpus when absent.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Per-frame records (CSV).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Session summary (JSON).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Pad uploaded JPEGs to this many bytes (0 = no padding).
    #[arg(long, default_value_t = edgeloop::client::DEFAULT_UPLOAD_PAD)]
    upload_pad: usize,
    /// Requested response body size (default depends on mode).
    #[arg(long)]
    response_pad: Option<u32>,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    /// Plan JSON; the two-profile × two-mode default when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override every cell's duration (seconds).
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Output directory; the bundle's `report/` when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

type AnyError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Serve(a) => serve(a).map(|_| true),
        Cmd::Proxy(a) => proxy(a).map(|_| true),
        Cmd::Client(a) => client(a).map(|_| true),
        Cmd::Experiment(a) => experiment(a),
        Cmd::Report(a) => report(&a.bundle, a.out.as_deref()),
        Cmd::DetectorWorker => serve_detector(&StubDetector, io::stdin(), io::stdout())
            .map(|_| true)
            .map_err(Into::into),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}

fn announce(addr: SocketAddr) -> io::Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{LISTENING_PREFIX}{addr}")?;
    out.flush()
}

/// Block until stdin closes, or forever.
fn wait_for_stop(on_stdin_eof: bool) {
    if on_stdin_eof {
        let mut sink = Vec::new();
        let _ = io::stdin().read_to_end(&mut sink);
    } else {
        loop {
            std::thread::park();
        }
    }
}

fn serve(a: ServeArgs) -> Result<(), AnyError> {
    let policy = match &a.policy {
        Some(p) => GripPolicy::from_json(&std::fs::read_to_string(p)?)?,
        None => GripPolicy::default(),
    };
    let config = ServerConfig {
        workers: a.workers,
        detector: DetectorKind::parse(&a.detector)?,
        policy,
        service_time_ms: a.service_time_ms,
        service_time_std_ms: a.service_time_std_ms,
        seed: a.seed,
        log_path: a.log,
    };
    let handle = Server::bind((a.bind.as_str(), a.port), config)?.spawn()?;
    announce(handle.addr())?;
    wait_for_stop(a.exit_on_stdin_eof);
    handle.stop();
    Ok(())
}

fn proxy(a: ProxyArgs) -> Result<(), AnyError> {
    let mut profile = NetProfile::resolve(&a.profile)?;
    if let Some(seed) = a.seed {
        profile = profile.with_seed(seed);
    }
    let mut proxy = Proxy::bind(a.listen, a.forward, profile)?;
    if let Some(log) = &a.log {
        proxy = proxy.with_log(log)?;
    }
    let handle = proxy.spawn()?;
    announce(handle.addr())?;
    wait_for_stop(a.exit_on_stdin_eof);
    handle.stop();
    Ok(())
}

fn client(a: ClientArgs) -> Result<(), AnyError> {
    let mut config = ClientConfig {
        fps: a.fps,
        quality: a.quality,
        mode: a.mode,
        window: a.window,
        duration: Duration::from_secs_f64(a.duration),
        upload_pad_bytes: a.upload_pad,
        response_pad_bytes: a.response_pad,
        ..ClientConfig::default()
    };
    if let Some(path) = &a.scenes {
        config.scenes = parse_scene_file(&std::fs::read_to_string(path)?)?;
    }
    let summary = run_client(&config, a.server)?;
    if let Some(out) = &a.out {
        write_records(out, &summary.records)?;
    }
    if let Some(path) = &a.summary {
        std::fs::write(path, serde_json::to_string_pretty(&summary)?)?;
    }
    let agg = aggregate(&summary.records, &AggregateConfig::default());
    let fmt = |s: Option<edgeloop::metrics::Stats>| s.map_or("—".to_owned(), |s| s.display(2));
    println!(
        "captured {} completed {} window_drop {} net_loss {} expired {} drop {:.2}%",
        summary.counts.captured,
        summary.counts.completed,
        summary.counts.window_drop,
        summary.counts.net_loss,
        summary.counts.expired,
        agg.drop_rate_pct.unwrap_or(f64::NAN)
    );
    println!(
        "rtt {} ms, server {} ms, rate {} /s, UL {} Mbit/s, DL {} Mbit/s",
        fmt(agg.rtt_ms),
        fmt(agg.server_proc_ms),
        fmt(agg.completed_rate),
        fmt(agg.ul_mbps),
        fmt(agg.dl_mbps)
    );
    if summary.aborted {
        return Err("server connection lost during the session".into());
    }
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<bool, AnyError> {
    let mut plan = match &a.plan {
        Some(p) => ExperimentPlan::load(p)?,
        None => ExperimentPlan::default(),
    };
    if std::env::var_os(SEED_ENV).is_some() {
        plan = plan.with_env_seed()?;
    }
    if let Some(d) = a.duration {
        for c in &mut plan.cells {
            c.duration_s = d;
        }
    }
    let launcher = Launcher {
        exe: std::env::current_exe()?,
    };
    run_experiment(&plan, &a.out, &launcher)?;
    report(&a.out, None)
}

fn report(bundle: &Path, out: Option<&Path>) -> Result<bool, AnyError> {
    let b = Bundle::load(bundle)?;
    let r = render_report(&b);
    let out = out.map_or_else(|| bundle.join("report"), Path::to_path_buf);
    r.write(&out)?;
    for t in &r.targets {
        println!("{}", t.line());
    }
    println!("report written to {}", out.display());
    Ok(r.all_pass())
}
