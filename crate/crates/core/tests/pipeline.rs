use std::io::Write;
use std::net::TcpStream;
use std::sync::Mutex;
use std::time::Duration;

use edgeloop::client::{run_client, ClientConfig};
use edgeloop::imaging::{encode_image, generate_frame, parse_scene_line};
use edgeloop::metrics::{aggregate, AggregateConfig, Outcome};
use edgeloop::netem::proxy::{read_proxy_log, Proxy};
use edgeloop::netem::{DirectionModel, NetProfile};
use edgeloop::protocol::{
    encode_message, FrameUpload, Hello, MessageReader, MsgType, ReadEvent, ResultPayload,
    CODEC_JPEG,
};
use edgeloop::server::{read_server_log, Server, ServerConfig};
use edgeloop::{Mode, WireMessage};

// Timing-sensitive tests share one core; run them one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

fn start_server(config: ServerConfig) -> edgeloop::server::ServerHandle {
    Server::bind("127.0.0.1:0", config).unwrap().spawn().unwrap()
}

fn upload(frame_id: u64, send_ts: u64) -> WireMessage {
    let scene = parse_scene_line("1;cup:100,100,80,80").unwrap();
    let frame = generate_frame(&scene, frame_id, send_ts - 1).unwrap();
    WireMessage::frame_upload(
        frame_id,
        &FrameUpload {
            capture_ts: send_ts - 1,
            send_ts,
            codec: CODEC_JPEG,
            image: encode_image(&frame, 90).unwrap().bytes,
        },
    )
}

fn connect(addr: std::net::SocketAddr, mode: Mode) -> (TcpStream, MessageReader<TcpStream>) {
    let mut s = TcpStream::connect(addr).unwrap();
    let hello = Hello {
        mode,
        quality: 90,
        width: 640,
        height: 480,
        fps: 30,
        pad_target_bytes: 750,
    };
    s.write_all(&encode_message(&WireMessage::hello(&hello)).unwrap()).unwrap();
    let mut r = MessageReader::new(s.try_clone().unwrap());
    match r.next_message().unwrap() {
        Some(ReadEvent::Message(m)) => assert_eq!(m.msg_type, MsgType::HelloAck),
        other => panic!("{other:?}"),
    }
    (s, r)
}

fn next(r: &mut MessageReader<TcpStream>) -> WireMessage {
    match r.next_message().unwrap() {
        Some(ReadEvent::Message(m)) => m,
        other => panic!("{other:?}"),
    }
}

#[test]
fn server_echoes_and_orders_responses() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("server.csv");
    let server = start_server(ServerConfig {
        workers: 2,
        log_path: Some(log.clone()),
        ..Default::default()
    });
    let (mut s, mut r) = connect(server.addr(), Mode::Control);
    let msgs: Vec<_> = (0..20).map(|i| upload(i, 1_000 + i * 77)).collect();
    for m in &msgs {
        s.write_all(&encode_message(m).unwrap()).unwrap();
    }
    for m in &msgs {
        let resp = next(&mut r);
        assert_eq!(resp.frame_id, m.frame_id);
        assert_eq!(resp.msg_type, MsgType::ControlResult);
        assert_eq!(resp.payload.len(), 770);
        assert_eq!(&resp.payload[..16], &m.payload[..16]);
        let p = ResultPayload::parse(&resp.payload).unwrap();
        assert!(p.echo.server_proc_us >= 13_000);
    }
    s.write_all(&encode_message(&WireMessage::bye()).unwrap()).unwrap();
    assert_eq!(next(&mut r).msg_type, MsgType::Bye);
    drop(s);
    server.stop();
    let rows = read_server_log(&log).unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.proc_us >= 13_000 && r.mode == Mode::Control));
}

#[test]
fn server_skips_bad_frames_and_closes_on_unknown_type() {
    let _g = serial();
    let server = start_server(ServerConfig::default());
    let (mut s, mut r) = connect(server.addr(), Mode::Control);
    let bad = WireMessage::frame_upload(
        1,
        &FrameUpload {
            capture_ts: 0,
            send_ts: 0,
            codec: CODEC_JPEG,
            image: b"not a jpeg".to_vec(),
        },
    );
    s.write_all(&encode_message(&bad).unwrap()).unwrap();
    s.write_all(&encode_message(&upload(2, 50)).unwrap()).unwrap();
    // flip a payload bit: the message is skipped, the stream survives
    let mut corrupt = encode_message(&upload(3, 60)).unwrap();
    corrupt[100] ^= 0x10;
    s.write_all(&corrupt).unwrap();
    s.write_all(&encode_message(&upload(4, 70)).unwrap()).unwrap();
    assert_eq!(next(&mut r).frame_id, 2);
    assert_eq!(next(&mut r).frame_id, 4);
    let mut unknown = encode_message(&WireMessage::bye()).unwrap();
    unknown[5] = 0x55;
    s.write_all(&unknown).unwrap();
    assert_eq!(next(&mut r).msg_type, MsgType::Bye);
    assert!(r.next_message().unwrap().is_none());
    assert_eq!(server.stats().frame_errors.load(std::sync::atomic::Ordering::SeqCst), 1);
    assert_eq!(server.stats().corrupt_messages.load(std::sync::atomic::Ordering::SeqCst), 1);
}

#[test]
fn server_sustains_thirty_fps_with_two_workers() {
    let _g = serial();
    let server = start_server(ServerConfig::default());
    let (mut s, mut r) = connect(server.addr(), Mode::Control);
    let n = 90u64;
    let t0 = std::time::Instant::now();
    let writer = {
        let mut s = s.try_clone().unwrap();
        std::thread::spawn(move || {
            for i in 0..n {
                s.write_all(&encode_message(&upload(i, 1_000 + i)).unwrap()).unwrap();
            }
        })
    };
    for i in 0..n {
        assert_eq!(next(&mut r).frame_id, i);
    }
    let fps = n as f64 / t0.elapsed().as_secs_f64();
    writer.join().unwrap();
    s.write_all(&encode_message(&WireMessage::bye()).unwrap()).unwrap();
    assert!(fps >= 30.0, "{fps:.1} fps");
}

fn quick_client(mode: Mode, secs: u64) -> ClientConfig {
    ClientConfig {
        mode,
        duration: Duration::from_secs(secs),
        ..Default::default()
    }
}

#[test]
fn direct_control_session() {
    let _g = serial();
    let server = start_server(ServerConfig::default());
    let summary = run_client(&quick_client(Mode::Control, 4), server.addr()).unwrap();
    assert!(summary.is_conserved());
    assert_eq!(summary.counts.captured, 120);
    assert!(!summary.aborted);
    let agg = aggregate(&summary.records, &AggregateConfig { warmup_s: 1.0, ..Default::default() });
    let rtt = agg.rtt_ms.unwrap();
    let proc = agg.server_proc_ms.unwrap();
    eprintln!("direct control: rtt {rtt:?} proc {:?} drops {:?}", proc.mean, agg.drop_rate_pct);
    assert!(rtt.mean - proc.mean < 3.0, "rtt {} proc {}", rtt.mean, proc.mean);
    assert!(rtt.mean < 20.0);
    assert_eq!(summary.counts.window_drop, 0);
    assert!(summary.cadence_p99_ms < 2.0, "{}", summary.cadence_p99_ms);
    assert!(summary.records.iter().all(|r| r.outcome != Outcome::Completed
        || r.uplink_bytes == 52_041 && r.downlink_bytes == Some(794)));
    assert!(summary.grips.values().sum::<u64>() == summary.counts.completed);
}

#[test]
fn direct_ar_session() {
    let _g = serial();
    let server = start_server(ServerConfig::default());
    let summary = run_client(&quick_client(Mode::Ar, 4), server.addr()).unwrap();
    assert!(summary.is_conserved());
    let agg = aggregate(&summary.records, &AggregateConfig { warmup_s: 1.0, ..Default::default() });
    let rtt = agg.rtt_ms.unwrap().mean;
    let proc = agg.server_proc_ms.unwrap().mean;
    eprintln!("direct ar: rtt {rtt:.2} proc {proc:.2}");
    assert!(rtt - proc < 3.0, "rtt {rtt} proc {proc}");
    assert!((13.0..16.0).contains(&proc));
    assert!(summary.records.iter().all(|r| r.outcome != Outcome::Completed
        || r.downlink_bytes == Some(56_044)));
}

#[test]
fn ideal_proxy_is_transparent() {
    let _g = serial();
    let server = start_server(ServerConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("proxy.csv");
    let proxy = Proxy::bind("127.0.0.1:0", server.addr(), NetProfile::ideal())
        .unwrap()
        .with_log(&log)
        .unwrap()
        .spawn()
        .unwrap();
    let cfg = quick_client(Mode::Control, 3);
    let agg_cfg = AggregateConfig { warmup_s: 1.0, ..Default::default() };
    let via = run_client(&cfg, proxy.addr()).unwrap();
    let direct = run_client(&cfg, server.addr()).unwrap();
    let a = aggregate(&via.records, &agg_cfg).rtt_ms.unwrap().mean;
    let b = aggregate(&direct.records, &agg_cfg).rtt_ms.unwrap().mean;
    eprintln!("ideal proxy {a:.2} direct {b:.2}");
    assert!((a - b).abs() < 1.0, "proxy {a} direct {b}");
    proxy.stop();
    let rows = read_proxy_log(&log).unwrap();
    assert!(rows.iter().all(|r| !r.lost));
    let uploads = rows.iter().filter(|r| r.msg_type == "FRAME_UPLOAD").count() as u64;
    assert_eq!(uploads, via.counts.uploaded);
}

#[test]
fn total_uplink_loss_passes_only_session_control() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let server_log = dir.path().join("server.csv");
    let server = start_server(ServerConfig {
        log_path: Some(server_log.clone()),
        ..Default::default()
    });
    let mut profile = NetProfile::ideal();
    profile.uplink = DirectionModel {
        loss_prob: 1.0,
        ..DirectionModel::IDEAL
    };
    let proxy = Proxy::bind("127.0.0.1:0", server.addr(), profile)
        .unwrap()
        .spawn()
        .unwrap();
    let summary = run_client(&quick_client(Mode::Control, 2), proxy.addr()).unwrap();
    assert!(summary.is_conserved());
    assert_eq!(summary.counts.completed, 0);
    assert!(summary.counts.net_loss > 0);
    assert_eq!(summary.counts.uploaded, summary.counts.net_loss + summary.counts.expired);
    proxy.stop();
    server.stop();
    assert!(read_server_log(&server_log).unwrap().is_empty());
}

#[test]
fn fixed_delay_is_applied_per_direction() {
    let _g = serial();
    let server = start_server(ServerConfig::default());
    let mut profile = NetProfile::ideal();
    profile.uplink.base_delay_ms = 20.0;
    profile.downlink.base_delay_ms = 10.0;
    let proxy = Proxy::bind("127.0.0.1:0", server.addr(), profile)
        .unwrap()
        .spawn()
        .unwrap();
    let s = run_client(&quick_client(Mode::Control, 3), proxy.addr()).unwrap();
    let agg = aggregate(&s.records, &AggregateConfig { warmup_s: 1.0, ..Default::default() });
    let extra = agg.rtt_ms.unwrap().mean - agg.server_proc_ms.unwrap().mean;
    eprintln!("fixed delay extra {extra:.2}");
    assert!((30.0..33.0).contains(&extra), "{extra}");
}
