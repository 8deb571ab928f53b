//! Per-frame records and the quantities derived from them: RTT statistics,
//! per-second rates and bandwidth, drop rates.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DEFAULT_WARMUP_S: f64 = 2.0;
pub const DEFAULT_BUCKET_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    /// Not uploaded because the in-flight window was full.
    WindowDrop,
    /// Uploaded but no result arrived before it expired from the window.
    NetLoss,
    /// Still in flight when the session ended.
    Expired,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Completed => "completed",
            Self::WindowDrop => "window_drop",
            Self::NetLoss => "net_loss",
            Self::Expired => "expired",
        }
    }

    pub fn was_uploaded(self) -> bool {
        self != Self::WindowDrop
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What happened to one captured frame. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub capture_ts_ns: u64,
    pub rtt_ms: Option<f64>,
    pub server_proc_ms: Option<f64>,
    /// Full FRAME_UPLOAD message size; 0 when never uploaded.
    pub uplink_bytes: u64,
    /// Full response message size.
    pub downlink_bytes: Option<u64>,
    pub outcome: Outcome,
}

impl FrameRecord {
    pub fn dropped(frame_id: u64, capture_ts_ns: u64) -> Self {
        Self {
            frame_id,
            capture_ts_ns,
            rtt_ms: None,
            server_proc_ms: None,
            uplink_bytes: 0,
            downlink_bytes: None,
            outcome: Outcome::WindowDrop,
        }
    }
}

pub fn write_records(path: &Path, records: &[FrameRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<FrameRecord>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// Summary of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; absent for fewer than two values.
    pub std: Option<f64>,
    pub min: f64,
    pub max: f64,
    pub p50: f64,
    pub p99: f64,
}

impl Stats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            let ss: f64 = sorted.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Some(Self {
            n,
            mean,
            std,
            min: sorted[0],
            max: sorted[n - 1],
            p50: percentile(&sorted, 50.0),
            p99: percentile(&sorted, 99.0),
        })
    }

    /// `mean ± std` with the given precision.
    pub fn display(&self, decimals: usize) -> String {
        match self.std {
            Some(s) => format!("{:.*} ± {:.*}", decimals, self.mean, decimals, s),
            None => format!("{:.*}", decimals, self.mean),
        }
    }
}

/// Nearest-rank percentile of an ascending sample.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per-bucket counts and volumes, bucketed by capture time relative to the
/// first capture.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub bucket_s: f64,
    pub captured: Vec<u64>,
    pub sent: Vec<u64>,
    pub completed: Vec<u64>,
    pub ul_bytes: Vec<u64>,
    pub dl_bytes: Vec<u64>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.captured.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captured.is_empty()
    }

    fn rate(&self, v: &[u64]) -> Vec<f64> {
        v.iter().map(|&c| c as f64 / self.bucket_s).collect()
    }

    pub fn completed_rate(&self) -> Vec<f64> {
        self.rate(&self.completed)
    }

    pub fn send_rate(&self) -> Vec<f64> {
        self.rate(&self.sent)
    }

    fn mbps(&self, v: &[u64]) -> Vec<f64> {
        v.iter().map(|&b| b as f64 * 8.0 / 1e6 / self.bucket_s).collect()
    }

    pub fn ul_mbps(&self) -> Vec<f64> {
        self.mbps(&self.ul_bytes)
    }

    pub fn dl_mbps(&self) -> Vec<f64> {
        self.mbps(&self.dl_bytes)
    }
}

/// Bucket all records. The sums over buckets equal the record totals.
pub fn series(records: &[FrameRecord], bucket_s: f64) -> Series {
    let mut s = Series {
        bucket_s,
        ..Default::default()
    };
    let Some(t0) = records.iter().map(|r| r.capture_ts_ns).min() else {
        return s;
    };
    let bucket_ns = bucket_s * 1e9;
    for r in records {
        let k = ((r.capture_ts_ns - t0) as f64 / bucket_ns) as usize;
        if k >= s.captured.len() {
            for v in [&mut s.captured, &mut s.sent, &mut s.completed, &mut s.ul_bytes, &mut s.dl_bytes] {
                v.resize(k + 1, 0);
            }
        }
        s.captured[k] += 1;
        if r.outcome.was_uploaded() {
            s.sent[k] += 1;
            s.ul_bytes[k] += r.uplink_bytes;
        }
        if r.outcome == Outcome::Completed {
            s.completed[k] += 1;
            s.dl_bytes[k] += r.downlink_bytes.unwrap_or(0);
        }
    }
    s
}

/// Completed records per bucket.
pub fn rate_series(records: &[FrameRecord], bucket_s: f64) -> Vec<f64> {
    series(records, bucket_s).completed_rate()
}

/// Uplink and downlink Mbit/s per bucket.
pub fn bandwidth_series(records: &[FrameRecord], bucket_s: f64) -> (Vec<f64>, Vec<f64>) {
    let s = series(records, bucket_s);
    (s.ul_mbps(), s.dl_mbps())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateConfig {
    pub warmup_s: f64,
    pub bucket_s: f64,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            warmup_s: DEFAULT_WARMUP_S,
            bucket_s: DEFAULT_BUCKET_S,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub captured: u64,
    pub uploaded: u64,
    pub completed: u64,
    pub window_drop: u64,
    pub net_loss: u64,
    pub expired: u64,
}

impl Counts {
    pub fn of(records: &[FrameRecord]) -> Self {
        let mut c = Self::default();
        for r in records {
            c.captured += 1;
            if r.outcome.was_uploaded() {
                c.uploaded += 1;
            }
            match r.outcome {
                Outcome::Completed => c.completed += 1,
                Outcome::WindowDrop => c.window_drop += 1,
                Outcome::NetLoss => c.net_loss += 1,
                Outcome::Expired => c.expired += 1,
            }
        }
        c
    }

    pub fn dropped(&self) -> u64 {
        self.window_drop + self.net_loss + self.expired
    }

    pub fn drop_rate_pct(&self) -> Option<f64> {
        (self.captured > 0).then(|| 100.0 * self.dropped() as f64 / self.captured as f64)
    }
}

/// Evaluation quantities over the post-warmup part of a run.
///
/// Rate and bandwidth statistics are taken over whole buckets only; the
/// bucket containing the last capture is treated as partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub warmup_excluded_s: f64,
    pub bucket_s: f64,
    pub counts: Counts,
    pub drop_rate_pct: Option<f64>,
    pub rtt_ms: Option<Stats>,
    pub server_proc_ms: Option<Stats>,
    pub completed_rate: Option<Stats>,
    pub send_rate: Option<Stats>,
    pub ul_mbps: Option<Stats>,
    pub dl_mbps: Option<Stats>,
    /// No completed records after warmup.
    pub empty: bool,
}

pub fn aggregate(records: &[FrameRecord], cfg: &AggregateConfig) -> Aggregate {
    let t0 = records.iter().map(|r| r.capture_ts_ns).min().unwrap_or(0);
    let cutoff = t0 + (cfg.warmup_s * 1e9) as u64;
    let kept: Vec<FrameRecord> = records
        .iter()
        .filter(|r| r.capture_ts_ns >= cutoff)
        .cloned()
        .collect();
    let counts = Counts::of(&kept);
    let completed = || kept.iter().filter(|r| r.outcome == Outcome::Completed);
    let rtt: Vec<f64> = completed().filter_map(|r| r.rtt_ms).collect();
    let proc: Vec<f64> = completed().filter_map(|r| r.server_proc_ms).collect();

    // bucket the whole run so bucket boundaries do not depend on warmup
    let all = series(records, cfg.bucket_s);
    let first = (cfg.warmup_s / cfg.bucket_s).ceil() as usize;
    let last = all.len().saturating_sub(1);
    let window = |v: Vec<f64>| -> Option<Stats> {
        if first < last {
            Stats::from_values(&v[first..last])
        } else {
            None
        }
    };
    Aggregate {
        warmup_excluded_s: cfg.warmup_s,
        bucket_s: cfg.bucket_s,
        drop_rate_pct: counts.drop_rate_pct(),
        empty: counts.completed == 0,
        counts,
        rtt_ms: Stats::from_values(&rtt),
        server_proc_ms: Stats::from_values(&proc),
        completed_rate: window(all.completed_rate()),
        send_rate: window(all.send_rate()),
        ul_mbps: window(all.ul_mbps()),
        dl_mbps: window(all.dl_mbps()),
    }
}

/// `second,captured,sent,completed,ul_mbps,dl_mbps` per bucket.
pub fn write_series_csv(path: &Path, s: &Series) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_s", "captured", "sent", "completed", "ul_mbps", "dl_mbps"])?;
    let (ul, dl) = (s.ul_mbps(), s.dl_mbps());
    for k in 0..s.len() {
        w.write_record([
            format!("{}", k as f64 * s.bucket_s),
            s.captured[k].to_string(),
            s.sent[k].to_string(),
            s.completed[k].to_string(),
            format!("{:.6}", ul[k]),
            format!("{:.6}", dl[k]),
        ])?;
    }
    w.flush()?;
    Ok(())
}
