//! Pass/fail targets evaluated over a result bundle.

use serde::{Deserialize, Serialize};

use crate::experiment::{Bundle, CellData, CellStatus};
use crate::metrics::Aggregate;
use crate::netem::calibrate::reference_rtt;
use crate::Mode;

pub const RTT_TOLERANCE: f64 = 0.15;
pub const RTT_CEILING_MS: f64 = 125.0;
pub const CONTROL_RTT_CEILING_MS: f64 = 100.0;
/// Mean server time may exceed the configured service time by this much.
pub const SERVER_MEAN_SLACK_MS: f64 = 3.0;
pub const SERVER_P99_CEILING_MS: f64 = 33.0;
pub const CONTROL_MIN_RATE: f64 = 28.0;
pub const AR_MIN_RATE: f64 = 20.0;
pub const CONTROL_RESPONSE_MBPS: (f64, f64) = (0.14, 0.24);
pub const CONTROL_FRAME_MBPS: (f64, f64) = (12.0, 15.0);
pub const AR_MBPS: (f64, f64) = (10.0, 14.0);
pub const EXPECTED_RATE_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCheck {
    pub id: String,
    pub pass: bool,
    pub detail: String,
}

impl TargetCheck {
    fn new(id: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            pass,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.detail
        )
    }
}

/// A cell run with the default client loop (fps 30, window 4) and no
/// explicit throughput expectation.
fn is_standard(c: &CellData) -> bool {
    let cell = &c.manifest.cell;
    cell.fps == 30 && cell.window == 4 && cell.expect_completed_rate.is_none()
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&v)
}

fn mean(s: &Option<crate::metrics::Stats>) -> Option<f64> {
    s.as_ref().map(|s| s.mean)
}

fn cell_checks(c: &CellData, agg: &Aggregate, out: &mut Vec<TargetCheck>) {
    let name = &c.manifest.name;
    let cell = &c.manifest.cell;
    let profile = c.manifest.profile.name.as_str();
    let rtt = mean(&agg.rtt_ms);
    let rate = mean(&agg.completed_rate);

    if let (Some(reference), Some(rtt), true) = (reference_rtt(profile, cell.mode), rtt, is_standard(c)) {
        let err = (rtt - reference) / reference;
        out.push(TargetCheck::new(
            format!("calibration/{name}"),
            err.abs() <= RTT_TOLERANCE,
            format!("mean RTT {rtt:.2} ms vs reference {reference:.2} ms ({:+.1}%)", err * 100.0),
        ));
    }

    if is_standard(c) {
        let ceiling = match cell.mode {
            Mode::Control => CONTROL_RTT_CEILING_MS,
            Mode::Ar => RTT_CEILING_MS,
        };
        out.push(match rtt {
            Some(rtt) => TargetCheck::new(
                format!("natural-control/{name}"),
                rtt < ceiling,
                format!("mean RTT {rtt:.2} ms < {ceiling} ms"),
            ),
            None => TargetCheck::new(format!("natural-control/{name}"), false, "no completed frames"),
        });
    }

    let floor = cell.service_time_ms;
    out.push(match &agg.server_proc_ms {
        Some(s) => TargetCheck::new(
            format!("server-budget/{name}"),
            s.mean >= floor && s.mean <= floor + SERVER_MEAN_SLACK_MS && s.p99 < SERVER_P99_CEILING_MS,
            format!(
                "mean {:.2} ms in [{floor}, {}], p99 {:.2} ms < {SERVER_P99_CEILING_MS}",
                s.mean,
                floor + SERVER_MEAN_SLACK_MS,
                s.p99
            ),
        ),
        None => TargetCheck::new(format!("server-budget/{name}"), false, "no completed frames"),
    });

    if is_standard(c) {
        let min = match cell.mode {
            Mode::Control => CONTROL_MIN_RATE,
            Mode::Ar => AR_MIN_RATE,
        };
        out.push(TargetCheck::new(
            format!("throughput/{name}"),
            rate.is_some_and(|r| r >= min),
            format!("completed-rate {} /s ≥ {min}", fmt_opt(rate)),
        ));
        let (ul, dl) = (mean(&agg.ul_mbps), mean(&agg.dl_mbps));
        let (ul_band, dl_band) = match cell.mode {
            Mode::Control => (CONTROL_FRAME_MBPS, CONTROL_RESPONSE_MBPS),
            Mode::Ar => (AR_MBPS, AR_MBPS),
        };
        out.push(TargetCheck::new(
            format!("bandwidth/{name}"),
            ul.is_some_and(|v| in_range(v, ul_band)) && dl.is_some_and(|v| in_range(v, dl_band)),
            format!(
                "frame direction {} Mbit/s in [{}, {}], response direction {} Mbit/s in [{}, {}]",
                fmt_opt(ul),
                ul_band.0,
                ul_band.1,
                fmt_opt(dl),
                dl_band.0,
                dl_band.1
            ),
        ));
    }

    if let Some(expected) = cell.expect_completed_rate {
        out.push(TargetCheck::new(
            format!("pipelining/{name}"),
            rate.is_some_and(|r| (r - expected).abs() <= EXPECTED_RATE_TOLERANCE),
            format!(
                "completed-rate {} /s vs expected {expected} ± {EXPECTED_RATE_TOLERANCE} (window {})",
                fmt_opt(rate),
                cell.window
            ),
        ));
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "—".to_owned(), |v| format!("{v:.2}"))
}

/// Every target applicable to the bundle's cells.
pub fn evaluate_targets(bundle: &Bundle) -> Vec<TargetCheck> {
    let mut out = Vec::new();
    for c in &bundle.cells {
        let name = &c.manifest.name;
        match (&c.manifest.status, &c.aggregate) {
            (CellStatus::Ok, Some(agg)) => cell_checks(c, agg, &mut out),
            _ => out.push(TargetCheck::new(
                format!("run/{name}"),
                false,
                c.manifest.error.clone().unwrap_or_else(|| "no aggregate".into()),
            )),
        }
    }
    for mode in [Mode::Control, Mode::Ar] {
        let drop_of = |profile: &str| {
            bundle.cells.iter().find_map(|c| {
                (c.manifest.profile.name == profile && c.manifest.cell.mode == mode && is_standard(c))
                    .then(|| c.aggregate.as_ref().and_then(|a| a.drop_rate_pct))
                    .flatten()
            })
        };
        if let (Some(wifi), Some(nr)) = (drop_of("wifi-5ghz"), drop_of("5g-n77")) {
            out.push(TargetCheck::new(
                format!("drop-order/{mode}"),
                nr > wifi,
                format!("5G drop {nr:.2}% > WiFi drop {wifi:.2}%"),
            ));
        }
    }
    out
}
