//! Markdown tables, SVG figures and CSV extracted from a result bundle.

mod svg;
mod targets;

pub use svg::{nice_step, Line, LineChart};
pub use targets::{evaluate_targets, TargetCheck};

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::experiment::{cell_dir, Bundle, CellData, FRAMES_CSV};
use crate::metrics::{read_records, Aggregate, Outcome, Stats};
use crate::Mode;

pub const MISSING: &str = "—";
pub const REPORT_MD: &str = "report.md";
pub const TABLE_CSV: &str = "table.csv";
pub const TARGETS_CSV: &str = "targets.csv";
pub const FIG_RTT: &str = "fig_rtt.svg";
pub const FIG_RATE: &str = "fig_rate.svg";
pub const FIG_BANDWIDTH: &str = "fig_bandwidth.svg";

/// Profiles that always get a column, in this order.
const PRIMARY_PROFILES: [&str; 2] = ["wifi-5ghz", "5g-n77"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Row {
    Rtt,
    ServerProc,
    Rate,
    DlBandwidth,
    UlBandwidth,
    DropRate,
}

impl Row {
    pub const ALL: [Row; 6] = [
        Row::Rtt,
        Row::ServerProc,
        Row::Rate,
        Row::DlBandwidth,
        Row::UlBandwidth,
        Row::DropRate,
    ];

    pub fn label(self, mode: Mode) -> &'static str {
        match (self, mode) {
            (Row::Rtt, _) => "End-to-end RTT (ms)",
            (Row::ServerProc, _) => "Server Processing (ms)",
            (Row::Rate, Mode::Control) => "Message Rate (msg/s)",
            (Row::Rate, Mode::Ar) => "Frame Rate (frame/s)",
            (Row::DlBandwidth, _) => "DL Bandwidth (Mbit/s)",
            (Row::UlBandwidth, _) => "UL Bandwidth (Mbit/s)",
            (Row::DropRate, _) => "Frame Drop Rate (%)",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Row::Rtt => "rtt_ms",
            Row::ServerProc => "server_proc_ms",
            Row::Rate => "completed_rate",
            Row::DlBandwidth => "dl_mbps",
            Row::UlBandwidth => "ul_mbps",
            Row::DropRate => "drop_rate_pct",
        }
    }

    fn stats(self, a: &Aggregate) -> Option<(f64, Option<f64>)> {
        let s = |s: &Option<Stats>| s.map(|s| (s.mean, s.std));
        match self {
            Row::Rtt => s(&a.rtt_ms),
            Row::ServerProc => s(&a.server_proc_ms),
            Row::Rate => s(&a.completed_rate),
            Row::DlBandwidth => s(&a.dl_mbps),
            Row::UlBandwidth => s(&a.ul_mbps),
            Row::DropRate => a.drop_rate_pct.map(|d| (d, None)),
        }
    }
}

/// One table column: a profile, and the cell that fills it if any.
#[derive(Debug, Clone)]
pub struct Column<'a> {
    pub label: String,
    pub cell: Option<&'a CellData>,
}

/// Columns for `mode`: the primary profiles first, then any other cells.
pub fn columns(bundle: &Bundle, mode: Mode) -> Vec<Column<'_>> {
    let of_mode: Vec<&CellData> = bundle
        .cells
        .iter()
        .filter(|c| c.manifest.cell.mode == mode)
        .collect();
    let mut cols = Vec::new();
    let mut used = vec![false; of_mode.len()];
    for p in PRIMARY_PROFILES {
        let idx = of_mode.iter().position(|c| {
            c.manifest.profile.name == p && c.manifest.cell.expect_completed_rate.is_none()
        });
        if let Some(i) = idx {
            used[i] = true;
        }
        cols.push(Column {
            label: p.to_owned(),
            cell: idx.map(|i| of_mode[i]),
        });
    }
    for (i, c) in of_mode.iter().enumerate() {
        if !used[i] {
            cols.push(Column {
                label: c.manifest.name.clone(),
                cell: Some(c),
            });
        }
    }
    cols
}

fn cell_value(col: &Column<'_>, row: Row) -> Option<(f64, Option<f64>)> {
    col.cell?.aggregate.as_ref().and_then(|a| row.stats(a))
}

fn format_value(v: Option<(f64, Option<f64>)>) -> String {
    match v {
        Some((m, Some(s))) => format!("{m:.2} ± {s:.2}"),
        Some((m, None)) => format!("{m:.2}"),
        None => MISSING.to_owned(),
    }
}

fn mode_title(mode: Mode) -> &'static str {
    match mode {
        Mode::Control => "Control commands (JSON)",
        Mode::Ar => "AR video streaming",
    }
}

pub fn render_table(bundle: &Bundle, mode: Mode) -> String {
    let cols = columns(bundle, mode);
    let mut s = String::new();
    let _ = write!(s, "| Metric |");
    for c in &cols {
        let _ = write!(s, " {} |", c.label);
    }
    let _ = write!(s, "\n|---|");
    for _ in &cols {
        s.push_str("---|");
    }
    s.push('\n');
    for row in Row::ALL {
        let _ = write!(s, "| {} |", row.label(mode));
        for c in &cols {
            let _ = write!(s, " {} |", format_value(cell_value(c, row)));
        }
        s.push('\n');
    }
    s
}

fn table_csv(bundle: &Bundle) -> String {
    let mut s = String::from("mode,metric,column,cell,mean,std\n");
    for mode in [Mode::Control, Mode::Ar] {
        for col in columns(bundle, mode) {
            for row in Row::ALL {
                let (m, sd) = match cell_value(&col, row) {
                    Some((m, sd)) => (format!("{m}"), sd.map(|v| v.to_string()).unwrap_or_default()),
                    None => (String::new(), String::new()),
                };
                let cell = col.cell.map(|c| c.manifest.name.as_str()).unwrap_or("");
                let _ = writeln!(s, "{mode},{},{},{cell},{m},{sd}", row.key(), col.label);
            }
        }
    }
    s
}

/// Mean RTT of completed frames per bucket of capture time.
fn rtt_series(bundle: &Bundle, cell: &CellData) -> Vec<(f64, f64)> {
    let Ok(records) = read_records(&cell_dir(&bundle.root, &cell.manifest.name).join(FRAMES_CSV)) else {
        return Vec::new();
    };
    let Some(t0) = records.iter().map(|r| r.capture_ts_ns).min() else {
        return Vec::new();
    };
    let mut sums: Vec<(f64, u32)> = Vec::new();
    for r in records.iter().filter(|r| r.outcome == Outcome::Completed) {
        let k = ((r.capture_ts_ns - t0) / 1_000_000_000) as usize;
        if sums.len() <= k {
            sums.resize(k + 1, (0.0, 0));
        }
        sums[k].0 += r.rtt_ms.unwrap_or(0.0);
        sums[k].1 += 1;
    }
    sums.iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(k, (sum, n))| (k as f64, sum / *n as f64))
        .collect()
}

fn indexed(v: &[f64], bucket_s: f64) -> Vec<(f64, f64)> {
    v.iter()
        .enumerate()
        .map(|(k, &y)| (k as f64 * bucket_s, y))
        .collect()
}

pub fn render_figures(bundle: &Bundle) -> Vec<(&'static str, String)> {
    let ok: Vec<&CellData> = bundle.cells.iter().filter(|c| c.series.is_some()).collect();
    let rtt = LineChart {
        title: "Round-trip time".into(),
        x_label: "time (s)".into(),
        y_label: "mean RTT (ms)".into(),
        lines: ok
            .iter()
            .map(|c| Line {
                label: c.manifest.name.clone(),
                points: rtt_series(bundle, c),
                dashed: c.manifest.cell.mode == Mode::Ar,
            })
            .collect(),
    };
    let rate = LineChart {
        title: "Completed frame/message rate".into(),
        x_label: "time (s)".into(),
        y_label: "per second".into(),
        lines: ok
            .iter()
            .map(|c| {
                let s = c.series.as_ref().expect("filtered");
                Line {
                    label: c.manifest.name.clone(),
                    points: indexed(&s.completed_rate(), s.bucket_s),
                    dashed: c.manifest.cell.mode == Mode::Ar,
                }
            })
            .collect(),
    };
    let bandwidth = LineChart {
        title: "Bandwidth usage".into(),
        x_label: "time (s)".into(),
        y_label: "Mbit/s".into(),
        lines: ok
            .iter()
            .flat_map(|c| {
                let s = c.series.as_ref().expect("filtered");
                [
                    Line {
                        label: format!("{} UL", c.manifest.name),
                        points: indexed(&s.ul_mbps(), s.bucket_s),
                        dashed: false,
                    },
                    Line {
                        label: format!("{} DL", c.manifest.name),
                        points: indexed(&s.dl_mbps(), s.bucket_s),
                        dashed: true,
                    },
                ]
            })
            .collect(),
    };
    vec![
        (FIG_RTT, rtt.render()),
        (FIG_RATE, rate.render()),
        (FIG_BANDWIDTH, bandwidth.render()),
    ]
}

/// Everything the report consists of, before it is written.
#[derive(Debug, Clone)]
pub struct Report {
    pub markdown: String,
    pub table_csv: String,
    pub targets_csv: String,
    pub figures: Vec<(&'static str, String)>,
    pub targets: Vec<TargetCheck>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.targets.iter().all(|t| t.pass)
    }

    pub fn write(&self, out: &Path) -> io::Result<()> {
        fs::create_dir_all(out)?;
        fs::write(out.join(REPORT_MD), &self.markdown)?;
        fs::write(out.join(TABLE_CSV), &self.table_csv)?;
        fs::write(out.join(TARGETS_CSV), &self.targets_csv)?;
        for (name, svg) in &self.figures {
            fs::write(out.join(name), svg)?;
        }
        Ok(())
    }
}

pub fn render_report(bundle: &Bundle) -> Report {
    let targets = evaluate_targets(bundle);
    let mut md = String::new();
    let title = if bundle.manifest.plan_name.is_empty() {
        "Experiment report".to_owned()
    } else {
        format!("Experiment report: {}", bundle.manifest.plan_name)
    };
    let _ = writeln!(md, "# {title}\n");
    let _ = writeln!(
        md,
        "Values are mean ± sample std after a {} s warmup; rates and bandwidth are over 1 s buckets.\n",
        bundle.manifest.warmup_s
    );
    for mode in [Mode::Control, Mode::Ar] {
        let _ = writeln!(md, "## {}\n", mode_title(mode));
        md.push_str(&render_table(bundle, mode));
        md.push('\n');
    }
    md.push_str("## Figures\n\n");
    let _ = writeln!(md, "![Round-trip time]({FIG_RTT})\n");
    let _ = writeln!(md, "![Completed rate]({FIG_RATE})\n");
    let _ = writeln!(md, "![Bandwidth]({FIG_BANDWIDTH})\n");
    md.push_str("## Cells\n\n| Cell | Status | Profile | Seed | Config hash |\n|---|---|---|---|---|\n");
    for c in &bundle.cells {
        let m = &c.manifest;
        let status = match (&m.status, &m.error) {
            (crate::experiment::CellStatus::Ok, _) => "ok".to_owned(),
            (_, Some(e)) => format!("failed: {e}"),
            (_, None) => "failed".to_owned(),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | `{}` |",
            m.name,
            status,
            m.profile.name,
            m.seed,
            &m.config_hash[..m.config_hash.len().min(12)]
        );
    }
    md.push_str("\n## Targets\n\n");
    if targets.is_empty() {
        md.push_str("No targets apply.\n");
    }
    for t in &targets {
        let _ = writeln!(md, "- {}", t.line());
    }
    let passed = targets.iter().filter(|t| t.pass).count();
    let _ = writeln!(md, "\n{passed}/{} targets passed.", targets.len());

    let mut targets_csv = String::from("id,pass,detail\n");
    for t in &targets {
        let _ = writeln!(targets_csv, "{},{},\"{}\"", t.id, t.pass, t.detail.replace('"', "\"\""));
    }
    Report {
        markdown: md,
        table_csv: table_csv(bundle),
        targets_csv,
        figures: render_figures(bundle),
        targets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{Cell, CellManifest, CellStatus, Manifest};
    use crate::metrics::{aggregate, AggregateConfig, FrameRecord};
    use crate::netem::NetProfile;
    use std::collections::BTreeMap;

    fn bundle(cells: Vec<CellData>) -> Bundle {
        Bundle {
            root: "/nonexistent".into(),
            manifest: Manifest {
                plan_name: "t".into(),
                plan_hash: String::new(),
                warmup_s: 2.0,
                cells: cells.iter().map(|c| c.manifest.clone()).collect(),
            },
            cells,
        }
    }

    fn cell(profile: &str, mode: Mode, rtt: f64, upload: u64, response: u64) -> CellData {
        let records: Vec<FrameRecord> = (0..300u64)
            .map(|i| FrameRecord {
                frame_id: i,
                capture_ts_ns: i * 1_000_000_000 / 30,
                rtt_ms: Some(rtt + (i % 3) as f64 - 1.0),
                server_proc_ms: Some(13.0 + (i % 2) as f64 * 0.5),
                uplink_bytes: upload,
                downlink_bytes: Some(response),
                outcome: Outcome::Completed,
            })
            .collect();
        let c = Cell::new(profile, mode);
        let profile = NetProfile::builtin(profile).unwrap();
        CellData {
            manifest: CellManifest {
                name: c.name(),
                status: CellStatus::Ok,
                error: None,
                config_hash: "0".repeat(64),
                seed: 1,
                profile,
                files: BTreeMap::new(),
                wall_time_s: 0.0,
                cell: c,
            },
            aggregate: Some(aggregate(&records, &AggregateConfig::default())),
            series: Some(crate::metrics::series(&records, 1.0)),
            session: None,
        }
    }

    fn table_rows(md: &str) -> Vec<&str> {
        md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Metric")).collect()
    }

    #[test]
    fn default_layout() {
        let b = bundle(vec![
            cell("wifi-5ghz", Mode::Control, 40.0, 52_041, 794),
            cell("5g-n77", Mode::Control, 70.0, 52_041, 794),
            cell("wifi-5ghz", Mode::Ar, 62.0, 52_041, 56_044),
            cell("5g-n77", Mode::Ar, 110.0, 52_041, 56_044),
        ]);
        for mode in [Mode::Control, Mode::Ar] {
            let t = render_table(&b, mode);
            let rows = table_rows(&t);
            assert_eq!(rows.len(), 6);
            assert!(rows.iter().all(|r| r.matches(" | ").count() == 2), "{t}");
            assert!(!t.contains(MISSING));
        }
        let t = render_table(&b, Mode::Control);
        assert!(t.contains("| End-to-end RTT (ms) | 40.00 ± 0.82 | 70.00 ± 0.82 |"), "{t}");
    }

    #[test]
    fn empty_bundle_is_all_missing() {
        let b = bundle(vec![]);
        let report = render_report(&b);
        for mode in [Mode::Control, Mode::Ar] {
            let t = render_table(&b, mode);
            let rows = table_rows(&t);
            assert_eq!(rows.len(), 6);
            assert!(rows.iter().all(|r| r.matches(MISSING).count() == 2));
        }
        assert!(report.targets.is_empty());
        assert_eq!(report.figures.len(), 3);
    }

    #[test]
    fn rendering_is_pure() {
        let b = bundle(vec![cell("wifi-5ghz", Mode::Control, 40.0, 52_041, 794)]);
        let (a, c) = (render_report(&b), render_report(&b));
        assert_eq!(a.markdown, c.markdown);
        assert_eq!(a.figures, c.figures);
        assert_eq!(a.table_csv, c.table_csv);
    }

    #[test]
    fn targets_on_good_and_bad_cells() {
        let b = bundle(vec![
            cell("wifi-5ghz", Mode::Control, 40.0, 52_041, 794),
            cell("5g-n77", Mode::Control, 90.0, 40_000, 794),
        ]);
        let t = evaluate_targets(&b);
        let get = |id: &str| t.iter().find(|c| c.id == id).unwrap_or_else(|| panic!("{id}"));
        assert!(get("calibration/control-wifi-5ghz").pass);
        assert!(!get("calibration/control-5g-n77").pass);
        assert!(get("natural-control/control-5g-n77").pass);
        assert!(get("server-budget/control-wifi-5ghz").pass);
        assert!(get("throughput/control-wifi-5ghz").pass);
        assert!(get("bandwidth/control-wifi-5ghz").pass);
        // 40 KB uploads at 30/s are 9.6 Mbit/s, under the frame-direction floor
        assert!(!get("bandwidth/control-5g-n77").pass);
        // equal (zero) drop rates do not satisfy 5G > WiFi
        assert!(!get("drop-order/control").pass);
    }

    #[test]
    fn failed_cell_is_a_failed_target_and_missing_column() {
        let mut c = cell("5g-n77", Mode::Ar, 100.0, 1, 1);
        c.manifest.status = CellStatus::Failed;
        c.manifest.error = Some("proxy failed".into());
        c.aggregate = None;
        c.series = None;
        let b = bundle(vec![c]);
        let t = evaluate_targets(&b);
        assert_eq!(t.len(), 1);
        assert!(!t[0].pass && t[0].detail.contains("proxy"));
        let table = render_table(&b, Mode::Ar);
        assert!(table_rows(&table).iter().all(|r| r.matches(MISSING).count() == 2));
    }
}
