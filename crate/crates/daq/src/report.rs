//! Phase reports and result files.
//!
//! Per phase: `report.json`, `report.csv` and the resolved `config.toml`.
//! Per stream where applicable: `stream-<id>-audit.json`,
//! `stream-<id>-events.csv` and `stream-<id>-hist.{pgm,csv}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use drop_core::audit::{loss_upper_limit, AuditEventKind, AuditReport, LossBound};
use drop_core::histogram::WordHistogram;

use crate::config::Phase;

/// Condensed audit of one stream, kept with every report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    /// Stream id.
    pub stream_id: u16,
    /// Packets audited.
    pub packets_received: u64,
    /// Packets that continued the sequence.
    pub packets_ok: u64,
    /// Packets reported missing.
    pub total_missing: u64,
    /// Extra-or-repeat events.
    pub total_extra: u64,
    /// Events, including those beyond the list bound.
    pub events: u64,
    /// First packet id seen.
    pub first_id: Option<u64>,
    /// Last packet id seen.
    pub last_id: Option<u64>,
    /// Loss ratio or its upper limit.
    pub loss: LossBound,
    /// Whether the id accounting identity holds.
    pub accounting_holds: bool,
}

impl From<&AuditReport> for AuditSummary {
    fn from(r: &AuditReport) -> Self {
        Self {
            stream_id: r.stream_id,
            packets_received: r.packets_received,
            packets_ok: r.packets_ok,
            total_missing: r.total_missing,
            total_extra: r.total_extra,
            events: r.events.len() as u64 + r.events_overflow,
            first_id: r.first_id,
            last_id: r.last_id,
            loss: r.loss,
            accounting_holds: r.accounting_holds(),
        }
    }
}

/// One measurement step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Step name.
    pub label: String,
    /// Step parameters (stream count, size, pause, ...).
    pub params: BTreeMap<String, f64>,
    /// Packets received.
    pub packets: u64,
    /// Payload bytes received.
    pub bytes: u64,
    /// Measurement time in seconds.
    pub duration_s: f64,
    /// Received packets per second.
    pub packet_rate_pps: f64,
    /// Received payload bits per second.
    pub data_rate_bps: f64,
    /// Audit events over all streams.
    pub loss_events: u64,
    /// Packets reported missing over all streams.
    pub missing: u64,
    /// Loss ratio or upper limit over all streams.
    pub loss: LossBound,
    /// Phase-specific results.
    pub metrics: BTreeMap<String, f64>,
    /// Audit of every stream in the step.
    pub audits: Vec<AuditSummary>,
}

impl ReportRow {
    /// Row with totals taken from `audits`.
    pub fn from_audits(label: impl Into<String>, audits: &[AuditReport], bytes: u64, duration_s: f64) -> Self {
        let packets: u64 = audits.iter().map(|a| a.packets_received).sum();
        let missing: u64 = audits.iter().map(|a| a.total_missing).sum();
        let loss_events = audits.iter().map(|a| a.events.len() as u64 + a.events_overflow).sum();
        let (pps, bps) = if duration_s > 0.0 {
            (packets as f64 / duration_s, bytes as f64 * 8.0 / duration_s)
        } else {
            (0.0, 0.0)
        };
        Self {
            label: label.into(),
            params: BTreeMap::new(),
            packets,
            bytes,
            duration_s,
            packet_rate_pps: pps,
            data_rate_bps: bps,
            loss_events,
            missing,
            loss: loss_upper_limit(packets, missing),
            metrics: BTreeMap::new(),
            audits: audits.iter().map(AuditSummary::from).collect(),
        }
    }

    /// Adds a parameter.
    pub fn param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_owned(), value);
        self
    }

    /// Adds a metric.
    pub fn metric(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.to_owned(), value);
        self
    }

    /// Looks up a column by name: fixed columns, then params, then metrics.
    pub fn value(&self, name: &str) -> Option<f64> {
        let fixed = match name {
            "packets" => Some(self.packets as f64),
            "bytes" => Some(self.bytes as f64),
            "duration_s" => Some(self.duration_s),
            "packet_rate_pps" => Some(self.packet_rate_pps),
            "data_rate_bps" => Some(self.data_rate_bps),
            "loss_events" => Some(self.loss_events as f64),
            "missing" => Some(self.missing as f64),
            "loss" => self.loss.value(),
            _ => None,
        };
        fixed.or_else(|| self.params.get(name).copied()).or_else(|| self.metrics.get(name).copied())
    }
}

/// A named pass/fail condition of a phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    /// What was checked.
    pub name: String,
    /// Outcome.
    pub passed: bool,
    /// Numbers behind the outcome.
    pub detail: String,
}

/// Result of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    /// Phase.
    pub phase: Phase,
    /// Seed used.
    pub seed: u64,
    /// Transport used.
    pub transport: String,
    /// Measurement steps.
    pub rows: Vec<ReportRow>,
    /// Pass criteria.
    pub checks: Vec<Check>,
    /// Free-form remarks (skipped sizes, pinning problems, ...).
    pub notes: Vec<String>,
}

impl PhaseReport {
    /// Empty report.
    pub fn new(phase: Phase, seed: u64, transport: impl Into<String>) -> Self {
        Self { phase, seed, transport: transport.into(), rows: Vec::new(), checks: Vec::new(), notes: Vec::new() }
    }

    /// Records a check.
    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    /// True if there is at least one check and all of them passed.
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn param_keys(&self) -> Vec<String> {
        self.rows.iter().flat_map(|r| r.params.keys().cloned()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn metric_keys(&self) -> Vec<String> {
        self.rows.iter().flat_map(|r| r.metrics.keys().cloned()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Writes the rows as CSV, one column per parameter and metric.
    pub fn write_csv(&self, w: impl Write) -> csv::Result<()> {
        let params = self.param_keys();
        let metrics = self.metric_keys();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_owned()];
        header.extend(params.iter().cloned());
        header.extend(
            ["packets", "bytes", "duration_s", "packet_rate_pps", "data_rate_bps", "loss_events", "missing"]
                .map(String::from),
        );
        header.extend(["loss_kind".to_owned(), "loss_value".to_owned()]);
        header.extend(metrics.iter().cloned());
        out.write_record(&header)?;
        let num = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.label.clone()];
            rec.extend(params.iter().map(|k| num(r.params.get(k).copied())));
            rec.extend([
                r.packets.to_string(),
                r.bytes.to_string(),
                r.duration_s.to_string(),
                r.packet_rate_pps.to_string(),
                r.data_rate_bps.to_string(),
                r.loss_events.to_string(),
                r.missing.to_string(),
            ]);
            let kind = match r.loss {
                LossBound::Observed(_) => "observed",
                LossBound::UpperLimit(_) => "upper_limit",
                LossBound::NoData => "no_data",
            };
            rec.extend([kind.to_owned(), num(r.loss.value())]);
            rec.extend(metrics.iter().map(|k| num(r.metrics.get(k).copied())));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Human-readable table of the rows followed by the checks.
    pub fn table(&self) -> String {
        let params = self.param_keys();
        let metrics = self.metric_keys();
        let mut header: Vec<String> = vec!["step".into()];
        header.extend(params.iter().cloned());
        header.extend(["Mp/s", "Gb/s", "events", "loss"].map(String::from));
        header.extend(metrics.iter().cloned());
        let mut lines = vec![header];
        for r in &self.rows {
            let mut l = vec![r.label.clone()];
            l.extend(params.iter().map(|k| r.params.get(k).map_or(String::new(), |v| format!("{v}"))));
            l.push(format!("{:.3}", r.packet_rate_pps / 1e6));
            l.push(format!("{:.3}", r.data_rate_bps / 1e9));
            l.push(r.loss_events.to_string());
            l.push(match r.loss {
                LossBound::Observed(v) => format!("{v:.3e}"),
                LossBound::UpperLimit(v) => format!("<{v:.3e}"),
                LossBound::NoData => "-".into(),
            });
            l.extend(metrics.iter().map(|k| r.metrics.get(k).map_or(String::new(), |v| format!("{v:.4}"))));
            lines.push(l);
        }
        let widths: Vec<usize> =
            (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(s, "{}", cells.join("  ").trim_end());
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            match c.detail.as_str() {
                "" => writeln!(s, "{verdict} {}", c.name),
                d => writeln!(s, "{verdict} {}: {d}", c.name),
            }
            .ok();
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = BufWriter::new(File::create(dir.join("report.json"))?);
        serde_json::to_writer_pretty(json, self)?;
        self.write_csv(BufWriter::new(File::create(dir.join("report.csv"))?)).map_err(io::Error::other)
    }

    /// Reads a `report.json`.
    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(serde_json::from_reader(io::BufReader::new(File::open(path)?))?)
    }
}

fn stream_file(dir: &Path, stream_id: u16, suffix: &str) -> PathBuf {
    dir.join(format!("stream-{stream_id}-{suffix}"))
}

/// Writes the full audit report as `stream-<id>-audit.json`.
pub fn write_audit_json(dir: &Path, report: &AuditReport) -> io::Result<PathBuf> {
    let path = stream_file(dir, report.stream_id, "audit.json");
    serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), report)?;
    Ok(path)
}

/// Writes the audit events as `stream-<id>-events.csv`.
pub fn write_events_csv(dir: &Path, report: &AuditReport) -> io::Result<PathBuf> {
    let path = stream_file(dir, report.stream_id, "events.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io::Error::other)?;
    let rec = |w: &mut csv::Writer<File>, r: [String; 5]| w.write_record(&r).map_err(io::Error::other);
    rec(&mut w, ["kind", "value", "at_packet_id", "at_receive_index", "timestamp_ns"].map(String::from))?;
    for e in &report.events {
        let (kind, value) = match e.kind {
            AuditEventKind::Missing(n) => ("missing", n.to_string()),
            AuditEventKind::ExtraOrRepeat(d) => ("extra_or_repeat", d.to_string()),
        };
        rec(
            &mut w,
            [kind.into(), value, e.at_packet_id.to_string(), e.at_receive_index.to_string(), e.timestamp_ns.to_string()],
        )?;
    }
    w.flush()?;
    Ok(path)
}

/// Writes `stream-<id>-hist.pgm` (256x256 gray, row = upper byte) and
/// `stream-<id>-hist.csv` (raw counters, same layout).
pub fn write_histogram(dir: &Path, stream_id: u16, hist: &WordHistogram) -> io::Result<(PathBuf, PathBuf)> {
    let pgm = stream_file(dir, stream_id, "hist.pgm");
    let mut w = BufWriter::new(File::create(&pgm)?);
    write!(w, "P5\n256 256\n255\n")?;
    w.write_all(&hist.to_gray())?;
    w.flush()?;

    let csv_path = stream_file(dir, stream_id, "hist.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(io::Error::other)?;
    let mut header = vec!["upper".to_owned()];
    header.extend((0..256).map(|l| l.to_string()));
    w.write_record(&header).map_err(io::Error::other)?;
    for (upper, row) in hist.bins().chunks(256).enumerate() {
        let mut rec = vec![upper.to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(io::Error::other)?;
    }
    w.flush()?;
    Ok((pgm, csv_path))
}

/// One line of a chart.
#[derive(Debug, Clone)]
pub struct Series {
    /// Legend text.
    pub name: String,
    /// Points in drawing order.
    pub points: Vec<(f64, f64)>,
}

/// Renders a line chart as SVG.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 440.0;
    const LEFT: f64 = 80.0;
    const RIGHT: f64 = 170.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 60.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

    let pts = series.iter().flat_map(|s| s.points.iter().copied());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let y0 = 0.0f64.min(y1);
    let y1 = if y1 <= y0 { y0 + 1.0 } else { y1 * 1.05 };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, xml(title));
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (gx, gy) = (sx(xv), sy(yv));
        let _ = writeln!(s, r##"<line x1="{gx:.1}" y1="{TOP}" x2="{gx:.1}" y2="{:.1}" stroke="#ddd"/>"##, TOP + ph);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{gy:.1}" x2="{:.1}" y2="{gy:.1}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{gx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, gy + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 16.0, xml(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        xml(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, sx(x), sy(y));
        }
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, xml(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.2e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Chart of `y` against `x` over the rows of `report`. Rows lacking either
/// column are skipped; with `split_by`, one line per distinct value.
pub fn plot_report(report: &PhaseReport, x: &str, y: &str, split_by: Option<&str>) -> String {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &report.rows {
        let (Some(xv), Some(yv)) = (r.value(x), r.value(y)) else { continue };
        let key = match split_by {
            Some(k) => format!("{k}={}", r.value(k).map_or("?".into(), |v| v.to_string())),
            None => y.to_owned(),
        };
        groups.entry(key).or_default().push((xv, yv));
    }
    let series: Vec<Series> = groups.into_iter().map(|(name, points)| Series { name, points }).collect();
    render_svg(report.phase.name(), x, y, &series)
}
