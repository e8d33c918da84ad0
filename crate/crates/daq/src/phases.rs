//! Measurement phases.
//!
//! Each phase turns an [`ExperimentConfig`] into a [`PhaseReport`] whose
//! checks decide the exit status. [`run_streams`] is the shared engine: it
//! wires senders to one receiver over the configured transport and collects
//! both sides' results.

use std::net::{IpAddr, SocketAddr};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drop_core::audit::{AuditEventKind, AuditReport, LossBound};
use drop_core::fault::{reconcile, reconcile_events, replay_delivery, replay_events, FaultPlan, GroundTruth};
use drop_core::frame::FrameSpec;
use drop_core::pattern::Pattern;
use drop_core::protocol::HEADER_LEN;
use drop_core::simlink::{max_lossless_pps, simulate, SimOutcome, SimStream};
use drop_core::sweep::{base_sizes, sweep_sizes};
use drop_core::topology::{AssignmentPlan, CcxLayout};

use crate::config::{ExperimentConfig, Phase, ReceiverSettings, ResolvedStream, StopConfig};
use crate::packet::{PacketRx, PacketTx};
use crate::receiver::{Placement, Receiver, ReceiverConfig, ReceiverOutcome, RxStop, StreamBinding};
use crate::report::{write_audit_json, write_events_csv, write_histogram, PhaseReport, ReportRow};
use crate::sender::{send_stream, SendStop, SendSummary};
use crate::slots::RingConfig;
use crate::transport::{loopback, Framing, RxQueue, TransportMode, TxLink, UdpRx, UdpTx};

/// One end-to-end run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    /// Streams to send.
    pub streams: Vec<ResolvedStream>,
    /// Link type; `Sim` is not accepted here.
    pub transport: TransportMode,
    /// Interface for raw mode; `None` runs raw frames over the in-process wire.
    pub iface: Option<String>,
    /// Receive ring geometry.
    pub ring: RingConfig,
    /// Receive-side options.
    pub receiver: ReceiverSettings,
    /// Thread placement.
    pub placement: Option<Placement>,
    /// Packets (total, split evenly) and/or duration.
    pub stop: StopConfig,
    /// JSON-lines stats output.
    pub stats_path: Option<std::path::PathBuf>,
}

impl RunSpec {
    /// Run of `streams` with the transport and receive settings of `cfg`.
    pub fn from_config(cfg: &ExperimentConfig, streams: Vec<ResolvedStream>, stop: StopConfig) -> Self {
        Self {
            streams,
            transport: cfg.transport,
            iface: cfg.iface.clone(),
            ring: cfg.ring,
            receiver: cfg.receiver.clone(),
            placement: None,
            stop,
            stats_path: None,
        }
    }
}

/// Results of both sides of a run.
#[derive(Debug)]
pub struct RunResult {
    /// Per stream, in stream order.
    pub sends: Vec<SendSummary>,
    /// Receiver results, streams in the same order.
    pub outcome: ReceiverOutcome,
    /// Fault logs of fault-injected loopback streams.
    pub truths: Vec<Option<GroundTruth>>,
    /// From the first send to the end of reception.
    pub wall: Duration,
}

impl RunResult {
    /// Every sender reached its stop condition.
    pub fn complete(&self) -> bool {
        self.sends.iter().all(|s| s.complete)
    }

    /// Summary row over all streams; rates use the longest send time.
    pub fn row(&self, label: impl Into<String>) -> ReportRow {
        let send_time = self.sends.iter().map(|s| s.duration).max().unwrap_or_default();
        let secs = if send_time.is_zero() { self.wall } else { send_time }.as_secs_f64();
        ReportRow::from_audits(label, &self.outcome.audits, self.outcome.stats.bytes(), secs)
            .metric("offered_pps", self.sends.iter().map(|s| s.achieved_pps).sum())
    }
}

/// Splits `total` into `n` parts differing by at most one.
pub fn split_even(total: u64, n: usize) -> Vec<u64> {
    let n64 = n as u64;
    (0..n64).map(|i| total / n64 + u64::from(i < total % n64)).collect()
}

/// Sends every stream to one receiver and waits for both sides.
pub fn run_streams(spec: &RunSpec) -> Result<RunResult> {
    ensure!(!spec.streams.is_empty(), "no streams to run");
    ensure!(spec.transport != TransportMode::Sim, "the sim transport does not move packets");
    ensure!(
        spec.stop.packets.is_some() || spec.stop.duration_s.is_some(),
        "run needs a packet count or a duration"
    );
    let mut streams = spec.streams.clone();
    let mut links: Vec<TxLink> = Vec::new();
    let mut queues: Vec<RxQueue> = Vec::new();
    match (spec.transport, &spec.iface) {
        (TransportMode::Loopback, _) | (TransportMode::Raw, None) => {
            for s in &streams {
                let framing = match spec.transport {
                    TransportMode::Raw => Framing::Ethernet(frame_spec(s.stream.dest)),
                    _ => Framing::Payload,
                };
                let (tx, rx) = loopback(spec.ring, framing, s.stream.port())?;
                links.push(TxLink::Loopback(tx));
                queues.push(RxQueue::Loopback(rx));
            }
        }
        (TransportMode::Raw, Some(iface)) => {
            queues.push(RxQueue::Packet(PacketRx::open(iface, spec.ring)?));
            for s in &streams {
                links.push(TxLink::Packet(PacketTx::open(iface, frame_spec(s.stream.dest))?));
            }
        }
        (TransportMode::Udp, _) => {
            for s in &mut streams {
                let rx = UdpRx::bind(s.stream.dest, spec.ring)?;
                s.stream.dest.set_port(rx.port());
                links.push(TxLink::Udp(UdpTx::connect(s.stream.dest)?));
                queues.push(RxQueue::Udp(rx));
            }
        }
        (TransportMode::Sim, _) => unreachable!(),
    }
    for (link, s) in links.iter_mut().zip(&streams) {
        if let Some(plan) = &s.faults {
            link.inject_faults(plan.clone())?;
        }
    }

    let bindings: Vec<StreamBinding> =
        streams.iter().map(|s| StreamBinding { port: s.stream.port(), stream_id: s.stream.stream_id }).collect();
    let rcfg = ReceiverConfig {
        bindings,
        word_order: spec.receiver.word_order,
        histogram: spec.receiver.histogram,
        event_cap: spec.receiver.event_cap,
        expected_first: spec.receiver.expected_first,
        stats_interval: Duration::from_secs_f64(spec.receiver.stats_interval_s),
        stats_path: spec.stats_path.clone(),
        placement: spec.placement.clone(),
    };
    let rx_flag = Arc::new(AtomicBool::new(false));
    let tx_flag = Arc::new(AtomicBool::new(false));
    let receiver =
        Receiver::spawn(queues, rcfg, RxStop { flag: Some(rx_flag.clone()), ..Default::default() })?;

    let shares = spec.stop.packets.map(|p| split_even(p, streams.len()));
    let start = Instant::now();
    let senders: Vec<_> = streams
        .iter()
        .cloned()
        .zip(links)
        .enumerate()
        .map(|(i, (s, mut link))| {
            let stop = SendStop {
                packets: shares.as_ref().map(|v| v[i]),
                blocks: None,
                duration: spec.stop.duration(),
                flag: Some(tx_flag.clone()),
            };
            thread::Builder::new().name(format!("sender-{}", s.stream.stream_id)).spawn(move || {
                let summary = send_stream(&s.stream, &mut link, &stop);
                (summary, link.finish())
            })
        })
        .collect::<std::io::Result<_>>()?;

    let watcher = spec.receiver.abort_on_event.then(|| {
        let stats = receiver.stats().clone();
        let (tx_flag, rx_flag) = (tx_flag.clone(), rx_flag.clone());
        thread::spawn(move || {
            while !rx_flag.load(Ordering::Relaxed) {
                if stats.streams.iter().any(|s| s.missing.get() + s.extra.get() > 0) {
                    log::warn!("audit event seen, aborting run");
                    tx_flag.store(true, Ordering::Relaxed);
                    rx_flag.store(true, Ordering::Relaxed);
                    break;
                }
                thread::sleep(Duration::from_millis(20));
            }
        })
    });

    let mut sends = Vec::new();
    let mut truths = Vec::new();
    for h in senders {
        let (summary, truth) = h.join().expect("sender thread panicked");
        sends.push(summary);
        truths.push(truth);
    }
    if spec.transport == TransportMode::Udp || spec.iface.is_some() {
        settle(&receiver, sends.iter().map(|s| s.packets).sum());
        rx_flag.store(true, Ordering::Relaxed);
    }
    let outcome = receiver.join();
    rx_flag.store(true, Ordering::Relaxed);
    if let Some(w) = watcher {
        let _ = w.join();
    }
    Ok(RunResult { sends, outcome, truths, wall: start.elapsed() })
}

// Sockets never report end of stream: wait until everything sent has
// arrived or the count stops moving.
fn settle(receiver: &Receiver, sent: u64) {
    let mut last = receiver.stats().packets();
    let mut quiet = Instant::now();
    while last < sent && quiet.elapsed() < Duration::from_millis(300) {
        thread::sleep(Duration::from_millis(10));
        let now = receiver.stats().packets();
        if now != last {
            last = now;
            quiet = Instant::now();
        }
    }
}

fn frame_spec(dest: SocketAddr) -> FrameSpec {
    let mut spec = FrameSpec { dst_port: dest.port(), ..FrameSpec::default() };
    if let IpAddr::V4(ip) = dest.ip() {
        spec.dst_ip = ip.octets();
    }
    spec
}

fn stop_or(stop: &StopConfig, default: StopConfig) -> StopConfig {
    if stop.packets.is_some() || stop.duration_s.is_some() {
        stop.clone()
    } else {
        default
    }
}

fn seconds(s: f64) -> StopConfig {
    StopConfig { packets: None, duration_s: Some(s) }
}

/// Runs `phase` and writes the report, the resolved config and any
/// per-stream files to `cfg.out`.
pub fn run_phase(phase: Phase, cfg: &ExperimentConfig) -> Result<PhaseReport> {
    if let Some(p) = cfg.phase {
        ensure!(p == phase, "config is for phase {} but {} was requested", p.name(), phase.name());
    }
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let mut resolved = cfg.clone();
    resolved.phase = Some(phase);
    std::fs::write(cfg.out.join("config.toml"), resolved.to_toml())?;
    let out = Some(cfg.out.as_path());
    let report = match phase {
        Phase::MaxRate => max_rate(cfg, out)?,
        Phase::LosslessRate => lossless_rate(cfg, out)?,
        Phase::SizeSweep => size_sweep(cfg)?,
        Phase::AssignSearch => {
            let pinning = cfg.pinning();
            let stop = stop_or(&cfg.stop, seconds(2.0));
            assign_search(cfg, |plan, streams| {
                let mut spec = RunSpec::from_config(cfg, streams.to_vec(), stop.clone());
                spec.placement = Some(Placement { plan: plan.clone(), pinning: pinning.clone() });
                Ok(run_streams(&spec)?.row(plan.to_string()))
            })?
        }
        Phase::Soak => soak(cfg, out)?,
        Phase::FaultOracle => fault_oracle(cfg)?,
    };
    report.write_files(&cfg.out)?;
    Ok(report)
}

fn transport_name(cfg: &ExperimentConfig) -> String {
    match (cfg.transport, &cfg.iface) {
        (TransportMode::Raw, Some(i)) => format!("raw:{i}"),
        (t, _) => format!("{t:?}").to_lowercase(),
    }
}

fn sim_streams(streams: &[ResolvedStream]) -> Result<Vec<SimStream>> {
    streams
        .iter()
        .map(|s| {
            let g = &s.stream.generators[0];
            let period = g.packet_period_ns(g.packet_size).with_context(|| {
                format!("stream {}: the sim transport needs paced generators", s.stream.stream_id)
            })?;
            Ok(SimStream { stream_id: s.stream.stream_id, period_ns: period, size: g.packet_size + HEADER_LEN })
        })
        .collect()
}

// Drops after a stream's last delivered packet leave no gap for the
// audit to see; the simulator knows them, so they count as missing here.
fn sim_row(label: String, o: &SimOutcome, sim: &[SimStream]) -> ReportRow {
    let bytes = o.audits.iter().zip(sim).map(|(a, s)| a.packets_received * (s.size - HEADER_LEN) as u64).sum();
    let mut row = ReportRow::from_audits(label, &o.audits, bytes, o.window_ns / 1e9)
        .metric("offered_pps", o.offered_pps())
        .metric("dropped", o.dropped as f64);
    row.missing = row.missing.max(o.dropped);
    if o.dropped > 0 {
        row.loss = LossBound::Observed(o.dropped as f64 / o.offered as f64);
    }
    row
}

/// Received rate for 1..=N streams. Loss is recorded but not judged.
pub fn max_rate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PhaseReport> {
    let n = cfg.max_rate.max_streams;
    ensure!(n > 0, "max-rate needs at least one stream");
    let streams = cfg.resolve_streams()?;
    ensure!(streams.len() >= n, "max-rate needs {n} streams, {} configured", streams.len());
    let stop = stop_or(&cfg.stop, seconds(1.0));
    let mut report = PhaseReport::new(Phase::MaxRate, cfg.seed, transport_name(cfg));
    let mut all_done = true;
    for k in 1..=n {
        let row = if cfg.transport == TransportMode::Sim {
            let sim = sim_streams(&streams[..k])?;
            let per = stop.packets.map_or(100_000, |p| p / k as u64);
            let o = simulate(cfg.sim, &sim, per);
            sim_row(format!("{k} streams"), &o, &sim)
        } else {
            let mut spec = RunSpec::from_config(cfg, streams[..k].to_vec(), stop.clone());
            spec.stats_path = out.map(|d| d.join(format!("stats-{k}-streams.jsonl")));
            let r = run_streams(&spec)?;
            all_done &= r.complete();
            r.row(format!("{k} streams"))
        };
        log::info!("{k} streams: {:.3} Mp/s", row.packet_rate_pps / 1e6);
        report.rows.push(row.param("streams", k as f64));
    }
    report.check("one row per stream count", report.rows.len() == n, format!("{} rows", report.rows.len()));
    report.check("every run completed", all_done, String::new());
    Ok(report)
}

/// Measured vs. expected aggregate rate while the per-packet pause shrinks.
pub fn lossless_rate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PhaseReport> {
    let base = cfg.resolve_streams()?;
    let mut pauses = cfg.lossless.pauses_ns.clone();
    ensure!(!pauses.is_empty(), "lossless-rate needs at least one pause");
    pauses.sort_unstable_by(|a, b| b.cmp(a));
    let stop = stop_or(&cfg.stop, seconds(1.0));
    let mut report = PhaseReport::new(Phase::LosslessRate, cfg.seed, transport_name(cfg));
    let mut onset = None;
    let mut all_hold = true;
    for (i, &pause) in pauses.iter().enumerate() {
        let streams: Vec<ResolvedStream> = base
            .iter()
            .cloned()
            .map(|mut s| {
                for g in &mut s.stream.generators {
                    g.pause_ns = pause;
                    g.target_rate_bps = None;
                }
                s
            })
            .collect();
        let expected: f64 = streams
            .iter()
            .map(|s| {
                let g = &s.stream.generators[0];
                g.packet_period_ns(g.packet_size).map_or(f64::INFINITY, |p| 1e9 / p)
            })
            .sum();
        ensure!(expected.is_finite(), "pause 0 without a line rate is unpaced; expected rate undefined");
        let row = if cfg.transport == TransportMode::Sim {
            let sim = sim_streams(&streams)?;
            let per = stop.packets.map_or(100_000, |p| p / streams.len() as u64);
            let o = simulate(cfg.sim, &sim, per);
            sim_row(format!("pause {pause} ns"), &o, &sim)
        } else {
            let mut spec = RunSpec::from_config(cfg, streams, stop.clone());
            spec.stats_path = out.map(|d| d.join(format!("stats-pause-{pause}.jsonl")));
            let r = run_streams(&spec)?;
            r.row(format!("pause {pause} ns"))
        };
        let ratio = row.packet_rate_pps / expected;
        let lossless = row.missing == 0 && row.loss_events == 0;
        all_hold &= row.audits.iter().all(|a| a.accounting_holds);
        if onset.is_none() && (!lossless || ratio < cfg.lossless.min_ratio) {
            onset = Some(i);
        }
        report.rows.push(
            row.param("pause_ns", pause as f64)
                .metric("expected_pps", expected)
                .metric("ratio", ratio)
                .metric("lossless", f64::from(u8::from(lossless))),
        );
    }
    match onset {
        Some(i) => report.notes.push(format!("rate ceiling reached at pause {} ns", pauses[i])),
        None => report.notes.push("no step reached the rate ceiling".into()),
    }
    let first = &report.rows[0];
    let first_ok = first.missing == 0 && first.metrics["ratio"] >= cfg.lossless.min_ratio;
    report.check(
        "sweep starts below the ceiling",
        first_ok,
        format!("ratio {:.4} with {} missing at the longest pause", first.metrics["ratio"], first.missing),
    );
    report.check("accounting identity holds in every step", all_hold, String::new());
    Ok(report)
}

/// Highest lossless rate per packet size.
pub fn size_sweep(cfg: &ExperimentConfig) -> Result<PhaseReport> {
    let streams = cfg.resolve_streams()?;
    let (sizes, skipped) = sweep_sizes(cfg.packet_capacity());
    let mut report = PhaseReport::new(Phase::SizeSweep, cfg.seed, transport_name(cfg));
    if !skipped.is_empty() {
        report.notes.push(format!("sizes {skipped:?} exceed the {}-byte capacity and were skipped", cfg.packet_capacity()));
    }
    let per = cfg.size_sweep.packets_per_stream;
    for &size in &sizes {
        let row = if cfg.transport == TransportMode::Sim {
            let pps = max_lossless_pps(cfg.sim, size, streams.len(), per);
            let mut row = ReportRow::from_audits(format!("{size} B"), &[], 0, 0.0);
            row.packet_rate_pps = pps;
            row.data_rate_bps = pps * ((size - HEADER_LEN) * 8) as f64;
            row
        } else {
            let sized: Vec<ResolvedStream> = streams
                .iter()
                .cloned()
                .map(|mut s| {
                    for g in &mut s.stream.generators {
                        g.packet_size = size - HEADER_LEN;
                    }
                    s
                })
                .collect();
            let stop = StopConfig { packets: Some(per * sized.len() as u64), duration_s: cfg.stop.duration_s };
            run_streams(&RunSpec::from_config(cfg, sized, stop))?.row(format!("{size} B"))
        };
        log::info!("{size} B: {:.3} Mp/s", row.packet_rate_pps / 1e6);
        report.rows.push(row.param("size", size as f64));
    }
    let rate = |s: usize| report.rows.iter().find(|r| r.params["size"] == s as f64).map(|r| r.packet_rate_pps);
    let steps: Vec<(usize, f64, f64)> = base_sizes()
        .into_iter()
        .filter_map(|s| Some((s, rate(s)?, rate(s + 1)?)))
        .collect();
    let drops = steps.iter().filter(|(_, a, b)| b < a).count();
    let detail = format!("{drops} of {} size steps s -> s+1 lower the rate", steps.len());
    report.check("row for every listed size", report.rows.len() == sizes.len(), format!("{} rows", report.rows.len()));
    if cfg.transport == TransportMode::Sim {
        report.check("rate drops from s to s+1", drops == steps.len() && !steps.is_empty(), detail);
    } else {
        report.notes.push(detail);
    }
    Ok(report)
}

fn loss_fraction(row: &ReportRow) -> f64 {
    match row.loss {
        LossBound::Observed(v) => v,
        _ => 0.0,
    }
}

/// Orders plan results by loss, then rate (higher first), then plan index.
pub fn rank(rows: &[ReportRow]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| {
        loss_fraction(&rows[a])
            .total_cmp(&loss_fraction(&rows[b]))
            .then(rows[b].packet_rate_pps.total_cmp(&rows[a].packet_rate_pps))
            .then(a.cmp(&b))
    });
    idx
}

/// Evaluates placement plans with `runner` and ranks them. Round 1 tries
/// every plan; later rounds only plans that keep workers on exclusive
/// positions. If the best plan loses packets, per-stream rates are lowered
/// alternately until it does not.
pub fn assign_search(
    cfg: &ExperimentConfig,
    mut runner: impl FnMut(&AssignmentPlan, &[ResolvedStream]) -> Result<ReportRow>,
) -> Result<PhaseReport> {
    ensure!(cfg.transport != TransportMode::Sim, "assign-search needs a real transport");
    let mut streams = cfg.resolve_streams()?;
    let n = streams.len();
    let layout = CcxLayout::default();
    let mut report = PhaseReport::new(Phase::AssignSearch, cfg.seed, transport_name(cfg));
    let mut best: Option<(AssignmentPlan, ReportRow)> = None;
    for round in 1..=cfg.assign_search.rounds.max(1) {
        let plans = layout.enumerate(n, round > 1);
        if plans.is_empty() {
            report.notes.push(format!("round {round}: no plan places {n} workers"));
            continue;
        }
        let mut rows = Vec::new();
        for plan in &plans {
            rows.push(runner(plan, &streams)?);
        }
        let order = rank(&rows);
        for (pos, &i) in order.iter().enumerate() {
            let row = rows[i]
                .clone()
                .param("round", round as f64)
                .param("plan_index", i as f64)
                .metric("rank", (pos + 1) as f64);
            report.rows.push(row);
        }
        let top = order[0];
        report.notes.push(format!("round {round}: {} plans, best {}", plans.len(), plans[top]));
        best = Some((plans[top].clone(), rows[top].clone()));
    }
    let Some((plan, mut row)) = best else { bail!("no plan could be evaluated") };
    let step = cfg.assign_search.reduce_step_bps;
    let mut k = 0;
    while loss_fraction(&row) > 0.0 && k < cfg.assign_search.max_reductions {
        let s = &mut streams[k % n];
        let g = &mut s.stream.generators[0];
        let Some(rate) = g.target_rate_bps else {
            report.notes.push(format!("stream {} is unpaced; cannot lower its rate", s.stream.stream_id));
            break;
        };
        if rate <= step {
            break;
        }
        g.target_rate_bps = Some(rate - step);
        k += 1;
        row = runner(&plan, &streams)?;
        let rates: Vec<String> =
            streams.iter().map(|s| format!("{:.2}", s.stream.generators[0].target_rate_bps.unwrap_or(0.0) / 1e9)).collect();
        report.rows.push(row.clone().param("reduction", k as f64));
        report.notes.push(format!("reduction {k}: rates {} Gb/s", rates.join("/")));
    }
    let lossless = loss_fraction(&row) == 0.0;
    report.check("lossless setting found", lossless, format!("{plan}, loss {:?}", row.loss));
    Ok(report)
}

/// Long run with payload verification of every stream.
pub fn soak(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PhaseReport> {
    ensure!(cfg.transport != TransportMode::Sim, "soak needs a real transport");
    ensure!(cfg.receiver.histogram, "soak needs payload histogramming");
    let streams = cfg.resolve_streams()?;
    for s in &streams {
        for g in &s.stream.generators {
            ensure!(g.pattern == Pattern::Counting16, "stream {}: soak needs the counting pattern", s.stream.stream_id);
            ensure!(
                g.word_order == cfg.receiver.word_order,
                "stream {}: generator and receiver word orders differ",
                s.stream.stream_id
            );
            g.validate_for_verification(cfg.payload_capacity())
                .map_err(|e| anyhow::anyhow!("stream {}: {e}", s.stream.stream_id))?;
        }
    }
    let stop = stop_or(&cfg.stop, seconds(10.0));
    let mut spec = RunSpec::from_config(cfg, streams, stop);
    spec.placement = cfg.placement()?;
    spec.stats_path = out.map(|d| d.join("stats.jsonl"));
    let run = run_streams(&spec)?;
    let mut report = PhaseReport::new(Phase::Soak, cfg.seed, transport_name(cfg));
    let o = &run.outcome;

    let mut all_uniform = true;
    let mut all_sums = true;
    for (i, audit) in o.audits.iter().enumerate() {
        let bytes = o.stats.streams[i].bytes;
        let secs = run.sends[i].duration.as_secs_f64();
        let mut row = ReportRow::from_audits(format!("stream {}", audit.stream_id), std::slice::from_ref(audit), bytes, secs)
            .param("stream_id", f64::from(audit.stream_id))
            .metric("terabytes", bytes as f64 / 1e12);
        if let Some(h) = &o.histograms[i] {
            let u = h.check_uniform();
            let uniform = u.as_ref().is_some_and(|u| u.pass);
            let sum = h.check_sum(bytes);
            all_uniform &= uniform;
            all_sums &= sum;
            if let Some(u) = u {
                row = row.metric("spread", u.spread as f64).metric("max_runs", u.max_runs as f64);
            }
            row = row.metric("uniform", f64::from(u8::from(uniform))).metric("sum_ok", f64::from(u8::from(sum)));
            if let Some(dir) = out {
                write_histogram(dir, audit.stream_id, h)?;
            }
        }
        if let Some(dir) = out {
            write_audit_json(dir, audit)?;
            write_events_csv(dir, audit)?;
        }
        report.rows.push(row);
    }
    let total = run.row("total");
    let events = total.loss_events;
    report.notes.push(format!(
        "{} packets, {:.3} TB in {:.1} s; loss {:?}",
        total.packets,
        total.bytes as f64 / 1e12,
        run.wall.as_secs_f64(),
        total.loss
    ));
    report.rows.push(total);
    report.check("zero audit events", events == 0, format!("{events} events"));
    report.check("histograms uniform with contiguous areas", all_uniform, String::new());
    report.check("histogram sums equal bytes/2", all_sums, String::new());
    let (free, slots) = o.census.iter().fold((0, 0), |(f, n), c| (f + c.free, n + c.slot_count));
    report.check("all slots returned", o.slots_returned(), format!("{free} of {slots} slots free"));
    report.check("senders reached the stop condition", run.complete(), String::new());
    Ok(report)
}

/// Fault plan of oracle run `index`: each probability drawn uniformly up
/// to its configured maximum.
pub fn oracle_plan(cfg: &ExperimentConfig, index: u64) -> FaultPlan {
    let o = &cfg.fault_oracle;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    FaultPlan {
        drop_prob: rng.gen::<f64>() * o.drop_prob_max,
        dup_prob: rng.gen::<f64>() * o.dup_prob_max,
        reorder_prob: rng.gen::<f64>() * o.reorder_prob_max,
        reorder_depth: o.reorder_depth,
        seed: rng.gen(),
        forced_drops: Vec::new(),
    }
}

/// Fault-injected loopback runs checked against the replay oracle.
pub fn fault_oracle(cfg: &ExperimentConfig) -> Result<PhaseReport> {
    ensure!(
        matches!(cfg.transport, TransportMode::Loopback) || (cfg.transport == TransportMode::Raw && cfg.iface.is_none()),
        "fault injection needs the in-process wire"
    );
    let o = &cfg.fault_oracle;
    let mut stream = cfg.resolve_streams()?.swap_remove(0);
    for g in &mut stream.stream.generators {
        g.packet_size = o.packet_size;
        g.pattern = Pattern::ConstantByte(0x5a);
        g.pause_ns = 0;
        g.target_rate_bps = None;
    }
    let mut receiver = cfg.receiver.clone();
    receiver.histogram = false;
    receiver.abort_on_event = false;
    receiver.event_cap = usize::MAX;
    let mut report = PhaseReport::new(Phase::FaultOracle, cfg.seed, transport_name(cfg));
    let mut failures = 0u64;
    let mut first_faulted: Option<(AuditReport, GroundTruth)> = None;

    let runs = std::iter::once(None).chain((0..o.seeds).map(Some));
    for index in runs {
        let plan = index.map(|i| oracle_plan(cfg, i));
        let mut s = stream.clone();
        s.faults = plan.clone();
        let mut spec = RunSpec::from_config(cfg, vec![s], StopConfig { packets: Some(o.packets), duration_s: None });
        spec.receiver = receiver.clone();
        let run = run_streams(&spec)?;
        let audit = run.outcome.audits[0].clone();
        let truth = run.truths[0].clone().unwrap_or_else(|| GroundTruth {
            submitted_ids: (0..o.packets).collect(),
            records: Vec::new(),
        });
        let diff = reconcile(&audit, &truth);
        if !diff.is_empty() || !run.complete() {
            failures += 1;
            log::error!("oracle mismatch for {index:?}: {diff:?}");
        }
        let label = index.map_or("no faults".to_owned(), |i| format!("seed {i}"));
        let mut row = run
            .row(label)
            .metric("mismatches", diff.mismatches as f64)
            .metric("expected_events", diff.expected as f64)
            .metric("faults", truth.records.len() as f64);
        if let (Some(i), Some(p)) = (index, &plan) {
            row = row
                .param("seed_index", i as f64)
                .metric("drop_prob", p.drop_prob)
                .metric("dup_prob", p.dup_prob)
                .metric("reorder_prob", p.reorder_prob);
        }
        report.rows.push(row);
        if index.is_some() && first_faulted.is_none() && !audit.events.is_empty() {
            first_faulted = Some((audit, truth));
        }
    }
    let runs = o.seeds + 1;
    report.check("audit matches the replay oracle", failures == 0, format!("{failures} of {runs} runs differ"));
    if o.self_test {
        let caught = first_faulted.as_ref().map(|(audit, truth)| {
            let delivered = replay_delivery(truth);
            let mut expected = replay_events(&delivered);
            if let Some(first) = expected.first_mut() {
                first.0 = match first.0 {
                    AuditEventKind::Missing(n) => AuditEventKind::Missing(n + 1),
                    AuditEventKind::ExtraOrRepeat(d) => AuditEventKind::ExtraOrRepeat(d - 1),
                };
            }
            !reconcile_events(audit, &expected, delivered.len() as u64).is_empty()
        });
        report.check(
            "corrupted expectation is caught",
            caught == Some(true),
            match caught {
                None => "no faulted run produced events".into(),
                Some(c) => format!("mismatch reported: {c}"),
            },
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_split() {
        assert_eq!(split_even(10, 3), [4, 3, 3]);
        assert_eq!(split_even(100_000_000, 8).iter().sum::<u64>(), 100_000_000);
        assert_eq!(split_even(2, 4), [1, 1, 0, 0]);
    }

    #[test]
    fn rank_by_loss_then_rate_then_index() {
        let row = |pps: f64, missing: u64| {
            let mut r = ReportRow::from_audits("x", &[], 0, 1.0);
            r.packet_rate_pps = pps;
            r.loss = if missing > 0 { LossBound::Observed(missing as f64 / 100.0) } else { LossBound::UpperLimit(0.01) };
            r
        };
        let rows = [row(5.0, 1), row(3.0, 0), row(4.0, 0), row(4.0, 0), row(9.0, 2)];
        assert_eq!(rank(&rows), [2, 3, 1, 0, 4]);
    }

    #[test]
    fn oracle_plans_are_bounded_and_distinct() {
        let cfg = ExperimentConfig::default();
        let a = oracle_plan(&cfg, 0);
        let b = oracle_plan(&cfg, 1);
        assert_ne!(a, b);
        assert_eq!(a, oracle_plan(&cfg, 0));
        for p in [a, b] {
            assert!(p.drop_prob <= 1e-3 && p.dup_prob <= 1e-3 && p.reorder_prob <= 1e-3);
        }
    }
}
