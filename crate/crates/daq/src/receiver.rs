//! Receive pipeline: intake from the slot rings, frame parsing, port demux,
//! identifier audit and per-stream payload histogramming.
//!
//! One management thread polls every receive queue, validates frames,
//! routes DROP packets to their stream by destination port, audits packet
//! ids and keeps the counters. It hands each good slot to the stream's
//! worker thread through a bounded queue; the worker histograms the
//! payload in place and returns the slot to its ring's free pool.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::ops::Range;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam::queue::ArrayQueue;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use drop_core::audit::{AuditEventKind, AuditReport, StreamAudit, DEFAULT_EVENT_CAP};
use drop_core::frame::{parse_frame, ChecksumLayer, FrameError};
use drop_core::histogram::WordHistogram;
use drop_core::pattern::WordOrder;
use drop_core::protocol::{decode_header, DecodeError, HEADER_LEN};
use drop_core::topology::{AssignmentPlan, CcxLayout, Violation};

use crate::affinity::Pinning;
use crate::slots::{Idle, SlotCensus, SlotHandle, SlotRing};
use crate::transport::{Poll, RxQueue, WireFrame};

/// Frames taken from one queue before moving to the next.
const POLL_BATCH: usize = 64;

/// Routes one UDP destination port to one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamBinding {
    /// UDP destination port.
    pub port: u16,
    /// DROP stream id expected on that port.
    pub stream_id: u16,
}

/// Thread placement of one receiver instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    /// Positions of the management thread and the workers (one per binding).
    pub plan: AssignmentPlan,
    /// Mapping of positions to OS cores.
    pub pinning: Pinning,
}

/// Receiver settings.
#[derive(Debug, Clone)]
pub struct ReceiverConfig {
    /// Port-to-stream routing; stream `i` of the outcome is binding `i`.
    pub bindings: Vec<StreamBinding>,
    /// Byte order of histogrammed words.
    pub word_order: WordOrder,
    /// Run the payload workers. Without them slots are recycled right after
    /// the audit.
    pub histogram: bool,
    /// Audit event list bound per stream.
    pub event_cap: usize,
    /// Identifier every stream is expected to start at; `None` takes the
    /// first received id as baseline.
    pub expected_first: Option<u64>,
    /// Interval of the periodic stats snapshot.
    pub stats_interval: Duration,
    /// JSON-lines file receiving the periodic snapshots.
    pub stats_path: Option<PathBuf>,
    /// Thread pinning; `None` leaves scheduling to the OS.
    pub placement: Option<Placement>,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            bindings: Vec::new(),
            word_order: WordOrder::Little,
            histogram: true,
            event_cap: DEFAULT_EVENT_CAP,
            expected_first: None,
            stats_interval: Duration::from_secs(1),
            stats_path: None,
            placement: None,
        }
    }
}

impl ReceiverConfig {
    /// Config for `bindings` with everything else at its default.
    pub fn for_bindings(bindings: Vec<StreamBinding>) -> Self {
        Self { bindings, ..Default::default() }
    }
}

/// When the receiver stops. It always stops once every queue is drained
/// (all loopback senders finished); the other conditions end it early.
#[derive(Debug, Clone, Default)]
pub struct RxStop {
    /// External stop request.
    pub flag: Option<Arc<AtomicBool>>,
    /// Wall-clock limit (monotonic clock).
    pub deadline: Option<Duration>,
    /// Stop once this many packets were accepted over all streams.
    pub packets: Option<u64>,
}

/// Receiver setup errors.
#[derive(Debug, Error)]
pub enum ReceiverError {
    /// No receive queue given.
    #[error("receiver needs at least one queue")]
    NoQueues,
    /// No stream bound.
    #[error("receiver needs at least one stream binding")]
    NoBindings,
    /// Two bindings on one port.
    #[error("port {0} bound twice")]
    DuplicatePort(u16),
    /// Two bindings for one stream.
    #[error("stream {0} bound twice")]
    DuplicateStream(u16),
    /// Placement does not match the bindings or breaks a rule.
    #[error("placement {plan}: {problem}")]
    Placement {
        /// Offending plan.
        plan: String,
        /// What is wrong.
        problem: String,
    },
    /// Stats file could not be created.
    #[error("stats file: {0}")]
    Io(#[from] io::Error),
}

/// A counter written by one thread and read by any. Reads are eventually
/// exact and never go backwards.
#[derive(Debug, Default)]
pub struct Counter(AtomicU64);

impl Counter {
    #[inline]
    fn add(&self, n: u64) {
        // single writer: a plain load/store pair is enough
        self.0.store(self.0.load(Ordering::Relaxed) + n, Ordering::Relaxed);
    }

    /// Current value.
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Counters of one stream.
#[derive(Debug, Default)]
pub struct StreamCounters {
    /// Packets accepted.
    pub packets: Counter,
    /// Payload bytes accepted (DROP headers excluded).
    pub bytes: Counter,
    /// Packets reported missing by the audit.
    pub missing: Counter,
    /// Audit events of kind extra-or-repeat.
    pub extra: Counter,
    /// Packets on this stream's port carrying another stream id.
    pub misrouted: Counter,
    /// Header shorter than 16 bytes.
    pub truncated_header: Counter,
    /// Unknown protocol version.
    pub bad_version: Counter,
    /// Reserved flag bits set.
    pub bad_flags: Counter,
    /// Declared payload longer than the datagram.
    pub bad_length: Counter,
}

/// Counters of one receive queue.
#[derive(Debug, Default)]
pub struct QueueCounters {
    /// Frames taken from the queue.
    pub frames: Counter,
    /// Packets lost because no slot was free.
    pub slots_exhausted: Counter,
    /// Frames to a port with no binding.
    pub unbound: Counter,
    /// Frames shorter than their headers.
    pub frame_truncated: Counter,
    /// Frames that are not IPv4/UDP or are fragmented.
    pub frame_unsupported: Counter,
    /// Malformed IPv4 header or inconsistent UDP length.
    pub frame_malformed: Counter,
    /// IPv4 header checksum failures.
    pub ipv4_checksum: Counter,
    /// UDP checksum failures.
    pub udp_checksum: Counter,
}

/// Live receiver counters, readable while the receiver runs.
#[derive(Debug)]
pub struct RxStats {
    started: Instant,
    bindings: Vec<StreamBinding>,
    /// Per stream, in binding order.
    pub streams: Vec<StreamCounters>,
    /// Per receive queue.
    pub queues: Vec<QueueCounters>,
}

/// Point-in-time copy of one stream's counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSnapshot {
    /// Stream id.
    pub stream_id: u16,
    /// Bound port.
    pub port: u16,
    /// Packets accepted.
    pub packets: u64,
    /// Payload bytes accepted.
    pub bytes: u64,
    /// Packets reported missing.
    pub missing: u64,
    /// Extra-or-repeat events.
    pub extra: u64,
    /// Misrouted packets.
    pub misrouted: u64,
    /// Header decode failures, all kinds.
    pub decode_errors: u64,
}

/// Point-in-time copy of one queue's counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    /// Frames taken.
    pub frames: u64,
    /// Slot exhaustion drops.
    pub slots_exhausted: u64,
    /// Unbound-port frames.
    pub unbound: u64,
    /// Frame validation failures, all kinds.
    pub frame_errors: u64,
    /// Of those, checksum failures.
    pub checksum_errors: u64,
}

/// Point-in-time copy of all counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RxSnapshot {
    /// Seconds since the receiver started.
    pub elapsed_s: f64,
    /// Per stream.
    pub streams: Vec<StreamSnapshot>,
    /// Per queue.
    pub queues: Vec<QueueSnapshot>,
}

impl RxSnapshot {
    /// Packets accepted over all streams.
    pub fn packets(&self) -> u64 {
        self.streams.iter().map(|s| s.packets).sum()
    }

    /// Payload bytes accepted over all streams.
    pub fn bytes(&self) -> u64 {
        self.streams.iter().map(|s| s.bytes).sum()
    }
}

impl RxStats {
    fn new(bindings: &[StreamBinding], queues: usize) -> Self {
        Self {
            started: Instant::now(),
            bindings: bindings.to_vec(),
            streams: bindings.iter().map(|_| StreamCounters::default()).collect(),
            queues: (0..queues).map(|_| QueueCounters::default()).collect(),
        }
    }

    /// Packets accepted over all streams so far.
    pub fn packets(&self) -> u64 {
        self.streams.iter().map(|s| s.packets.get()).sum()
    }

    /// Copies every counter.
    pub fn snapshot(&self) -> RxSnapshot {
        RxSnapshot {
            elapsed_s: self.started.elapsed().as_secs_f64(),
            streams: self
                .bindings
                .iter()
                .zip(&self.streams)
                .map(|(b, s)| StreamSnapshot {
                    stream_id: b.stream_id,
                    port: b.port,
                    packets: s.packets.get(),
                    bytes: s.bytes.get(),
                    missing: s.missing.get(),
                    extra: s.extra.get(),
                    misrouted: s.misrouted.get(),
                    decode_errors: s.truncated_header.get()
                        + s.bad_version.get()
                        + s.bad_flags.get()
                        + s.bad_length.get(),
                })
                .collect(),
            queues: self
                .queues
                .iter()
                .map(|q| {
                    let checksum_errors = q.ipv4_checksum.get() + q.udp_checksum.get();
                    QueueSnapshot {
                        frames: q.frames.get(),
                        slots_exhausted: q.slots_exhausted.get(),
                        unbound: q.unbound.get(),
                        frame_errors: q.frame_truncated.get()
                            + q.frame_unsupported.get()
                            + q.frame_malformed.get()
                            + checksum_errors,
                        checksum_errors,
                    }
                })
                .collect(),
        }
    }

    fn count_frame_error(&self, queue: usize, e: &FrameError) {
        let q = &self.queues[queue];
        match e {
            FrameError::Truncated(_) => q.frame_truncated.add(1),
            FrameError::NotIpv4(_) | FrameError::NotUdp(_) | FrameError::Fragmented => q.frame_unsupported.add(1),
            FrameError::BadIpv4Header | FrameError::UdpLength { .. } => q.frame_malformed.add(1),
            FrameError::Checksum(ChecksumLayer::Ipv4) => q.ipv4_checksum.add(1),
            FrameError::Checksum(ChecksumLayer::Udp) => q.udp_checksum.add(1),
        }
    }

    fn count_decode_error(&self, stream: usize, e: &DecodeError) {
        let s = &self.streams[stream];
        match e {
            DecodeError::TruncatedHeader(_) => s.truncated_header.add(1),
            DecodeError::UnsupportedVersion(_) => s.bad_version.add(1),
            DecodeError::NonzeroFlags(_) => s.bad_flags.add(1),
            DecodeError::PayloadLengthMismatch { .. } => s.bad_length.add(1),
        }
    }
}

/// Everything a finished receiver produced.
#[derive(Debug)]
pub struct ReceiverOutcome {
    /// Final counters.
    pub stats: RxSnapshot,
    /// Per stream, in binding order.
    pub audits: Vec<AuditReport>,
    /// Per stream, when histogramming was on.
    pub histograms: Vec<Option<WordHistogram>>,
    /// Slot distribution of every ring after shutdown.
    pub census: Vec<SlotCensus>,
}

impl ReceiverOutcome {
    /// Every ring has all of its slots back in the free pool.
    pub fn slots_returned(&self) -> bool {
        self.census.iter().all(SlotCensus::all_free)
    }
}

struct WorkItem {
    queue: usize,
    slot: SlotHandle,
    payload: Range<usize>,
}

/// A running receiver.
pub struct Receiver {
    stats: Arc<RxStats>,
    stop: Arc<AtomicBool>,
    rings: Arc<Vec<SlotRing>>,
    manager: JoinHandle<Vec<AuditReport>>,
    workers: Vec<Option<JoinHandle<WordHistogram>>>,
    monitor: Option<JoinHandle<io::Result<()>>>,
}

impl Receiver {
    /// Validates the setup and starts the management, worker and monitor
    /// threads.
    pub fn spawn(queues: Vec<RxQueue>, cfg: ReceiverConfig, stop: RxStop) -> Result<Self, ReceiverError> {
        check_config(&queues, &cfg)?;
        let stats = Arc::new(RxStats::new(&cfg.bindings, queues.len()));
        let stop_flag = stop.flag.clone().unwrap_or_default();
        let manager_done = Arc::new(AtomicBool::new(false));
        let rings: Arc<Vec<SlotRing>> = Arc::new(queues.iter().map(|q| q.ring().clone()).collect());
        let depth: usize = rings.iter().map(|r| r.config().slot_count).sum();

        let mut handoff = Vec::new();
        let mut workers = Vec::new();
        for (i, b) in cfg.bindings.iter().enumerate() {
            if !cfg.histogram {
                handoff.push(None);
                workers.push(None);
                continue;
            }
            let q = Arc::new(ArrayQueue::<WorkItem>::new(depth));
            handoff.push(Some(q.clone()));
            let rings = rings.clone();
            let done = manager_done.clone();
            let order = cfg.word_order;
            let pin = cfg.placement.as_ref().map(|p| (p.pinning.clone(), p.plan.workers[i]));
            let handle = std::thread::Builder::new()
                .name(format!("worker-{}", b.stream_id))
                .spawn(move || {
                    if let Some((pinning, pos)) = pin {
                        pinning.pin_current(pos);
                    }
                    run_worker(&q, &rings, order, &done)
                })?;
            workers.push(Some(handle));
        }

        let monitor = match &cfg.stats_path {
            Some(path) => {
                let mut out = BufWriter::new(File::create(path)?);
                let stats = stats.clone();
                let done = manager_done.clone();
                let interval = cfg.stats_interval;
                Some(std::thread::Builder::new().name("rx-monitor".into()).spawn(move || {
                    let mut next = Instant::now() + interval;
                    while !done.load(Ordering::Acquire) {
                        std::thread::sleep(Duration::from_millis(10).min(interval));
                        if Instant::now() >= next {
                            serde_json::to_writer(&mut out, &stats.snapshot())?;
                            out.write_all(b"\n")?;
                            out.flush()?;
                            next += interval;
                        }
                    }
                    serde_json::to_writer(&mut out, &stats.snapshot())?;
                    out.write_all(b"\n")?;
                    out.flush()
                })?)
            }
            None => None,
        };

        let manager = {
            let stats = stats.clone();
            let stop_flag = stop_flag.clone();
            let pin = cfg.placement.as_ref().map(|p| (p.pinning.clone(), p.plan.receiver));
            let done = manager_done.clone();
            std::thread::Builder::new().name("rx-manager".into()).spawn(move || {
                if let Some((pinning, pos)) = pin {
                    pinning.pin_current(pos);
                }
                let mut m = Manager::new(&cfg, &stats, handoff);
                m.run(queues, &stop_flag, &stop);
                // workers see the flag only after the last handoff
                done.store(true, Ordering::Release);
                m.audits.iter().map(StreamAudit::report).collect()
            })?
        };

        Ok(Self { stats, stop: stop_flag, rings, manager, workers, monitor })
    }

    /// Live counters.
    pub fn stats(&self) -> &Arc<RxStats> {
        &self.stats
    }

    /// Asks the receiver to stop; in-flight frames are discarded.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }

    /// Waits for every thread and collects the results.
    pub fn join(self) -> ReceiverOutcome {
        let audits = self.manager.join().expect("management thread panicked");
        let histograms =
            self.workers.into_iter().map(|w| w.map(|h| h.join().expect("worker thread panicked"))).collect();
        if let Some(m) = self.monitor {
            if let Err(e) = m.join().expect("monitor thread panicked") {
                log::warn!("stats snapshots incomplete: {e}");
            }
        }
        // workers return their last slots after the manager exits
        let census = self.rings.iter().map(SlotRing::census).collect();
        ReceiverOutcome { stats: self.stats.snapshot(), audits, histograms, census }
    }
}

/// Runs a receiver to completion on `queues`.
pub fn run_receiver(queues: Vec<RxQueue>, cfg: ReceiverConfig, stop: RxStop) -> Result<ReceiverOutcome, ReceiverError> {
    Ok(Receiver::spawn(queues, cfg, stop)?.join())
}

fn check_config(queues: &[RxQueue], cfg: &ReceiverConfig) -> Result<(), ReceiverError> {
    if queues.is_empty() {
        return Err(ReceiverError::NoQueues);
    }
    if cfg.bindings.is_empty() {
        return Err(ReceiverError::NoBindings);
    }
    for (i, b) in cfg.bindings.iter().enumerate() {
        for other in &cfg.bindings[..i] {
            if other.port == b.port {
                return Err(ReceiverError::DuplicatePort(b.port));
            }
            if other.stream_id == b.stream_id {
                return Err(ReceiverError::DuplicateStream(b.stream_id));
            }
        }
    }
    if let Some(p) = &cfg.placement {
        let problem = if p.plan.workers.len() != cfg.bindings.len() {
            Some(format!("{} workers for {} streams", p.plan.workers.len(), cfg.bindings.len()))
        } else {
            // exclusivity rules are what the assignment search measures, so
            // only structural problems are refused here
            let violations: Vec<Violation> = CcxLayout::default()
                .validate(&p.plan)
                .into_iter()
                .filter(|v| !matches!(v, Violation::SharesInterrupt { .. } | Violation::SharesReceiver { .. }))
                .collect();
            (!violations.is_empty()).then(|| violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
        };
        if let Some(problem) = problem {
            return Err(ReceiverError::Placement { plan: p.plan.to_string(), problem });
        }
    }
    Ok(())
}

struct Manager<'a> {
    stats: &'a RxStats,
    routes: HashMap<u16, usize>,
    bindings: Vec<StreamBinding>,
    audits: Vec<StreamAudit>,
    handoff: Vec<Option<Arc<ArrayQueue<WorkItem>>>>,
    accepted: u64,
}

impl<'a> Manager<'a> {
    fn new(cfg: &ReceiverConfig, stats: &'a RxStats, handoff: Vec<Option<Arc<ArrayQueue<WorkItem>>>>) -> Self {
        let audits = cfg
            .bindings
            .iter()
            .map(|b| {
                let a = match cfg.expected_first {
                    Some(first) => StreamAudit::with_expected_first(b.stream_id, first),
                    None => StreamAudit::new(b.stream_id),
                };
                a.with_event_cap(cfg.event_cap)
            })
            .collect();
        Self {
            stats,
            routes: cfg.bindings.iter().enumerate().map(|(i, b)| (b.port, i)).collect(),
            bindings: cfg.bindings.clone(),
            audits,
            handoff,
            accepted: 0,
        }
    }

    fn run(&mut self, mut queues: Vec<RxQueue>, flag: &AtomicBool, stop: &RxStop) {
        let start = self.stats.started;
        let mut idle = Idle::default();
        loop {
            if flag.load(Ordering::Relaxed)
                || stop.deadline.is_some_and(|d| start.elapsed() >= d)
                || stop.packets.is_some_and(|n| self.accepted >= n)
            {
                break;
            }
            let now_ns = start.elapsed().as_nanos() as u64;
            let mut got = false;
            for (qi, q) in queues.iter_mut().enumerate() {
                for _ in 0..POLL_BATCH {
                    match q.poll() {
                        Ok(Poll::Frame(f)) => {
                            got = true;
                            self.handle(qi, q.ring(), q.is_raw(), f, now_ns);
                        }
                        Ok(Poll::Exhausted) => {
                            got = true;
                            self.stats.queues[qi].slots_exhausted.add(1);
                        }
                        Ok(Poll::Empty) => break,
                        Err(e) => {
                            log::error!("receive queue {qi}: {e}");
                            break;
                        }
                    }
                }
            }
            if got {
                idle.reset();
            } else if queues.iter().all(RxQueue::is_drained) {
                break;
            } else {
                idle.wait();
            }
        }
        // discard whatever is still queued
        for q in &mut queues {
            q.close();
        }
    }

    fn handle(&mut self, qi: usize, ring: &SlotRing, raw: bool, f: WireFrame, now_ns: u64) {
        let qc = &self.stats.queues[qi];
        qc.frames.add(1);
        let bytes = &ring.slot(&f.slot)[..f.len as usize];
        let (port, range) = if raw {
            match parse_frame(bytes) {
                Ok(v) => (v.dst_port, v.payload),
                Err(e) => {
                    self.stats.count_frame_error(qi, &e);
                    ring.release(f.slot);
                    return;
                }
            }
        } else {
            (f.port, 0..bytes.len())
        };
        let Some(&si) = self.routes.get(&port) else {
            qc.unbound.add(1);
            ring.release(f.slot);
            return;
        };
        let header = match decode_header(&bytes[range.clone()]) {
            Ok(h) => h,
            Err(e) => {
                self.stats.count_decode_error(si, &e);
                ring.release(f.slot);
                return;
            }
        };
        let sc = &self.stats.streams[si];
        if header.stream_id != self.bindings[si].stream_id {
            sc.misrouted.add(1);
            ring.release(f.slot);
            return;
        }
        if let Some(ev) = self.audits[si].observe(header.packet_id, now_ns) {
            match ev.kind {
                AuditEventKind::Missing(n) => sc.missing.add(n),
                AuditEventKind::ExtraOrRepeat(_) => sc.extra.add(1),
            }
        }
        sc.packets.add(1);
        sc.bytes.add(u64::from(header.payload_len));
        self.accepted += 1;

        let start = range.start + HEADER_LEN;
        let payload = start..start + usize::from(header.payload_len);
        match &self.handoff[si] {
            Some(q) => {
                ring.mark_to_worker();
                let mut item = WorkItem { queue: qi, slot: f.slot, payload };
                let mut idle = Idle::default();
                while let Err(back) = q.push(item) {
                    item = back;
                    idle.wait();
                }
            }
            None => ring.release(f.slot),
        }
    }
}

fn run_worker(q: &ArrayQueue<WorkItem>, rings: &[SlotRing], order: WordOrder, done: &AtomicBool) -> WordHistogram {
    let mut hist = WordHistogram::new(order);
    let mut idle = Idle::default();
    loop {
        match q.pop() {
            Some(item) => {
                idle.reset();
                let ring = &rings[item.queue];
                hist.accumulate(&ring.slot(&item.slot)[item.payload]);
                ring.release_from_worker(item.slot);
            }
            None if done.load(Ordering::Acquire) => {
                if q.is_empty() {
                    return hist;
                }
            }
            None => idle.wait(),
        }
    }
}
