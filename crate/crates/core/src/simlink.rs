//! Virtual-time model of a receiver with finite capacity.
//!
//! A single FIFO server with a bounded queue: each packet costs a fixed
//! per-packet time plus a cost per started segment of payload. Packets that
//! arrive to a full queue are dropped. Time is simulated, so results are
//! deterministic and independent of the host.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::audit::{AuditReport, StreamAudit};

/// Cost parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LinkModel {
    /// Fixed cost per packet, ns.
    pub per_packet_ns: f64,
    /// Cost per started segment, ns.
    pub per_segment_ns: f64,
    /// Segment size in bytes.
    pub segment_bytes: usize,
    /// Packets the receive queue holds.
    pub queue_depth: usize,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self { per_packet_ns: 50.0, per_segment_ns: 4.0, segment_bytes: 64, queue_depth: 4096 }
    }
}

impl LinkModel {
    /// A link that only limits the packet rate to `pps`.
    pub fn rate_limited(pps: f64, queue_depth: usize) -> Self {
        Self { per_packet_ns: 1e9 / pps, per_segment_ns: 0.0, segment_bytes: 64, queue_depth }
    }

    /// Service time of a packet of `size` bytes.
    pub fn service_ns(&self, size: usize) -> f64 {
        let segments = if self.segment_bytes == 0 { 0 } else { size.div_ceil(self.segment_bytes) };
        self.per_packet_ns + segments as f64 * self.per_segment_ns
    }

    /// Saturation packet rate for `size`-byte packets.
    pub fn capacity_pps(&self, size: usize) -> f64 {
        1e9 / self.service_ns(size)
    }
}

/// Running simulation state.
#[derive(Debug, Clone)]
pub struct SimLink {
    model: LinkModel,
    departures: VecDeque<f64>,
    delivered: u64,
    dropped: u64,
    last_departure: f64,
}

impl SimLink {
    /// Idle link.
    pub fn new(model: LinkModel) -> Self {
        Self { model, departures: VecDeque::new(), delivered: 0, dropped: 0, last_departure: 0.0 }
    }

    /// Offers a packet at time `t_ns` (non-decreasing). Returns whether it was accepted.
    pub fn offer(&mut self, t_ns: f64, size: usize) -> bool {
        while self.departures.front().is_some_and(|&d| d <= t_ns) {
            self.departures.pop_front();
        }
        if self.departures.len() >= self.model.queue_depth.max(1) {
            self.dropped += 1;
            return false;
        }
        let start = t_ns.max(self.last_departure);
        self.last_departure = start + self.model.service_ns(size);
        self.departures.push_back(self.last_departure);
        self.delivered += 1;
        true
    }

    /// Accepted packets.
    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Dropped packets.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Completion time of the last accepted packet.
    pub fn last_departure_ns(&self) -> f64 {
        self.last_departure
    }
}

/// One paced stream offered to a simulated link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimStream {
    /// Stream id for the audit.
    pub stream_id: u16,
    /// Time between packets, ns.
    pub period_ns: f64,
    /// Packet size, bytes.
    pub size: usize,
}

/// Outcome of [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    /// Packets offered.
    pub offered: u64,
    /// Packets accepted.
    pub delivered: u64,
    /// Packets dropped.
    pub dropped: u64,
    /// Offered window: time of the last arrival plus one period, ns.
    pub window_ns: f64,
    /// Per-stream audit of what was delivered.
    pub audits: Vec<AuditReport>,
}

impl SimOutcome {
    /// Offered packet rate.
    pub fn offered_pps(&self) -> f64 {
        self.offered as f64 * 1e9 / self.window_ns
    }

    /// Delivered packet rate.
    pub fn delivered_pps(&self) -> f64 {
        self.delivered as f64 * 1e9 / self.window_ns
    }
}

/// Offers `packets_per_stream` packets of each stream, with stream phases
/// staggered evenly across one period, and audits the delivered ids.
pub fn simulate(model: LinkModel, streams: &[SimStream], packets_per_stream: u64) -> SimOutcome {
    let n = streams.len().max(1) as f64;
    let mut next: Vec<(f64, u64)> =
        streams.iter().enumerate().map(|(i, s)| (s.period_ns * i as f64 / n, 0)).collect();
    let mut audits: Vec<StreamAudit> = streams.iter().map(|s| StreamAudit::new(s.stream_id)).collect();
    let mut link = SimLink::new(model);
    let mut offered = 0;
    let mut window: f64 = 0.0;
    loop {
        let pick = next
            .iter()
            .enumerate()
            .filter(|(_, (_, k))| *k < packets_per_stream)
            .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i);
        let Some(i) = pick else { break };
        let (t, k) = next[i];
        offered += 1;
        window = window.max(t + streams[i].period_ns);
        if link.offer(t, streams[i].size) {
            audits[i].observe(k, t as u64);
        }
        next[i] = (t + streams[i].period_ns, k + 1);
    }
    SimOutcome {
        offered,
        delivered: link.delivered(),
        dropped: link.dropped(),
        window_ns: window,
        audits: audits.iter().map(StreamAudit::report).collect(),
    }
}

/// Highest aggregate packet rate at which `n_streams` equal streams of
/// `size`-byte packets lose nothing over `packets_per_stream` packets each.
pub fn max_lossless_pps(model: LinkModel, size: usize, n_streams: usize, packets_per_stream: u64) -> f64 {
    let n_streams = n_streams.max(1);
    let lossless = |pps: f64| {
        let period = 1e9 * n_streams as f64 / pps;
        let streams: Vec<SimStream> =
            (0..n_streams).map(|i| SimStream { stream_id: i as u16, period_ns: period, size }).collect();
        simulate(model, &streams, packets_per_stream).dropped == 0
    };
    let cap = model.capacity_pps(size);
    let (mut lo, mut hi) = (cap * 0.5, cap * 4.0);
    if !lossless(lo) {
        lo = 0.0;
    }
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if lossless(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}
