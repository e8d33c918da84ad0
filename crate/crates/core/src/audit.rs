//! Packet-identifier audit.
//!
//! Consecutive identifiers of a healthy stream differ by exactly 1. Any other
//! distance is reported: `d > 1` means `d - 1` packets are regarded missing,
//! `d <= 0` means an extra (repeated or late) packet was seen. A single late
//! packet therefore shows up as the triple Missing, ExtraOrRepeat, Missing.

use alloc::vec::Vec;

use crate::protocol::id_distance;

/// Default bound on stored events per stream.
pub const DEFAULT_EVENT_CAP: usize = 1_000_000;

/// Classification of one identifier jump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AuditEventKind {
    /// `count >= 1` identifiers were skipped.
    Missing(u64),
    /// Distance `<= 0`: the packet was already accounted for.
    ExtraOrRepeat(i64),
}

/// A reported identifier jump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AuditEvent {
    /// What happened.
    pub kind: AuditEventKind,
    /// Identifier of the packet that revealed the jump.
    pub at_packet_id: u64,
    /// Zero-based index of that packet in receive order.
    pub at_receive_index: u64,
    /// Receive timestamp of that packet (monotonic ns).
    pub timestamp_ns: u64,
}

/// Loss figure of a stream.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind", content = "value"))]
pub enum LossBound {
    /// Losses were seen: missing / (received + missing).
    Observed(f64),
    /// No loss seen: the next packet is assumed lost, 1 / (received + 1).
    UpperLimit(f64),
    /// Nothing received and nothing missing.
    NoData,
}

impl LossBound {
    /// The ratio, if any.
    pub fn value(&self) -> Option<f64> {
        match *self {
            LossBound::Observed(v) | LossBound::UpperLimit(v) => Some(v),
            LossBound::NoData => None,
        }
    }
}

/// Ratio of lost to transferred packets, or its upper limit when nothing was lost.
pub fn loss_upper_limit(packets_received: u64, missing: u64) -> LossBound {
    match (packets_received, missing) {
        (0, 0) => LossBound::NoData,
        (n, 0) => LossBound::UpperLimit(1.0 / (n as f64 + 1.0)),
        (n, m) => LossBound::Observed(m as f64 / (n as f64 + m as f64)),
    }
}

/// Per-stream audit state, fed one identifier at a time in receive order.
#[derive(Debug, Clone)]
pub struct StreamAudit {
    stream_id: u16,
    prev: Option<u64>,
    first_id: Option<u64>,
    received: u64,
    packets_ok: u64,
    total_missing: u64,
    total_extra: u64,
    extra_rewind: u64,
    events: Vec<AuditEvent>,
    event_cap: usize,
    events_overflow: u64,
}

impl StreamAudit {
    /// The first observed identifier becomes the baseline.
    pub fn new(stream_id: u16) -> Self {
        Self {
            stream_id,
            prev: None,
            first_id: None,
            received: 0,
            packets_ok: 0,
            total_missing: 0,
            total_extra: 0,
            extra_rewind: 0,
            events: Vec::new(),
            event_cap: DEFAULT_EVENT_CAP,
            events_overflow: 0,
        }
    }

    /// The first packet is checked against `expected_first`, so a stream
    /// starting at the wrong identifier produces a jump.
    pub fn with_expected_first(stream_id: u16, expected_first: u64) -> Self {
        let mut a = Self::new(stream_id);
        a.prev = Some(expected_first.wrapping_sub(1));
        a
    }

    /// Changes the bound on stored events.
    pub fn with_event_cap(mut self, cap: usize) -> Self {
        self.event_cap = cap;
        self
    }

    /// Feeds one received identifier.
    pub fn observe(&mut self, packet_id: u64, timestamp_ns: u64) -> Option<AuditEvent> {
        let index = self.received;
        self.received += 1;
        if self.first_id.is_none() {
            self.first_id = Some(packet_id);
        }
        let Some(prev) = self.prev.replace(packet_id) else {
            self.packets_ok += 1;
            return None;
        };
        let d = id_distance(prev, packet_id);
        let kind = if d == 1 {
            self.packets_ok += 1;
            return None;
        } else if d > 1 {
            self.packets_ok += 1;
            self.total_missing += (d - 1) as u64;
            AuditEventKind::Missing((d - 1) as u64)
        } else {
            self.total_extra += 1;
            self.extra_rewind += d.unsigned_abs();
            AuditEventKind::ExtraOrRepeat(d)
        };
        let ev = AuditEvent { kind, at_packet_id: packet_id, at_receive_index: index, timestamp_ns };
        if self.events.len() < self.event_cap {
            self.events.push(ev);
        } else {
            self.events_overflow += 1;
        }
        Some(ev)
    }

    /// Stored events in receive order.
    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    /// Packets observed.
    pub fn received(&self) -> u64 {
        self.received
    }

    /// Events reported (stored plus overflowed).
    pub fn event_count(&self) -> u64 {
        self.events.len() as u64 + self.events_overflow
    }

    /// Snapshot of the counters and events.
    pub fn report(&self) -> AuditReport {
        AuditReport {
            stream_id: self.stream_id,
            events: self.events.clone(),
            events_overflow: self.events_overflow,
            packets_received: self.received,
            packets_ok: self.packets_ok,
            total_missing: self.total_missing,
            total_extra: self.total_extra,
            extra_rewind: self.extra_rewind,
            first_id: self.first_id,
            last_id: self.prev.filter(|_| self.first_id.is_some()),
            loss: loss_upper_limit(self.received, self.total_missing),
        }
    }
}

/// Audit summary of one stream.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AuditReport {
    /// Stream audited.
    pub stream_id: u16,
    /// Stored events, at most the event cap.
    pub events: Vec<AuditEvent>,
    /// Events dropped from storage after the cap was hit.
    pub events_overflow: u64,
    /// All packets observed.
    pub packets_received: u64,
    /// Baseline packet plus every packet with distance >= 1.
    pub packets_ok: u64,
    /// Sum of Missing counts.
    pub total_missing: u64,
    /// Packets with distance <= 0.
    pub total_extra: u64,
    /// Sum of |distance| over packets with distance <= 0.
    pub extra_rewind: u64,
    /// First identifier observed.
    pub first_id: Option<u64>,
    /// Last identifier observed.
    pub last_id: Option<u64>,
    /// Loss ratio or upper limit.
    pub loss: LossBound,
}

impl AuditReport {
    /// True when no event was ever reported.
    pub fn is_clean(&self) -> bool {
        self.events.is_empty() && self.events_overflow == 0
    }

    /// Checks `last - first + 1 == packets_ok + total_missing - extra_rewind`
    /// (in wrapping identifier arithmetic).
    pub fn accounting_holds(&self) -> bool {
        match (self.first_id, self.last_id) {
            (Some(first), Some(last)) => {
                let span = i128::from(id_distance(first, last)) + 1;
                span == i128::from(self.packets_ok) + i128::from(self.total_missing) - i128::from(self.extra_rewind)
            }
            _ => self.packets_received == 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn run(ids: &[u64]) -> (Vec<AuditEventKind>, Vec<u64>, AuditReport) {
        let mut a = StreamAudit::new(0);
        for (t, &id) in ids.iter().enumerate() {
            a.observe(id, t as u64);
        }
        let r = a.report();
        (r.events.iter().map(|e| e.kind).collect(), r.events.iter().map(|e| e.at_packet_id).collect(), r)
    }

    #[test]
    fn single_gap() {
        let (kinds, at, r) = run(&[1, 2, 3, 5]);
        assert_eq!(kinds, vec![AuditEventKind::Missing(1)]);
        assert_eq!(at, vec![5]);
        assert_eq!(r.total_missing, 1);
        assert!(r.accounting_holds());
    }

    #[test]
    fn swap_gives_three_reports() {
        let (kinds, at, r) = run(&[1, 2, 4, 3, 5]);
        assert_eq!(
            kinds,
            vec![AuditEventKind::Missing(1), AuditEventKind::ExtraOrRepeat(-1), AuditEventKind::Missing(1)]
        );
        assert_eq!(at, vec![4, 3, 5]);
        assert!(r.accounting_holds());
    }

    #[test]
    fn repeat_is_distance_zero() {
        let (kinds, at, r) = run(&[1, 2, 2, 3]);
        assert_eq!(kinds, vec![AuditEventKind::ExtraOrRepeat(0)]);
        assert_eq!(at, vec![2]);
        assert_eq!(r.total_extra, 1);
        assert!(r.accounting_holds());
    }

    #[test]
    fn expected_first_detects_misaligned_start() {
        let mut a = StreamAudit::with_expected_first(3, 0);
        assert_eq!(a.observe(0, 0), None);
        let mut b = StreamAudit::with_expected_first(3, 0);
        let ev = b.observe(1000, 0).unwrap();
        assert_eq!(ev.kind, AuditEventKind::Missing(1000));
    }

    #[test]
    fn restarted_stream_jump_detected() {
        // one receiver, first stream stopped at 499, second stream starts at 10_000
        let ids: Vec<u64> = (0..500).chain(10_000..10_100).collect();
        let (kinds, at, _) = run(&ids);
        assert_eq!(kinds, vec![AuditEventKind::Missing(10_000 - 500)]);
        assert_eq!(at, vec![10_000]);
    }

    #[test]
    fn wraparound_is_healthy() {
        let (kinds, _, r) = run(&[u64::MAX - 1, u64::MAX, 0, 1]);
        assert!(kinds.is_empty());
        assert!(r.accounting_holds());
    }

    #[test]
    fn event_cap_overflows() {
        let mut a = StreamAudit::new(0).with_event_cap(2);
        for id in [0, 2, 4, 6, 8] {
            a.observe(id, 0);
        }
        let r = a.report();
        assert_eq!(r.events.len(), 2);
        assert_eq!(r.events_overflow, 2);
        assert_eq!(a.event_count(), 4);
        assert!(!r.is_clean());
    }

    #[test]
    fn upper_limit_values() {
        assert_eq!(loss_upper_limit(99, 1), LossBound::Observed(0.01));
        assert_eq!(loss_upper_limit(0, 0), LossBound::NoData);
        assert_eq!(loss_upper_limit(0, 4), LossBound::Observed(1.0));
        let LossBound::UpperLimit(v) = loss_upper_limit(100_000_000, 0) else { panic!() };
        assert!((v - 1.0 / 100_000_001.0).abs() < 1e-24);
    }

    #[test]
    fn empty_report() {
        let r = StreamAudit::new(1).report();
        assert_eq!(r.first_id, None);
        assert_eq!(r.last_id, None);
        assert!(r.accounting_holds());
        assert_eq!(r.loss, LossBound::NoData);
    }

    proptest! {
        #[test]
        fn accounting_identity(ids in proptest::collection::vec(0u64..64, 1..200)) {
            let (_, _, r) = run(&ids);
            prop_assert!(r.accounting_holds());
        }

        #[test]
        fn adjacent_swap_signature(start in 0u64..1_000_000, len in 4usize..200, at in 1usize..1000) {
            let mut ids: Vec<u64> = (start..start + len as u64).collect();
            let i = at % (len - 1);
            ids.swap(i, i + 1);
            let (kinds, _, r) = run(&ids);
            prop_assert!(r.accounting_holds());
            if i == 0 {
                // swap at the baseline: the late packet looks like a repeat, then one jump
                prop_assert_eq!(kinds, vec![AuditEventKind::ExtraOrRepeat(-1), AuditEventKind::Missing(1)]);
            } else if i + 1 == len - 1 {
                // swap at the tail: the final catch-up jump never arrives
                prop_assert_eq!(kinds, vec![AuditEventKind::Missing(1), AuditEventKind::ExtraOrRepeat(-1)]);
            } else {
                prop_assert_eq!(kinds, vec![
                    AuditEventKind::Missing(1),
                    AuditEventKind::ExtraOrRepeat(-1),
                    AuditEventKind::Missing(1),
                ]);
            }
        }

        #[test]
        fn only_identity_is_clean(perm in Just((0u64..8).collect::<Vec<_>>()).prop_shuffle()) {
            let (kinds, _, _) = run(&perm);
            let sorted: Vec<u64> = (0..8).collect();
            prop_assert_eq!(kinds.is_empty(), perm == sorted);
        }
    }
}
