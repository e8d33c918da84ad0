//! Seeded fault injection and the replay oracle that checks the audit.
//!
//! The injector decides per submitted packet whether it is delivered,
//! dropped, duplicated or delayed. Decisions are recorded in a
//! [`GroundTruth`] log. [`reconcile`] rebuilds the delivery order from that
//! log alone, re-derives the expected identifier jumps and compares them with
//! what the audit reported.

use alloc::vec::Vec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audit::{AuditEventKind, AuditReport};

/// Fault probabilities for a loopback link.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FaultPlan {
    /// Probability a packet is dropped.
    pub drop_prob: f64,
    /// Probability a packet is sent twice back to back.
    pub dup_prob: f64,
    /// Probability a packet is held back.
    pub reorder_prob: f64,
    /// A held packet is released after 1..=reorder_depth later submissions.
    pub reorder_depth: u32,
    /// RNG seed.
    pub seed: u64,
    /// Packet identifiers that are always dropped.
    pub forced_drops: Vec<u64>,
}

impl FaultPlan {
    /// No faults at all.
    pub fn is_noop(&self) -> bool {
        self.drop_prob <= 0.0 && self.dup_prob <= 0.0 && self.reorder_prob <= 0.0 && self.forced_drops.is_empty()
    }
}

/// What happens to one submitted packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FaultAction {
    /// Delivered once, in order.
    Deliver,
    /// Never delivered.
    Drop,
    /// Delivered twice, back to back.
    Duplicate,
    /// Delivered after this many further submissions.
    Delay(u32),
}

/// Draws fault decisions. Every call consumes the same number of random
/// values so decisions for packet `k` depend only on the seed and `k`.
pub struct FaultInjector {
    plan: FaultPlan,
    rng: ChaCha8Rng,
}

impl FaultInjector {
    /// Seeds the RNG from `plan.seed`.
    pub fn new(mut plan: FaultPlan) -> Self {
        plan.forced_drops.sort_unstable();
        let rng = ChaCha8Rng::seed_from_u64(plan.seed);
        Self { plan, rng }
    }

    /// Decision for the next submitted packet.
    pub fn decide(&mut self, packet_id: u64) -> FaultAction {
        let u_drop: f64 = self.rng.gen();
        let u_dup: f64 = self.rng.gen();
        let u_reorder: f64 = self.rng.gen();
        let depth_draw: u32 = self.rng.gen();
        if u_drop < self.plan.drop_prob || self.plan.forced_drops.binary_search(&packet_id).is_ok() {
            FaultAction::Drop
        } else if u_dup < self.plan.dup_prob {
            FaultAction::Duplicate
        } else if u_reorder < self.plan.reorder_prob && self.plan.reorder_depth > 0 {
            FaultAction::Delay(1 + depth_draw % self.plan.reorder_depth)
        } else {
            FaultAction::Deliver
        }
    }
}

/// A non-trivial decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FaultRecord {
    /// Zero-based submission index.
    pub index: u64,
    /// Identifier of the affected packet.
    pub packet_id: u64,
    /// Decision taken.
    pub action: FaultAction,
}

/// Everything needed to replay what the link did.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroundTruth {
    /// Identifiers submitted, in order.
    pub submitted_ids: Vec<u64>,
    /// Faults applied, in submission order.
    pub records: Vec<FaultRecord>,
}

impl GroundTruth {
    /// Number of dropped packets.
    pub fn dropped(&self) -> usize {
        self.records.iter().filter(|r| r.action == FaultAction::Drop).count()
    }
}

/// Where a packet leaving [`FaultStage`] goes.
pub enum Delivery<T> {
    /// Onto the wire.
    Emit(T),
    /// Discarded; the caller reclaims the buffer.
    Discard(T),
}

/// Applies injector decisions to a stream of buffers.
pub struct FaultStage<T> {
    injector: FaultInjector,
    held: Vec<(u64, T)>,
    next_index: u64,
    truth: GroundTruth,
}

impl<T> FaultStage<T> {
    /// New stage for `plan`.
    pub fn new(plan: FaultPlan) -> Self {
        Self { injector: FaultInjector::new(plan), held: Vec::new(), next_index: 0, truth: GroundTruth::default() }
    }

    /// Submits one packet. `duplicate` produces a second buffer with the
    /// same contents when needed; `None` means no copy could be made and
    /// only the original is emitted.
    pub fn submit(
        &mut self,
        packet_id: u64,
        item: T,
        duplicate: impl FnOnce(&T) -> Option<T>,
        mut out: impl FnMut(Delivery<T>),
    ) {
        let index = self.next_index;
        self.next_index += 1;
        self.truth.submitted_ids.push(packet_id);
        let action = self.injector.decide(packet_id);
        if action != FaultAction::Deliver {
            self.truth.records.push(FaultRecord { index, packet_id, action });
        }
        match action {
            FaultAction::Deliver => out(Delivery::Emit(item)),
            FaultAction::Drop => out(Delivery::Discard(item)),
            FaultAction::Duplicate => {
                let copy = duplicate(&item);
                out(Delivery::Emit(item));
                if let Some(copy) = copy {
                    out(Delivery::Emit(copy));
                }
            }
            FaultAction::Delay(d) => self.held.push((index + u64::from(d), item)),
        }
        let mut i = 0;
        while i < self.held.len() {
            if self.held[i].0 <= index {
                out(Delivery::Emit(self.held.remove(i).1));
            } else {
                i += 1;
            }
        }
    }

    /// Releases every held packet in hold order.
    pub fn flush(&mut self, mut out: impl FnMut(Delivery<T>)) {
        for (_, item) in self.held.drain(..) {
            out(Delivery::Emit(item));
        }
    }

    /// Packets currently held back.
    pub fn held(&self) -> usize {
        self.held.len()
    }

    /// The decision log so far.
    pub fn ground_truth(&self) -> &GroundTruth {
        &self.truth
    }

    /// Consumes the stage, returning the log. Held packets are returned too.
    pub fn into_parts(self) -> (GroundTruth, Vec<T>) {
        (self.truth, self.held.into_iter().map(|(_, t)| t).collect())
    }
}

/// Delivery order implied by a ground-truth log.
///
/// Each delivered copy gets a sort key `(position, class, submission)`:
/// in-order copies sit at their own submission index with class 0, delayed
/// packets at the index they become due (or the end) with class 1.
pub fn replay_delivery(truth: &GroundTruth) -> Vec<u64> {
    let n = truth.submitted_ids.len() as u64;
    let mut keyed: Vec<((u64, u8, u64, u8), u64)> = Vec::with_capacity(truth.submitted_ids.len() + 16);
    let mut faults = truth.records.iter().peekable();
    for (index, &id) in truth.submitted_ids.iter().enumerate() {
        let index = index as u64;
        let action = match faults.peek() {
            Some(r) if r.index == index => faults.next().map(|r| r.action).unwrap_or(FaultAction::Deliver),
            _ => FaultAction::Deliver,
        };
        match action {
            FaultAction::Deliver => keyed.push(((index, 0, index, 0), id)),
            FaultAction::Drop => {}
            FaultAction::Duplicate => {
                keyed.push(((index, 0, index, 0), id));
                keyed.push(((index, 0, index, 1), id));
            }
            FaultAction::Delay(d) => {
                let due = index + u64::from(d);
                let pos = if due < n { due } else { n };
                keyed.push(((pos, 1, index, 0), id));
            }
        }
    }
    keyed.sort_unstable_by_key(|(k, _)| *k);
    keyed.into_iter().map(|(_, id)| id).collect()
}

/// Identifier jumps implied by a delivery order, computed with wide integers.
pub fn replay_events(delivered: &[u64]) -> Vec<(AuditEventKind, u64)> {
    let mut out = Vec::new();
    for pair in delivered.windows(2) {
        let raw = i128::from(pair[1]) - i128::from(pair[0]);
        // identifiers live on a 2^64 circle; pick the representative in [-2^63, 2^63)
        let m = 1i128 << 64;
        let d = (raw + m / 2).rem_euclid(m) - m / 2;
        if d > 1 {
            out.push((AuditEventKind::Missing((d - 1) as u64), pair[1]));
        } else if d <= 0 {
            out.push((AuditEventKind::ExtraOrRepeat(d as i64), pair[1]));
        }
    }
    out
}

/// Differences between reported and expected events.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReconcileDiff {
    /// Events the oracle expects.
    pub expected: usize,
    /// Events the audit reported.
    pub reported: usize,
    /// Positions where the two sequences disagree.
    pub mismatches: usize,
    /// First disagreement: index, expected, reported.
    pub first_mismatch: Option<(usize, Option<(AuditEventKind, u64)>, Option<(AuditEventKind, u64)>)>,
    /// The report hit its event cap, so it cannot be compared in full.
    pub truncated: bool,
    /// Packet counts differ between the report and the replayed delivery.
    pub packet_count: Option<(u64, u64)>,
}

impl ReconcileDiff {
    /// True when the report matches the oracle exactly.
    pub fn is_empty(&self) -> bool {
        self.mismatches == 0 && !self.truncated && self.packet_count.is_none()
    }
}

/// Compares an audit report with the events expected from `truth`.
pub fn reconcile(report: &AuditReport, truth: &GroundTruth) -> ReconcileDiff {
    let delivered = replay_delivery(truth);
    let expected = replay_events(&delivered);
    reconcile_events(report, &expected, delivered.len() as u64)
}

/// [`reconcile`] against an explicit expected event list.
pub fn reconcile_events(report: &AuditReport, expected: &[(AuditEventKind, u64)], delivered: u64) -> ReconcileDiff {
    let reported: Vec<(AuditEventKind, u64)> = report.events.iter().map(|e| (e.kind, e.at_packet_id)).collect();
    let mut diff = ReconcileDiff {
        expected: expected.len(),
        reported: reported.len(),
        truncated: report.events_overflow > 0,
        ..Default::default()
    };
    if report.packets_received != delivered {
        diff.packet_count = Some((delivered, report.packets_received));
    }
    for i in 0..expected.len().max(reported.len()) {
        let (e, r) = (expected.get(i).copied(), reported.get(i).copied());
        if e != r {
            diff.mismatches += 1;
            if diff.first_mismatch.is_none() {
                diff.first_mismatch = Some((i, e, r));
            }
        }
    }
    diff
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use crate::audit::StreamAudit;
    use alloc::vec;

    fn run_stage(plan: FaultPlan, n: u64) -> (Vec<u64>, GroundTruth) {
        let mut stage = FaultStage::new(plan);
        let mut wire = Vec::new();
        let mut sink = |d: Delivery<u64>| {
            if let Delivery::Emit(id) = d {
                wire.push(id)
            }
        };
        for id in 0..n {
            stage.submit(id, id, |x| Some(*x), &mut sink);
        }
        stage.flush(&mut sink);
        let (truth, held) = stage.into_parts();
        assert!(held.is_empty());
        (wire, truth)
    }

    fn audit(ids: &[u64]) -> AuditReport {
        let mut a = StreamAudit::new(0);
        for &id in ids {
            a.observe(id, 0);
        }
        a.report()
    }

    #[test]
    fn noop_plan_passes_everything() {
        let (wire, truth) = run_stage(FaultPlan::default(), 1000);
        assert_eq!(wire, (0..1000).collect::<Vec<_>>());
        assert!(truth.records.is_empty());
        assert!(reconcile(&audit(&wire), &truth).is_empty());
    }

    #[test]
    fn drop_everything() {
        let (wire, truth) = run_stage(FaultPlan { drop_prob: 1.0, ..Default::default() }, 500);
        assert!(wire.is_empty());
        assert_eq!(truth.dropped(), 500);
    }

    #[test]
    fn single_forced_drop() {
        let plan = FaultPlan { forced_drops: vec![42], ..Default::default() };
        let (wire, truth) = run_stage(plan, 100);
        let delivered = replay_delivery(&truth);
        assert_eq!(delivered, wire);
        assert_eq!(replay_events(&delivered), vec![(AuditEventKind::Missing(1), 43)]);
        assert!(reconcile(&audit(&wire), &truth).is_empty());
    }

    #[test]
    fn replay_matches_stage_under_mixed_faults() {
        for seed in 0..20 {
            let plan = FaultPlan {
                drop_prob: 0.02,
                dup_prob: 0.02,
                reorder_prob: 0.03,
                reorder_depth: 5,
                seed,
                forced_drops: vec![],
            };
            let (wire, truth) = run_stage(plan, 5000);
            assert_eq!(replay_delivery(&truth), wire, "seed {seed}");
            assert!(reconcile(&audit(&wire), &truth).is_empty(), "seed {seed}");
        }
    }

    #[test]
    fn drop_count_matches_independent_replay() {
        let plan = FaultPlan { drop_prob: 1e-4, seed: 77, ..Default::default() };
        let (_, truth) = run_stage(plan.clone(), 1_000_000);
        // replay the same seeded generator: four uniform draws per packet
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut drops = 0;
        for _ in 0..1_000_000 {
            let u: f64 = rng.gen();
            let _: (f64, f64, u32) = (rng.gen(), rng.gen(), rng.gen());
            drops += usize::from(u < 1e-4);
        }
        assert_eq!(truth.dropped(), drops);
        assert!(drops > 50 && drops < 150);
    }

    #[test]
    fn corrupted_expectation_is_caught() {
        let plan = FaultPlan { drop_prob: 0.01, seed: 3, ..Default::default() };
        let (wire, truth) = run_stage(plan, 10_000);
        let report = audit(&wire);
        let mut expected = replay_events(&replay_delivery(&truth));
        assert!(!expected.is_empty());
        expected[0].1 += 1;
        let diff = reconcile_events(&report, &expected, wire.len() as u64);
        assert!(!diff.is_empty());
        assert_eq!(diff.first_mismatch.unwrap().0, 0);
    }

    #[test]
    fn delay_past_end_released_on_flush() {
        let truth = GroundTruth {
            submitted_ids: vec![0, 1, 2, 3],
            records: vec![
                FaultRecord { index: 1, packet_id: 1, action: FaultAction::Delay(10) },
                FaultRecord { index: 2, packet_id: 2, action: FaultAction::Delay(1) },
            ],
        };
        assert_eq!(replay_delivery(&truth), vec![0, 3, 2, 1]);
    }

    proptest! {
        #[test]
        fn replay_reproduces_any_plan(
            seed in any::<u64>(),
            drop_prob in 0.0f64..0.2,
            dup_prob in 0.0f64..0.2,
            reorder_prob in 0.0f64..0.2,
            reorder_depth in 0u32..10,
            forced in proptest::collection::vec(0u64..2000, 0..5),
            n in 0u64..2000,
        ) {
            let plan = FaultPlan { drop_prob, dup_prob, reorder_prob, reorder_depth, seed, forced_drops: forced };
            let (wire, truth) = run_stage(plan, n);
            prop_assert_eq!(&replay_delivery(&truth), &wire);
            prop_assert!(reconcile(&audit(&wire), &truth).is_empty());
        }
    }
}
