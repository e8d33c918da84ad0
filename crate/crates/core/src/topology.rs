//! Thread placement inside one CCX (core complex).
//!
//! Two physical cores with two logical cores each give four positions:
//! 0 is the logical core servicing NIC interrupts, 1 its SMT sibling, 2 and 3
//! the logical cores of the second physical core. The receiving thread and
//! one worker per stream are placed on positions; workers go in ascending
//! stream order and, under rule W, never share a position with anything.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;
use thiserror::Error;

/// A logical-core slot inside a CCX.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct Position(pub u8);

/// The position that runs the interrupt thread.
pub const INTERRUPT_POSITION: Position = Position(0);

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{}", self.0)
    }
}

/// Active cores of one CCX.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CcxLayout {
    /// Physical cores enabled per CCX.
    pub physical_cores: u8,
    /// SMT threads per physical core.
    pub logical_per_physical: u8,
}

impl Default for CcxLayout {
    /// Two of four cores active, SMT-2.
    fn default() -> Self {
        Self { physical_cores: 2, logical_per_physical: 2 }
    }
}

impl CcxLayout {
    /// Number of positions.
    pub fn positions(&self) -> u8 {
        self.physical_cores * self.logical_per_physical
    }

    /// Physical core hosting `p`.
    pub fn physical_of(&self, p: Position) -> u8 {
        p.0 / self.logical_per_physical
    }

    /// Every plan for `n_streams` workers, receiver-major then workers in
    /// lexicographic order. Workers always take strictly increasing
    /// positions. With `rule_w`, workers also avoid position 0 and the
    /// receiver's position.
    pub fn enumerate(&self, n_streams: usize, rule_w: bool) -> Vec<AssignmentPlan> {
        let mut out = Vec::new();
        if n_streams == 0 {
            return out;
        }
        let all: Vec<Position> = (0..self.positions()).map(Position).collect();
        for &receiver in &all {
            let allowed: Vec<Position> = all
                .iter()
                .copied()
                .filter(|&p| !rule_w || (p != INTERRUPT_POSITION && p != receiver))
                .collect();
            for workers in combinations(&allowed, n_streams) {
                out.push(AssignmentPlan { receiver, workers });
            }
        }
        out
    }

    /// Every rule `plan` breaks; empty means valid.
    pub fn validate(&self, plan: &AssignmentPlan) -> Vec<Violation> {
        let mut v = Vec::new();
        let n = self.positions();
        if plan.receiver.0 >= n {
            v.push(Violation::OutOfRange { thread: Thread::Receiver, position: plan.receiver });
        }
        if plan.workers.is_empty() {
            v.push(Violation::NoWorkers);
        }
        for (s, &p) in plan.workers.iter().enumerate() {
            if p.0 >= n {
                v.push(Violation::OutOfRange { thread: Thread::Worker(s), position: p });
            }
            if p == INTERRUPT_POSITION {
                v.push(Violation::SharesInterrupt { stream: s });
            }
            if p == plan.receiver {
                v.push(Violation::SharesReceiver { stream: s });
            }
            for (t, &q) in plan.workers.iter().enumerate().skip(s + 1) {
                if p == q {
                    v.push(Violation::WorkersShare { first: s, second: t, position: p });
                } else if q < p {
                    v.push(Violation::Ordering { first: s, second: t });
                }
            }
        }
        v
    }
}

fn combinations(items: &[Position], k: usize) -> Vec<Vec<Position>> {
    if k == 0 {
        return alloc::vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Placement of one receiver instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AssignmentPlan {
    /// Position of the receiving/management thread.
    pub receiver: Position,
    /// Worker positions, index = stream number on this receiver.
    pub workers: Vec<Position>,
}

impl fmt::Display for AssignmentPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "recv{} workers", self.receiver)?;
        for w in &self.workers {
            write!(f, " {w}")?;
        }
        Ok(())
    }
}

/// Named plan with per-stream rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    /// Plan.
    pub plan: AssignmentPlan,
    /// Per-stream payload rate, bit/s.
    pub rates_bps: Vec<f64>,
}

impl AssignmentPlan {
    /// Builds a plan from raw position numbers.
    pub fn new(receiver: u8, workers: &[u8]) -> Self {
        Self { receiver: Position(receiver), workers: workers.iter().copied().map(Position).collect() }
    }

    /// Known presets: `paper-2stream` (receiver @2, workers @1 and @3 at
    /// 7.5 and 8.0 Gb/s), `paper-1stream` (receiver @0, worker @1).
    pub fn preset(name: &str) -> Option<Preset> {
        match name {
            "paper-2stream" => Some(Preset { plan: Self::new(2, &[1, 3]), rates_bps: alloc::vec![7.5e9, 8.0e9] }),
            "paper-1stream" => Some(Preset { plan: Self::new(0, &[1]), rates_bps: alloc::vec![10.0e9] }),
            _ => None,
        }
    }
}

/// Which thread a violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Thread {
    /// The receiving/management thread.
    Receiver,
    /// Worker of stream `n`.
    Worker(usize),
}

/// A broken placement rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Violation {
    /// Position outside the layout.
    #[error("{thread:?} placed on {position}, outside the CCX")]
    OutOfRange {
        /// Offending thread.
        thread: Thread,
        /// Its position.
        position: Position,
    },
    /// Worker on the interrupt thread's position.
    #[error("worker of stream {stream} shares position 0 with the interrupt thread")]
    SharesInterrupt {
        /// Stream index.
        stream: usize,
    },
    /// Worker on the receiver's position.
    #[error("worker of stream {stream} shares its position with the receiving thread")]
    SharesReceiver {
        /// Stream index.
        stream: usize,
    },
    /// Two workers on one position.
    #[error("workers of streams {first} and {second} share {position}")]
    WorkersShare {
        /// Lower stream.
        first: usize,
        /// Higher stream.
        second: usize,
        /// Shared position.
        position: Position,
    },
    /// A higher stream sits on a lower position.
    #[error("stream {second} is placed below stream {first}")]
    Ordering {
        /// Lower stream.
        first: usize,
        /// Higher stream.
        second: usize,
    },
    /// No worker at all.
    #[error("plan has no workers")]
    NoWorkers,
}

/// Plans for `n_streams` on the default two-core SMT-2 CCX.
pub fn enumerate_assignments(n_streams: usize, apply_rule_w: bool) -> Vec<AssignmentPlan> {
    CcxLayout::default().enumerate(n_streams, apply_rule_w)
}

/// Invalid core map lookups.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreMapError {
    /// CCX not in the map.
    #[error("CCX {0} is not in the core map")]
    UnknownCcx(usize),
    /// Position beyond the listed cores.
    #[error("CCX {ccx} lists {listed} logical cores, position {position} requested")]
    MissingPosition {
        /// CCX index.
        ccx: usize,
        /// Cores listed for it.
        listed: usize,
        /// Requested position.
        position: u8,
    },
}

/// User-supplied OS core numbering: CCX index to logical core ids in
/// position order (position 0 first).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct CoreMap(pub BTreeMap<usize, Vec<usize>>);

impl CoreMap {
    /// OS logical core for `position` on `ccx`.
    pub fn logical_core(&self, ccx: usize, position: Position) -> Result<usize, CoreMapError> {
        let cores = self.0.get(&ccx).ok_or(CoreMapError::UnknownCcx(ccx))?;
        cores
            .get(usize::from(position.0))
            .copied()
            .ok_or(CoreMapError::MissingPosition { ccx, listed: cores.len(), position: position.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use alloc::vec;
    use std::collections::HashSet;


    #[test]
    fn sixteen_without_pruning() {
        let plans = enumerate_assignments(1, false);
        assert_eq!(plans.len(), 16);
        let set: HashSet<_> = plans.iter().cloned().collect();
        assert_eq!(set.len(), 16);
    }

    #[test]
    fn six_for_two_streams() {
        let plans: HashSet<_> = enumerate_assignments(2, true).into_iter().collect();
        let expected: HashSet<_> = [
            AssignmentPlan::new(0, &[1, 2]),
            AssignmentPlan::new(0, &[1, 3]),
            AssignmentPlan::new(0, &[2, 3]),
            AssignmentPlan::new(1, &[2, 3]),
            AssignmentPlan::new(2, &[1, 3]),
            AssignmentPlan::new(3, &[1, 2]),
        ]
        .into_iter()
        .collect();
        assert_eq!(plans, expected);
    }

    #[test]
    fn three_streams_brute_force() {
        // brute force over all receiver x worker triples, filtered by the rules
        let mut brute = Vec::new();
        for r in 0..4u8 {
            for a in 0..4u8 {
                for b in 0..4u8 {
                    for c in 0..4u8 {
                        let ws = [a, b, c];
                        let exclusive = ws.iter().all(|&w| w != 0 && w != r);
                        if exclusive && a < b && b < c {
                            brute.push(AssignmentPlan::new(r, &ws));
                        }
                    }
                }
            }
        }
        assert_eq!(brute, vec![AssignmentPlan::new(0, &[1, 2, 3])]);
        assert_eq!(enumerate_assignments(3, true), brute);
        assert!(enumerate_assignments(4, true).is_empty());
        assert!(enumerate_assignments(0, false).is_empty());
    }

    #[test]
    fn validate_examples() {
        let l = CcxLayout::default();
        assert!(l.validate(&AssignmentPlan::new(0, &[1])).is_empty());
        assert_eq!(l.validate(&AssignmentPlan::new(1, &[0])), vec![Violation::SharesInterrupt { stream: 0 }]);
        assert_eq!(l.validate(&AssignmentPlan::new(0, &[2, 1])), vec![Violation::Ordering { first: 0, second: 1 }]);
        assert_eq!(l.validate(&AssignmentPlan::new(2, &[2])), vec![Violation::SharesReceiver { stream: 0 }]);
        assert_eq!(
            l.validate(&AssignmentPlan::new(0, &[3, 3])),
            vec![Violation::WorkersShare { first: 0, second: 1, position: Position(3) }]
        );
        assert!(matches!(l.validate(&AssignmentPlan::new(4, &[1]))[0], Violation::OutOfRange { .. }));
    }

    #[test]
    fn valid_plans_are_enumerated() {
        let l = CcxLayout::default();
        for n in 1..=3 {
            let listed: HashSet<_> = l.enumerate(n, true).into_iter().collect();
            for plan in l.enumerate(n, false) {
                if l.validate(&plan).is_empty() {
                    assert!(listed.contains(&plan), "{plan}");
                }
            }
            for plan in &listed {
                assert!(l.validate(plan).is_empty());
            }
        }
    }

    #[test]
    fn core_map_lookup() {
        let mut m = BTreeMap::new();
        m.insert(0, vec![0, 32, 1, 33]);
        let map = CoreMap(m);
        assert_eq!(map.logical_core(0, Position(1)), Ok(32));
        assert_eq!(map.logical_core(1, Position(1)), Err(CoreMapError::UnknownCcx(1)));
        assert!(matches!(map.logical_core(0, Position(4)), Err(CoreMapError::MissingPosition { .. })));
    }

    #[test]
    fn preset() {
        let p = AssignmentPlan::preset("paper-2stream").unwrap();
        assert_eq!(p.plan, AssignmentPlan::new(2, &[1, 3]));
        assert!(CcxLayout::default().validate(&p.plan).is_empty());
        assert_eq!(p.plan.to_string(), "recv@2 workers @1 @3");
        assert!(AssignmentPlan::preset("nope").is_none());
    }

    proptest! {
        #[test]
        fn valid_exactly_when_enumerated(receiver in 0u8..4, workers in proptest::collection::vec(0u8..4, 1..4)) {
            let layout = CcxLayout::default();
            let plan = AssignmentPlan::new(receiver, &workers);
            let listed = layout.enumerate(workers.len(), true).contains(&plan);
            prop_assert_eq!(layout.validate(&plan).is_empty(), listed);
        }
    }
}
