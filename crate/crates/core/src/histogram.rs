//! 16-bit payload word histogram.
//!
//! Each word is split into its upper and lower byte, which index a 256x256
//! table of counters. For a lossless counting-pattern transfer the counters
//! take at most two values one apart, and the higher value covers one
//! contiguous (wrap-around) run of words.

use alloc::vec;
use alloc::vec::Vec;

use crate::pattern::WordOrder;

/// Number of bins (one per 16-bit value).
pub const BINS: usize = 1 << 16;

/// Occurrence counts of 16-bit payload words.
#[derive(Clone, PartialEq, Eq)]
pub struct WordHistogram {
    bins: Vec<u64>,
    total_words: u64,
    trailing_bytes: u64,
    order: WordOrder,
    carry: Option<u8>,
}

impl core::fmt::Debug for WordHistogram {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("WordHistogram")
            .field("total_words", &self.total_words)
            .field("trailing_bytes", &self.trailing_bytes)
            .field("order", &self.order)
            .finish_non_exhaustive()
    }
}

impl Default for WordHistogram {
    fn default() -> Self {
        Self::new(WordOrder::Little)
    }
}

/// Result of [`WordHistogram::check_uniform`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Uniformity {
    /// Highest counter.
    pub max: u64,
    /// Lowest counter.
    pub min: u64,
    /// `max - min`.
    pub spread: u64,
    /// Number of contiguous (wrap-around) runs of bins holding `max`; 0 when spread is 0.
    pub max_runs: usize,
    /// First word of the max-valued run when there is exactly one.
    pub max_run_start: Option<u16>,
    /// Length of all max-valued bins.
    pub max_bins: usize,
    /// Spread at most one and the max-valued bins form one run.
    pub pass: bool,
}

impl WordHistogram {
    /// Empty histogram decoding words in `order`.
    pub fn new(order: WordOrder) -> Self {
        Self { bins: vec![0; BINS], total_words: 0, trailing_bytes: 0, order, carry: None }
    }

    /// Adds every complete 16-bit word of `payload`. An odd trailing byte is
    /// counted in [`Self::trailing_bytes`] and not histogrammed.
    pub fn accumulate(&mut self, payload: &[u8]) {
        let words = payload.chunks_exact(2);
        self.trailing_bytes += words.remainder().len() as u64;
        self.total_words += words.len() as u64;
        let bins = &mut self.bins[..BINS];
        match self.order {
            WordOrder::Little => {
                for w in words {
                    bins[usize::from(u16::from_le_bytes([w[0], w[1]]))] += 1;
                }
            }
            WordOrder::Big => {
                for w in words {
                    bins[usize::from(u16::from_be_bytes([w[0], w[1]]))] += 1;
                }
            }
        }
    }

    /// Like [`Self::accumulate`], but treats consecutive calls as one byte
    /// stream, so words may straddle payloads of odd length.
    pub fn accumulate_stream(&mut self, mut payload: &[u8]) {
        if payload.is_empty() {
            return;
        }
        if let Some(lo) = self.carry.take() {
            let w = self.order.word([lo, payload[0]]);
            self.bins[usize::from(w)] += 1;
            self.total_words += 1;
            payload = &payload[1..];
        }
        let words = payload.chunks_exact(2);
        if let [b] = words.remainder() {
            self.carry = Some(*b);
        }
        self.total_words += words.len() as u64;
        for w in words {
            self.bins[usize::from(self.order.word([w[0], w[1]]))] += 1;
        }
    }

    /// Counter for `word`.
    pub fn count(&self, word: u16) -> u64 {
        self.bins[usize::from(word)]
    }

    /// Counter at (upper byte, lower byte).
    pub fn at(&self, upper: u8, lower: u8) -> u64 {
        self.count(u16::from_be_bytes([upper, lower]))
    }

    /// All 65536 counters, indexed by word value (row = upper byte).
    pub fn bins(&self) -> &[u64] {
        &self.bins
    }

    /// Words histogrammed.
    pub fn total_words(&self) -> u64 {
        self.total_words
    }

    /// Odd trailing bytes seen by [`Self::accumulate`].
    pub fn trailing_bytes(&self) -> u64 {
        self.trailing_bytes
    }

    /// Word byte order.
    pub fn order(&self) -> WordOrder {
        self.order
    }

    /// Adds another histogram's counts.
    pub fn merge(&mut self, other: &WordHistogram) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += *b;
        }
        self.total_words += other.total_words;
        self.trailing_bytes += other.trailing_bytes;
    }

    /// Min/max spread and contiguity of the max-valued bins. `None` if empty.
    pub fn check_uniform(&self) -> Option<Uniformity> {
        if self.total_words == 0 {
            return None;
        }
        let max = *self.bins.iter().max()?;
        let min = *self.bins.iter().min()?;
        let spread = max - min;
        let mut u = Uniformity { max, min, spread, max_runs: 0, max_run_start: None, max_bins: 0, pass: spread == 0 };
        if spread == 0 {
            return Some(u);
        }
        let is_max = |i: usize| self.bins[i % BINS] == max;
        let mut start = None;
        for i in 0..BINS {
            if is_max(i) {
                u.max_bins += 1;
                // a run starts where the previous bin (cyclically) is not max
                if !is_max(i + BINS - 1) {
                    u.max_runs += 1;
                    start = Some(i as u16);
                }
            }
        }
        if u.max_runs == 1 {
            u.max_run_start = start;
        }
        u.pass = spread <= 1 && u.max_runs == 1;
        Some(u)
    }

    /// True when the counters add up to half the bytes received.
    pub fn check_sum(&self, bytes_received: u64) -> bool {
        self.total_words == bytes_received / 2
    }

    /// 8-bit grayscale image, 256x256, row = upper byte. Counter `min` maps
    /// to 0 and `max` to 255; a flat histogram is uniformly 255.
    pub fn to_gray(&self) -> Vec<u8> {
        let max = self.bins.iter().copied().max().unwrap_or(0);
        let min = self.bins.iter().copied().min().unwrap_or(0);
        let range = max - min;
        self.bins
            .iter()
            .map(|&c| if range == 0 { 255 } else { (((c - min) as u128 * 255 + range as u128 / 2) / range as u128) as u8 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::{Generator, GeneratorConfig};
    use proptest::prelude::*;

    fn counting_bytes(n: usize) -> Vec<u8> {
        (0..n).map(|k| ((k / 2) as u16).to_le_bytes()[k % 2]).collect()
    }

    #[test]
    fn four_words() {
        let mut h = WordHistogram::default();
        h.accumulate(&[0, 0, 1, 0, 2, 0, 3, 0]);
        for w in 0..4 {
            assert_eq!(h.count(w), 1);
        }
        assert_eq!(h.total_words(), 4);
        assert_eq!(h.bins().iter().sum::<u64>(), 4);
    }

    #[test]
    fn empty_payload_is_noop() {
        let mut h = WordHistogram::default();
        h.accumulate(&[]);
        assert_eq!(h, WordHistogram::default());
        assert_eq!(h.check_uniform(), None);
    }

    #[test]
    fn odd_byte_counted() {
        let mut h = WordHistogram::default();
        h.accumulate(&[1, 0, 7]);
        assert_eq!(h.trailing_bytes(), 1);
        assert_eq!(h.total_words(), 1);
    }

    #[test]
    fn stream_mode_joins_odd_payloads() {
        let bytes = counting_bytes(1001);
        let mut h = WordHistogram::default();
        for part in bytes.chunks(65) {
            h.accumulate_stream(part);
        }
        assert_eq!(h.total_words(), 500);
        assert!((0..500).all(|w| h.count(w) == 1));
    }

    #[test]
    fn one_block_fills_first_8192_bins() {
        let mut g = Generator::new(GeneratorConfig::default());
        let mut h = WordHistogram::default();
        let mut bytes = 0;
        loop {
            let c = g.next_payload();
            bytes += c.bytes.len() as u64;
            h.accumulate(&c.bytes);
            if c.is_last_of_block {
                break;
            }
        }
        assert_eq!(bytes, 16384);
        assert!((0..8192).all(|w| h.count(w) == 1));
        assert!((8192..=u16::MAX).all(|w| h.count(w) == 0));
        assert!(h.check_sum(16384));
        let u = h.check_uniform().unwrap();
        assert_eq!((u.spread, u.max_runs, u.max_run_start, u.max_bins), (1, 1, Some(0), 8192));
        assert!(u.pass);
    }

    #[test]
    fn flat_histogram() {
        let mut h = WordHistogram::default();
        h.accumulate(&counting_bytes(2 * BINS * 3));
        let u = h.check_uniform().unwrap();
        assert_eq!((u.max, u.min, u.spread), (3, 3, 0));
        assert!(u.pass);
        assert!(h.to_gray().iter().all(|&p| p == 255));
    }

    #[test]
    fn single_dropped_packet_fails() {
        // three periods plus a partial one, minus a 2000-byte packet in the middle
        let mut bytes = counting_bytes(2 * BINS * 3 + 30_000);
        bytes.drain(10_000..12_000);
        let mut h = WordHistogram::default();
        h.accumulate(&bytes);
        let u = h.check_uniform().unwrap();
        assert!(!u.pass);
        assert_eq!(u.spread, 1);
        assert_eq!(u.max_runs, 2);
        let gray = h.to_gray();
        assert_eq!(gray.iter().filter(|&&p| p == 0).count(), BINS - 15_000 + 1000);
    }

    #[test]
    fn sum_check() {
        let mut h = WordHistogram::default();
        h.accumulate(&counting_bytes(16384));
        assert!(h.check_sum(16384));
        let mut short = WordHistogram::default();
        short.accumulate(&counting_bytes(16382));
        assert!(!short.check_sum(16384));
    }

    #[test]
    fn spread_one_two_gray_levels() {
        let mut h = WordHistogram::default();
        h.accumulate(&counting_bytes(2 * BINS + 200));
        let gray = h.to_gray();
        assert_eq!(gray.iter().filter(|&&p| p == 255).count(), 100);
        assert_eq!(gray.iter().filter(|&&p| p == 0).count(), BINS - 100);
    }

    #[test]
    fn wraparound_run_is_contiguous() {
        let mut h = WordHistogram::default();
        let words: Vec<u16> = (0xFF00..=0xFFFF).chain(0..0x100).collect();
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        h.accumulate(&bytes);
        let u = h.check_uniform().unwrap();
        assert_eq!(u.max_runs, 1);
        assert_eq!(u.max_run_start, Some(0xFF00));
        assert!(u.pass);
    }

    #[test]
    fn row_major_indexing() {
        let mut h = WordHistogram::default();
        h.accumulate(&0x1234u16.to_le_bytes());
        assert_eq!(h.at(0x12, 0x34), 1);
        let mut be = WordHistogram::new(WordOrder::Big);
        be.accumulate(&[0x12, 0x34]);
        assert_eq!(be.at(0x12, 0x34), 1);
    }

    proptest! {
        #[test]
        fn lossless_transfer_shape(words in 1usize..400_000) {
            let mut h = WordHistogram::default();
            h.accumulate(&counting_bytes(words * 2));
            let u = h.check_uniform().unwrap();
            prop_assert!(u.spread <= 1);
            prop_assert!(u.pass);
            if u.spread == 1 {
                prop_assert_eq!(u.max_bins, words % BINS);
                prop_assert_eq!(u.max_run_start, Some(0));
            } else {
                prop_assert_eq!(words % BINS, 0);
            }
        }

        #[test]
        fn order_insensitive(chunks in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..64), 0..20)) {
            let mut fwd = WordHistogram::default();
            let mut rev = WordHistogram::default();
            for c in &chunks { fwd.accumulate(c); }
            for c in chunks.iter().rev() { rev.accumulate(c); }
            prop_assert_eq!(fwd, rev);
        }

        #[test]
        fn dropped_packet_touches_at_most_half_its_bytes(start in 0usize..300_000, half in 1usize..1000) {
            let p = half * 2;
            let total = 400_000;
            let bytes = counting_bytes(total);
            let mut full = WordHistogram::default();
            full.accumulate(&bytes);
            let start = start & !1;
            let mut lossy = WordHistogram::default();
            lossy.accumulate(&bytes[..start]);
            lossy.accumulate(&bytes[start + p..]);
            let changed = full.bins().iter().zip(lossy.bins()).filter(|(a, b)| a != b).count();
            prop_assert!(changed <= p.div_ceil(2));
        }
    }
}
