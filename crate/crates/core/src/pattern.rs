//! Software replica of the FPGA data generators.
//!
//! A generator produces blocks of patterned data and cuts each block into
//! packets of at most `packet_size` bytes. The pattern is one continuous byte
//! stream across packet and block boundaries.

use alloc::vec::Vec;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protocol::MAX_SLOT_SIZE;

/// Bytes in one period of the 16-bit counting pattern.
pub const COUNTING_PERIOD_BYTES: usize = 65536 * 2;
/// Counting16 verification runs need blocks that are a multiple of 128 kbit.
pub const VERIFY_BLOCK_QUANTUM: u64 = 16384;
/// Line rate of the FPGA generators.
pub const FPGA_LINE_RATE_BPS: f64 = 10.24e9;

/// Payload pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Pattern {
    /// Consecutive 16-bit words starting at 0, wrapping 0xFFFF -> 0.
    Counting16,
    /// Every byte equal.
    ConstantByte(u8),
    /// Seeded pseudo-random bytes.
    Prng(u64),
}

/// Byte order of 16-bit words in the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum WordOrder {
    /// Low byte first.
    #[default]
    Little,
    /// High byte first.
    Big,
}

impl WordOrder {
    /// Encodes one word.
    #[inline]
    pub fn bytes(self, w: u16) -> [u8; 2] {
        match self {
            WordOrder::Little => w.to_le_bytes(),
            WordOrder::Big => w.to_be_bytes(),
        }
    }

    /// Decodes one word.
    #[inline]
    pub fn word(self, b: [u8; 2]) -> u16 {
        match self {
            WordOrder::Little => u16::from_le_bytes(b),
            WordOrder::Big => u16::from_be_bytes(b),
        }
    }
}

/// Parameters of one software data generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct GeneratorConfig {
    /// Bytes generated per block.
    pub block_size: u64,
    /// Largest payload of a single packet.
    pub packet_size: usize,
    /// Payload pattern.
    pub pattern: Pattern,
    /// Idle time after each packet, in nanoseconds.
    pub pause_ns: u64,
    /// Alternative to `pause_ns`: desired payload rate in bit/s.
    pub target_rate_bps: Option<f64>,
    /// Line rate used to compute per-packet wire time; `None` means unpaced.
    pub line_rate_bps: Option<f64>,
    /// Word byte order for `Counting16`.
    pub word_order: WordOrder,
    /// Packets taken per round-robin turn when several generators share a stream.
    pub weight: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            block_size: VERIFY_BLOCK_QUANTUM,
            packet_size: 2000,
            pattern: Pattern::Counting16,
            pause_ns: 0,
            target_rate_bps: None,
            line_rate_bps: None,
            word_order: WordOrder::Little,
            weight: 1,
        }
    }
}

/// Invalid generator parameters.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    /// `block_size` is zero.
    #[error("block_size must be > 0")]
    EmptyBlock,
    /// `packet_size` outside `1..=capacity`.
    #[error("packet_size {size} outside 1..={capacity}")]
    PacketSize {
        /// Configured size.
        size: usize,
        /// Slot payload capacity.
        capacity: usize,
    },
    /// Counting16 verification needs 16384-byte multiples.
    #[error("block_size {0} is not a multiple of 16384 bytes")]
    BlockQuantum(u64),
    /// Rates must be positive.
    #[error("rate {0} must be positive")]
    Rate(f64),
    /// Weight zero would starve the generator.
    #[error("weight must be >= 1")]
    Weight,
}

impl GeneratorConfig {
    /// Checks the basic invariants against a slot payload capacity.
    pub fn validate(&self, capacity: usize) -> Result<(), ConfigError> {
        if self.block_size == 0 {
            return Err(ConfigError::EmptyBlock);
        }
        let capacity = capacity.min(MAX_SLOT_SIZE);
        if self.packet_size == 0 || self.packet_size > capacity {
            return Err(ConfigError::PacketSize { size: self.packet_size, capacity });
        }
        for r in [self.target_rate_bps, self.line_rate_bps].into_iter().flatten() {
            if r.is_nan() || r <= 0.0 {
                return Err(ConfigError::Rate(r));
            }
        }
        if self.weight == 0 {
            return Err(ConfigError::Weight);
        }
        Ok(())
    }

    /// Additional constraint for histogram verification runs.
    pub fn validate_for_verification(&self, capacity: usize) -> Result<(), ConfigError> {
        self.validate(capacity)?;
        if self.pattern == Pattern::Counting16 && !self.block_size.is_multiple_of(VERIFY_BLOCK_QUANTUM) {
            return Err(ConfigError::BlockQuantum(self.block_size));
        }
        Ok(())
    }

    /// Time between the starts of consecutive packets of `len` bytes, or
    /// `None` when the generator is unpaced.
    pub fn packet_period_ns(&self, len: usize) -> Option<f64> {
        let wire = self.line_rate_bps.map(|r| wire_time_ns(len, r)).unwrap_or(0.0);
        let period = match self.target_rate_bps {
            Some(target) => wire + pause_for_rate_with_line(len, target, self.line_rate_bps) as f64,
            None => wire + self.pause_ns as f64,
        };
        (period > 0.0).then_some(period)
    }
}

fn wire_time_ns(len: usize, rate_bps: f64) -> f64 {
    if rate_bps.is_infinite() {
        0.0
    } else {
        len as f64 * 8.0 * 1e9 / rate_bps
    }
}

/// Pause in ns to insert after a packet so that the mean rate equals
/// `target_rate_bps`, given the FPGA line rate of 10.24 Gb/s.
pub fn pause_for_rate(packet_size: usize, target_rate_bps: f64) -> u64 {
    pause_for_rate_with_line(packet_size, target_rate_bps, Some(FPGA_LINE_RATE_BPS))
}

/// [`pause_for_rate`] with an explicit line rate (`None`: no wire time).
///
/// Pauses are whole nanoseconds; the fractional part is rounded to nearest.
pub fn pause_for_rate_with_line(packet_size: usize, target_rate_bps: f64, line_rate_bps: Option<f64>) -> u64 {
    let period = wire_time_ns(packet_size, target_rate_bps);
    let wire = line_rate_bps.map(|r| wire_time_ns(packet_size, r)).unwrap_or(0.0);
    let pause = period - wire;
    if pause <= 0.0 || pause.is_nan() {
        0
    } else {
        (pause + 0.5) as u64
    }
}

/// Lengths of the packets a block is split into.
pub fn split_block(block_size: u64, packet_size: usize) -> Vec<usize> {
    assert!(packet_size > 0, "packet_size must be > 0");
    let full = (block_size / packet_size as u64) as usize;
    let rest = (block_size % packet_size as u64) as usize;
    let mut out = Vec::with_capacity(full + usize::from(rest != 0));
    out.resize(full, packet_size);
    if rest != 0 {
        out.push(rest);
    }
    out
}

/// One packet's worth of generated payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadChunk {
    /// Payload bytes.
    pub bytes: Vec<u8>,
    /// The chunk completes a block.
    pub is_last_of_block: bool,
}

/// Outcome of [`Generator::fill_next`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkInfo {
    /// Bytes written.
    pub len: usize,
    /// The chunk completes a block.
    pub is_last_of_block: bool,
}

enum Source {
    // one pattern period plus slack so any chunk is a single contiguous copy
    Counting(Vec<u8>),
    Constant(u8),
    Prng(ChaCha8Rng),
}

/// Stateful generator producing the packet payloads of one [`GeneratorConfig`].
pub struct Generator {
    cfg: GeneratorConfig,
    source: Source,
    block_offset: u64,
    stream_pos: u64,
    blocks_done: u64,
}

impl Generator {
    /// Creates a generator at the start of its pattern (word 0 for `Counting16`).
    pub fn new(cfg: GeneratorConfig) -> Self {
        let source = match cfg.pattern {
            Pattern::Counting16 => {
                let mut table = Vec::with_capacity(COUNTING_PERIOD_BYTES + MAX_SLOT_SIZE);
                for w in 0..=u16::MAX {
                    table.extend_from_slice(&cfg.word_order.bytes(w));
                }
                table.extend_from_within(..MAX_SLOT_SIZE);
                Source::Counting(table)
            }
            Pattern::ConstantByte(b) => Source::Constant(b),
            Pattern::Prng(seed) => Source::Prng(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self { cfg, source, block_offset: 0, stream_pos: 0, blocks_done: 0 }
    }

    /// The configuration this generator runs.
    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Length of the next chunk.
    #[inline]
    pub fn next_len(&self) -> usize {
        let left = self.cfg.block_size - self.block_offset;
        left.min(self.cfg.packet_size as u64) as usize
    }

    /// Completed blocks so far.
    pub fn blocks_done(&self) -> u64 {
        self.blocks_done
    }

    /// Total bytes produced so far.
    pub fn bytes_done(&self) -> u64 {
        self.stream_pos
    }

    /// Writes the next chunk into the front of `out`, which must hold at
    /// least [`Self::next_len`] bytes.
    pub fn fill_next(&mut self, out: &mut [u8]) -> ChunkInfo {
        let len = self.next_len();
        let out = &mut out[..len];
        match &mut self.source {
            Source::Counting(table) => {
                let off = (self.stream_pos % COUNTING_PERIOD_BYTES as u64) as usize;
                out.copy_from_slice(&table[off..off + len]);
            }
            Source::Constant(b) => out.fill(*b),
            Source::Prng(rng) => rng.fill_bytes(out),
        }
        self.stream_pos += len as u64;
        self.block_offset += len as u64;
        let is_last_of_block = self.block_offset == self.cfg.block_size;
        if is_last_of_block {
            self.block_offset = 0;
            self.blocks_done += 1;
        }
        ChunkInfo { len, is_last_of_block }
    }

    /// Allocating variant of [`Self::fill_next`].
    pub fn next_payload(&mut self) -> PayloadChunk {
        let mut bytes = alloc::vec![0u8; self.next_len()];
        let info = self.fill_next(&mut bytes);
        PayloadChunk { bytes, is_last_of_block: info.is_last_of_block }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use alloc::vec;

    fn counting(block: u64, packet: usize) -> Generator {
        Generator::new(GeneratorConfig { block_size: block, packet_size: packet, ..Default::default() })
    }

    fn words(b: &[u8]) -> Vec<u16> {
        b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_block(5000, 2000), vec![2000, 2000, 1000]);
        let mut expected = vec![2000; 8];
        expected.push(384);
        assert_eq!(split_block(16384, 2000), expected);
        assert_eq!(split_block(2000, 2000), vec![2000]);
    }

    #[test]
    fn counting_starts_at_zero() {
        let mut g = counting(16384, 8);
        assert_eq!(words(&g.next_payload().bytes), vec![0, 1, 2, 3]);
        assert_eq!(words(&g.next_payload().bytes), vec![4, 5, 6, 7]);
    }

    #[test]
    fn counting_wraps() {
        let mut g = counting(1 << 20, 2000);
        let mut all = Vec::new();
        while all.len() < COUNTING_PERIOD_BYTES + 8 {
            all.extend(g.next_payload().bytes);
        }
        let w = words(&all);
        assert_eq!(&w[65534..65538], &[0xFFFE, 0xFFFF, 0x0000, 0x0001]);
    }

    #[test]
    fn chunks_concatenate_to_reference_stream() {
        // reference: word index i -> i as u16, little endian, independent of chunking
        let mut g = counting(5000, 333);
        let mut stream = Vec::new();
        let mut lens = Vec::new();
        for _ in 0..40 {
            let c = g.next_payload();
            lens.push(c.bytes.len());
            stream.extend(c.bytes);
        }
        for (k, b) in stream.iter().enumerate() {
            let w = (k / 2) as u16;
            assert_eq!(*b, w.to_le_bytes()[k % 2], "byte {k}");
        }
        let mut split = split_block(5000, 333);
        split.extend(split_block(5000, 333));
        assert_eq!(&lens[..split.len()], &split[..]);
    }

    #[test]
    fn last_chunk_flag() {
        let mut g = counting(16384, 2000);
        let flags: Vec<bool> = (0..10).map(|_| g.next_payload().is_last_of_block).collect();
        assert_eq!(flags, [false, false, false, false, false, false, false, false, true, false]);
        assert_eq!(g.blocks_done(), 1);
    }

    #[test]
    fn equal_frequency_per_period() {
        // brute-force: count every word over 2 periods produced in 2000-byte packets
        let mut g = counting(16384, 2000);
        let mut counts = vec![0u32; 65536];
        let mut produced = 0usize;
        let mut buf = [0u8; 2000];
        while produced < 2 * COUNTING_PERIOD_BYTES {
            let info = g.fill_next(&mut buf);
            let take = info.len.min(2 * COUNTING_PERIOD_BYTES - produced);
            for w in words(&buf[..take]) {
                counts[usize::from(w)] += 1;
            }
            produced += take;
        }
        assert!(counts.iter().all(|&c| c == 2));

        // one 16384-byte block covers words 0..8191 exactly once
        let mut g = counting(16384, 2000);
        let mut counts = vec![0u32; 65536];
        loop {
            let c = g.next_payload();
            for w in words(&c.bytes) {
                counts[usize::from(w)] += 1;
            }
            if c.is_last_of_block {
                break;
            }
        }
        assert!(counts[..8192].iter().all(|&c| c == 1));
        assert!(counts[8192..].iter().all(|&c| c == 0));
    }

    #[test]
    fn big_endian_words() {
        let mut g = Generator::new(GeneratorConfig {
            packet_size: 4,
            word_order: WordOrder::Big,
            ..Default::default()
        });
        assert_eq!(g.next_payload().bytes, vec![0, 0, 0, 1]);
    }

    #[test]
    fn prng_and_constant() {
        let cfg = |p| GeneratorConfig { pattern: p, packet_size: 64, ..Default::default() };
        let a = Generator::new(cfg(Pattern::Prng(9))).next_payload();
        let b = Generator::new(cfg(Pattern::Prng(9))).next_payload();
        assert_eq!(a, b);
        assert_ne!(a.bytes, vec![0; 64]);
        assert_eq!(Generator::new(cfg(Pattern::ConstantByte(0xAB))).next_payload().bytes, vec![0xAB; 64]);
    }

    #[test]
    fn pause_examples() {
        assert_eq!(pause_for_rate(2000, 10.24e9), 0);
        // 3.4 Mp/s of 350-byte packets: pause + wire time is the 294 ns period
        let target = 3.4e6 * 350.0 * 8.0;
        let pause = pause_for_rate(350, target) as f64;
        let wire = 350.0 * 8.0 / 10.24e9 * 1e9;
        assert!((pause + wire - 1e9 / 3.4e6).abs() < 0.5);
        assert!((pause + wire - 294.0).abs() < 0.5);
        assert_eq!(pause_for_rate(350, f64::INFINITY), 0);
    }

    #[test]
    fn period_from_config() {
        let cfg = GeneratorConfig { packet_size: 64, target_rate_bps: Some(64.0 * 8.0 * 1e6), ..Default::default() };
        assert!((cfg.packet_period_ns(64).unwrap() - 1000.0).abs() < 0.5);
        assert_eq!(GeneratorConfig::default().packet_period_ns(2000), None);
        let cfg = GeneratorConfig { pause_ns: 500, ..Default::default() };
        assert_eq!(cfg.packet_period_ns(2000), Some(500.0));
    }

    #[test]
    fn validation() {
        let ok = GeneratorConfig::default();
        assert_eq!(ok.validate_for_verification(2032), Ok(()));
        let bad = GeneratorConfig { block_size: 5000, ..Default::default() };
        assert_eq!(bad.validate(2032), Ok(()));
        assert_eq!(bad.validate_for_verification(2032), Err(ConfigError::BlockQuantum(5000)));
        let bad = GeneratorConfig { packet_size: 2033, ..Default::default() };
        assert!(matches!(bad.validate(2032), Err(ConfigError::PacketSize { .. })));
        let bad = GeneratorConfig { block_size: 0, ..Default::default() };
        assert_eq!(bad.validate(2032), Err(ConfigError::EmptyBlock));
    }

    proptest! {
        #[test]
        fn counting_stream_is_continuous(block in 1u64..50_000, packet in 1usize..2000, packets in 1usize..200) {
            let mut g = counting(block, packet);
            let mut stream = Vec::new();
            let mut lens = Vec::new();
            for _ in 0..packets {
                let c = g.next_payload();
                lens.push(c.bytes.len());
                stream.extend_from_slice(&c.bytes);
            }
            for (i, w) in stream.chunks_exact(2).enumerate() {
                prop_assert_eq!(u16::from_le_bytes([w[0], w[1]]), i as u16);
            }
            let pattern: Vec<usize> = split_block(block, packet).into_iter().cycle().take(packets).collect();
            prop_assert_eq!(lens, pattern);
        }
    }
}
