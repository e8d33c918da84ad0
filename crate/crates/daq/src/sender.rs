//! Paced DROP stream sender.
//!
//! One or more generators feed one stream. The stream owns the identifier
//! counter, so packets of all generators share one +1 sequence. Each
//! generator keeps its own pacing schedule; among the generators that are
//! due, packets are taken weighted round-robin.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use drop_core::pattern::{Generator, GeneratorConfig};
use drop_core::protocol::{encode_header, DropHeader, HEADER_LEN};

use crate::transport::TxLink;

/// One DROP stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// DROP stream id.
    pub stream_id: u16,
    /// Destination address (UDP); the port also labels loopback traffic.
    pub dest: SocketAddr,
    /// Generators multiplexed into this stream.
    pub generators: Vec<GeneratorConfig>,
    /// Identifier of the first packet.
    pub initial_packet_id: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            stream_id: 0,
            dest: SocketAddr::from(([127, 0, 0, 1], 9000)),
            generators: vec![GeneratorConfig::default()],
            initial_packet_id: 0,
        }
    }
}

impl StreamConfig {
    /// Destination port.
    pub fn port(&self) -> u16 {
        self.dest.port()
    }
}

/// When a sender stops. The first condition met wins; none set means "never".
#[derive(Debug, Clone, Default)]
pub struct SendStop {
    /// Exact packet count.
    pub packets: Option<u64>,
    /// Completed blocks summed over all generators.
    pub blocks: Option<u64>,
    /// Wall-clock limit (monotonic clock).
    pub duration: Option<Duration>,
    /// External stop request.
    pub flag: Option<Arc<AtomicBool>>,
}

impl SendStop {
    /// Stop after `n` packets.
    pub fn packets(n: u64) -> Self {
        Self { packets: Some(n), ..Default::default() }
    }

    /// Stop after `n` blocks.
    pub fn blocks(n: u64) -> Self {
        Self { blocks: Some(n), ..Default::default() }
    }

    /// Stop after `d`.
    pub fn duration(d: Duration) -> Self {
        Self { duration: Some(d), ..Default::default() }
    }
}

/// Totals of one send run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SendSummary {
    /// Stream sent.
    pub stream_id: u16,
    /// Packets sent.
    pub packets: u64,
    /// User payload bytes sent (DROP headers excluded).
    pub bytes: u64,
    /// Identifier of the first packet.
    pub first_packet_id: u64,
    /// Wall time from start to the last packet.
    pub duration: Duration,
    /// Packets per second.
    pub achieved_pps: f64,
    /// Payload bits per second.
    pub achieved_bps: f64,
    /// False if the link failed before the stop condition.
    pub complete: bool,
    /// Link error, if any.
    pub error: Option<String>,
}

struct Source {
    gen: Generator,
    next_due_ns: f64,
}

/// Sends `cfg` over `link` until `stop` holds.
pub fn send_stream(cfg: &StreamConfig, link: &mut TxLink, stop: &SendStop) -> SendSummary {
    let mut sources: Vec<Source> =
        cfg.generators.iter().cloned().map(|g| Source { gen: Generator::new(g), next_due_ns: 0.0 }).collect();
    let mut summary = SendSummary {
        stream_id: cfg.stream_id,
        packets: 0,
        bytes: 0,
        first_packet_id: cfg.initial_packet_id,
        duration: Duration::ZERO,
        achieved_pps: 0.0,
        achieved_bps: 0.0,
        complete: true,
        error: None,
    };
    if sources.is_empty() {
        return summary;
    }
    let mut packet_id = cfg.initial_packet_id;
    let mut current = 0usize;
    let mut credits = sources[0].gen.config().weight.max(1);
    let start = Instant::now();
    let mut last = start;

    loop {
        if stop.packets.is_some_and(|n| summary.packets >= n)
            || stop.blocks.is_some_and(|n| sources.iter().map(|s| s.gen.blocks_done()).sum::<u64>() >= n)
            || stop.flag.as_ref().is_some_and(|f| f.load(Ordering::Relaxed))
        {
            break;
        }
        let now_ns = start.elapsed().as_nanos() as f64;
        if stop.duration.is_some_and(|d| now_ns >= d.as_nanos() as f64) {
            break;
        }

        let n = sources.len();
        let pick = (0..n).map(|k| (current + k) % n).find(|&i| sources[i].next_due_ns <= now_ns);
        let Some(i) = pick else {
            let due = sources.iter().map(|s| s.next_due_ns).fold(f64::INFINITY, f64::min);
            wait_until(start, due, stop.duration);
            continue;
        };
        if i != current {
            current = i;
            credits = sources[i].gen.config().weight.max(1);
        }

        let src = &mut sources[i];
        let len = src.gen.next_len();
        let header = DropHeader::new(cfg.stream_id, packet_id, len as u16);
        let gen = &mut src.gen;
        let sent = link.send_packet(packet_id, HEADER_LEN + len, |buf| {
            encode_header(&header, buf).expect("generator respects the header limits");
            gen.fill_next(&mut buf[HEADER_LEN..]);
        });
        if let Err(e) = sent {
            summary.complete = false;
            summary.error = Some(e.to_string());
            break;
        }
        last = Instant::now();
        if let Some(period) = src.gen.config().packet_period_ns(len) {
            // deadline pacing: a late packet does not shift the schedule
            src.next_due_ns += period;
        }
        packet_id = packet_id.wrapping_add(1);
        summary.packets += 1;
        summary.bytes += len as u64;

        credits -= 1;
        if credits == 0 {
            current = (i + 1) % n;
            credits = sources[current].gen.config().weight.max(1);
        }
    }

    summary.duration = last - start;
    let secs = summary.duration.as_secs_f64();
    if secs > 0.0 {
        summary.achieved_pps = summary.packets as f64 / secs;
        summary.achieved_bps = summary.bytes as f64 * 8.0 / secs;
    }
    summary
}

fn wait_until(start: Instant, due_ns: f64, limit: Option<Duration>) {
    let due_ns = limit.map_or(due_ns, |d| due_ns.min(d.as_nanos() as f64));
    let remaining = due_ns - start.elapsed().as_nanos() as f64;
    if remaining > 200_000.0 {
        std::thread::sleep(Duration::from_nanos((remaining - 100_000.0) as u64));
    } else if remaining > 0.0 {
        std::thread::yield_now();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slots::RingConfig;
    use crate::transport::{loopback, Framing, LoopbackRx};
    use drop_core::protocol::decode_header;

    fn collect(rx: &LoopbackRx) -> Vec<(DropHeader, Vec<u8>)> {
        let mut out = Vec::new();
        while let Some(f) = rx.poll() {
            let bytes = &rx.ring().slot(&f.slot)[..f.len as usize];
            let h = decode_header(bytes).unwrap();
            out.push((h, bytes[HEADER_LEN..].to_vec()));
            rx.ring().release(f.slot);
        }
        out
    }

    fn link() -> (TxLink, LoopbackRx) {
        let (tx, rx) = loopback(RingConfig { slot_count: 64, slot_size: 2048 }, Framing::Payload, 9000).unwrap();
        (TxLink::Loopback(tx), rx)
    }

    #[test]
    fn one_block_nine_packets() {
        let (mut tx, rx) = link();
        let s = send_stream(&StreamConfig::default(), &mut tx, &SendStop::blocks(1));
        assert_eq!((s.packets, s.bytes), (9, 16384));
        assert!(s.complete);
        let got = collect(&rx);
        let ids: Vec<u64> = got.iter().map(|(h, _)| h.packet_id).collect();
        assert_eq!(ids, (0..9).collect::<Vec<_>>());
        assert_eq!(got.last().unwrap().0.payload_len, 384);
    }

    #[test]
    fn zero_packets() {
        let (mut tx, rx) = link();
        let s = send_stream(&StreamConfig::default(), &mut tx, &SendStop::packets(0));
        assert_eq!((s.packets, s.bytes), (0, 0));
        assert!(collect(&rx).is_empty());
    }

    #[test]
    fn two_generators_share_counter() {
        let (mut tx, rx) = link();
        let g = |b| GeneratorConfig {
            packet_size: 100,
            pattern: drop_core::pattern::Pattern::ConstantByte(b),
            ..Default::default()
        };
        let cfg = StreamConfig { stream_id: 3, initial_packet_id: 1000, generators: vec![g(1), g(2)], ..Default::default() };
        let s = send_stream(&cfg, &mut tx, &SendStop::packets(20));
        assert_eq!(s.packets, 20);
        let got = collect(&rx);
        let ids: Vec<u64> = got.iter().map(|(h, _)| h.packet_id).collect();
        assert_eq!(ids, (1000..1020).collect::<Vec<_>>());
        let owners: Vec<u8> = got.iter().map(|(_, p)| p[0]).collect();
        assert_eq!(&owners[..6], &[1, 2, 1, 2, 1, 2]);
        assert!(got.iter().all(|(h, _)| h.stream_id == 3));
    }

    #[test]
    fn weighted_round_robin() {
        let (mut tx, rx) = link();
        let g = |b, weight| GeneratorConfig {
            packet_size: 64,
            pattern: drop_core::pattern::Pattern::ConstantByte(b),
            weight,
            ..Default::default()
        };
        let cfg = StreamConfig { generators: vec![g(1, 3), g(2, 1)], ..Default::default() };
        send_stream(&cfg, &mut tx, &SendStop::packets(8));
        let owners: Vec<u8> = collect(&rx).iter().map(|(_, p)| p[0]).collect();
        assert_eq!(owners, [1, 1, 1, 2, 1, 1, 1, 2]);
    }

    #[test]
    fn byte_conservation() {
        let (mut tx, rx) = link();
        let cfg = StreamConfig {
            generators: vec![
                GeneratorConfig { block_size: 5000, packet_size: 2000, ..Default::default() },
                GeneratorConfig { block_size: 300, packet_size: 64, ..Default::default() },
            ],
            ..Default::default()
        };
        let s = send_stream(&cfg, &mut tx, &SendStop::packets(40));
        let got = collect(&rx);
        assert_eq!(got.iter().map(|(_, p)| p.len() as u64).sum::<u64>(), s.bytes);
    }

    #[test]
    fn paced_rate() {
        let (mut tx, rx) = link();
        let consumer = std::thread::spawn(move || {
            let mut n = 0;
            while !rx.is_drained() {
                n += collect(&rx).len();
                std::thread::yield_now();
            }
            n + collect(&rx).len()
        });
        let cfg = StreamConfig {
            generators: vec![GeneratorConfig {
                packet_size: 64,
                target_rate_bps: Some(64.0 * 8.0 * 20_000.0),
                ..Default::default()
            }],
            ..Default::default()
        };
        let s = send_stream(&cfg, &mut tx, &SendStop::duration(Duration::from_millis(500)));
        drop(tx);
        assert_eq!(consumer.join().unwrap() as u64, s.packets);
        assert!((s.achieved_pps / 20_000.0 - 1.0).abs() < 0.05, "{}", s.achieved_pps);
    }
}
