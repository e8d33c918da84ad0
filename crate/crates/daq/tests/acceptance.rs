//! Acceptance criteria. Each test prints one PASS/FAIL line and then asserts
//! the same condition. Tests share one lock because the timed ones need the
//! machine to themselves.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drop_core::audit::{loss_upper_limit, AuditEventKind, StreamAudit};
use drop_core::fault::FaultPlan;
use drop_core::frame::{parse_frame_with, FrameError, FrameSpec, ETH_HEADER_LEN, IPV4_HEADER_LEN};
use drop_core::pattern::GeneratorConfig;
use drop_core::protocol::{decode_header, encode_header, DropHeader, HEADER_LEN, MAX_PAYLOAD_LEN};
use drop_core::simlink::max_lossless_pps;
use drop_core::topology::{enumerate_assignments, AssignmentPlan};
use drop_daq::config::{ExperimentConfig, StopConfig};
use drop_daq::phases::{fault_oracle, run_streams, size_sweep, soak, RunSpec};
use drop_daq::sender::{send_stream, SendStop, StreamConfig};
use drop_daq::slots::RingConfig;
use drop_daq::transport::{loopback, Framing, TxLink};

static MACHINE: Mutex<()> = Mutex::new(());

fn exclusive() -> MutexGuard<'static, ()> {
    MACHINE.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, passed: bool, detail: impl AsRef<str>) -> bool {
    println!("{} {name}: {}", if passed { "PASS" } else { "FAIL" }, detail.as_ref());
    passed
}

fn preset(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name);
    ExperimentConfig::load(&path).unwrap()
}

#[test]
fn loss_limit_for_long_run() {
    let _m = exclusive();
    let got = loss_upper_limit(2_920_000_000_000, 0).value().unwrap();
    let want = 3.423e-13;
    let rel = (got - want).abs() / want;
    let ok = verdict(
        "upper loss limit for 2.92e12 packets equals 3.423e-13 within 1e-16 relative",
        rel <= 1e-16,
        format!("computed {got:.6e}, relative error {rel:.2e}"),
    );
    assert!(ok);
}

#[test]
fn quoted_limit_implies_rounded_packet_count() {
    // companion to the check above, not a replacement: inverting the bound
    // for 3.423e-13 recovers the packet count behind it
    let _m = exclusive();
    let packets: f64 = 1.0 / 3.423e-13 - 1.0;
    let rounded = (packets / 1e10).round() / 100.0;
    let back = loss_upper_limit(packets.round() as u64, 0).value().unwrap();
    let ok = verdict(
        "3.423e-13 corresponds to a packet count of 2.92 trillion (3 s.f.)",
        rounded == 2.92 && format!("{back:.3e}") == "3.423e-13",
        format!("{packets:.5e} packets"),
    );
    assert!(ok);
}

#[test]
fn swapped_pair_reports_three_events() {
    let _m = exclusive();
    let mut audit = StreamAudit::new(0);
    for id in [0, 1, 2, 4, 3, 5, 6] {
        audit.observe(id, 0);
    }
    let kinds: Vec<AuditEventKind> = audit.events().iter().map(|e| e.kind).collect();
    let want = [AuditEventKind::Missing(1), AuditEventKind::ExtraOrRepeat(-1), AuditEventKind::Missing(1)];
    let ok = verdict("ids 1,2,4,3,5 give Missing, ExtraOrRepeat, Missing", kinds == want, format!("{kinds:?}"));
    assert!(ok);
}

#[test]
fn fault_runs_match_replay_oracle() {
    let _m = exclusive();
    let cfg = preset("fault-oracle.cfg");
    assert_eq!((cfg.fault_oracle.seeds, cfg.fault_oracle.packets), (100, 1_000_000));
    let start = Instant::now();
    let report = fault_oracle(&cfg).unwrap();
    let took = start.elapsed();
    for c in &report.checks {
        println!("  {} {}: {}", if c.passed { "ok" } else { "not ok" }, c.name, c.detail);
    }
    let events: u64 = report.rows.iter().map(|r| r.loss_events).sum();
    let ok = verdict(
        "100 seeded fault runs of 1e6 packets match the replay oracle in under 5 min",
        report.passed() && took < Duration::from_secs(300),
        format!("{events} events over {} runs, {:.1} s", report.rows.len(), took.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn eight_stream_soak_is_lossless_and_uniform() {
    let _m = exclusive();
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("soak.cfg");
    let streams = cfg.resolve_streams().unwrap();
    assert_eq!(streams.len(), 8);
    assert!(streams.iter().all(|s| s.stream.generators[0].packet_size == 2000));
    assert_eq!(cfg.stop.packets, Some(100_000_000));
    let start = Instant::now();
    let report = soak(&cfg, Some(dir.path())).unwrap();
    let took = start.elapsed();
    for c in &report.checks {
        println!("  {} {}: {}", if c.passed { "ok" } else { "not ok" }, c.name, c.detail);
    }
    let total = report.rows.last().unwrap();
    let ok = verdict(
        "8-stream soak of 1e8 x 2000 B: no events, uniform histograms, exact sums, under 15 min",
        report.passed() && total.packets >= 100_000_000 && took < Duration::from_secs(900),
        format!("{} packets, loss {:?}, {:.0} s", total.packets, total.loss, took.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn one_dropped_packet_is_detected_twice() {
    let _m = exclusive();
    let cfg = preset("soak.cfg");
    let mut streams = cfg.resolve_streams().unwrap();
    // id 123457 is the fifth 2000-byte packet of its block
    streams[3].faults = Some(FaultPlan { forced_drops: vec![123_457], ..Default::default() });
    let start = Instant::now();
    let spec = RunSpec::from_config(&cfg, streams, StopConfig { packets: Some(2_000_000), duration_s: None });
    let run = run_streams(&spec).unwrap();
    let took = start.elapsed();
    let events: Vec<(u16, AuditEventKind)> =
        run.outcome.audits.iter().flat_map(|a| a.events.iter().map(|e| (a.stream_id, e.kind))).collect();
    let bytes: Vec<u64> = run.outcome.stats.streams.iter().map(|s| s.bytes).collect();
    let uniform: Vec<bool> =
        run.outcome.histograms.iter().map(|h| h.as_ref().unwrap().check_uniform().is_some_and(|u| u.pass)).collect();
    let dropped_len = bytes[0] - bytes[3];
    let ok = verdict(
        "one dropped 2000-byte packet gives one Missing(1) and a failed uniformity check",
        events == [(3, AuditEventKind::Missing(1))]
            && dropped_len == 2000
            && !uniform[3]
            && uniform.iter().filter(|&&u| u).count() == 7
            && took < Duration::from_secs(120),
        format!("events {events:?}, {dropped_len} bytes short, uniform {uniform:?}, {:.1} s", took.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn placement_enumeration_counts() {
    let _m = exclusive();
    let one = enumerate_assignments(1, false);
    let two: HashSet<AssignmentPlan> = enumerate_assignments(2, true).into_iter().collect();
    let want: HashSet<AssignmentPlan> = [(0, [1, 2]), (0, [1, 3]), (0, [2, 3]), (1, [2, 3]), (2, [1, 3]), (3, [1, 2])]
        .into_iter()
        .map(|(r, w)| AssignmentPlan::new(r, &w))
        .collect();
    let ok = verdict(
        "16 plans for one stream unpruned, the six listed plans for two streams with exclusive workers",
        one.len() == 16 && enumerate_assignments(2, true).len() == 6 && two == want,
        format!("{} and {} plans", one.len(), two.len()),
    );
    assert!(ok);
}

#[test]
fn size_sweep_steps_down_after_segment_boundaries() {
    let _m = exclusive();
    let cfg = preset("fig7.cfg");
    let start = Instant::now();
    let report = size_sweep(&cfg).unwrap();
    let took = start.elapsed();
    let rate = |s: usize| report.rows.iter().find(|r| r.params["size"] == s as f64).map(|r| r.packet_rate_pps);
    let mut steps = Vec::new();
    let mut failed = Vec::new();
    for s in [64, 128, 192, 256, 320, 384, 448, 512, 1024, 2048] {
        match (rate(s), rate(s + 1)) {
            (Some(a), Some(b)) => {
                steps.push(format!("{s}:{:.2}->{:.2}", a / 1e6, b / 1e6));
                if b >= a {
                    failed.push(s);
                }
            }
            (Some(a), None) => {
                // the sweep stops at slot capacity; ask the cost model directly
                let b = max_lossless_pps(cfg.sim, s + 1, 1, cfg.size_sweep.packets_per_stream);
                steps.push(format!("{s}:{:.2}->{:.2} (model only)", a / 1e6, b / 1e6));
                if b >= a {
                    failed.push(s);
                }
            }
            _ => failed.push(s),
        }
    }
    let ok = verdict(
        "cost-model sweep drops strictly from s to s+1 at every listed size within capacity",
        failed.is_empty() && report.passed() && took < Duration::from_secs(300),
        format!("Mp/s {}; {:.1} s", steps.join(", "), took.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn pacing_within_five_percent() {
    let _m = exclusive();
    let mut results = Vec::new();
    let mut ok = true;
    for target in [1e6, 1e5, 1e4, 1e3] {
        let gen = GeneratorConfig { packet_size: 48, pause_ns: (1e9 / target) as u64, ..Default::default() };
        let mut cfg = ExperimentConfig::default();
        cfg.receiver.histogram = false;
        cfg.streams[0].generators = vec![gen];
        let spec =
            RunSpec::from_config(&cfg, cfg.resolve_streams().unwrap(), StopConfig { packets: None, duration_s: Some(10.0) });
        let run = run_streams(&spec).unwrap();
        let s = &run.sends[0];
        let err = (s.achieved_pps - target) / target;
        ok &= err.abs() <= 0.05 && run.wall >= Duration::from_secs(10) && s.complete && s.error.is_none();
        results.push(format!("{target:.0e}: {:+.3}% over {:.3} s", err * 100.0, s.duration.as_secs_f64()));
    }
    let ok = verdict("achieved send rate within 5% of target over 10 s", ok, results.join(", "));
    assert!(ok);
}

const UDP_CSUM: usize = ETH_HEADER_LEN + IPV4_HEADER_LEN + 6;
const IP_CSUM: usize = ETH_HEADER_LEN + 10;

#[test]
fn codec_and_frame_fuzz() {
    let _m = exclusive();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD209);

    let mut header_fail = 0;
    for _ in 0..100_000 {
        let h = DropHeader::new(rng.gen(), rng.gen(), rng.gen_range(0..=MAX_PAYLOAD_LEN as u16));
        let mut wire = vec![0u8; HEADER_LEN + usize::from(h.payload_len)];
        rng.fill(&mut wire[..]);
        encode_header(&h, &mut wire).unwrap();
        let mut again = wire.clone();
        let same = decode_header(&wire).is_ok_and(|d| d == h && encode_header(&d, &mut again).is_ok() && again == wire);
        header_fail += u32::from(!same || wire[6..8] != [0, 0]);
    }

    let frames = 100_000u64;
    let streams = 10;
    let mut parsed = 0u64;
    let mut bad_parse = 0u64;
    let mut accepted_mutations = 0u64;
    let mut mutations = 0u64;
    for s in 0..streams {
        let port: u16 = rng.gen_range(1024..=u16::MAX);
        let src_port: u16 = rng.gen();
        let spec = FrameSpec { dst_port: port, src_port, src_ip: rng.gen(), dst_ip: rng.gen(), ..Default::default() };
        let ring = RingConfig { slot_count: 1024, slot_size: 2048 };
        let (tx, rx) = loopback(ring, Framing::Ethernet(spec), port).unwrap();
        let gen = GeneratorConfig {
            packet_size: rng.gen_range(1..=ring.slot_size - 42 - HEADER_LEN),
            block_size: rng.gen_range(1..=100_000),
            ..Default::default()
        };
        let stream = StreamConfig { stream_id: s, generators: vec![gen], ..Default::default() };
        let sender = thread::spawn(move || {
            let mut link = TxLink::Loopback(tx);
            let summary = send_stream(&stream, &mut link, &SendStop::packets(frames / u64::from(streams)));
            link.finish();
            summary
        });
        let mut next_id = 0u64;
        let mut exhaustive = 100;
        loop {
            let Some(f) = rx.poll() else {
                if rx.is_drained() {
                    break;
                }
                thread::yield_now();
                continue;
            };
            let frame = rx.ring().slot(&f.slot)[..f.len as usize].to_vec();
            rx.ring().release(f.slot);
            parsed += 1;
            let good = parse_frame_with(&frame, true).is_ok_and(|v| {
                v.dst_port == port
                    && v.src_port == src_port
                    && decode_header(&frame[v.payload.clone()])
                        .is_ok_and(|h| h.stream_id == s && h.packet_id == next_id && HEADER_LEN + usize::from(h.payload_len) == v.payload.len())
            });
            bad_parse += u64::from(!good);
            next_id += 1;

            let positions = [IP_CSUM, IP_CSUM + 1, UDP_CSUM, UDP_CSUM + 1];
            let mut mutants: Vec<(usize, u8)> = vec![(positions[rng.gen_range(0..4)], rng.gen_range(1..=255))];
            if exhaustive > 0 {
                exhaustive -= 1;
                mutants.extend(positions.iter().flat_map(|&p| (1..=255u8).map(move |x| (p, x))));
            }
            for (pos, x) in mutants {
                let mut m = frame.clone();
                m[pos] ^= x;
                mutations += 1;
                if !matches!(parse_frame_with(&m, true), Err(FrameError::Checksum(_))) {
                    accepted_mutations += 1;
                }
            }
        }
        let summary = sender.join().unwrap();
        assert!(summary.complete, "{summary:?}");
    }
    let ok = verdict(
        "1e5 headers round-trip, 1e5 sender frames parse, every checksum-byte mutation rejected",
        header_fail == 0 && parsed == frames && bad_parse == 0 && accepted_mutations == 0,
        format!(
            "{header_fail} header failures, {parsed} frames with {bad_parse} bad, {accepted_mutations} of {mutations} mutations accepted"
        ),
    );
    assert!(ok);
}
