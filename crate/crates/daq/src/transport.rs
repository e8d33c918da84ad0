//! Links between senders and the receive path.
//!
//! * Loopback: an in-process wire into a receiver-owned [`SlotRing`]. The
//!   sender writes straight into free slots, like a NIC DMA-ing into UMEM
//!   frames. It preserves order and, without fault injection, loses nothing:
//!   a sender facing a full ring waits.
//! * UDP: ordinary datagram sockets. No ordering or delivery guarantee.
//! * Packet: Linux `AF_PACKET` raw sockets carrying whole Ethernet frames.
//!
//! Loopback and Packet links can carry either bare DROP packets
//! ([`Framing::Payload`]) or full Ethernet/IPv4/UDP frames
//! ([`Framing::Ethernet`]). UDP always carries bare DROP packets.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{fence, AtomicBool, Ordering};
use std::sync::Arc;

use crossbeam::queue::ArrayQueue;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use drop_core::fault::{Delivery, FaultPlan, FaultStage, GroundTruth};
use drop_core::frame::{seal_frame, write_headers, FrameSpec, FRAME_HEADERS_LEN};

use crate::slots::{RingConfig, RingError, SlotHandle, SlotRing};

/// Transport selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    /// In-process wire carrying bare DROP packets.
    #[default]
    Loopback,
    /// UDP sockets.
    Udp,
    /// Ethernet frames: over `AF_PACKET` when an interface is configured,
    /// otherwise over the in-process wire.
    Raw,
    /// Virtual-time cost model; no packets are moved.
    Sim,
}

/// How a DROP packet is wrapped on the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framing {
    /// The slot holds the DROP packet itself (socket mode).
    Payload,
    /// The slot holds an Ethernet/IPv4/UDP frame.
    Ethernet(FrameSpec),
}

impl Framing {
    /// Bytes in front of the DROP packet.
    pub fn overhead(&self) -> usize {
        match self {
            Framing::Payload => 0,
            Framing::Ethernet(_) => FRAME_HEADERS_LEN,
        }
    }

    /// Whether frames must be parsed on receive.
    pub fn is_raw(&self) -> bool {
        matches!(self, Framing::Ethernet(_))
    }
}

/// Transport failures.
#[derive(Debug, Error)]
pub enum TransportError {
    /// Bad ring geometry.
    #[error(transparent)]
    Ring(#[from] RingError),
    /// Socket error.
    #[error("socket error: {0}")]
    Io(#[from] io::Error),
    /// Packet larger than the link carries.
    #[error("packet of {len} bytes exceeds link capacity {capacity}")]
    TooLarge {
        /// Requested DROP packet length.
        len: usize,
        /// Largest DROP packet the link accepts.
        capacity: usize,
    },
    /// The receiving side went away.
    #[error("link closed by receiver")]
    Closed,
    /// Fault injection only works on loopback links.
    #[error("fault injection requires a loopback link")]
    FaultsNeedLoopback,
    /// Raw sockets are not available here.
    #[error("AF_PACKET raw sockets are only supported on Linux")]
    Unsupported,
}

/// A frame handed from the wire to the intake.
#[derive(Debug)]
pub struct WireFrame {
    /// Slot holding the frame.
    pub slot: SlotHandle,
    /// Frame length.
    pub len: u32,
    /// Destination port for payload-framed links (raw frames carry their own).
    pub port: u16,
}

struct Shared {
    rx: ArrayQueue<WireFrame>,
    closed: AtomicBool,
    receiver_gone: AtomicBool,
}

/// Sending end of an in-process wire.
pub struct LoopbackTx {
    ring: SlotRing,
    shared: Arc<Shared>,
    framing: Framing,
    port: u16,
    ip_id: u16,
    faults: Option<FaultStage<WireFrame>>,
}

/// Receiving end of an in-process wire.
pub struct LoopbackRx {
    ring: SlotRing,
    shared: Arc<Shared>,
    framing: Framing,
}

/// Creates an in-process wire whose frames land in a fresh slot ring.
/// `port` labels payload-framed traffic with its UDP destination port.
pub fn loopback(ring: RingConfig, framing: Framing, port: u16) -> Result<(LoopbackTx, LoopbackRx), TransportError> {
    let ring = SlotRing::new(ring)?;
    let shared = Arc::new(Shared {
        rx: ArrayQueue::new(ring.config().slot_count),
        closed: AtomicBool::new(false),
        receiver_gone: AtomicBool::new(false),
    });
    let port = match framing {
        Framing::Ethernet(spec) => spec.dst_port,
        Framing::Payload => port,
    };
    Ok((
        LoopbackTx { ring: ring.clone(), shared: shared.clone(), framing, port, ip_id: 0, faults: None },
        LoopbackRx { ring, shared, framing },
    ))
}

fn push_wire(shared: &Shared, ring: &SlotRing, frame: WireFrame) {
    if shared.rx.push(frame).is_err() {
        unreachable!("wire queue holds every slot of the ring");
    }
    // Pairs with the fence in `LoopbackRx::close`: either the receiver's
    // final drain sees this frame or we see that it left and drain ourselves.
    fence(Ordering::SeqCst);
    if shared.receiver_gone.load(Ordering::Relaxed) {
        while let Some(f) = shared.rx.pop() {
            ring.release(f.slot);
        }
    }
}

impl LoopbackTx {
    /// Attaches seeded fault injection. Replaces any earlier plan.
    pub fn inject_faults(&mut self, plan: FaultPlan) {
        self.faults = (!plan.is_noop()).then(|| FaultStage::new(plan));
    }

    fn capacity(&self) -> usize {
        self.ring.slot_size() - self.framing.overhead()
    }

    fn take_slot(&self) -> Result<SlotHandle, TransportError> {
        let gone = &self.shared.receiver_gone;
        if gone.load(Ordering::Relaxed) {
            return Err(TransportError::Closed);
        }
        self.ring.take_free_blocking(|| gone.load(Ordering::Relaxed)).ok_or(TransportError::Closed)
    }

    fn send(&mut self, packet_id: u64, len: usize, fill: impl FnOnce(&mut [u8])) -> Result<(), TransportError> {
        let capacity = self.capacity();
        if len > capacity {
            return Err(TransportError::TooLarge { len, capacity });
        }
        let mut slot = self.take_slot()?;
        let buf = self.ring.slot_mut(&mut slot);
        let total = match self.framing {
            Framing::Payload => {
                fill(&mut buf[..len]);
                len
            }
            Framing::Ethernet(spec) => {
                let total = write_headers(&spec, self.ip_id, len, buf).expect("slot holds the frame");
                self.ip_id = self.ip_id.wrapping_add(1);
                fill(&mut buf[FRAME_HEADERS_LEN..total]);
                seal_frame(&mut buf[..total]);
                total
            }
        };
        let frame = WireFrame { slot, len: total as u32, port: self.port };
        let Some(stage) = self.faults.as_mut() else {
            push_wire(&self.shared, &self.ring, frame);
            return Ok(());
        };
        let ring = &self.ring;
        let shared = &self.shared;
        let mut failed = false;
        stage.submit(
            packet_id,
            frame,
            |orig| {
                let Some(mut copy) = ring.take_free_blocking(|| shared.receiver_gone.load(Ordering::Relaxed)) else {
                    failed = true;
                    return None;
                };
                let n = orig.len as usize;
                ring.slot_mut(&mut copy)[..n].copy_from_slice(&ring.slot(&orig.slot)[..n]);
                Some(WireFrame { slot: copy, len: orig.len, port: orig.port })
            },
            |d| match d {
                Delivery::Emit(f) => push_wire(shared, ring, f),
                Delivery::Discard(f) => ring.release(f.slot),
            },
        );
        if failed {
            Err(TransportError::Closed)
        } else {
            Ok(())
        }
    }

    /// Puts `len` bytes written by `fill` on the wire verbatim, skipping
    /// framing and faults. Used to inject malformed traffic.
    pub fn send_verbatim(&mut self, len: usize, fill: impl FnOnce(&mut [u8])) -> Result<(), TransportError> {
        if len > self.ring.slot_size() {
            return Err(TransportError::TooLarge { len, capacity: self.ring.slot_size() });
        }
        let mut slot = self.take_slot()?;
        fill(&mut self.ring.slot_mut(&mut slot)[..len]);
        push_wire(&self.shared, &self.ring, WireFrame { slot, len: len as u32, port: self.port });
        Ok(())
    }

    /// Releases held packets, closes the wire and returns the fault log.
    pub fn finish(mut self) -> Option<GroundTruth> {
        self.close()
    }

    fn close(&mut self) -> Option<GroundTruth> {
        let truth = self.faults.take().map(|mut stage| {
            let ring = &self.ring;
            let shared = &self.shared;
            stage.flush(|d| match d {
                Delivery::Emit(f) => push_wire(shared, ring, f),
                Delivery::Discard(f) => ring.release(f.slot),
            });
            stage.into_parts().0
        });
        self.shared.closed.store(true, Ordering::Release);
        truth
    }

    /// The fault log so far, if faults are attached.
    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.faults.as_ref().map(|s| s.ground_truth())
    }
}

impl Drop for LoopbackTx {
    fn drop(&mut self) {
        if !self.shared.closed.load(Ordering::Acquire) {
            self.close();
        }
    }
}

impl LoopbackRx {
    /// The ring frames arrive in.
    pub fn ring(&self) -> &SlotRing {
        &self.ring
    }

    /// Next frame on the wire.
    pub fn poll(&self) -> Option<WireFrame> {
        self.shared.rx.pop()
    }

    /// Sender finished and the wire is empty.
    pub fn is_drained(&self) -> bool {
        self.shared.closed.load(Ordering::Acquire) && self.shared.rx.is_empty()
    }
}

impl LoopbackRx {
    /// Stops accepting frames and returns every queued slot to the ring.
    /// Frames the sender pushes afterwards are released by the sender.
    pub fn close(&self) {
        self.shared.receiver_gone.store(true, Ordering::Relaxed);
        fence(Ordering::SeqCst);
        while let Some(f) = self.shared.rx.pop() {
            self.ring.release(f.slot);
        }
    }
}

impl Drop for LoopbackRx {
    fn drop(&mut self) {
        self.close();
    }
}

/// Sending end of a UDP link.
pub struct UdpTx {
    socket: UdpSocket,
    dest: SocketAddr,
    buf: Vec<u8>,
}

impl UdpTx {
    /// Binds an ephemeral local socket sending to `dest`.
    pub fn connect(dest: SocketAddr) -> Result<Self, TransportError> {
        let bind: SocketAddr = if dest.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("literal address");
        let socket = UdpSocket::bind(bind)?;
        Ok(Self { socket, dest, buf: vec![0; 65507] })
    }

    fn send(&mut self, len: usize, fill: impl FnOnce(&mut [u8])) -> Result<(), TransportError> {
        if len > self.buf.len() {
            return Err(TransportError::TooLarge { len, capacity: self.buf.len() });
        }
        fill(&mut self.buf[..len]);
        loop {
            match self.socket.send_to(&self.buf[..len], self.dest) {
                Ok(_) => return Ok(()),
                // kernel buffers full; the datagram would be lost anyway on a real NIC, retry briefly
                Err(e) if e.raw_os_error() == Some(105) || e.kind() == io::ErrorKind::WouldBlock => {
                    std::thread::yield_now()
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// Receiving end of a UDP link: one bound socket feeding its own slot ring.
pub struct UdpRx {
    socket: UdpSocket,
    ring: SlotRing,
    port: u16,
    scratch: Vec<u8>,
}

impl UdpRx {
    /// Binds `addr` non-blocking with a fresh slot ring.
    pub fn bind(addr: SocketAddr, ring: RingConfig) -> Result<Self, TransportError> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_nonblocking(true)?;
        let port = socket.local_addr()?.port();
        Ok(Self { socket, ring: SlotRing::new(ring)?, port, scratch: vec![0; 65536] })
    }

    /// Bound port.
    pub fn port(&self) -> u16 {
        self.port
    }

    /// The ring datagrams land in.
    pub fn ring(&self) -> &SlotRing {
        &self.ring
    }
}

/// What one receive attempt produced.
#[derive(Debug)]
pub enum Poll {
    /// A frame.
    Frame(WireFrame),
    /// A packet arrived but no slot was free; it was discarded.
    Exhausted,
    /// Nothing pending.
    Empty,
}

impl UdpRx {
    fn poll(&mut self) -> io::Result<Poll> {
        let Some(mut slot) = self.ring.take_free() else {
            return match self.socket.recv_from(&mut self.scratch) {
                Ok(_) => Ok(Poll::Exhausted),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(Poll::Empty),
                Err(e) => Err(e),
            };
        };
        match self.socket.recv_from(self.ring.slot_mut(&mut slot)) {
            Ok((n, _)) => Ok(Poll::Frame(WireFrame { slot, len: n as u32, port: self.port })),
            Err(e) => {
                self.ring.release(slot);
                if e.kind() == io::ErrorKind::WouldBlock {
                    Ok(Poll::Empty)
                } else {
                    Err(e)
                }
            }
        }
    }
}

/// Sending side of any link.
pub enum TxLink {
    /// In-process wire.
    Loopback(LoopbackTx),
    /// UDP socket.
    Udp(UdpTx),
    /// Raw `AF_PACKET` socket.
    Packet(crate::packet::PacketTx),
}

impl TxLink {
    /// Largest DROP packet (header + payload) the link carries.
    pub fn capacity(&self) -> usize {
        match self {
            TxLink::Loopback(l) => l.capacity(),
            TxLink::Udp(u) => u.buf.len(),
            TxLink::Packet(p) => p.capacity(),
        }
    }

    /// Sends one DROP packet of `len` bytes written by `fill`. `packet_id`
    /// keys fault decisions on loopback links.
    pub fn send_packet(&mut self, packet_id: u64, len: usize, fill: impl FnOnce(&mut [u8])) -> Result<(), TransportError> {
        match self {
            TxLink::Loopback(l) => l.send(packet_id, len, fill),
            TxLink::Udp(u) => u.send(len, fill),
            TxLink::Packet(p) => p.send(len, fill),
        }
    }

    /// Attaches a fault plan. Only loopback links accept one.
    pub fn inject_faults(&mut self, plan: FaultPlan) -> Result<(), TransportError> {
        match self {
            TxLink::Loopback(l) => {
                l.inject_faults(plan);
                Ok(())
            }
            _ if plan.is_noop() => Ok(()),
            _ => Err(TransportError::FaultsNeedLoopback),
        }
    }

    /// Flushes and closes the link, returning the fault log of loopback links.
    pub fn finish(self) -> Option<GroundTruth> {
        match self {
            TxLink::Loopback(l) => l.finish(),
            TxLink::Udp(_) | TxLink::Packet(_) => None,
        }
    }
}

/// Receiving side of any link; one receive queue.
pub enum RxQueue {
    /// In-process wire.
    Loopback(LoopbackRx),
    /// UDP socket.
    Udp(UdpRx),
    /// Raw `AF_PACKET` socket.
    Packet(crate::packet::PacketRx),
}

impl RxQueue {
    /// Ring backing this queue.
    pub fn ring(&self) -> &SlotRing {
        match self {
            RxQueue::Loopback(l) => &l.ring,
            RxQueue::Udp(u) => &u.ring,
            RxQueue::Packet(p) => p.ring(),
        }
    }

    /// Whether frames on this queue are Ethernet frames.
    pub fn is_raw(&self) -> bool {
        match self {
            RxQueue::Loopback(l) => l.framing.is_raw(),
            RxQueue::Udp(_) => false,
            RxQueue::Packet(_) => true,
        }
    }

    /// Attempts to receive one frame.
    pub fn poll(&mut self) -> io::Result<Poll> {
        match self {
            RxQueue::Loopback(l) => Ok(l.poll().map_or(Poll::Empty, Poll::Frame)),
            RxQueue::Udp(u) => u.poll(),
            RxQueue::Packet(p) => p.poll(),
        }
    }

    /// Stops the queue and releases every frame still waiting in it.
    pub fn close(&mut self) {
        match self {
            RxQueue::Loopback(l) => l.close(),
            _ => loop {
                match self.poll() {
                    Ok(Poll::Frame(f)) => self.ring().release(f.slot),
                    Ok(Poll::Exhausted) => {}
                    Ok(Poll::Empty) | Err(_) => break,
                }
            },
        }
    }

    /// True once no more frames can arrive (loopback sender finished and
    /// wire empty). Socket queues never drain by themselves.
    pub fn is_drained(&self) -> bool {
        match self {
            RxQueue::Loopback(l) => l.is_drained(),
            _ => false,
        }
    }
}

/// Fault injection on an arbitrary link; refused unless it is loopback.
pub fn inject_faults(mut link: TxLink, plan: FaultPlan) -> Result<TxLink, TransportError> {
    link.inject_faults(plan)?;
    Ok(link)
}
