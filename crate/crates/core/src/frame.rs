//! Ethernet II / IPv4 / UDP framing for raw-frame mode.
//!
//! The receive path gets whole frames with no kernel protocol processing, so
//! header validation and both checksums are checked here.

use core::ops::Range;
use thiserror::Error;

/// Ethernet II header length (no VLAN tag).
pub const ETH_HEADER_LEN: usize = 14;
/// IPv4 header length without options.
pub const IPV4_HEADER_LEN: usize = 20;
/// UDP header length.
pub const UDP_HEADER_LEN: usize = 8;
/// Bytes in front of the UDP payload in frames built by [`build_frame`].
pub const FRAME_HEADERS_LEN: usize = ETH_HEADER_LEN + IPV4_HEADER_LEN + UDP_HEADER_LEN;

const ETHERTYPE_IPV4: u16 = 0x0800;
const IPPROTO_UDP: u8 = 17;

/// Addressing used when building frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameSpec {
    /// Destination MAC.
    pub dst_mac: [u8; 6],
    /// Source MAC.
    pub src_mac: [u8; 6],
    /// Source IPv4 address.
    pub src_ip: [u8; 4],
    /// Destination IPv4 address.
    pub dst_ip: [u8; 4],
    /// UDP source port.
    pub src_port: u16,
    /// UDP destination port; selects the DROP stream on the receiver.
    pub dst_port: u16,
    /// IPv4 TTL.
    pub ttl: u8,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            dst_mac: [0x02, 0, 0, 0, 0, 0x02],
            src_mac: [0x02, 0, 0, 0, 0, 0x01],
            src_ip: [10, 0, 0, 1],
            dst_ip: [10, 0, 0, 2],
            src_port: 40000,
            dst_port: 9000,
            ttl: 64,
        }
    }
}

/// Protocol layer whose checksum failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ChecksumLayer {
    /// IPv4 header checksum.
    Ipv4,
    /// UDP checksum over pseudo-header, header and payload.
    Udp,
}

/// Validation failures of [`parse_frame`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FrameError {
    /// Frame ends inside a header.
    #[error("frame truncated at {0} bytes")]
    Truncated(usize),
    /// Ethertype is not IPv4.
    #[error("ethertype {0:#06x} is not IPv4")]
    NotIpv4(u16),
    /// Version/IHL/total-length inconsistent.
    #[error("malformed IPv4 header")]
    BadIpv4Header,
    /// More-fragments flag or nonzero fragment offset.
    #[error("fragmented IPv4 packet")]
    Fragmented,
    /// IP protocol is not UDP.
    #[error("IP protocol {0} is not UDP")]
    NotUdp(u8),
    /// UDP length field disagrees with the IPv4 payload length.
    #[error("UDP length {udp} does not match IPv4 payload length {ip}")]
    UdpLength {
        /// UDP header length field.
        udp: u16,
        /// Bytes of IPv4 payload.
        ip: usize,
    },
    /// Checksum mismatch.
    #[error("{0:?} checksum mismatch")]
    Checksum(ChecksumLayer),
}

/// A validated UDP datagram located inside a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpView {
    /// IPv4 source.
    pub src_ip: [u8; 4],
    /// IPv4 destination.
    pub dst_ip: [u8; 4],
    /// UDP source port.
    pub src_port: u16,
    /// UDP destination port.
    pub dst_port: u16,
    /// Byte range of the UDP payload within the frame.
    pub payload: Range<usize>,
}

fn sum_words(data: &[u8], mut acc: u64) -> u64 {
    let mut chunks = data.chunks_exact(2);
    for w in &mut chunks {
        acc += u64::from(u16::from_be_bytes([w[0], w[1]]));
    }
    if let [last] = chunks.remainder() {
        acc += u64::from(*last) << 8;
    }
    acc
}

fn fold(mut acc: u64) -> u16 {
    while acc > 0xFFFF {
        acc = (acc >> 16) + (acc & 0xFFFF);
    }
    acc as u16
}

/// RFC 1071 internet checksum (ones' complement of the ones' complement sum).
pub fn internet_checksum(data: &[u8]) -> u16 {
    !fold(sum_words(data, 0))
}

fn udp_checksum(src: [u8; 4], dst: [u8; 4], udp: &[u8]) -> u16 {
    let mut acc = sum_words(&src, 0);
    acc = sum_words(&dst, acc);
    acc += u64::from(IPPROTO_UDP);
    acc += udp.len() as u64;
    acc = sum_words(udp, acc);
    let c = !fold(acc);
    if c == 0 {
        0xFFFF
    } else {
        c
    }
}

/// Writes Ethernet, IPv4 and UDP headers for a datagram of `payload_len`
/// bytes; the payload is expected at `out[FRAME_HEADERS_LEN..]`.
///
/// The IPv4 checksum is filled in; call [`seal_frame`] once the payload is
/// written to set the UDP checksum. Returns the total frame length.
pub fn write_headers(spec: &FrameSpec, ip_id: u16, payload_len: usize, out: &mut [u8]) -> Option<usize> {
    let total = FRAME_HEADERS_LEN + payload_len;
    let ip_len = u16::try_from(IPV4_HEADER_LEN + UDP_HEADER_LEN + payload_len).ok()?;
    let out = out.get_mut(..total)?;

    out[0..6].copy_from_slice(&spec.dst_mac);
    out[6..12].copy_from_slice(&spec.src_mac);
    out[12..14].copy_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let ip = &mut out[ETH_HEADER_LEN..ETH_HEADER_LEN + IPV4_HEADER_LEN];
    ip[0] = 0x45;
    ip[1] = 0;
    ip[2..4].copy_from_slice(&ip_len.to_be_bytes());
    ip[4..6].copy_from_slice(&ip_id.to_be_bytes());
    ip[6..8].copy_from_slice(&0x4000u16.to_be_bytes()); // DF
    ip[8] = spec.ttl;
    ip[9] = IPPROTO_UDP;
    ip[10..12].fill(0);
    ip[12..16].copy_from_slice(&spec.src_ip);
    ip[16..20].copy_from_slice(&spec.dst_ip);
    let csum = internet_checksum(ip);
    ip[10..12].copy_from_slice(&csum.to_be_bytes());

    let udp = &mut out[ETH_HEADER_LEN + IPV4_HEADER_LEN..FRAME_HEADERS_LEN];
    udp[0..2].copy_from_slice(&spec.src_port.to_be_bytes());
    udp[2..4].copy_from_slice(&spec.dst_port.to_be_bytes());
    udp[4..6].copy_from_slice(&((UDP_HEADER_LEN + payload_len) as u16).to_be_bytes());
    udp[6..8].fill(0);
    Some(total)
}

/// Computes and stores the UDP checksum of a frame produced by [`write_headers`].
pub fn seal_frame(frame: &mut [u8]) {
    let mut src = [0u8; 4];
    let mut dst = [0u8; 4];
    src.copy_from_slice(&frame[ETH_HEADER_LEN + 12..ETH_HEADER_LEN + 16]);
    dst.copy_from_slice(&frame[ETH_HEADER_LEN + 16..ETH_HEADER_LEN + 20]);
    let udp = &mut frame[ETH_HEADER_LEN + IPV4_HEADER_LEN..];
    udp[6..8].fill(0);
    let csum = udp_checksum(src, dst, udp);
    udp[6..8].copy_from_slice(&csum.to_be_bytes());
}

/// Builds a complete frame carrying `payload`. Returns the frame length, or
/// `None` if `out` is too small.
pub fn build_frame(spec: &FrameSpec, ip_id: u16, payload: &[u8], out: &mut [u8]) -> Option<usize> {
    let total = write_headers(spec, ip_id, payload.len(), out)?;
    out[FRAME_HEADERS_LEN..total].copy_from_slice(payload);
    seal_frame(&mut out[..total]);
    Some(total)
}

/// Validates an Ethernet/IPv4/UDP frame and locates its payload without copying.
///
/// Trailing Ethernet padding beyond the IPv4 total length is ignored. A zero
/// UDP checksum means "not computed" and is accepted. Stored checksums must
/// equal the computed value exactly, so the ones' complement alias of a
/// correct checksum (0x0000 vs. 0xFFFF) is rejected.
pub fn parse_frame(frame: &[u8]) -> Result<UdpView, FrameError> {
    parse_frame_with(frame, false)
}

/// [`parse_frame`], optionally rejecting frames whose UDP checksum is zero.
/// Use `require_udp_checksum` when every sender is known to fill it in.
pub fn parse_frame_with(frame: &[u8], require_udp_checksum: bool) -> Result<UdpView, FrameError> {
    if frame.len() < ETH_HEADER_LEN {
        return Err(FrameError::Truncated(frame.len()));
    }
    let ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    if ethertype != ETHERTYPE_IPV4 {
        return Err(FrameError::NotIpv4(ethertype));
    }
    let ip = &frame[ETH_HEADER_LEN..];
    if ip.len() < IPV4_HEADER_LEN {
        return Err(FrameError::Truncated(frame.len()));
    }
    if ip[0] >> 4 != 4 {
        return Err(FrameError::BadIpv4Header);
    }
    let ihl = usize::from(ip[0] & 0x0F) * 4;
    let total_len = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    if ihl < IPV4_HEADER_LEN || total_len < ihl {
        return Err(FrameError::BadIpv4Header);
    }
    if ip.len() < total_len {
        return Err(FrameError::Truncated(frame.len()));
    }
    let stored = u16::from_be_bytes([ip[10], ip[11]]);
    if stored != !fold(sum_words(&ip[12..ihl], sum_words(&ip[..10], 0))) {
        return Err(FrameError::Checksum(ChecksumLayer::Ipv4));
    }
    let frag = u16::from_be_bytes([ip[6], ip[7]]);
    if frag & 0x3FFF != 0 {
        return Err(FrameError::Fragmented);
    }
    if ip[9] != IPPROTO_UDP {
        return Err(FrameError::NotUdp(ip[9]));
    }
    let mut src_ip = [0u8; 4];
    let mut dst_ip = [0u8; 4];
    src_ip.copy_from_slice(&ip[12..16]);
    dst_ip.copy_from_slice(&ip[16..20]);

    let udp = &ip[ihl..total_len];
    if udp.len() < UDP_HEADER_LEN {
        return Err(FrameError::Truncated(frame.len()));
    }
    let udp_len = u16::from_be_bytes([udp[4], udp[5]]);
    if usize::from(udp_len) != udp.len() {
        return Err(FrameError::UdpLength { udp: udp_len, ip: udp.len() });
    }
    let stored = u16::from_be_bytes([udp[6], udp[7]]);
    if stored != 0 || require_udp_checksum {
        let mut acc = sum_words(&src_ip, 0);
        acc = sum_words(&dst_ip, acc);
        acc += u64::from(IPPROTO_UDP);
        acc += udp.len() as u64;
        acc = sum_words(&udp[8..], sum_words(&udp[..6], acc));
        let computed = match !fold(acc) {
            0 => 0xFFFF,
            c => c,
        };
        if stored != computed {
            return Err(FrameError::Checksum(ChecksumLayer::Udp));
        }
    }
    let start = ETH_HEADER_LEN + ihl + UDP_HEADER_LEN;
    Ok(UdpView {
        src_ip,
        dst_ip,
        src_port: u16::from_be_bytes([udp[0], udp[1]]),
        dst_port: u16::from_be_bytes([udp[2], udp[3]]),
        payload: start..ETH_HEADER_LEN + total_len,
    })
}
