//! DROP header codec.
//!
//! Every DROP packet starts with a fixed 16-byte header in network byte order:
//!
//! ```text
//!  0        1        2                 4                 6                 8
//! +--------+--------+--------+--------+--------+--------+--------+--------+
//! |version | flags  |    stream_id    |   payload_len   |    reserved     |
//! +--------+--------+--------+--------+--------+--------+--------+--------+
//! |                           packet_id (u64)                             |
//! +--------+--------+--------+--------+--------+--------+--------+--------+
//! ```

use thiserror::Error;

/// Size of the encoded header.
pub const HEADER_LEN: usize = 16;
/// The only protocol version this codec speaks.
pub const VERSION: u8 = 1;
/// Largest frame a receive slot may hold.
pub const MAX_SLOT_SIZE: usize = 2048;
/// Ethernet (14) + IPv4 (20) + UDP (8) + DROP (16) bytes in front of the user payload.
pub const RAW_FRAME_OVERHEAD: usize = 14 + 20 + 8 + HEADER_LEN;
/// Largest `payload_len` that still fits a maximal slot in socket mode.
pub const MAX_PAYLOAD_LEN: usize = MAX_SLOT_SIZE - HEADER_LEN;

/// Per-packet DROP header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DropHeader {
    /// Protocol version, always [`VERSION`].
    pub version: u8,
    /// Reserved, zero in v1.
    pub flags: u8,
    /// Logical stream; one stream per UDP destination port.
    pub stream_id: u16,
    /// Bytes of user payload following the header.
    pub payload_len: u16,
    /// Per-stream counter, +1 per packet.
    pub packet_id: u64,
}

impl DropHeader {
    /// A v1 header with zero flags.
    pub const fn new(stream_id: u16, packet_id: u64, payload_len: u16) -> Self {
        Self { version: VERSION, flags: 0, stream_id, payload_len, packet_id }
    }
}

/// Header field that failed validation on encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EncodeError {
    /// `version` is not [`VERSION`].
    #[error("header field `version` = {0} is not supported (expected 1)")]
    Version(u8),
    /// `flags` must be zero in v1.
    #[error("header field `flags` = {0:#04x} must be zero")]
    Flags(u8),
    /// `payload_len` exceeds [`MAX_PAYLOAD_LEN`].
    #[error("header field `payload_len` = {0} exceeds {MAX_PAYLOAD_LEN}")]
    PayloadLen(u16),
    /// Output buffer shorter than [`HEADER_LEN`].
    #[error("output buffer holds {0} bytes, header needs {HEADER_LEN}")]
    BufferTooSmall(usize),
}

/// Reasons a received buffer is not a valid DROP packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DecodeError {
    /// Fewer than [`HEADER_LEN`] bytes.
    #[error("truncated header: {0} bytes")]
    TruncatedHeader(usize),
    /// Version byte is not 1.
    #[error("unsupported DROP version {0}")]
    UnsupportedVersion(u8),
    /// Flags byte nonzero.
    #[error("nonzero flags {0:#04x}")]
    NonzeroFlags(u8),
    /// `payload_len` claims more bytes than follow the header.
    #[error("payload_len {declared} exceeds the {available} bytes following the header")]
    PayloadLengthMismatch {
        /// Value of the header field.
        declared: u16,
        /// Bytes actually present after the header.
        available: usize,
    },
}

/// Writes `h` into the first [`HEADER_LEN`] bytes of `out` and returns [`HEADER_LEN`].
pub fn encode_header(h: &DropHeader, out: &mut [u8]) -> Result<usize, EncodeError> {
    if h.version != VERSION {
        return Err(EncodeError::Version(h.version));
    }
    if h.flags != 0 {
        return Err(EncodeError::Flags(h.flags));
    }
    if usize::from(h.payload_len) > MAX_PAYLOAD_LEN {
        return Err(EncodeError::PayloadLen(h.payload_len));
    }
    let available = out.len();
    let out = out.get_mut(..HEADER_LEN).ok_or(EncodeError::BufferTooSmall(available))?;
    out[0] = h.version;
    out[1] = h.flags;
    out[2..4].copy_from_slice(&h.stream_id.to_be_bytes());
    out[4..6].copy_from_slice(&h.payload_len.to_be_bytes());
    out[6..8].fill(0);
    out[8..16].copy_from_slice(&h.packet_id.to_be_bytes());
    Ok(HEADER_LEN)
}

/// Parses the header at the start of `buf`.
///
/// Trailing bytes beyond `payload_len` (Ethernet padding) are tolerated.
pub fn decode_header(buf: &[u8]) -> Result<DropHeader, DecodeError> {
    if buf.len() < HEADER_LEN {
        return Err(DecodeError::TruncatedHeader(buf.len()));
    }
    let version = buf[0];
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let flags = buf[1];
    if flags != 0 {
        return Err(DecodeError::NonzeroFlags(flags));
    }
    let stream_id = u16::from_be_bytes([buf[2], buf[3]]);
    let payload_len = u16::from_be_bytes([buf[4], buf[5]]);
    let available = buf.len() - HEADER_LEN;
    if usize::from(payload_len) > available {
        return Err(DecodeError::PayloadLengthMismatch { declared: payload_len, available });
    }
    let mut id = [0u8; 8];
    id.copy_from_slice(&buf[8..16]);
    Ok(DropHeader { version, flags, stream_id, payload_len, packet_id: u64::from_be_bytes(id) })
}

/// Signed distance `next - prev` in 64-bit modular arithmetic.
///
/// Healthy streams yield 1. The result is exact whenever the true distance
/// lies in `[-2^63, 2^63)`.
#[inline]
pub fn id_distance(prev: u64, next: u64) -> i64 {
    next.wrapping_sub(prev) as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_header_bytes() {
        let mut out = [0xAAu8; 16];
        assert_eq!(encode_header(&DropHeader::new(0, 0, 0), &mut out), Ok(16));
        let mut expected = [0u8; 16];
        expected[0] = 1;
        assert_eq!(out, expected);
    }

    #[test]
    fn network_byte_order() {
        let mut out = [0u8; 20];
        encode_header(&DropHeader::new(7, 1, 2000), &mut out).unwrap();
        assert_eq!(&out[2..4], &[0x00, 0x07]);
        assert_eq!(&out[4..6], &[0x07, 0xD0]);
        assert_eq!(&out[8..16], &[0, 0, 0, 0, 0, 0, 0, 1]);
        // nothing past the header is touched
        assert_eq!(&out[16..], &[0, 0, 0, 0]);
    }

    #[test]
    fn decode_version_only() {
        let mut buf = [0u8; 16];
        buf[0] = 1;
        assert_eq!(decode_header(&buf), Ok(DropHeader::new(0, 0, 0)));
    }

    #[test]
    fn decode_errors_are_distinct() {
        assert_eq!(decode_header(&[1u8; 10]), Err(DecodeError::TruncatedHeader(10)));

        let mut buf = [0u8; 16];
        buf[0] = 2;
        assert_eq!(decode_header(&buf), Err(DecodeError::UnsupportedVersion(2)));
        buf[0] = 1;
        buf[1] = 0x80;
        assert_eq!(decode_header(&buf), Err(DecodeError::NonzeroFlags(0x80)));

        let mut pkt = [0u8; 16 + 1999];
        encode_header(&DropHeader::new(0, 5, 2000), &mut pkt).unwrap();
        assert_eq!(
            decode_header(&pkt),
            Err(DecodeError::PayloadLengthMismatch { declared: 2000, available: 1999 })
        );
    }

    #[test]
    fn encode_names_bad_field() {
        let mut out = [0u8; 16];
        let mut h = DropHeader::new(1, 1, 1);
        h.flags = 1;
        assert_eq!(encode_header(&h, &mut out), Err(EncodeError::Flags(1)));
        h.flags = 0;
        h.version = 3;
        assert_eq!(encode_header(&h, &mut out), Err(EncodeError::Version(3)));
        let h = DropHeader::new(1, 1, 2033);
        assert_eq!(encode_header(&h, &mut out), Err(EncodeError::PayloadLen(2033)));
        assert_eq!(encode_header(&DropHeader::new(0, 0, 0), &mut out[..15]), Err(EncodeError::BufferTooSmall(15)));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(id_distance(41, 42), 1);
        assert_eq!(id_distance(41, 45), 4);
        assert_eq!(id_distance(u64::MAX, 0), 1);
        assert_eq!(id_distance(5, 3), -2);
    }

    proptest! {
        #[test]
        fn distance_matches_wide_oracle(a in any::<u64>(), k in (i64::MIN + 1)..i64::MAX) {
            let next = ((i128::from(a) + i128::from(k)).rem_euclid(1i128 << 64)) as u64;
            prop_assert_eq!(i128::from(id_distance(a, next)), i128::from(k));
        }

        #[test]
        fn codec_round_trip(stream in any::<u16>(), id in any::<u64>(), len in 0u16..=MAX_PAYLOAD_LEN as u16) {
            let h = DropHeader::new(stream, id, len);
            let mut buf = [0u8; HEADER_LEN + MAX_PAYLOAD_LEN];
            prop_assert_eq!(encode_header(&h, &mut buf), Ok(HEADER_LEN));
            prop_assert_eq!(decode_header(&buf[..HEADER_LEN + usize::from(len)]), Ok(h));
        }
    }
}
