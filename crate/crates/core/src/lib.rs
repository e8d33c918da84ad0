//! Allocation-only building blocks for DROP (Data ReadOut Protocol) streams.
//!
//! DROP carries a per-stream packet identifier on top of UDP and deliberately
//! has no retransmission. Everything here is pure: header and frame codecs,
//! the software pattern generator, the identifier audit, the 16-bit word
//! histogram, thread placement rules, seeded fault decisions and a
//! virtual-time link model. Threads, sockets and files live in `drop-daq`.
#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]
#![warn(missing_docs)]

extern crate alloc;

pub mod audit;
pub mod fault;
pub mod frame;
pub mod histogram;
pub mod pattern;
pub mod protocol;
pub mod simlink;
pub mod sweep;
pub mod topology;

pub use audit::{loss_upper_limit, AuditEvent, AuditEventKind, AuditReport, LossBound, StreamAudit};
pub use protocol::{decode_header, encode_header, id_distance, DecodeError, DropHeader, EncodeError};
