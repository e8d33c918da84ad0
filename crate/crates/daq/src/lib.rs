//! Host side of the DROP measurement harness: transports, the paced sender,
//! the slot-ring receiver, and the experiment phases built on them.

pub mod affinity;
pub mod config;
pub mod packet;
pub mod phases;
pub mod receiver;
pub mod report;
pub mod sender;
pub mod slots;
pub mod transport;
