//! `AF_PACKET` raw-socket link for lab hardware.
//!
//! Frames are built and parsed in userspace exactly as in the loopback raw
//! mode; only the wire differs. Needs `CAP_NET_RAW`.

use std::io;

use drop_core::frame::{seal_frame, write_headers, FrameSpec, FRAME_HEADERS_LEN};
use drop_core::protocol::MAX_SLOT_SIZE;

use crate::slots::{RingConfig, SlotRing};
use crate::transport::{Poll, TransportError, WireFrame};

#[cfg(target_os = "linux")]
mod sys {
    use std::ffi::CString;
    use std::io;
    use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};

    pub const ETH_P_IP: u16 = 0x0800;

    pub fn open(iface: &str, bind_rx: bool) -> io::Result<(OwnedFd, i32)> {
        let name = CString::new(iface).map_err(|_| io::Error::from(io::ErrorKind::InvalidInput))?;
        // SAFETY: plain libc calls with valid arguments; the fd is owned right away.
        unsafe {
            let ifindex = libc::if_nametoindex(name.as_ptr()) as i32;
            if ifindex == 0 {
                return Err(io::Error::last_os_error());
            }
            let raw = libc::socket(libc::AF_PACKET, libc::SOCK_RAW, i32::from(ETH_P_IP.to_be()));
            if raw < 0 {
                return Err(io::Error::last_os_error());
            }
            let fd = OwnedFd::from_raw_fd(raw);
            if bind_rx {
                let addr = sockaddr(ifindex, [0; 6]);
                let rc = libc::bind(
                    fd.as_raw_fd(),
                    &addr as *const libc::sockaddr_ll as *const libc::sockaddr,
                    std::mem::size_of::<libc::sockaddr_ll>() as u32,
                );
                if rc < 0 {
                    return Err(io::Error::last_os_error());
                }
                let flags = libc::fcntl(fd.as_raw_fd(), libc::F_GETFL);
                if flags < 0 || libc::fcntl(fd.as_raw_fd(), libc::F_SETFL, flags | libc::O_NONBLOCK) < 0 {
                    return Err(io::Error::last_os_error());
                }
            }
            Ok((fd, ifindex))
        }
    }

    pub fn sockaddr(ifindex: i32, mac: [u8; 6]) -> libc::sockaddr_ll {
        // SAFETY: sockaddr_ll is plain old data; all-zero is a valid value.
        let mut a: libc::sockaddr_ll = unsafe { std::mem::zeroed() };
        a.sll_family = libc::AF_PACKET as u16;
        a.sll_protocol = ETH_P_IP.to_be();
        a.sll_ifindex = ifindex;
        a.sll_halen = 6;
        a.sll_addr[..6].copy_from_slice(&mac);
        a
    }

    pub fn send(fd: &OwnedFd, ifindex: i32, mac: [u8; 6], frame: &[u8]) -> io::Result<()> {
        let addr = sockaddr(ifindex, mac);
        // SAFETY: frame and addr outlive the call.
        let rc = unsafe {
            libc::sendto(
                fd.as_raw_fd(),
                frame.as_ptr().cast(),
                frame.len(),
                0,
                &addr as *const libc::sockaddr_ll as *const libc::sockaddr,
                std::mem::size_of::<libc::sockaddr_ll>() as u32,
            )
        };
        if rc < 0 {
            Err(io::Error::last_os_error())
        } else {
            Ok(())
        }
    }

    /// Returns the frame length, or `None` for frames this host sent itself.
    pub fn recv(fd: &OwnedFd, buf: &mut [u8]) -> io::Result<Option<usize>> {
        // SAFETY: zeroed sockaddr_ll is valid; buf is writable for its length.
        unsafe {
            let mut from: libc::sockaddr_ll = std::mem::zeroed();
            let mut len = std::mem::size_of::<libc::sockaddr_ll>() as u32;
            let n = libc::recvfrom(
                fd.as_raw_fd(),
                buf.as_mut_ptr().cast(),
                buf.len(),
                libc::MSG_TRUNC,
                &mut from as *mut libc::sockaddr_ll as *mut libc::sockaddr,
                &mut len,
            );
            if n < 0 {
                return Err(io::Error::last_os_error());
            }
            if from.sll_pkttype == libc::PACKET_OUTGOING {
                return Ok(None);
            }
            Ok(Some((n as usize).min(buf.len())))
        }
    }
}

/// Sends Ethernet frames on one interface.
pub struct PacketTx {
    #[cfg(target_os = "linux")]
    fd: std::os::fd::OwnedFd,
    #[cfg(target_os = "linux")]
    ifindex: i32,
    spec: FrameSpec,
    ip_id: u16,
    buf: Vec<u8>,
}

impl PacketTx {
    /// Opens a raw socket on `iface` sending frames addressed per `spec`.
    #[cfg(target_os = "linux")]
    pub fn open(iface: &str, spec: FrameSpec) -> Result<Self, TransportError> {
        let (fd, ifindex) = sys::open(iface, false)?;
        Ok(Self { fd, ifindex, spec, ip_id: 0, buf: vec![0; MAX_SLOT_SIZE] })
    }

    /// Opens a raw socket on `iface` sending frames addressed per `spec`.
    #[cfg(not(target_os = "linux"))]
    pub fn open(_iface: &str, _spec: FrameSpec) -> Result<Self, TransportError> {
        Err(TransportError::Unsupported)
    }

    pub(crate) fn capacity(&self) -> usize {
        MAX_SLOT_SIZE - FRAME_HEADERS_LEN
    }

    pub(crate) fn send(&mut self, len: usize, fill: impl FnOnce(&mut [u8])) -> Result<(), TransportError> {
        if len > self.capacity() {
            return Err(TransportError::TooLarge { len, capacity: self.capacity() });
        }
        let total = write_headers(&self.spec, self.ip_id, len, &mut self.buf).expect("buffer holds a slot");
        self.ip_id = self.ip_id.wrapping_add(1);
        fill(&mut self.buf[FRAME_HEADERS_LEN..total]);
        seal_frame(&mut self.buf[..total]);
        #[cfg(target_os = "linux")]
        {
            sys::send(&self.fd, self.ifindex, self.spec.dst_mac, &self.buf[..total])?;
            Ok(())
        }
        #[cfg(not(target_os = "linux"))]
        Err(TransportError::Unsupported)
    }
}

/// Receives IPv4 Ethernet frames from one interface into a slot ring.
pub struct PacketRx {
    #[cfg(target_os = "linux")]
    fd: std::os::fd::OwnedFd,
    ring: SlotRing,
    scratch: Vec<u8>,
}

impl PacketRx {
    /// Binds a raw socket to `iface`.
    #[cfg(target_os = "linux")]
    pub fn open(iface: &str, ring: RingConfig) -> Result<Self, TransportError> {
        let (fd, _) = sys::open(iface, true)?;
        Ok(Self { fd, ring: SlotRing::new(ring)?, scratch: vec![0; 65536] })
    }

    /// Binds a raw socket to `iface`.
    #[cfg(not(target_os = "linux"))]
    pub fn open(_iface: &str, _ring: RingConfig) -> Result<Self, TransportError> {
        Err(TransportError::Unsupported)
    }

    pub(crate) fn ring(&self) -> &SlotRing {
        &self.ring
    }

    #[cfg(target_os = "linux")]
    pub(crate) fn poll(&mut self) -> io::Result<Poll> {
        let would_block = |e: &io::Error| e.kind() == io::ErrorKind::WouldBlock;
        let Some(mut slot) = self.ring.take_free() else {
            return match sys::recv(&self.fd, &mut self.scratch) {
                Ok(Some(_)) => Ok(Poll::Exhausted),
                Ok(None) => Ok(Poll::Empty),
                Err(e) if would_block(&e) => Ok(Poll::Empty),
                Err(e) => Err(e),
            };
        };
        match sys::recv(&self.fd, self.ring.slot_mut(&mut slot)) {
            Ok(Some(n)) => Ok(Poll::Frame(WireFrame { slot, len: n as u32, port: 0 })),
            Ok(None) => {
                self.ring.release(slot);
                Ok(Poll::Empty)
            }
            Err(e) => {
                self.ring.release(slot);
                if would_block(&e) {
                    Ok(Poll::Empty)
                } else {
                    Err(e)
                }
            }
        }
    }

    #[cfg(not(target_os = "linux"))]
    pub(crate) fn poll(&mut self) -> io::Result<Poll> {
        let _ = &self.scratch;
        Ok(Poll::Empty)
    }
}
