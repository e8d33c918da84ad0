//! Thread-to-core pinning.

use std::io;

use drop_core::topology::{CoreMap, Position};

/// Where the threads of one receiver run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pinning {
    /// CCX hosting the receiver.
    pub ccx: usize,
    /// OS numbering of the CCX positions.
    pub core_map: CoreMap,
}

impl Pinning {
    /// Pins the calling thread to `position`. Failures are logged and
    /// ignored so a run on a smaller host still proceeds unpinned.
    pub fn pin_current(&self, position: Position) -> Option<usize> {
        let core = match self.core_map.logical_core(self.ccx, position) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("not pinning {position}: {e}");
                return None;
            }
        };
        match pin_current_thread(core) {
            Ok(()) => Some(core),
            Err(e) => {
                log::warn!("pinning {position} to core {core} failed: {e}");
                None
            }
        }
    }
}

/// Restricts the calling thread to logical core `core`.
#[cfg(target_os = "linux")]
pub fn pin_current_thread(core: usize) -> io::Result<()> {
    if core >= libc::CPU_SETSIZE as usize {
        return Err(io::Error::from(io::ErrorKind::InvalidInput));
    }
    // SAFETY: cpu_set_t is plain data; CPU_SET stays within CPU_SETSIZE.
    let rc = unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(core, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set)
    };
    if rc == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

/// Logical cores the calling thread may run on.
#[cfg(target_os = "linux")]
pub fn current_affinity() -> io::Result<Vec<usize>> {
    // SAFETY: as above; the kernel fills the set.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok((0..libc::CPU_SETSIZE as usize).filter(|&c| libc::CPU_ISSET(c, &set)).collect())
    }
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current_thread(_core: usize) -> io::Result<()> {
    Err(io::Error::from(io::ErrorKind::Unsupported))
}

#[cfg(not(target_os = "linux"))]
pub fn current_affinity() -> io::Result<Vec<usize>> {
    Err(io::Error::from(io::ErrorKind::Unsupported))
}

#[cfg(all(test, target_os = "linux"))]
mod tests {
    use super::*;

    #[test]
    fn pin_round_trip() {
        std::thread::spawn(|| {
            let allowed = current_affinity().unwrap();
            let core = allowed[0];
            pin_current_thread(core).unwrap();
            assert_eq!(current_affinity().unwrap(), vec![core]);
        })
        .join()
        .unwrap();
    }

    #[test]
    fn unknown_ccx_is_skipped() {
        let p = Pinning { ccx: 5, core_map: CoreMap::default() };
        std::thread::spawn(move || assert_eq!(p.pin_current(Position(1)), None)).join().unwrap();
    }
}
