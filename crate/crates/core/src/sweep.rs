//! Packet sizes probed by the size sweep.

use alloc::vec::Vec;

/// Base sizes: multiples of 64 up to 512, then the powers of two 1024 and 2048.
pub fn base_sizes() -> Vec<usize> {
    (1..=8).map(|k| k * 64).chain([1024, 2048]).collect()
}

/// Base sizes and each base size plus one, ascending, split into those that
/// fit `capacity` and those that do not.
pub fn sweep_sizes(capacity: usize) -> (Vec<usize>, Vec<usize>) {
    let mut all: Vec<usize> = base_sizes().into_iter().flat_map(|s| [s, s + 1]).collect();
    all.sort_unstable();
    all.into_iter().partition(|&s| s <= capacity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_list() {
        let (sizes, skipped) = sweep_sizes(2048);
        assert_eq!(
            sizes,
            [64, 65, 128, 129, 192, 193, 256, 257, 320, 321, 384, 385, 448, 449, 512, 513, 1024, 1025, 2048]
        );
        assert_eq!(skipped, [2049]);
    }

    #[test]
    fn raw_capacity_skips_more() {
        let (sizes, skipped) = sweep_sizes(2006);
        assert_eq!(sizes.last(), Some(&1025));
        assert_eq!(skipped, [2048, 2049]);
    }
}
