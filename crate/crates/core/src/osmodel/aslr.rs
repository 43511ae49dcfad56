//! Stack placement: the kernel's random stack shift and the physical
//! address split.

use serde::{Deserialize, Serialize};

/// Random stack shift range; the kernel draws `rand % 8192`.
pub const STACK_RANDOM_RANGE: u64 = 8192;

/// `(sp - rand) & ~0xf`.
pub fn align_stack(sp: u64, rand: u64) -> u64 {
    sp.wrapping_sub(rand) & !0xf
}

/// How a physical address splits into frame number and page offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddrLayout {
    pub phys_bits: u32,
    pub page_bits: u32,
    pub frame_bits: u32,
}

impl AddrLayout {
    pub fn for_memory(bytes: u64, page_size: u64) -> Self {
        let phys_bits = 64 - bytes.saturating_sub(1).leading_zeros();
        let page_bits = page_size.trailing_zeros();
        Self {
            phys_bits,
            page_bits,
            frame_bits: phys_bits.saturating_sub(page_bits),
        }
    }

    pub fn split(&self, phys: u64) -> (u64, u64) {
        (phys >> self.page_bits, phys & ((1 << self.page_bits) - 1))
    }
}

/// Minor-fault classes observed at process start, keyed by the page offset
/// of the target variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultClasses {
    /// Inclusive offset range producing `inside`.
    pub range: (u64, u64),
    pub inside: u64,
    pub outside: u64,
}

impl Default for FaultClasses {
    fn default() -> Self {
        Self {
            range: (200, 800),
            inside: 275,
            outside: 286,
        }
    }
}

impl FaultClasses {
    pub fn count_for(&self, page_offset: u64) -> u64 {
        if (self.range.0..=self.range.1).contains(&page_offset) {
            self.inside
        } else {
            self.outside
        }
    }
}

/// Applies a random stack shift to addresses of the unrandomized layout.
///
/// With `page_coupling` off the shift only moves addresses within their
/// page, so a variable always lives in the same stack page and only its
/// in-page offset is random. With it on, the shift can carry the variable
/// into a lower page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackShift {
    pub shift: u64,
    pub page_coupling: bool,
    pub page_size: u64,
}

impl StackShift {
    pub fn none(page_size: u64) -> Self {
        Self {
            shift: 0,
            page_coupling: false,
            page_size,
        }
    }

    /// Shift induced by `rand` on an initial stack pointer `sp0`.
    pub fn from_rand(sp0: u64, rand: u64, page_coupling: bool, page_size: u64) -> Self {
        Self {
            shift: (sp0 & !0xf) - align_stack(sp0, rand),
            page_coupling,
            page_size,
        }
    }

    pub fn place(&self, unrandomized: u64) -> u64 {
        let moved = unrandomized - self.shift;
        if self.page_coupling {
            moved
        } else {
            let mask = self.page_size - 1;
            (unrandomized & !mask) | (moved & mask)
        }
    }
}
