//! The attacker: offline profiling, bait calibration, and the online
//! free-bait-hammer loop.

mod calibrate;
mod flipmap;
mod plan;
mod session;

pub use calibrate::{calibrate_bait_count, Calibration, SENTINEL};
pub use flipmap::{frame_row, profile_offline, FlipEntry, FlipMap};
pub use plan::{aggressor_offsets, plan_attack, useful_cells, AttackPlan, PlanParams};
pub use session::{
    execute_attack, relaunch_loop, summarize, AttackSummary, GeometricModel, Relaunch, Session, TrialRecord,
};

use thiserror::Error;

use crate::dram::DramError;
use crate::osmodel::{FaultClasses, OsError};
use crate::victims::VictimError;

/// Number of distinct 16-byte aligned slots a stack variable can occupy
/// inside one page.
pub const SLOTS_PER_PAGE: u64 = 256;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("profiling region holds only {rows} rows")]
    RegionTooSmall { rows: usize },
    #[error("flip map line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no usable flippy page: {0}")]
    NoFlippyPage(String),
    #[error("frame {0} is not free")]
    FrameUnavailable(u64),
    #[error("calibration never located the target")]
    CalibrationFailed,
    #[error("relaunch budget of {budget} trials exhausted")]
    BudgetExhausted { budget: u32 },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error(transparent)]
    Os(#[from] OsError),
    #[error(transparent)]
    Victim(#[from] VictimError),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FaultEstimate {
    pub n_flippy: usize,
    /// Mean number of flips landing inside the target, over all slots.
    pub n_avg: f64,
    /// Chance, in percent, that a random target hits a flippy bit.
    pub probability_pct: f64,
}

/// Estimate the chance that a `width_bytes` target whose address has low
/// nibble `nibble` lands on a flippy bit when the victim may get any of
/// `n_pages * fraction` pages.
///
/// ```text
/// p = (1 - (1 - n_avg / n_flippy) ^ (n_pages * fraction)) * 100
/// ```
pub fn estimate_fault_probability(
    map: &FlipMap,
    n_pages: u64,
    fraction: f64,
    nibble: u64,
    width_bytes: u64,
) -> FaultEstimate {
    let n_flippy = map.flippy_pages();
    let hits = map
        .entries
        .iter()
        .filter(|e| (e.byte_offset() % 16).wrapping_sub(nibble % 16) < width_bytes)
        .count();
    let n_avg = hits as f64 / SLOTS_PER_PAGE as f64;
    let probability_pct = fault_probability(n_avg, n_flippy as f64, n_pages as f64 * fraction);
    FaultEstimate { n_flippy, n_avg, probability_pct }
}

/// `(1 - (1 - n_avg / n_flippy) ^ pages) * 100`, and 0 when nothing flips.
pub fn fault_probability(n_avg: f64, n_flippy: f64, pages: f64) -> f64 {
    if n_flippy <= 0.0 {
        return 0.0;
    }
    let per_page = (n_avg / n_flippy).clamp(0.0, 1.0);
    (1.0 - (1.0 - per_page).powf(pages)) * 100.0
}

/// In-page offsets consistent with an observed minor-fault count.
///
/// Without ASLR the offset is the static one. Otherwise the fault class
/// narrows the offset to the inside or outside of the class range, and the
/// fixed low nibble keeps one offset per 16 bytes.
pub fn infer_offset_from_faults(
    fault_count: u64,
    classes: &FaultClasses,
    nibble: u64,
    aslr: bool,
    static_offset: u64,
    page_size: u64,
) -> Vec<u64> {
    if !aslr {
        return vec![static_offset];
    }
    let inside = |o: u64| (classes.range.0..=classes.range.1).contains(&o);
    let all = (0..page_size / 16).map(|k| k * 16 + nibble % 16);
    if fault_count == classes.inside {
        all.filter(|&o| inside(o)).collect()
    } else if fault_count == classes.outside {
        all.filter(|&o| !inside(o)).collect()
    } else {
        all.collect()
    }
}

#[cfg(test)]
mod tests;
