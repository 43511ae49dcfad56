//! In-DRAM Target Row Refresh sampler.
//!
//! Each bank tracks at most `sampler_capacity` aggressor candidates per
//! refresh window, keeping the most frequently activated rows. When the
//! window closes, neighbours of every tracked row whose count reached the
//! MAC are refreshed, wiping their accumulated disturbance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrrConfig {
    pub enabled: bool,
    #[serde(default = "default_capacity")]
    pub sampler_capacity: usize,
    /// Maximum activation count; tracked rows at or above it trigger a
    /// neighbour refresh.
    #[serde(default = "default_mac")]
    pub mac: u64,
}

fn default_capacity() -> usize {
    4
}
fn default_mac() -> u64 {
    50_000
}

impl Default for TrrConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            sampler_capacity: default_capacity(),
            mac: default_mac(),
        }
    }
}

impl TrrConfig {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrrState {
    pub config: TrrConfig,
    tracked: BTreeMap<u32, Vec<(u32, u64)>>,
}

impl TrrState {
    pub fn new(config: TrrConfig) -> Self {
        Self {
            config,
            tracked: BTreeMap::new(),
        }
    }

    /// Report that `row` in `bank` now has `count` activations in the
    /// current window. `tiebreak` picks a victim slot when several tracked
    /// rows share the minimum count.
    pub fn observe(&mut self, bank: u32, row: u32, count: u64, tiebreak: impl FnOnce(usize) -> usize) {
        if !self.config.enabled || self.config.sampler_capacity == 0 {
            return;
        }
        let slots = self.tracked.entry(bank).or_default();
        if let Some(slot) = slots.iter_mut().find(|(r, _)| *r == row) {
            slot.1 = count;
            return;
        }
        if slots.len() < self.config.sampler_capacity {
            slots.push((row, count));
            return;
        }
        let min = slots.iter().map(|(_, c)| *c).min().unwrap_or(0);
        if count > min {
            let candidates: Vec<usize> = slots
                .iter()
                .enumerate()
                .filter(|(_, (_, c))| *c == min)
                .map(|(i, _)| i)
                .collect();
            let pick = candidates[tiebreak(candidates.len()) % candidates.len()];
            slots[pick] = (row, count);
        }
    }

    pub fn tracked(&self, bank: u32) -> &[(u32, u64)] {
        self.tracked.get(&bank).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tracked_len(&self) -> usize {
        self.tracked.values().map(Vec::len).sum()
    }

    /// Rows whose neighbours get refreshed at the end of this window.
    pub fn refresh_targets(&self) -> Vec<(u32, u32)> {
        self.tracked
            .iter()
            .flat_map(|(&bank, slots)| {
                slots
                    .iter()
                    .filter(|(_, c)| *c >= self.config.mac)
                    .map(move |(row, _)| (bank, *row))
            })
            .collect()
    }

    pub fn clear(&mut self) {
        self.tracked.clear();
    }
}
