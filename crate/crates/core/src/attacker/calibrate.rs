//! Learning how many bait pages the victim consumes before the target.

use std::collections::BTreeMap;

use serde::Serialize;

use super::AttackError;
use crate::osmodel::Os;
use crate::victims::{self, Check, GadgetProgram, Storage, Timing, WindowInfo};

/// Value planted in register targets so the spill can be found by a scan.
pub const SENTINEL: u64 = 0xDEAD_BEEF;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Calibration {
    /// Target allocation index -> number of spawns.
    pub histogram: BTreeMap<usize, u32>,
    /// Target in-page offset low nibble -> number of spawns.
    pub nibbles: BTreeMap<u64, u32>,
    pub misses: u32,
}

impl Calibration {
    fn mode_of<K: Copy + Ord>(h: &BTreeMap<K, u32>) -> Option<K> {
        // ties go to the smallest key
        h.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, _)| *k)
    }

    pub fn bait_count(&self) -> Option<usize> {
        Self::mode_of(&self.histogram)
    }

    pub fn nibble(&self) -> Option<u64> {
        Self::mode_of(&self.nibbles)
    }

    pub fn spawns(&self) -> u32 {
        self.histogram.values().sum::<u32>() + self.misses
    }

    /// Share of spawns whose target index equals the mode.
    pub fn mode_rate(&self) -> f64 {
        match self.bait_count() {
            Some(m) if self.spawns() > 0 => f64::from(self.histogram[&m]) / f64::from(self.spawns()),
            _ => 0.0,
        }
    }
}

fn sentinel_program(program: &GadgetProgram) -> GadgetProgram {
    let mut p = program.clone();
    let v = &mut p.variables[0];
    let s = SENTINEL & v.mask();
    v.init_value = s;
    v.check = Check::Equals(s ^ 1);
    p
}

fn scan_for(os: &Os, pid: u32, needle: u32) -> Result<Option<u64>, AttackError> {
    let ps = os.page_size();
    let vpages: Vec<u64> = os.process(pid)?.page_table.keys().copied().collect();
    let mut buf = vec![0u8; ps as usize];
    for vp in vpages {
        os.read_virt(pid, vp * ps, &mut buf)?;
        for (i, w) in buf.chunks_exact(4).enumerate() {
            if u32::from_le_bytes([w[0], w[1], w[2], w[3]]) == needle {
                return Ok(Some(vp * ps + 4 * i as u64));
            }
        }
    }
    Ok(None)
}

/// Release `release` frames, spawn the victim, and record where its target
/// landed in the release order. Repeated `spawns` times. Stack targets are
/// found by translating their address; register targets by scanning the
/// victim's memory for a planted sentinel.
pub fn calibrate_bait_count(
    os: &mut Os,
    program: &GadgetProgram,
    spawns: u32,
    release: usize,
) -> Result<Calibration, AttackError> {
    let by_sentinel = !matches!(program.target().storage, Storage::Stack { .. });
    let program = if by_sentinel { sentinel_program(program) } else { program.clone() };
    let ps = os.page_size();
    let mut cal = Calibration::default();
    for _ in 0..spawns {
        let mut released = Vec::with_capacity(release);
        for _ in 0..release {
            released.push(os.alloc_frame()?);
        }
        for &f in &released {
            os.free_frame(f)?;
        }
        let mut found: Option<u64> = None;
        let mut failure: Option<AttackError> = None;
        victims::run(os, &program, false, Timing::InWindow, |os, w: WindowInfo| {
            let vaddr = if by_sentinel {
                match scan_for(os, w.pid, SENTINEL as u32) {
                    Ok(v) => v,
                    Err(e) => {
                        failure = Some(e);
                        None
                    }
                }
            } else {
                Some(w.target_vaddr)
            };
            if let Some(va) = vaddr {
                found = Some(os.translate(w.pid, va)?);
            }
            Ok(())
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        let Some(phys) = found else {
            cal.misses += 1;
            continue;
        };
        *cal.nibbles.entry(phys % 16).or_insert(0) += 1;
        match released.iter().position(|&f| f == phys / ps) {
            Some(pos) => *cal.histogram.entry(release - 1 - pos).or_insert(0) += 1,
            None => cal.misses += 1,
        }
    }
    Ok(cal)
}
