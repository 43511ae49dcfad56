//! Offline profiling: sweep a double-sided pattern over a region many
//! times and count how often each cell flips.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::dram::{Dram, DramLocation, FlipDirection, HammerPattern, RowId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlipEntry {
    pub frame: u64,
    /// Bit offset inside the page.
    pub bit: u32,
    pub direction: FlipDirection,
    pub count: u32,
}

impl FlipEntry {
    pub fn byte_offset(&self) -> u64 {
        u64::from(self.bit / 8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlipMap {
    pub trials: u32,
    pub entries: Vec<FlipEntry>,
}

impl FlipMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct frames with at least one entry.
    pub fn flippy_pages(&self) -> usize {
        let mut frames: Vec<u64> = self.entries.iter().map(|e| e.frame).collect();
        frames.dedup();
        frames.len()
    }

    pub fn filter(&self, min_reproducibility: f64) -> FlipMap {
        let t = f64::from(self.trials.max(1));
        FlipMap {
            trials: self.trials,
            entries: self.entries.iter().copied().filter(|e| f64::from(e.count) / t >= min_reproducibility).collect(),
        }
    }

    /// `frame bit direction count` lines under a `# trials T` header.
    pub fn to_text(&self) -> String {
        let mut s = format!("# trials {}\n# frame bit direction count\n", self.trials);
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {} {}", e.frame, e.bit, e.direction, e.count);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, AttackError> {
        let mut map = FlipMap::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            let bad = |msg: &str| AttackError::Parse { line: i + 1, msg: msg.into() };
            if let Some(rest) = line.strip_prefix("# trials") {
                map.trials = rest.trim().parse().map_err(|_| bad("bad trial count"))?;
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let e = FlipEntry {
                frame: f[0].parse().map_err(|_| bad("bad frame"))?,
                bit: f[1].parse().map_err(|_| bad("bad bit"))?,
                direction: f[2].parse().map_err(|_| bad("bad direction"))?,
                count: f[3].parse().map_err(|_| bad("bad count"))?,
            };
            if e.count > map.trials {
                return Err(bad("count exceeds trials"));
            }
            map.entries.push(e);
        }
        map.entries.sort();
        Ok(map)
    }

    /// Per-cell flip counts as CSV, for heatmaps.
    pub fn heatmap_csv(&self) -> String {
        let mut s = String::from("frame,bit,direction,count,rate\n");
        let t = f64::from(self.trials.max(1));
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{},{:.4}", e.frame, e.bit, e.direction, e.count, f64::from(e.count) / t);
        }
        s
    }

    /// Histogram of flip counts: `hist[c]` cells flipped exactly `c` times.
    pub fn count_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.trials as usize + 1];
        for e in &self.entries {
            h[e.count as usize] += 1;
        }
        h
    }
}

/// Hammer every row of `[start, end)` (physical bytes) as the victim of an
/// `n_sided` pattern (2 = double-sided), `trials` times, once with the row
/// filled with zeros and once with ones, and count the flips observed in
/// the victim row. Aggressors falling outside the region are dropped.
/// Runs in profiling mode: the DRAM mapping is used to find rows.
pub fn profile_offline(
    dram: &mut Dram,
    region: (u64, u64),
    trials: u32,
    min_reproducibility: f64,
    n_sided: u32,
) -> Result<FlipMap, AttackError> {
    let g = *dram.geometry();
    let rs = u64::from(g.row_size_bytes);
    let (start, end) = (region.0 / rs * rs, region.1.min(g.capacity()));
    let mut rows: Vec<RowId> = Vec::new();
    let mut block = start;
    while block + rs <= end {
        let l = dram.map_phys_to_dram(block)?;
        rows.push(RowId { bank: l.bank, row: l.row });
        block += rs;
    }
    if rows.len() < 3 {
        return Err(AttackError::RegionTooSmall { rows: rows.len() });
    }
    rows.sort();
    let present: std::collections::BTreeSet<RowId> = rows.iter().copied().collect();
    let offsets = super::aggressor_offsets(n_sided.max(1));
    let mut counts: BTreeMap<(u64, u32, FlipDirection), u32> = BTreeMap::new();
    for _ in 0..trials {
        for &victim in &rows {
            let neighbours: Vec<u32> = offsets
                .iter()
                .filter_map(|o| u32::try_from(i64::from(victim.row) + o).ok())
                .filter(|r| present.contains(&RowId { bank: victim.bank, row: *r }))
                .collect();
            if neighbours.is_empty() {
                continue;
            }
            for fill in [0x00u8, 0xff] {
                dram.fill_row(victim.bank, victim.row, fill)?;
                let pattern = HammerPattern::new(victim.bank, neighbours.iter().copied()).with_rounds(1);
                for ev in dram.hammer(&pattern)? {
                    if ev.cell.bank != victim.bank || ev.cell.row != victim.row {
                        continue;
                    }
                    let dir = if ev.before { FlipDirection::OneToZero } else { FlipDirection::ZeroToOne };
                    *counts.entry((ev.frame(g.page_size_bytes), ev.page_bit(g.page_size_bytes), dir)).or_insert(0) += 1;
                }
            }
        }
    }
    for r in &rows {
        dram.fill_row(r.bank, r.row, 0)?;
    }
    let map = FlipMap {
        trials,
        entries: counts
            .into_iter()
            .map(|((frame, bit, direction), count)| FlipEntry { frame, bit, direction, count })
            .collect(),
    };
    Ok(map.filter(min_reproducibility))
}

/// Row and bank of a frame, in profiling mode.
pub fn frame_row(dram: &Dram, frame: u64) -> Result<RowId, AttackError> {
    let ps = u64::from(dram.geometry().page_size_bytes);
    let DramLocation { bank, row, .. } = dram.map_phys_to_dram(frame * ps)?;
    Ok(RowId { bank, row })
}
