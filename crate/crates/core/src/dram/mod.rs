//! DRAM device model: geometry, row buffers, refresh windows, TRR and
//! disturbance-induced bit flips.
//!
//! Time is simulated in nanoseconds. Activations accumulate per row inside
//! the current refresh window; when the window closes, every row whose
//! neighbours were activated at least `hammer_threshold` times (and that TRR
//! did not refresh) is a victim, and each of its profiled cells flips with its
//! profiled probability, provided the stored bit allows the flip direction.
//! One hammer round occupies exactly one refresh window.

mod geometry;
mod profile;
mod trr;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{AddressMapping, BankInterleaved, CellAddress, DramGeometry, DramLocation, XorBanked};
pub use profile::{FlipDirection, FlipProfile, ProfileParams, ProfiledCell};
pub use trr::{TrrConfig, TrrState};

use crate::rng::SimRng;

#[derive(Debug, Error, PartialEq)]
pub enum DramError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("address {addr:#x} outside capacity {capacity:#x}")]
    OutOfRange { addr: u64, capacity: u64 },
    #[error("invalid hammer pattern: {0}")]
    Pattern(String),
    #[error("invalid flip profile: {0}")]
    Profile(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramConfig {
    /// Adjacent activations per refresh window needed to disturb a row.
    #[serde(default = "default_threshold")]
    pub hammer_threshold: u64,
    /// Also disturb rows two away from an aggressor.
    #[serde(default)]
    pub distance2: bool,
    #[serde(default = "default_fast")]
    pub fast_latency: u64,
    #[serde(default = "default_slow")]
    pub slow_latency: u64,
    #[serde(default = "default_true")]
    pub refresh_enabled: bool,
    #[serde(default)]
    pub trr: TrrConfig,
}

fn default_threshold() -> u64 {
    1_000_000
}
fn default_fast() -> u64 {
    180
}
fn default_slow() -> u64 {
    320
}
fn default_true() -> bool {
    true
}

impl Default for DramConfig {
    fn default() -> Self {
        Self {
            hammer_threshold: default_threshold(),
            distance2: false,
            fast_latency: default_fast(),
            slow_latency: default_slow(),
            refresh_enabled: true,
            trr: TrrConfig::default(),
        }
    }
}

/// One row in one bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowId {
    pub bank: u32,
    pub row: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HammerPattern {
    pub aggressors: Vec<RowId>,
    pub accesses_per_round: u64,
    pub rounds: u32,
    pub inter_round_nops: u64,
    pub fenced: bool,
}

impl HammerPattern {
    /// Pattern with the default round structure: 1M accesses per aggressor,
    /// 100 rounds separated by 100K nops, fenced.
    pub fn new(bank: u32, rows: impl IntoIterator<Item = u32>) -> Self {
        Self {
            aggressors: rows.into_iter().map(|row| RowId { bank, row }).collect(),
            accesses_per_round: 1_000_000,
            rounds: 100,
            inter_round_nops: 100_000,
            fenced: true,
        }
    }

    pub fn with_rounds(mut self, rounds: u32) -> Self {
        self.rounds = rounds;
        self
    }

    pub fn with_accesses(mut self, accesses: u64) -> Self {
        self.accesses_per_round = accesses;
        self
    }

    pub fn bank(&self) -> Option<u32> {
        self.aggressors.first().map(|r| r.bank)
    }

    pub fn validate(&self, g: &DramGeometry) -> Result<(), DramError> {
        let Some(bank) = self.bank() else {
            return Err(DramError::Pattern("no aggressor rows".into()));
        };
        if self.aggressors.iter().any(|r| r.bank != bank) {
            return Err(DramError::Pattern("aggressors span multiple banks".into()));
        }
        if bank >= g.banks || self.aggressors.iter().any(|r| r.row >= g.rows_per_bank) {
            return Err(DramError::Pattern("aggressor outside geometry".into()));
        }
        let distinct: BTreeSet<u32> = self.aggressors.iter().map(|r| r.row).collect();
        if distinct.len() != self.aggressors.len() {
            return Err(DramError::Pattern("aggressor rows must be distinct".into()));
        }
        Ok(())
    }
}

/// A single bit flip observed in the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipEvent {
    pub cell: CellAddress,
    /// Physical byte address holding the cell.
    pub phys_addr: u64,
    pub bit_in_byte: u8,
    pub before: bool,
    pub after: bool,
    /// Simulated time (ns) of the window close that produced the flip.
    pub time_ns: u64,
}

impl FlipEvent {
    pub fn frame(&self, page_size: u32) -> u64 {
        self.phys_addr / u64::from(page_size)
    }

    /// Bit offset inside its page.
    pub fn page_bit(&self, page_size: u32) -> u32 {
        ((self.phys_addr % u64::from(page_size)) * 8) as u32 + u32::from(self.bit_in_byte)
    }
}

#[derive(Debug)]
pub struct Dram {
    geometry: DramGeometry,
    mapping: Box<dyn AddressMapping>,
    config: DramConfig,
    profile: FlipProfile,
    trr: TrrState,
    open_rows: Vec<Option<u32>>,
    window: BTreeMap<RowId, u64>,
    window_start_ns: u64,
    now_ns: u64,
    pages: HashMap<u64, Box<[u8]>>,
    rng: SimRng,
    log: Vec<FlipEvent>,
}

impl Dram {
    pub fn new(geometry: DramGeometry, config: DramConfig, profile: FlipProfile, rng: SimRng) -> Result<Self, DramError> {
        Self::with_mapping(geometry, Box::new(BankInterleaved), config, profile, rng)
    }

    pub fn with_mapping(
        geometry: DramGeometry,
        mapping: Box<dyn AddressMapping>,
        config: DramConfig,
        profile: FlipProfile,
        rng: SimRng,
    ) -> Result<Self, DramError> {
        geometry.validate()?;
        profile.validate(&geometry)?;
        Ok(Self {
            open_rows: vec![None; geometry.banks as usize],
            trr: TrrState::new(config.trr),
            geometry,
            mapping,
            config,
            profile,
            window: BTreeMap::new(),
            window_start_ns: 0,
            now_ns: 0,
            pages: HashMap::new(),
            rng,
            log: Vec::new(),
        })
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn config(&self) -> &DramConfig {
        &self.config
    }

    pub fn profile(&self) -> &FlipProfile {
        &self.profile
    }

    pub fn trr(&self) -> &TrrState {
        &self.trr
    }

    pub fn mapping(&self) -> &dyn AddressMapping {
        self.mapping.as_ref()
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    /// Advance the clock without activity, running refreshes on the way.
    pub fn advance(&mut self, ns: u64) {
        let t = self.now_ns + ns;
        self.refresh_tick(t);
    }

    pub fn map_phys_to_dram(&self, phys: u64) -> Result<DramLocation, DramError> {
        self.check_addr(phys)?;
        Ok(self.mapping.to_dram(&self.geometry, phys))
    }

    pub fn dram_to_phys(&self, loc: DramLocation) -> u64 {
        self.mapping.to_phys(&self.geometry, loc)
    }

    /// Physical byte address and bit-in-byte of a cell.
    pub fn cell_phys(&self, cell: CellAddress) -> (u64, u8) {
        let loc = DramLocation { bank: cell.bank, row: cell.row, offset: cell.bit / 8 };
        (self.dram_to_phys(loc), (cell.bit % 8) as u8)
    }

    pub fn cell_at(&self, phys: u64, bit_in_byte: u8) -> Result<CellAddress, DramError> {
        let loc = self.map_phys_to_dram(phys)?;
        Ok(CellAddress { bank: loc.bank, row: loc.row, bit: loc.offset * 8 + u32::from(bit_in_byte) })
    }

    fn check_addr(&self, phys: u64) -> Result<(), DramError> {
        let capacity = self.geometry.capacity();
        if phys >= capacity {
            return Err(DramError::OutOfRange { addr: phys, capacity });
        }
        Ok(())
    }

    /// Open `row` in `bank` at time `now`; returns the access latency in
    /// cycles. A different open row in the same bank is a row-buffer conflict.
    pub fn activate(&mut self, bank: u32, row: u32, now: u64) -> u64 {
        self.refresh_tick(now);
        let slot = &mut self.open_rows[bank as usize];
        let latency = match *slot {
            Some(open) if open != row => self.config.slow_latency,
            _ => self.config.fast_latency,
        };
        let hit = *slot == Some(row);
        *slot = Some(row);
        if !hit {
            self.record_activations(RowId { bank, row }, 1);
        }
        latency
    }

    /// Latency of `b` when alternating accesses `a, b, a, b`; slow only if
    /// the two share a bank but not a row.
    pub fn pair_latency(&mut self, a: u64, b: u64) -> Result<u64, DramError> {
        let la = self.map_phys_to_dram(a)?;
        let lb = self.map_phys_to_dram(b)?;
        let now = self.now_ns;
        self.activate(la.bank, la.row, now);
        self.activate(lb.bank, lb.row, now);
        self.activate(la.bank, la.row, now);
        Ok(self.activate(lb.bank, lb.row, now))
    }

    /// `count` back-to-back activations of one row (alternating with a
    /// partner row so that each one really opens the row).
    pub fn activate_burst(&mut self, bank: u32, row: u32, count: u64, now: u64) {
        self.refresh_tick(now);
        self.open_rows[bank as usize] = Some(row);
        self.record_activations(RowId { bank, row }, count);
    }

    fn record_activations(&mut self, id: RowId, count: u64) {
        let total = {
            let c = self.window.entry(id).or_insert(0);
            *c += count;
            *c
        };
        let rng = &mut self.rng;
        self.trr.observe(id.bank, id.row, total, |n| rng.random_range(0..n));
    }

    pub fn window_activations(&self, bank: u32, row: u32) -> u64 {
        self.window.get(&RowId { bank, row }).copied().unwrap_or(0)
    }

    /// Run every refresh that is due by `now`.
    pub fn refresh_tick(&mut self, now: u64) {
        if now > self.now_ns {
            self.now_ns = now;
        }
        if !self.config.refresh_enabled {
            return;
        }
        let period = self.geometry.refresh_period_ns();
        while self.now_ns >= self.window_start_ns + period {
            self.window_start_ns += period;
            if !self.window.is_empty() || self.trr.tracked_len() > 0 {
                self.close_window_at(self.window_start_ns);
            } else {
                // skip idle windows in one step
                let idle = (self.now_ns - self.window_start_ns) / period;
                self.window_start_ns += idle * period;
            }
        }
    }

    /// End the current refresh window now: apply disturbance flips, then
    /// reset activation counters and the TRR sampler.
    pub fn close_window(&mut self) -> Vec<FlipEvent> {
        self.close_window_at(self.now_ns)
    }

    fn close_window_at(&mut self, time_ns: u64) -> Vec<FlipEvent> {
        let window = std::mem::take(&mut self.window);
        let mut disturbance: BTreeMap<RowId, u64> = BTreeMap::new();
        let reach: &[i64] = if self.config.distance2 { &[-2, -1, 1, 2] } else { &[-1, 1] };
        for (&id, &count) in &window {
            for d in reach {
                let r = i64::from(id.row) + d;
                if r >= 0 && r < i64::from(self.geometry.rows_per_bank) {
                    *disturbance.entry(RowId { bank: id.bank, row: r as u32 }).or_insert(0) += count;
                }
            }
        }
        let mut refreshed: BTreeSet<RowId> = window.keys().copied().collect();
        for (bank, row) in self.trr.refresh_targets() {
            for d in reach {
                let r = i64::from(row) + d;
                if r >= 0 {
                    refreshed.insert(RowId { bank, row: r as u32 });
                }
            }
        }
        self.trr.clear();

        let mut events = Vec::new();
        for (id, total) in disturbance {
            if total < self.config.hammer_threshold || refreshed.contains(&id) {
                continue;
            }
            let cells: Vec<ProfiledCell> = self.profile.row(id.bank, id.row).to_vec();
            for c in cells {
                let cell = CellAddress { bank: id.bank, row: id.row, bit: c.bit };
                let (phys, bit) = self.cell_phys(cell);
                let current = self.read_bit(phys, bit);
                if current != c.direction.required_bit() {
                    continue;
                }
                if !self.rng.random_bool(c.prob) {
                    continue;
                }
                self.write_bit(phys, bit, !current);
                let ev = FlipEvent { cell, phys_addr: phys, bit_in_byte: bit, before: current, after: !current, time_ns };
                events.push(ev);
            }
        }
        self.log.extend_from_slice(&events);
        events
    }

    /// Run a hammer pattern starting at the current time.
    pub fn hammer(&mut self, pattern: &HammerPattern) -> Result<Vec<FlipEvent>, DramError> {
        pattern.validate(&self.geometry)?;
        let period = self.geometry.refresh_period_ns();
        // start on a window boundary
        let aligned = self.window_start_ns + period;
        if self.config.refresh_enabled && self.now_ns > self.window_start_ns {
            self.refresh_tick(aligned);
        }
        let mut order = pattern.aggressors.clone();
        let mut events = Vec::new();
        for _ in 0..pattern.rounds {
            // the order in which the sampler sees aggressors varies per round
            order.shuffle(&mut self.rng);
            let now = self.now_ns;
            for id in &order {
                self.activate_burst(id.bank, id.row, pattern.accesses_per_round, now);
            }
            if self.config.refresh_enabled {
                self.now_ns = self.window_start_ns + period;
                self.window_start_ns = self.now_ns;
                events.extend(self.close_window_at(self.now_ns));
            } else {
                self.now_ns += period;
            }
        }
        if !self.config.refresh_enabled {
            events.extend(self.close_window());
        }
        Ok(events)
    }

    pub fn flip_log(&self) -> &[FlipEvent] {
        &self.log
    }

    pub fn take_flip_log(&mut self) -> Vec<FlipEvent> {
        std::mem::take(&mut self.log)
    }

    // ---- memory contents ----

    pub fn read_page(&self, page: u64) -> Result<Vec<u8>, DramError> {
        self.check_page(page)?;
        let size = self.geometry.page_size_bytes as usize;
        Ok(self.pages.get(&page).map(|p| p.to_vec()).unwrap_or_else(|| vec![0; size]))
    }

    pub fn write_page(&mut self, page: u64, bytes: &[u8]) -> Result<(), DramError> {
        self.check_page(page)?;
        let size = self.geometry.page_size_bytes as usize;
        if bytes.len() != size {
            return Err(DramError::OutOfRange { addr: bytes.len() as u64, capacity: size as u64 });
        }
        if bytes.iter().all(|b| *b == 0) {
            self.pages.remove(&page);
        } else {
            self.pages.insert(page, bytes.into());
        }
        Ok(())
    }

    pub fn zero_page(&mut self, page: u64) {
        self.pages.remove(&page);
    }

    pub fn fill_page(&mut self, page: u64, byte: u8) -> Result<(), DramError> {
        self.check_page(page)?;
        if byte == 0 {
            self.pages.remove(&page);
        } else {
            let size = self.geometry.page_size_bytes as usize;
            self.pages.insert(page, vec![byte; size].into_boxed_slice());
        }
        Ok(())
    }

    /// Fill every page of a DRAM row with `byte`.
    pub fn fill_row(&mut self, bank: u32, row: u32, byte: u8) -> Result<(), DramError> {
        let page_size = u64::from(self.geometry.page_size_bytes);
        for i in 0..self.geometry.pages_per_row() {
            let phys = self.dram_to_phys(DramLocation { bank, row, offset: i * self.geometry.page_size_bytes });
            self.fill_page(phys / page_size, byte)?;
        }
        Ok(())
    }

    pub fn read_bytes(&self, phys: u64, out: &mut [u8]) -> Result<(), DramError> {
        for (i, b) in out.iter_mut().enumerate() {
            let a = phys + i as u64;
            self.check_addr(a)?;
            *b = self.byte(a);
        }
        Ok(())
    }

    pub fn write_bytes(&mut self, phys: u64, data: &[u8]) -> Result<(), DramError> {
        for (i, b) in data.iter().enumerate() {
            let a = phys + i as u64;
            self.check_addr(a)?;
            self.set_byte(a, *b);
        }
        Ok(())
    }

    fn check_page(&self, page: u64) -> Result<(), DramError> {
        if page >= self.geometry.total_pages() {
            return Err(DramError::OutOfRange {
                addr: page * u64::from(self.geometry.page_size_bytes),
                capacity: self.geometry.capacity(),
            });
        }
        Ok(())
    }

    fn byte(&self, phys: u64) -> u8 {
        let size = u64::from(self.geometry.page_size_bytes);
        self.pages.get(&(phys / size)).map(|p| p[(phys % size) as usize]).unwrap_or(0)
    }

    fn set_byte(&mut self, phys: u64, value: u8) {
        let size = u64::from(self.geometry.page_size_bytes);
        let page = phys / size;
        if value == 0 && !self.pages.contains_key(&page) {
            return;
        }
        let p = self.pages.entry(page).or_insert_with(|| vec![0; size as usize].into_boxed_slice());
        p[(phys % size) as usize] = value;
    }

    pub fn read_bit(&self, phys: u64, bit: u8) -> bool {
        self.byte(phys) >> bit & 1 == 1
    }

    fn write_bit(&mut self, phys: u64, bit: u8, value: bool) {
        let b = self.byte(phys);
        let nb = if value { b | (1 << bit) } else { b & !(1 << bit) };
        self.set_byte(phys, nb);
    }
}
