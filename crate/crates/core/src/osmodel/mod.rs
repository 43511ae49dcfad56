//! Operating-system model: LIFO frame allocator, process images with a
//! randomized stack, minor-fault accounting, signals and blocking windows.
//!
//! Processes live in the simulated DRAM: every stack write goes through the
//! page table to a physical frame, so hammering that frame can change what
//! the process reads back.

mod aslr;
mod freestack;
mod process;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aslr::{align_stack, AddrLayout, FaultClasses, StackShift, STACK_RANDOM_RANGE};
pub use freestack::FreeStack;
pub use process::{ProcState, Process, Reg, RegisterFile, Signal, SpawnSpec, TimelineEvent, TimelineKind};

use crate::dram::{Dram, DramError};
use crate::rng::{streams, SeedTree, SimRng};

/// Top of the user stack (page aligned).
pub const STACK_TOP: u64 = 0x7fff_ffff_f000;
const IMAGE_VPAGE: u64 = 0x400;
const FILLER_VPAGE: u64 = 0x10000;
/// uc_flags, uc_link and uc_stack precede the saved registers.
const UCONTEXT_HEADER: u64 = 40;
const RED_ZONE: u64 = 128;

#[derive(Debug, Error, PartialEq)]
pub enum OsError {
    #[error("out of memory")]
    OutOfMemory,
    #[error("frame {0} out of range")]
    BadFrame(u64),
    #[error("frame {0} is already free")]
    DoubleFree(u64),
    #[error("no process {0}")]
    NoSuchProcess(u32),
    #[error("process {0} has exited")]
    Exited(u32),
    #[error("process {pid}: address {vaddr:#x} is not mapped")]
    Unmapped { pid: u32, vaddr: u64 },
    #[error("invalid os config: {0}")]
    Config(String),
    #[error(transparent)]
    Dram(#[from] DramError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsConfig {
    #[serde(default = "default_true")]
    pub aslr: bool,
    /// Probability a spawn consumes a perturbed number of filler frames.
    #[serde(default = "default_noise")]
    pub placement_noise: f64,
    /// Largest filler perturbation, in frames.
    #[serde(default = "default_epsilon")]
    pub placement_epsilon: u32,
    /// Let the stack shift move variables across page boundaries.
    #[serde(default)]
    pub page_coupling: bool,
    #[serde(default)]
    pub faults: FaultClasses,
    /// Standard deviation, in frames, of the remapping bait estimate.
    #[serde(default = "default_remap_sd")]
    pub remap_noise_sd: f64,
}

fn default_true() -> bool {
    true
}
fn default_noise() -> f64 {
    0.7
}
fn default_epsilon() -> u32 {
    3
}
fn default_remap_sd() -> f64 {
    6.0
}

impl Default for OsConfig {
    fn default() -> Self {
        Self {
            aslr: true,
            placement_noise: default_noise(),
            placement_epsilon: default_epsilon(),
            page_coupling: false,
            faults: FaultClasses::default(),
            remap_noise_sd: default_remap_sd(),
        }
    }
}

impl OsConfig {
    pub fn validate(&self) -> Result<(), OsError> {
        if !(0.0..=1.0).contains(&self.placement_noise) {
            return Err(OsError::Config("placement_noise must be in [0, 1]".into()));
        }
        if self.placement_noise > 0.0 && self.placement_epsilon == 0 {
            return Err(OsError::Config("placement_epsilon must be > 0 when noise is on".into()));
        }
        if self.remap_noise_sd.is_nan() || self.remap_noise_sd < 0.0 {
            return Err(OsError::Config("remap_noise_sd must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Os {
    pub dram: Dram,
    config: OsConfig,
    free: FreeStack,
    procs: BTreeMap<u32, Process>,
    next_pid: u32,
    aslr_rng: SimRng,
    placement_rng: SimRng,
    noise_rng: SimRng,
}

impl Os {
    /// Boot with every frame free, in a seed-dependent order.
    pub fn boot(dram: Dram, config: OsConfig, seeds: &SeedTree) -> Result<Self, OsError> {
        config.validate()?;
        let total = dram.geometry().total_pages();
        let mut order: Vec<u64> = (0..total).collect();
        order.shuffle(&mut seeds.stream(streams::BOOT));
        let mut free = FreeStack::new(total);
        for f in order {
            free.push(f)?;
        }
        Ok(Self {
            dram,
            config,
            free,
            procs: BTreeMap::new(),
            next_pid: 100,
            aslr_rng: seeds.stream(streams::ASLR),
            placement_rng: seeds.stream(streams::PLACEMENT),
            noise_rng: seeds.stream(streams::NOISE),
        })
    }

    pub fn config(&self) -> &OsConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut OsConfig {
        &mut self.config
    }

    pub fn page_size(&self) -> u64 {
        u64::from(self.dram.geometry().page_size_bytes)
    }

    pub fn layout(&self) -> AddrLayout {
        AddrLayout::for_memory(self.dram.geometry().capacity(), self.page_size())
    }

    pub fn free_list(&self) -> &FreeStack {
        &self.free
    }

    pub fn now_ns(&self) -> u64 {
        self.dram.now_ns()
    }

    /// Pop a frame and zero it.
    pub fn alloc_frame(&mut self) -> Result<u64, OsError> {
        let f = self.free.pop().ok_or(OsError::OutOfMemory)?;
        self.dram.zero_page(f);
        Ok(f)
    }

    pub fn free_frame(&mut self, frame: u64) -> Result<(), OsError> {
        self.free.push(frame)
    }

    /// Pull a specific frame off the free list, as a targeted remap would.
    pub fn take_frame(&mut self, frame: u64) -> bool {
        self.free.take(frame)
    }

    pub fn process(&self, pid: u32) -> Result<&Process, OsError> {
        self.procs.get(&pid).ok_or(OsError::NoSuchProcess(pid))
    }

    fn live_mut(&mut self, pid: u32) -> Result<&mut Process, OsError> {
        let p = self.procs.get_mut(&pid).ok_or(OsError::NoSuchProcess(pid))?;
        if p.state == ProcState::Exited {
            return Err(OsError::Exited(pid));
        }
        Ok(p)
    }

    /// Depth below the aligned initial stack pointer of the signal frame.
    pub fn sigframe_depth(spec: &SpawnSpec) -> u64 {
        (spec.frame_bytes + RED_ZONE + UCONTEXT_HEADER + 8 * 16 + 15) & !0xf
    }

    /// Stack depth of `reg`'s slot inside the signal frame.
    pub fn sigframe_slot_depth(spec: &SpawnSpec, reg: Reg) -> u64 {
        Self::sigframe_depth(spec) - UCONTEXT_HEADER - 8 * reg.sigcontext_slot() as u64
    }

    /// Number of filler frames the next spawn would take, after noise.
    fn filler_count(&mut self, base: u32) -> u32 {
        let noise = self.config.placement_noise;
        if noise <= 0.0 || !self.placement_rng.random_bool(noise) {
            return base;
        }
        let eps = self.config.placement_epsilon as i64;
        let mut d = self.placement_rng.random_range(-eps..eps);
        if d >= 0 {
            d += 1;
        }
        (i64::from(base) + d).max(0) as u32
    }

    pub fn spawn(&mut self, spec: &SpawnSpec, target_depth: u64) -> Result<u32, OsError> {
        let ps = self.page_size();
        let sp0 = STACK_TOP - spec.args_bytes;
        let deepest = ((sp0 & !0xf) - Self::sigframe_depth(spec).max(target_depth + 8))
            .saturating_sub(if self.config.page_coupling { STACK_RANDOM_RANGE + 16 } else { 0 });
        let stack_pages = ((STACK_TOP - (deepest & !(ps - 1))) / ps).max(u64::from(spec.stack_pages));
        let filler = self.filler_count(spec.filler_frames);
        let needed = u64::from(spec.image_frames) + u64::from(filler) + stack_pages;
        if (self.free.len() as u64) < needed {
            return Err(OsError::OutOfMemory);
        }

        let shift = if self.config.aslr {
            let r = self.aslr_rng.random_range(0..STACK_RANDOM_RANGE);
            StackShift::from_rand(sp0, r, self.config.page_coupling, ps)
        } else {
            StackShift::none(ps)
        };

        let mut page_table = BTreeMap::new();
        let mut frames = Vec::with_capacity(needed as usize);
        for i in 0..u64::from(spec.image_frames) {
            let f = self.alloc_frame()?;
            page_table.insert(IMAGE_VPAGE + i, f);
            frames.push(f);
        }
        for i in 0..u64::from(filler) {
            let f = self.alloc_frame()?;
            page_table.insert(FILLER_VPAGE + i, f);
            frames.push(f);
        }
        for j in 0..stack_pages {
            let f = self.alloc_frame()?;
            page_table.insert(STACK_TOP / ps - 1 - j, f);
            frames.push(f);
        }

        let pid = self.next_pid;
        self.next_pid += 1;
        let mut p = Process {
            pid,
            spec: spec.clone(),
            page_table,
            frames,
            stack_top: STACK_TOP,
            sp0,
            shift,
            registers: RegisterFile::default(),
            minor_faults: 0,
            state: ProcState::Running,
            sigframe: None,
            timeline: vec![TimelineEvent { time_ns: self.dram.now_ns(), kind: TimelineKind::Spawned }],
        };
        let rsp = p.stack_addr(spec.frame_bytes);
        p.registers.set(Reg::Rsp, rsp);
        p.registers.set(Reg::Rbp, p.stack_addr(8));
        p.minor_faults = self.config.faults.count_for(p.stack_addr(target_depth) % ps);
        self.procs.insert(pid, p);
        Ok(pid)
    }

    /// Terminate and return every frame to the free list in allocation order.
    pub fn exit(&mut self, pid: u32) -> Result<(), OsError> {
        let now = self.dram.now_ns();
        let p = self.live_mut(pid)?;
        p.state = ProcState::Exited;
        p.timeline.push(TimelineEvent { time_ns: now, kind: TimelineKind::Exited });
        let frames = std::mem::take(&mut p.frames);
        p.page_table.clear();
        for f in frames {
            self.free.push(f)?;
        }
        Ok(())
    }

    /// Drop an exited process record.
    pub fn reap(&mut self, pid: u32) {
        if self.procs.get(&pid).is_some_and(|p| !p.is_alive()) {
            self.procs.remove(&pid);
        }
    }

    /// Virtual to physical translation. Only profiling code may use this.
    pub fn translate(&self, pid: u32, vaddr: u64) -> Result<u64, OsError> {
        let ps = self.page_size();
        let p = self.process(pid)?;
        let frame = p.page_table.get(&(vaddr / ps)).ok_or(OsError::Unmapped { pid, vaddr })?;
        Ok(frame * ps + vaddr % ps)
    }

    pub fn read_virt(&self, pid: u32, vaddr: u64, out: &mut [u8]) -> Result<(), OsError> {
        for (i, b) in out.iter_mut().enumerate() {
            let phys = self.translate(pid, vaddr + i as u64)?;
            let mut one = [0u8];
            self.dram.read_bytes(phys, &mut one)?;
            *b = one[0];
        }
        Ok(())
    }

    pub fn write_virt(&mut self, pid: u32, vaddr: u64, data: &[u8]) -> Result<(), OsError> {
        for (i, b) in data.iter().enumerate() {
            let phys = self.translate(pid, vaddr + i as u64)?;
            self.dram.write_bytes(phys, &[*b])?;
        }
        Ok(())
    }

    /// Little-endian value of `bytes` width at `vaddr`.
    pub fn read_value(&self, pid: u32, vaddr: u64, bytes: usize) -> Result<u64, OsError> {
        let mut buf = [0u8; 8];
        self.read_virt(pid, vaddr, &mut buf[..bytes.min(8)])?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write_value(&mut self, pid: u32, vaddr: u64, value: u64, bytes: usize) -> Result<(), OsError> {
        let b = value.to_le_bytes();
        self.write_virt(pid, vaddr, &b[..bytes.min(8)])
    }

    pub fn minor_fault_count(&self, pid: u32) -> Result<u64, OsError> {
        Ok(self.process(pid)?.minor_faults)
    }

    pub fn registers(&self, pid: u32) -> Result<RegisterFile, OsError> {
        Ok(self.process(pid)?.registers)
    }

    pub fn set_register(&mut self, pid: u32, reg: Reg, value: u64) -> Result<(), OsError> {
        self.live_mut(pid)?.registers.set(reg, value);
        Ok(())
    }

    fn note(&mut self, pid: u32, kind: TimelineKind) {
        let now = self.dram.now_ns();
        if let Some(p) = self.procs.get_mut(&pid) {
            p.timeline.push(TimelineEvent { time_ns: now, kind });
        }
    }

    /// Virtual address of `reg`'s slot in the signal frame.
    pub fn sigframe_slot(&self, pid: u32, reg: Reg) -> Result<u64, OsError> {
        let p = self.process(pid)?;
        Ok(p.stack_addr(Self::sigframe_slot_depth(&p.spec, reg)))
    }

    pub fn deliver_signal(&mut self, pid: u32, sig: Signal) -> Result<(), OsError> {
        let p = self.live_mut(pid)?;
        match sig {
            Signal::Handled => {
                if p.sigframe.is_some() {
                    return Ok(());
                }
                let regs = p.registers;
                let frame = p.stack_addr(Self::sigframe_depth(&p.spec));
                p.sigframe = Some(frame);
                for r in Reg::SIGCONTEXT {
                    let addr = self.sigframe_slot(pid, r)?;
                    self.write_value(pid, addr, regs.get(r), 8)?;
                }
                self.note(pid, TimelineKind::HandlerSpill);
            }
            Signal::Stop => {
                p.state = ProcState::Stopped;
                self.note(pid, TimelineKind::Stopped);
            }
            Signal::Cont => {
                if p.state == ProcState::Stopped {
                    p.state = ProcState::Running;
                }
                self.note(pid, TimelineKind::Continued);
                self.handler_return(pid)?;
            }
        }
        Ok(())
    }

    /// Finish a running handler: `sigreturn` reloads every register from the
    /// signal frame in memory.
    pub fn handler_return(&mut self, pid: u32) -> Result<(), OsError> {
        if self.live_mut(pid)?.sigframe.is_none() {
            return Ok(());
        }
        let mut regs = self.process(pid)?.registers;
        for r in Reg::SIGCONTEXT {
            let addr = self.sigframe_slot(pid, r)?;
            regs.set(r, self.read_value(pid, addr, 8)?);
        }
        let p = self.live_mut(pid)?;
        p.registers = regs;
        p.sigframe = None;
        self.note(pid, TimelineKind::HandlerReturn);
        Ok(())
    }

    /// Enter a blocking wait. Each `(reg, depth)` is pushed to the stack
    /// first, as a callee-saved register would be by the function prologue.
    pub fn open_window(&mut self, pid: u32, spills: &[(Reg, u64)]) -> Result<(), OsError> {
        for &(reg, depth) in spills {
            let p = self.live_mut(pid)?;
            let v = p.registers.get(reg);
            let addr = p.stack_addr(depth);
            self.write_value(pid, addr, v, 8)?;
        }
        self.live_mut(pid)?.state = ProcState::Blocked;
        self.note(pid, TimelineKind::WindowOpen);
        Ok(())
    }

    /// Leave the blocking wait and pop the spilled registers back.
    pub fn close_window(&mut self, pid: u32, spills: &[(Reg, u64)]) -> Result<(), OsError> {
        for &(reg, depth) in spills.iter().rev() {
            let addr = self.process(pid)?.stack_addr(depth);
            let v = self.read_value(pid, addr, 8)?;
            self.live_mut(pid)?.registers.set(reg, v);
        }
        let p = self.live_mut(pid)?;
        if p.state == ProcState::Blocked {
            p.state = ProcState::Running;
        }
        self.note(pid, TimelineKind::WindowClose);
        Ok(())
    }

    /// Remapping side channel: a noisy estimate of how many frames the
    /// process consumed before the page holding `vaddr`.
    pub fn remap_bait_estimate(&mut self, pid: u32, vaddr: u64) -> Result<i64, OsError> {
        let ps = self.page_size();
        let p = self.process(pid)?;
        let idx = p.alloc_index(vaddr, ps).ok_or(OsError::Unmapped { pid, vaddr })? as i64;
        let sd = self.config.remap_noise_sd;
        if sd == 0.0 {
            return Ok(idx);
        }
        let n = Normal::new(0.0, sd).map_err(|e| OsError::Config(e.to_string()))?;
        Ok(idx + n.sample(&mut self.noise_rng).round() as i64)
    }

    /// Hex dump of a process's mapped pages, one 16-byte line per row.
    pub fn mem_dump(&self, pid: u32) -> Result<String, OsError> {
        use std::fmt::Write;
        let ps = self.page_size();
        let p = self.process(pid)?;
        let mut out = String::new();
        for (&vpage, &frame) in &p.page_table {
            let _ = writeln!(out, "page {:016x} -> frame {frame}", vpage * ps);
            let data = self.dram.read_page(frame)?;
            for (i, chunk) in data.chunks(16).enumerate() {
                if chunk.iter().all(|b| *b == 0) {
                    continue;
                }
                let _ = write!(out, "{:016x} {:09x}:", vpage * ps + i as u64 * 16, frame * ps + i as u64 * 16);
                for b in chunk {
                    let _ = write!(out, " {b:02x}");
                }
                out.push('\n');
            }
        }
        Ok(out)
    }
}
