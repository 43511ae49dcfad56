use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::aslr::StackShift;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reg {
    Rax,
    Rbx,
    Rcx,
    Rdx,
    Rsi,
    Rdi,
    Rbp,
    Rsp,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Reg {
    pub const ALL: [Reg; 16] = [
        Reg::Rax,
        Reg::Rbx,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rsi,
        Reg::Rdi,
        Reg::Rbp,
        Reg::Rsp,
        Reg::R8,
        Reg::R9,
        Reg::R10,
        Reg::R11,
        Reg::R12,
        Reg::R13,
        Reg::R14,
        Reg::R15,
    ];

    /// Save order of the kernel's signal frame (`struct sigcontext`).
    pub const SIGCONTEXT: [Reg; 16] = [
        Reg::R8,
        Reg::R9,
        Reg::R10,
        Reg::R11,
        Reg::R12,
        Reg::R13,
        Reg::R14,
        Reg::R15,
        Reg::Rdi,
        Reg::Rsi,
        Reg::Rbp,
        Reg::Rbx,
        Reg::Rdx,
        Reg::Rax,
        Reg::Rcx,
        Reg::Rsp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Reg::Rax => "rax",
            Reg::Rbx => "rbx",
            Reg::Rcx => "rcx",
            Reg::Rdx => "rdx",
            Reg::Rsi => "rsi",
            Reg::Rdi => "rdi",
            Reg::Rbp => "rbp",
            Reg::Rsp => "rsp",
            Reg::R8 => "r8",
            Reg::R9 => "r9",
            Reg::R10 => "r10",
            Reg::R11 => "r11",
            Reg::R12 => "r12",
            Reg::R13 => "r13",
            Reg::R14 => "r14",
            Reg::R15 => "r15",
        }
    }

    pub fn index(self) -> usize {
        Reg::ALL.iter().position(|r| *r == self).unwrap_or(0)
    }

    pub fn sigcontext_slot(self) -> usize {
        Reg::SIGCONTEXT.iter().position(|r| *r == self).unwrap_or(0)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Reg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let s = s.strip_prefix('e').map(|r| format!("r{r}")).unwrap_or(s);
        Reg::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown register `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegisterFile(pub [u64; 16]);

impl RegisterFile {
    pub fn get(&self, r: Reg) -> u64 {
        self.0[r.index()]
    }

    pub fn set(&mut self, r: Reg, v: u64) {
        self.0[r.index()] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcState {
    Running,
    Blocked,
    Stopped,
    Exited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Signal {
    /// A signal with a user handler installed (e.g. SIGUSR1).
    Handled,
    Stop,
    Cont,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimelineKind {
    Spawned,
    HandlerSpill,
    HandlerReturn,
    Stopped,
    Continued,
    WindowOpen,
    WindowClose,
    Exited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub time_ns: u64,
    #[serde(flatten)]
    pub kind: TimelineKind,
}

/// What a process needs from the allocator, in allocation order: image
/// frames, filler frames (heap, libraries), then stack pages from the top
/// down.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnSpec {
    pub image_frames: u32,
    pub filler_frames: u32,
    /// Bytes of arguments/environment above the initial stack pointer.
    pub args_bytes: u64,
    /// Distance below the aligned initial stack pointer of the frame holding
    /// the variables; `rsp` sits this far down.
    pub frame_bytes: u64,
    /// Minimum number of stack pages to map.
    pub stack_pages: u32,
}

impl Default for SpawnSpec {
    fn default() -> Self {
        Self {
            image_frames: 24,
            filler_frames: 40,
            args_bytes: 0x6a8,
            frame_bytes: 0x200,
            stack_pages: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Process {
    pub pid: u32,
    pub spec: SpawnSpec,
    /// Virtual page number to physical frame.
    pub page_table: BTreeMap<u64, u64>,
    /// Frames in the order they were allocated.
    pub frames: Vec<u64>,
    pub stack_top: u64,
    /// Initial stack pointer before randomization.
    pub sp0: u64,
    pub shift: StackShift,
    pub registers: RegisterFile,
    pub minor_faults: u64,
    pub state: ProcState,
    /// Signal frame currently on the user stack, if a handler is running.
    pub sigframe: Option<u64>,
    pub timeline: Vec<TimelineEvent>,
}

impl Process {
    /// Randomized stack pointer.
    pub fn stack_base(&self) -> u64 {
        self.shift.place(self.sp0 & !0xf)
    }

    /// Address (randomized) of something `depth` bytes below the aligned
    /// initial stack pointer.
    pub fn stack_addr(&self, depth: u64) -> u64 {
        self.shift.place((self.sp0 & !0xf) - depth)
    }

    /// Index in allocation order of the frame backing `vaddr`.
    pub fn alloc_index(&self, vaddr: u64, page_size: u64) -> Option<usize> {
        let frame = self.page_table.get(&(vaddr / page_size))?;
        self.frames.iter().position(|f| f == frame)
    }

    pub fn is_alive(&self) -> bool {
        self.state != ProcState::Exited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_names_round_trip() {
        for r in Reg::ALL {
            assert_eq!(r.name().parse::<Reg>().unwrap(), r);
        }
        assert_eq!("EAX".parse::<Reg>().unwrap(), Reg::Rax);
        assert!("xmm0".parse::<Reg>().is_err());
    }

    #[test]
    fn sigcontext_is_a_permutation() {
        let mut seen = [false; 16];
        for r in Reg::SIGCONTEXT {
            assert!(!seen[r.index()]);
            seen[r.index()] = true;
        }
        assert_eq!(Reg::Rbx.sigcontext_slot(), 11);
    }
}
