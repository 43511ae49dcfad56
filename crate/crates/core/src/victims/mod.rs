//! Victim programs: small state machines around one security variable.
//!
//! Each program initialises its variable, computes it from the credential,
//! waits somewhere (a SIGSTOP or a blocking network read) and finally checks
//! it. The waiting phase is where an attacker gets to hammer.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::osmodel::{Os, OsError, Reg, Signal, SpawnSpec};

#[derive(Debug, Error, PartialEq)]
pub enum VictimError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid program `{name}`: {msg}")]
    Invalid { name: String, msg: String },
    #[error("scenario file: {0}")]
    Parse(String),
    #[error(transparent)]
    Os(#[from] OsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    NotEquals(u64),
    Equals(u64),
}

impl Check {
    pub fn passes(self, value: u64) -> bool {
        match self {
            Check::NotEquals(v) => value != v,
            Check::Equals(v) => value == v,
        }
    }

    /// The value an honest, successful computation stores.
    pub fn success_value(self) -> u64 {
        match self {
            Check::NotEquals(0) => 1,
            Check::NotEquals(_) => 0,
            Check::Equals(v) => v,
        }
    }
}

impl std::str::FromStr for Check {
    type Err = String;

    /// `!=0`, `== 0x1`, `==1` ...
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (ctor, rest): (fn(u64) -> Check, &str) = if let Some(r) = s.strip_prefix("!=") {
            (Check::NotEquals, r)
        } else if let Some(r) = s.strip_prefix("==") {
            (Check::Equals, r)
        } else {
            return Err(format!("check `{s}` must start with == or !="));
        };
        let rest = rest.trim();
        let v = match rest.strip_prefix("0x").or_else(|| rest.strip_prefix("0X")) {
            Some(h) => u64::from_str_radix(h, 16),
            None => rest.parse(),
        }
        .map_err(|_| format!("bad value `{rest}`"))?;
        Ok(ctor(v))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Check::NotEquals(v) => write!(f, "!= {v:#x}"),
            Check::Equals(v) => write!(f, "== {v:#x}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Storage {
    /// A local at `depth` bytes below the aligned initial stack pointer.
    Stack { depth: u64 },
    /// Lives in a register; reaches memory only via a signal frame.
    Register { reg: Reg },
    /// Lives in a register that the function pushes to `slot_depth` before
    /// blocking and pops afterwards.
    SpilledDuringWindow { reg: Reg, slot_depth: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecurityVar {
    pub name: String,
    #[serde(default = "default_width")]
    pub width_bits: u32,
    pub storage: Storage,
    #[serde(default)]
    pub init_value: u64,
    pub check: Check,
    #[serde(default)]
    pub success_meaning: String,
}

fn default_width() -> u32 {
    32
}

impl SecurityVar {
    pub fn mask(&self) -> u64 {
        if self.width_bits >= 64 {
            u64::MAX
        } else {
            (1u64 << self.width_bits) - 1
        }
    }

    pub fn width_bytes(&self) -> usize {
        self.width_bits.div_ceil(8) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Compute,
    Window,
    Check,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compute {
    /// The result of the credential check always overwrites the variable.
    Overwrite,
    /// The variable is only written when the credential is good.
    SetIfSuccess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sync {
    /// The attacker stops the process; with `handler`, a handled signal is
    /// sent first so the registers are saved on the user stack.
    Sigstop {
        #[serde(default)]
        handler: bool,
    },
    /// The process blocks on external input the attacker controls.
    BlockingWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GadgetProgram {
    pub name: String,
    pub variables: Vec<SecurityVar>,
    pub lifecycle: Vec<Phase>,
    pub compute: Compute,
    pub sync: Sync,
    #[serde(default)]
    pub spawn: SpawnSpec,
    /// Fail with CRASH if a flip lands in the process outside the target.
    #[serde(default)]
    pub crash_on_collateral: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AuthOutcome {
    Success,
    Failure,
    Crash,
}

impl fmt::Display for AuthOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuthOutcome::Success => "SUCCESS",
            AuthOutcome::Failure => "FAILURE",
            AuthOutcome::Crash => "CRASH",
        })
    }
}

pub const PRESETS: [&str; 8] = [
    "sudo",
    "openssh-authenticated",
    "openssh-result",
    "openssl-ret",
    "mysql",
    "bellcore-bnzero",
    "tls-client-stack",
    "tls-client-register",
];

fn var(name: &str, width_bits: u32, storage: Storage, check: Check, meaning: &str) -> SecurityVar {
    SecurityVar {
        name: name.into(),
        width_bits,
        storage,
        init_value: 0,
        check,
        success_meaning: meaning.into(),
    }
}

const STACK_VAR: Storage = Storage::Stack { depth: 0x58 };

pub fn preset(name: &str) -> Result<GadgetProgram, VictimError> {
    let sigstop = vec![Phase::Init, Phase::Compute, Phase::Window, Phase::Check, Phase::Exit];
    let blocking = vec![Phase::Init, Phase::Window, Phase::Compute, Phase::Check, Phase::Exit];
    let (v, lifecycle, compute, sync) = match name {
        "sudo" => (
            var("matched", 32, STACK_VAR, Check::NotEquals(0), "password accepted"),
            sigstop,
            Compute::Overwrite,
            Sync::Sigstop { handler: false },
        ),
        "openssh-authenticated" => (
            var("authenticated", 32, STACK_VAR, Check::Equals(1), "session authenticated"),
            sigstop,
            Compute::Overwrite,
            Sync::Sigstop { handler: false },
        ),
        "openssh-result" => (
            var("result", 32, STACK_VAR, Check::NotEquals(0), "password accepted"),
            sigstop,
            Compute::Overwrite,
            Sync::Sigstop { handler: false },
        ),
        "openssl-ret" => (
            var("ret", 32, STACK_VAR, Check::NotEquals(0), "signature verified"),
            sigstop,
            Compute::Overwrite,
            Sync::Sigstop { handler: false },
        ),
        "mysql" => (
            var("fast_auth_result.first", 1, STACK_VAR, Check::NotEquals(0), "fast auth accepted"),
            sigstop,
            Compute::Overwrite,
            Sync::Sigstop { handler: false },
        ),
        "bellcore-bnzero" => (
            var("eax", 32, Storage::Register { reg: Reg::Rax }, Check::NotEquals(0), "fault check skipped"),
            sigstop,
            Compute::Overwrite,
            Sync::Sigstop { handler: true },
        ),
        "tls-client-stack" => (
            var("pass", 32, STACK_VAR, Check::NotEquals(0), "server certificate accepted"),
            blocking,
            Compute::SetIfSuccess,
            Sync::BlockingWindow,
        ),
        "tls-client-register" => (
            var(
                "pass",
                32,
                Storage::SpilledDuringWindow { reg: Reg::Rbx, slot_depth: 0x68 },
                Check::NotEquals(0),
                "server certificate accepted",
            ),
            blocking,
            Compute::SetIfSuccess,
            Sync::BlockingWindow,
        ),
        _ => return Err(VictimError::UnknownPreset(name.into())),
    };
    Ok(GadgetProgram {
        name: name.into(),
        variables: vec![v],
        lifecycle,
        compute,
        sync,
        spawn: SpawnSpec::default(),
        crash_on_collateral: false,
    })
}

impl GadgetProgram {
    pub fn validate(&self) -> Result<(), VictimError> {
        let bad = |msg: &str| VictimError::Invalid { name: self.name.clone(), msg: msg.into() };
        let Some(v) = self.variables.first() else {
            return Err(bad("no security variable"));
        };
        if v.width_bits == 0 || v.width_bits > 64 {
            return Err(bad("width_bits must be in 1..=64"));
        }
        if v.check.passes(v.init_value & v.mask()) {
            return Err(bad("init value already passes the check"));
        }
        if !v.check.passes(v.check.success_value() & v.mask()) {
            return Err(bad("check cannot be satisfied at this width"));
        }
        let pos = |p: Phase| self.lifecycle.iter().position(|x| *x == p);
        let (Some(i), Some(c), Some(w), Some(k), Some(e)) =
            (pos(Phase::Init), pos(Phase::Compute), pos(Phase::Window), pos(Phase::Check), pos(Phase::Exit))
        else {
            return Err(bad("lifecycle needs init, compute, window, check and exit"));
        };
        if self.lifecycle.len() != 5 || i != 0 || e != 4 || c > k || w > k {
            return Err(bad("phases out of order"));
        }
        match (v.storage, self.sync) {
            (Storage::Register { .. }, Sync::Sigstop { handler: false }) | (Storage::Register { .. }, Sync::BlockingWindow) => {
                return Err(bad("a register variable needs a handled signal to reach memory"));
            }
            (Storage::SpilledDuringWindow { .. }, Sync::Sigstop { .. }) => {
                return Err(bad("spilled-during-window needs a blocking window"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn target(&self) -> &SecurityVar {
        &self.variables[0]
    }

    /// Stack depth at which the target sits while it is in memory.
    pub fn resident_depth(&self) -> u64 {
        match self.target().storage {
            Storage::Stack { depth } => depth,
            Storage::SpilledDuringWindow { slot_depth, .. } => slot_depth,
            Storage::Register { reg } => Os::sigframe_slot_depth(&self.spawn, reg),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn from_toml(text: &str) -> Result<Self, VictimError> {
        let p: Self = toml::from_str(text).map_err(|e| VictimError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// What the attacker sees when the victim reaches its waiting phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowInfo {
    pub pid: u32,
    /// Virtual address of the target while it is memory resident.
    pub target_vaddr: u64,
    /// True if the target's current value really lives in memory now.
    pub resident: bool,
}

/// How the attacker's stop lines up with the victim.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timing {
    /// Attack happens inside the waiting phase.
    InWindow,
    /// A SIGSTOP that lands too late: the attack runs after the check.
    AfterCheck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub pid: u32,
    pub outcome: AuthOutcome,
    pub checked_value: u64,
    /// Physical address of the target's first byte while resident.
    pub target_phys: u64,
    pub window_open_ns: u64,
    pub window_close_ns: u64,
}

fn read_var(os: &Os, pid: u32, v: &SecurityVar, vaddr: u64) -> Result<u64, OsError> {
    Ok(match v.storage {
        Storage::Stack { .. } => os.read_value(pid, vaddr, v.width_bytes())?,
        Storage::Register { reg } | Storage::SpilledDuringWindow { reg, .. } => os.registers(pid)?.get(reg),
    } & v.mask())
}

fn write_var(os: &mut Os, pid: u32, v: &SecurityVar, vaddr: u64, value: u64) -> Result<(), OsError> {
    match v.storage {
        Storage::Stack { .. } => os.write_value(pid, vaddr, value, v.width_bytes()),
        Storage::Register { reg } | Storage::SpilledDuringWindow { reg, .. } => os.set_register(pid, reg, value),
    }
}

/// Spawn `program` and run it to completion. `attack` is called once, at
/// the point chosen by `timing`; it may hammer, inspect memory, etc. The
/// process has exited (frames freed) when this returns.
pub fn run<F>(
    os: &mut Os,
    program: &GadgetProgram,
    credential_correct: bool,
    timing: Timing,
    mut attack: F,
) -> Result<RunResult, VictimError>
where
    F: FnMut(&mut Os, WindowInfo) -> Result<(), VictimError>,
{
    program.validate()?;
    let v = program.target().clone();
    let depth = program.resident_depth();
    let pid = os.spawn(&program.spawn, depth)?;
    let result = run_spawned(os, program, &v, pid, credential_correct, timing, &mut attack);
    os.exit(pid)?;
    os.reap(pid);
    result
}

fn run_spawned<F>(
    os: &mut Os,
    program: &GadgetProgram,
    v: &SecurityVar,
    pid: u32,
    credential_correct: bool,
    timing: Timing,
    attack: &mut F,
) -> Result<RunResult, VictimError>
where
    F: FnMut(&mut Os, WindowInfo) -> Result<(), VictimError>,
{
    let vaddr = os.process(pid)?.stack_addr(program.resident_depth());
    let target_phys = os.translate(pid, vaddr)?;
    let log_before = os.dram.flip_log().len();
    let spill = match v.storage {
        Storage::SpilledDuringWindow { reg, slot_depth } => vec![(reg, slot_depth)],
        _ => Vec::new(),
    };
    let (mut open, mut close) = (0, 0);
    let mut checked = 0;
    for phase in &program.lifecycle {
        match phase {
            Phase::Init => write_var(os, pid, v, vaddr, v.init_value)?,
            Phase::Compute => {
                if credential_correct {
                    write_var(os, pid, v, vaddr, v.check.success_value())?;
                } else if program.compute == Compute::Overwrite {
                    write_var(os, pid, v, vaddr, v.init_value)?;
                }
            }
            Phase::Window => {
                open = os.now_ns();
                match program.sync {
                    Sync::Sigstop { handler } => {
                        if timing == Timing::InWindow {
                            if handler {
                                os.deliver_signal(pid, Signal::Handled)?;
                            }
                            os.deliver_signal(pid, Signal::Stop)?;
                            let resident = !matches!(v.storage, Storage::Register { .. }) || handler;
                            attack(os, WindowInfo { pid, target_vaddr: vaddr, resident })?;
                            os.deliver_signal(pid, Signal::Cont)?;
                        }
                    }
                    Sync::BlockingWindow => {
                        os.open_window(pid, &spill)?;
                        attack(os, WindowInfo { pid, target_vaddr: vaddr, resident: true })?;
                        os.close_window(pid, &spill)?;
                    }
                }
                close = os.now_ns();
            }
            Phase::Check => {
                checked = read_var(os, pid, v, vaddr)?;
            }
            Phase::Exit => {}
        }
    }
    if timing == Timing::AfterCheck && matches!(program.sync, Sync::Sigstop { .. }) {
        os.deliver_signal(pid, Signal::Stop)?;
        attack(os, WindowInfo { pid, target_vaddr: vaddr, resident: false })?;
        os.deliver_signal(pid, Signal::Cont)?;
    }
    let mut outcome = if v.check.passes(checked) { AuthOutcome::Success } else { AuthOutcome::Failure };
    if program.crash_on_collateral {
        let ps = os.page_size();
        let frames: Vec<u64> = os.process(pid)?.frames.clone();
        let lo = target_phys;
        let hi = target_phys + v.width_bytes() as u64;
        let collateral = os.dram.flip_log()[log_before..]
            .iter()
            .any(|e| frames.contains(&(e.phys_addr / ps)) && !(lo..hi).contains(&e.phys_addr));
        if collateral {
            outcome = AuthOutcome::Crash;
        }
    }
    Ok(RunResult {
        pid,
        outcome,
        checked_value: checked,
        target_phys,
        window_open_ns: open,
        window_close_ns: close,
    })
}
