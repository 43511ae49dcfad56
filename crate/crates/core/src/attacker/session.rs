//! The online phase: free the flippy page and the baits, let the victim
//! allocate, hammer while the target is resident, repeat.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AttackError, AttackPlan};
use crate::dram::DramLocation;
use crate::osmodel::Os;
use crate::rng::{streams, SeedTree, SimRng};
use crate::victims::{self, AuthOutcome, GadgetProgram, Sync, Timing, WindowInfo};

/// One victim launch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub trial: u32,
    pub co_located: bool,
    /// Bits of the target variable flipped while it was resident.
    pub flipped_bits: Vec<u32>,
    /// Simulated time of each of those flips.
    pub target_flip_ns: Vec<u64>,
    /// Interval during which the victim was waiting.
    pub window_ns: (u64, u64),
    /// All flips caused by this trial's hammering.
    pub total_flips: usize,
    pub outcome: AuthOutcome,
    pub in_window: bool,
    pub sim_time_ns: u64,
}

/// Frames held by the attacker across trials.
#[derive(Debug)]
pub struct Session {
    pub plan: AttackPlan,
    pub seed: u64,
    held: Vec<u64>,
    baits: Vec<u64>,
    sync_rng: SimRng,
    next_trial: u32,
}

impl Session {
    /// Take the flippy frame and every frame of the aggressor rows, then
    /// grab `bait_count` bait frames.
    pub fn new(os: &mut Os, plan: AttackPlan, seeds: &SeedTree) -> Result<Self, AttackError> {
        let ps = os.page_size();
        let g = *os.dram.geometry();
        let mut held = vec![plan.flippy_frame];
        for id in &plan.pattern.aggressors {
            for p in 0..g.pages_per_row() {
                let phys = os.dram.dram_to_phys(DramLocation { bank: id.bank, row: id.row, offset: p * g.page_size_bytes });
                held.push(phys / ps);
            }
        }
        for &f in &held {
            if !os.take_frame(f) {
                return Err(AttackError::FrameUnavailable(f));
            }
        }
        let mut s = Self {
            plan,
            seed: seeds.seed(),
            held,
            baits: Vec::new(),
            sync_rng: seeds.stream(streams::SYNC),
            next_trial: 0,
        };
        s.refill_baits(os)?;
        Ok(s)
    }

    fn refill_baits(&mut self, os: &mut Os) -> Result<(), AttackError> {
        self.baits.clear();
        for _ in 0..self.plan.bait_count {
            self.baits.push(os.alloc_frame()?);
        }
        Ok(())
    }

    pub fn trials_run(&self) -> u32 {
        self.next_trial
    }

    /// Free the flippy page, then the baits, so that after the victim has
    /// used up the baits its next allocation is the flippy page.
    fn release(&mut self, os: &mut Os) -> Result<(), AttackError> {
        os.free_frame(self.plan.flippy_frame)?;
        for f in self.baits.drain(..) {
            os.free_frame(f)?;
        }
        Ok(())
    }

    fn reclaim(&mut self, os: &mut Os) -> Result<(), AttackError> {
        if !os.take_frame(self.plan.flippy_frame) {
            return Err(AttackError::FrameUnavailable(self.plan.flippy_frame));
        }
        self.refill_baits(os)
    }

    /// Run one victim launch with hammering in its window.
    pub fn trial(&mut self, os: &mut Os, program: &GadgetProgram) -> Result<TrialRecord, AttackError> {
        let trial = self.next_trial;
        self.next_trial += 1;
        let timing = match program.sync {
            Sync::Sigstop { .. } if !self.sync_rng.random_bool(self.plan.sigstop_hit_prob) => Timing::AfterCheck,
            _ => Timing::InWindow,
        };
        self.release(os)?;
        let ps = os.page_size();
        let flippy = self.plan.flippy_frame;
        let pattern = self.plan.pattern.clone();
        let var = program.target().clone();
        let mut co_located = false;
        let mut flipped = Vec::new();
        let mut total_flips = 0;
        let res = victims::run(os, program, false, timing, |os, w: WindowInfo| {
            let phys = os.translate(w.pid, w.target_vaddr)?;
            co_located = phys / ps == flippy;
            let events = os.dram.hammer(&pattern).map_err(crate::osmodel::OsError::from)?;
            total_flips = events.len();
            if w.resident {
                for e in &events {
                    let off = e.phys_addr.wrapping_sub(phys);
                    if off < var.width_bytes() as u64 {
                        let b = off as u32 * 8 + u32::from(e.bit_in_byte);
                        if b < var.width_bits {
                            flipped.push((b, e.time_ns));
                        }
                    }
                }
            }
            Ok(())
        });
        let res = res?;
        self.reclaim(os)?;
        flipped.sort_unstable();
        Ok(TrialRecord {
            seed: self.seed,
            trial,
            co_located,
            flipped_bits: flipped.iter().map(|f| f.0).collect(),
            target_flip_ns: flipped.iter().map(|f| f.1).collect(),
            window_ns: (res.window_open_ns, res.window_close_ns),
            total_flips,
            outcome: res.outcome,
            in_window: timing == Timing::InWindow,
            sim_time_ns: os.now_ns(),
        })
    }

    /// Give back every held frame.
    pub fn close(mut self, os: &mut Os) -> Result<(), AttackError> {
        for f in self.held.drain(..).chain(self.baits.drain(..)) {
            os.free_frame(f)?;
        }
        Ok(())
    }
}

pub fn execute_attack(
    os: &mut Os,
    session: &mut Session,
    program: &GadgetProgram,
    trials: u32,
) -> Result<Vec<TrialRecord>, AttackError> {
    (0..trials).map(|_| session.trial(os, program)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Relaunch {
    /// Launches used, including the successful one.
    pub trials: u32,
}

/// Relaunch the victim until one run authenticates.
pub fn relaunch_loop(
    os: &mut Os,
    session: &mut Session,
    program: &GadgetProgram,
    budget: u32,
) -> Result<Relaunch, AttackError> {
    for i in 1..=budget {
        if session.trial(os, program)?.outcome == AuthOutcome::Success {
            return Ok(Relaunch { trials: i });
        }
    }
    Err(AttackError::BudgetExhausted { budget })
}

/// Per-launch success as independent Bernoulli trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeometricModel {
    pub p: f64,
}

impl GeometricModel {
    /// `p = co-location * sync hit * covered slot share * flip chance`.
    pub fn new(co_location: f64, sync_hit: f64, slot_fraction: f64, flip_prob: f64) -> Self {
        Self { p: co_location * sync_hit * slot_fraction * flip_prob }
    }

    pub fn success_within(&self, budget: u32) -> f64 {
        1.0 - (1.0 - self.p).powi(budget as i32)
    }

    pub fn expected_trials(&self) -> f64 {
        if self.p > 0.0 {
            1.0 / self.p
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSummary {
    pub total_sim_time_ns: u64,
    pub online_sim_time_ns: u64,
    pub flippy_pages: usize,
    /// Share of trials whose target landed on the flippy page.
    pub correct_baiting: f64,
    pub trials: usize,
    pub successes: usize,
}

impl AttackSummary {
    pub const CSV_HEADER: &'static str =
        "total_sim_time,online_sim_time,flippy_pages,correct_baiting,trials,successes";

    /// Times in simulated seconds.
    pub fn csv_row(&self) -> String {
        format!(
            "{:.3},{:.3},{},{:.4},{},{}",
            self.total_sim_time_ns as f64 / 1e9,
            self.online_sim_time_ns as f64 / 1e9,
            self.flippy_pages,
            self.correct_baiting,
            self.trials,
            self.successes
        )
    }
}

pub fn summarize(records: &[TrialRecord], total_ns: u64, online_ns: u64, flippy_pages: usize) -> AttackSummary {
    let n = records.len();
    let co = records.iter().filter(|r| r.co_located).count();
    AttackSummary {
        total_sim_time_ns: total_ns,
        online_sim_time_ns: online_ns,
        flippy_pages,
        correct_baiting: if n == 0 { 0.0 } else { co as f64 / n as f64 },
        trials: n,
        successes: records.iter().filter(|r| r.outcome == AuthOutcome::Success).count(),
    }
}
