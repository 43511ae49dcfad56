//! End-to-end runs of a scenario: profile, calibrate, attack, relaunch.

use serde::Serialize;
use thiserror::Error;

use crate::attacker::{
    self, calibrate_bait_count, estimate_fault_probability, execute_attack, plan_attack, profile_offline, relaunch_loop,
    summarize, AttackError, AttackPlan, AttackSummary, Calibration, FaultEstimate, FlipMap, GeometricModel, Session,
    TrialRecord,
};
use crate::config::{ConfigError, ScenarioConfig};
use crate::osmodel::Os;
use crate::victims::{GadgetProgram, Sync};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

impl From<crate::osmodel::OsError> for ScenarioError {
    fn from(e: crate::osmodel::OsError) -> Self {
        ScenarioError::Attack(e.into())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileRun {
    pub map: FlipMap,
    pub estimate: FaultEstimate,
    pub sim_time_ns: u64,
}

pub fn run_profile(cfg: &ScenarioConfig) -> Result<ProfileRun, ScenarioError> {
    let mut os = cfg.boot()?;
    profile_on(cfg, &mut os)
}

fn profile_on(cfg: &ScenarioConfig, os: &mut Os) -> Result<ProfileRun, ScenarioError> {
    let a = &cfg.attack;
    let map = profile_offline(&mut os.dram, cfg.profile_region(), a.profile_trials, a.profile_threshold, a.profile_sides)?;
    let estimate =
        estimate_fault_probability(&map, cfg.geometry.total_pages(), a.stealth_fraction, a.estimate_nibble, 4);
    Ok(ProfileRun { map, estimate, sim_time_ns: os.now_ns() })
}

pub fn run_calibrate(cfg: &ScenarioConfig) -> Result<Calibration, ScenarioError> {
    let mut os = cfg.boot()?;
    let program = cfg.program()?;
    Ok(calibrate_bait_count(&mut os, &program, cfg.attack.calibration_spawns, cfg.attack.bait_release)?)
}

/// A machine that has been profiled and calibrated, ready for trials.
pub struct Prepared {
    pub os: Os,
    pub program: GadgetProgram,
    pub profile: ProfileRun,
    pub calibration: Calibration,
    pub session: Session,
    pub online_start_ns: u64,
}

pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared, ScenarioError> {
    let mut os = cfg.boot()?;
    let program = cfg.program()?;
    let profile = profile_on(cfg, &mut os)?;
    let a = &cfg.attack;
    let calibration = calibrate_bait_count(&mut os, &program, a.calibration_spawns, a.bait_release)?;
    let bait = match a.bait_count.or(calibration.bait_count()) {
        Some(b) => b,
        None => return Err(AttackError::CalibrationFailed.into()),
    };
    let nibble = calibration.nibble().ok_or(AttackError::CalibrationFailed)?;
    let plan = plan_attack(&os.dram, &profile.map, program.target(), nibble, bait, &a.plan)?;
    let session = Session::new(&mut os, plan, &cfg.seeds())?;
    let online_start_ns = os.now_ns();
    Ok(Prepared { os, program, profile, calibration, session, online_start_ns })
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackRun {
    pub plan: AttackPlan,
    pub calibration: Calibration,
    pub records: Vec<TrialRecord>,
    pub summary: AttackSummary,
}

pub fn run_attack(cfg: &ScenarioConfig) -> Result<AttackRun, ScenarioError> {
    let mut p = prepare(cfg)?;
    let records = execute_attack(&mut p.os, &mut p.session, &p.program, cfg.trials)?;
    let end = p.os.now_ns();
    let summary = summarize(&records, end, end - p.online_start_ns, p.profile.map.flippy_pages());
    Ok(AttackRun { plan: p.session.plan.clone(), calibration: p.calibration, records, summary })
}

/// Success chance of one launch under `plan`, for a victim whose target
/// offset is uniform over the page's slots.
pub fn launch_model(cfg: &ScenarioConfig, plan: &AttackPlan, program: &GadgetProgram, map: &FlipMap) -> GeometricModel {
    let co = 1.0 - cfg.os.placement_noise;
    let sync = match program.sync {
        Sync::Sigstop { .. } => plan.sigstop_hit_prob,
        Sync::BlockingWindow => 1.0,
    };
    let t = f64::from(map.trials.max(1));
    let rounds = plan.pattern.rounds as i32;
    let mut miss: std::collections::BTreeMap<u64, f64> = std::collections::BTreeMap::new();
    for (slot, cell) in attacker::useful_cells(&plan.cells, program.target(), plan.nibble) {
        let p = f64::from(cell.count) / t;
        *miss.entry(slot).or_insert(1.0) *= (1.0 - p).powi(rounds);
    }
    let mass: f64 = miss.values().map(|m| 1.0 - m).sum();
    GeometricModel::new(co, sync, mass / attacker::SLOTS_PER_PAGE as f64, 1.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct LoopRecord {
    pub seed: u64,
    pub run: u32,
    /// Launches until the first success, `None` when the budget ran out.
    pub trials: Option<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaunchRun {
    pub plan: AttackPlan,
    pub budget: u32,
    pub loops: Vec<LoopRecord>,
    pub success_rate: f64,
    pub model: GeometricModel,
    pub model_success: f64,
    pub online_sim_time_ns: u64,
}

/// `cfg.trials` independent relaunch loops on one prepared machine.
pub fn run_relaunch(cfg: &ScenarioConfig) -> Result<RelaunchRun, ScenarioError> {
    let mut p = prepare(cfg)?;
    let budget = cfg.attack.relaunch_budget;
    let mut loops = Vec::with_capacity(cfg.trials as usize);
    for run in 0..cfg.trials {
        let trials = match relaunch_loop(&mut p.os, &mut p.session, &p.program, budget) {
            Ok(r) => Some(r.trials),
            Err(AttackError::BudgetExhausted { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        loops.push(LoopRecord { seed: cfg.seed, run, trials });
    }
    let ok = loops.iter().filter(|l| l.trials.is_some()).count();
    let model = launch_model(cfg, &p.session.plan, &p.program, &p.profile.map);
    Ok(RelaunchRun {
        plan: p.session.plan.clone(),
        budget,
        success_rate: if loops.is_empty() { 0.0 } else { ok as f64 / loops.len() as f64 },
        model_success: model.success_within(budget),
        model,
        loops,
        online_sim_time_ns: p.os.now_ns() - p.online_start_ns,
    })
}
