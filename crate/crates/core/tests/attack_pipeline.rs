use std::path::Path;

use stackflip::attacker::{self, profile_offline, relaunch_loop, AttackError, Session};
use stackflip::config::ScenarioConfig;
use stackflip::dram::FlipDirection;
use stackflip::scenario::{self, prepare};
use stackflip::victims::AuthOutcome;

const SMALL: &str = r#"
seed = 11
trials = 40
[geometry]
banks = 8
rows_per_bank = 128
[victim]
preset = "sudo"
[attack]
profile_trials = 1
calibration_spawns = 20
[attack.plan]
n_sided = 2
rounds = 1
"#;

fn cfg(extra: &str) -> ScenarioConfig {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    ScenarioConfig::parse(&format!("{SMALL}{extra}"), &dir).unwrap()
}

fn planted(noise: f64, aslr: bool) -> ScenarioConfig {
    let mut c = cfg("[profile]\npath = \"relaunch-cells.txt\"\n");
    c.os.placement_noise = noise;
    c.os.aslr = aslr;
    c
}

#[test]
fn high_threshold_keeps_only_reliable_cells() {
    let c = cfg("[profile]\npreset = \"ddr4-dense\"\n");
    let mut os = c.boot().unwrap();
    let map = profile_offline(&mut os.dram, (0, 1 << 20), 100, 0.9, 2).unwrap();
    let ps = 4096;
    let truth: std::collections::BTreeMap<(u64, u32), (f64, FlipDirection)> = os
        .dram
        .profile()
        .iter()
        .filter_map(|(cell, pc)| {
            let (phys, bit) = os.dram.cell_phys(cell);
            (phys < 1 << 20).then(|| ((phys / ps, (phys % ps) as u32 * 8 + u32::from(bit)), (pc.prob, pc.direction)))
        })
        .collect();
    let high = truth.values().filter(|(p, _)| *p >= 0.9).count();
    assert!(!map.is_empty());
    for e in &map.entries {
        let (p, d) = truth[&(e.frame, e.bit)];
        assert!(p >= 0.9, "cell with p={p} survived");
        assert_eq!(d, e.direction);
    }
    assert!(map.len() * 2 >= high, "{} of {high}", map.len());
}

#[test]
fn empty_profile_gives_empty_map() {
    let c = cfg("[profile]\n[profile.params]\ncells_per_row = 0.0\n");
    let r = scenario::run_profile(&c).unwrap();
    assert!(r.map.is_empty());
    assert_eq!(r.estimate.probability_pct, 0.0);
}

#[test]
fn no_noise_no_aslr_succeeds_on_first_launch() {
    // find the fixed target offset, then plant one cell on it
    let probe = planted(0.0, false);
    let mut os = probe.boot().unwrap();
    let mut off = 0;
    stackflip::victims::run(&mut os, &probe.program().unwrap(), false, stackflip::victims::Timing::InWindow, |os, w| {
        off = os.translate(w.pid, w.target_vaddr)? % 4096;
        Ok(())
    })
    .unwrap();
    let path = std::env::temp_dir().join(format!("stackflip-fixed-{}.txt", std::process::id()));
    std::fs::write(&path, format!("0 40 {} 0->1 1\n", off * 8 + 5)).unwrap();
    let mut c = probe.clone();
    c.profile.path = Some(path.clone());
    let mut p = prepare(&c).unwrap();
    let r = relaunch_loop(&mut p.os, &mut p.session, &p.program, 1).unwrap();
    assert_eq!(r.trials, 1);
    // the planted cells of the shared file miss that offset, and without
    // ASLR no relaunch can move the target onto them
    let mut p = prepare(&probe).unwrap();
    assert!(matches!(
        relaunch_loop(&mut p.os, &mut p.session, &p.program, 20),
        Err(AttackError::BudgetExhausted { budget: 20 })
    ));
    let _ = std::fs::remove_file(path);
}

#[test]
fn calibrated_baits_colocate_every_time_without_noise() {
    let c = planted(0.0, true);
    let mut p = prepare(&c).unwrap();
    let recs = attacker::execute_attack(&mut p.os, &mut p.session, &p.program, 50).unwrap();
    assert!(recs.iter().all(|r| r.co_located));
}

#[test]
fn off_by_one_baits_never_colocate() {
    let mut c = planted(0.0, true);
    let good = prepare(&c).unwrap().calibration.bait_count().unwrap();
    c.attack.bait_count = Some(good + 1);
    let mut p = prepare(&c).unwrap();
    let recs = attacker::execute_attack(&mut p.os, &mut p.session, &p.program, 50).unwrap();
    assert!(recs.iter().all(|r| !r.co_located));
    assert!(recs.iter().all(|r| r.outcome == AuthOutcome::Failure));
}

#[test]
fn wrong_nibble_never_succeeds() {
    // the planted cells sit at byte offsets with nibble 8; a plan told the
    // target has nibble 0 finds nothing
    let c = planted(0.0, true);
    let p = prepare(&c).unwrap();
    let plan = p.session.plan.clone();
    let mut os = c.boot().unwrap();
    let map = profile_offline(&mut os.dram, c.profile_region(), 1, 0.0, 2).unwrap();
    let err = attacker::plan_attack(&os.dram, &map, p.program.target(), 0, plan.bait_count, &c.attack.plan);
    assert!(matches!(err, Err(AttackError::NoFlippyPage(_))));
    // and a session hammering that page with the victim's real nibble shifted
    // away never authenticates
    let mut shifted = p.program.clone();
    if let stackflip::victims::Storage::Stack { depth } = &mut shifted.variables[0].storage {
        *depth += 4;
    }
    let mut session = Session::new(&mut os, plan, &c.seeds()).unwrap();
    let recs = attacker::execute_attack(&mut os, &mut session, &shifted, 200).unwrap();
    assert!(recs.iter().all(|r| r.outcome == AuthOutcome::Failure));
}

#[test]
fn relaunch_beats_single_shot() {
    let mut c = planted(0.7, true);
    c.trials = 300;
    c.attack.relaunch_budget = 16;
    let r = scenario::run_relaunch(&c).unwrap();
    let single = r.loops.iter().filter(|l| l.trials == Some(1)).count() as f64 / r.loops.len() as f64;
    assert!(r.success_rate > single, "{} vs {single}", r.success_rate);
    assert!(r.loops.iter().all(|l| l.trials.is_none_or(|t| (1..=16).contains(&t))));
}

#[test]
fn successes_always_flip_the_target() {
    let mut c = planted(0.7, true);
    c.trials = 400;
    let r = scenario::run_attack(&c).unwrap();
    for t in &r.records {
        if t.outcome == AuthOutcome::Success {
            assert!(t.co_located && t.in_window && !t.flipped_bits.is_empty(), "{t:?}");
        }
    }
    assert!(r.summary.successes > 0);
}

#[test]
fn attack_is_deterministic() {
    let c = planted(0.7, true);
    let a = scenario::run_attack(&c).unwrap();
    let b = scenario::run_attack(&c).unwrap();
    assert_eq!(a.records, b.records);
}
