use super::*;
use crate::dram::{AddressMapping, BankInterleaved, CellAddress, DramLocation, Dram, DramConfig, DramGeometry, FlipDirection, FlipProfile};
use crate::osmodel::{Os, OsConfig};
use crate::rng::{streams, SeedTree};
use crate::victims::{self, preset, AuthOutcome, Timing};

fn entry(frame: u64, bit: u32, direction: FlipDirection, count: u32) -> FlipEntry {
    FlipEntry { frame, bit, direction, count }
}

fn machine(profile: FlipProfile, config: OsConfig, seed: u64) -> Os {
    let seeds = SeedTree::new(seed);
    let dram = Dram::new(
        DramGeometry::new(4, 64).unwrap(),
        DramConfig::default(),
        profile,
        seeds.stream(streams::DRAM),
    )
    .unwrap();
    Os::boot(dram, config, &seeds).unwrap()
}

fn fixed() -> OsConfig {
    OsConfig { aslr: false, placement_noise: 0.0, ..OsConfig::default() }
}

#[test]
fn aggressor_layouts() {
    assert_eq!(aggressor_offsets(2), vec![-1, 1]);
    assert_eq!(aggressor_offsets(3), vec![-3, -1, 1]);
    assert_eq!(aggressor_offsets(11), vec![-11, -9, -7, -5, -3, -1, 1, 3, 5, 7, 9]);
}

#[test]
fn flip_map_text_and_filter() {
    let map = FlipMap {
        trials: 10,
        entries: vec![
            entry(3, 17, FlipDirection::ZeroToOne, 10),
            entry(3, 900, FlipDirection::OneToZero, 1),
            entry(8, 5, FlipDirection::ZeroToOne, 9),
        ],
    };
    assert_eq!(FlipMap::from_text(&map.to_text()).unwrap(), map);
    assert_eq!(map.flippy_pages(), 2);
    assert_eq!(map.filter(0.9).len(), 2);
    assert_eq!(map.count_histogram()[10], 1);
    assert!(FlipMap::from_text("# trials 2\n1 2 0->1 3\n").is_err());
    assert!(FlipMap::from_text("# trials 2\n1 2 sideways 1\n").is_err());
}

#[test]
fn estimate_matches_hand_computation() {
    // bytes 8 and 24 sit in an 8-nibble 4-byte target, byte 12 does not
    let map = FlipMap {
        trials: 1,
        entries: vec![
            entry(1, 8 * 8, FlipDirection::ZeroToOne, 1),
            entry(1, 12 * 8, FlipDirection::ZeroToOne, 1),
            entry(2, 24 * 8 + 7, FlipDirection::OneToZero, 1),
        ],
    };
    let e = estimate_fault_probability(&map, 2_000_000, 0.001, 8, 4);
    assert_eq!(e.n_flippy, 2);
    assert!((e.n_avg - 2.0 / 256.0).abs() < 1e-12);
    let want = (1.0 - (1.0f64 - 1.0 / 256.0).powf(2000.0)) * 100.0;
    assert!((e.probability_pct - want).abs() < 1e-9);
    let empty = estimate_fault_probability(&FlipMap::default(), 2_000_000, 0.001, 8, 4);
    assert_eq!(empty.probability_pct, 0.0);
}

#[test]
fn offsets_from_fault_classes() {
    let c = crate::osmodel::FaultClasses::default();
    assert_eq!(infer_offset_from_faults(275, &c, 8, false, 0x9a8, 4096), vec![0x9a8]);
    let inside = infer_offset_from_faults(275, &c, 8, true, 0, 4096);
    assert_eq!(inside.len(), 38);
    assert!(inside.iter().all(|o| (200..=800).contains(o) && o % 16 == 8));
    assert_eq!(infer_offset_from_faults(286, &c, 8, true, 0, 4096).len(), 256 - 38);
    assert_eq!(infer_offset_from_faults(7, &c, 8, true, 0, 4096).len(), 256);
}

#[test]
fn useful_cells_respect_check_and_direction() {
    let auth = preset("openssh-authenticated").unwrap();
    let v = auth.target();
    let cells = [
        entry(0, 8 * 8, FlipDirection::ZeroToOne, 1),
        entry(0, 8 * 8 + 1, FlipDirection::ZeroToOne, 1),
        entry(0, 24 * 8, FlipDirection::OneToZero, 1),
        entry(0, 40 * 8, FlipDirection::ZeroToOne, 1),
        entry(0, 44 * 8, FlipDirection::ZeroToOne, 1),
    ];
    let u = useful_cells(&cells, v, 8);
    assert_eq!(u, vec![(0, cells[0]), (2, cells[3])]);
    let sudo = preset("sudo").unwrap();
    let u = useful_cells(&cells, sudo.target(), 8);
    assert_eq!(u.len(), 3);
}

#[test]
fn offline_profile_sees_planted_cells() {
    let geom = DramGeometry::new(4, 64).unwrap();
    let mut p = FlipProfile::new();
    p.insert(CellAddress { bank: 1, row: 7, bit: 100 }, 1.0, FlipDirection::ZeroToOne).unwrap();
    p.insert(CellAddress { bank: 2, row: 0, bit: 40_000 }, 1.0, FlipDirection::OneToZero).unwrap();
    let mut os = machine(p, fixed(), 1);
    let map = profile_offline(&mut os.dram, (0, geom.capacity()), 5, 0.0, 2).unwrap();
    let got: Vec<(u64, FlipDirection, u32)> =
        map.entries.iter().map(|e| (e.frame * 4096 * 8 + u64::from(e.bit), e.direction, e.count)).collect();
    let mut want = Vec::new();
    for (bank, row, bit, d) in [(1, 7, 100u32, FlipDirection::ZeroToOne), (2, 0, 40_000, FlipDirection::OneToZero)] {
        let (phys, b) = os.dram.cell_phys(CellAddress { bank, row, bit });
        want.push((phys * 8 + u64::from(b), d, 5));
    }
    want.sort();
    assert_eq!(got, want);
}

/// Offset of the target inside its page, with ASLR off.
fn static_offset(program: &crate::victims::GadgetProgram) -> u64 {
    let mut os = machine(FlipProfile::new(), fixed(), 1);
    let mut off = 0;
    victims::run(&mut os, program, false, Timing::InWindow, |os, w| {
        off = os.translate(w.pid, w.target_vaddr)? % 4096;
        Ok(())
    })
    .unwrap();
    off
}

fn planted(program: &crate::victims::GadgetProgram, bit: u32) -> (FlipProfile, u64) {
    let geom = DramGeometry::new(4, 64).unwrap();
    let off = static_offset(program);
    // first page of bank 0, row 30
    let frame = BankInterleaved.to_phys(&geom, DramLocation { bank: 0, row: 30, offset: 0 }) / 4096;
    let mut p = FlipProfile::new();
    p.insert(CellAddress { bank: 0, row: 30, bit: (off * 8) as u32 + bit }, 1.0, FlipDirection::ZeroToOne).unwrap();
    (p, frame)
}

#[test]
fn calibration_finds_a_single_mode_without_noise() {
    for name in ["sudo", "bellcore-bnzero", "tls-client-register"] {
        let mut os = machine(FlipProfile::new(), fixed(), 3);
        let cal = calibrate_bait_count(&mut os, &preset(name).unwrap(), 10, 200).unwrap();
        assert_eq!(cal.misses, 0, "{name}");
        assert_eq!(cal.histogram.len(), 1, "{name}");
        assert_eq!(cal.mode_rate(), 1.0);
        assert_eq!(cal.nibbles.len(), 1);
    }
}

#[test]
fn planted_cell_gives_success_every_time() {
    let program = preset("sudo").unwrap();
    let (profile, frame) = planted(&program, 3);
    let mut os = machine(profile, fixed(), 4);
    let map = profile_offline(&mut os.dram, (0, 2 << 20), 3, 0.9, 2).unwrap();
    let cal = calibrate_bait_count(&mut os, &program, 5, 200).unwrap();
    let params = PlanParams { rounds: 2, ..PlanParams::default() };
    let plan = plan_attack(&os.dram, &map, program.target(), cal.nibble().unwrap(), cal.bait_count().unwrap(), &params)
        .unwrap();
    assert_eq!(plan.flippy_frame, frame);
    assert_eq!(plan.covered_slots.len(), 1);
    let plan = AttackPlan { sigstop_hit_prob: 1.0, ..plan };
    let mut session = Session::new(&mut os, plan, &SeedTree::new(4)).unwrap();
    let recs = execute_attack(&mut os, &mut session, &program, 4).unwrap();
    for r in &recs {
        assert!(r.co_located);
        assert_eq!(r.flipped_bits, vec![3]);
        assert_eq!(r.outcome, AuthOutcome::Success);
    }
    let s = summarize(&recs, os.now_ns(), os.now_ns(), map.flippy_pages());
    assert_eq!((s.successes, s.correct_baiting), (4, 1.0));
    session.close(&mut os).unwrap();
}

#[test]
fn late_stop_never_succeeds() {
    let program = preset("sudo").unwrap();
    let (profile, _) = planted(&program, 3);
    let mut os = machine(profile, fixed(), 5);
    let map = profile_offline(&mut os.dram, (0, 2 << 20), 2, 0.9, 2).unwrap();
    let cal = calibrate_bait_count(&mut os, &program, 3, 200).unwrap();
    let params = PlanParams { rounds: 2, sigstop_hit_prob: 0.0, ..PlanParams::default() };
    let plan =
        plan_attack(&os.dram, &map, program.target(), cal.nibble().unwrap(), cal.bait_count().unwrap(), &params).unwrap();
    let mut session = Session::new(&mut os, plan, &SeedTree::new(5)).unwrap();
    let recs = execute_attack(&mut os, &mut session, &program, 3).unwrap();
    assert!(recs.iter().all(|r| !r.in_window && r.outcome == AuthOutcome::Failure && r.flipped_bits.is_empty()));
    assert!(matches!(
        relaunch_loop(&mut os, &mut session, &program, 3),
        Err(AttackError::BudgetExhausted { budget: 3 })
    ));
}

#[test]
fn geometric_model() {
    let m = GeometricModel::new(0.3, 1.0, 1.0 / 256.0, 1.0);
    assert!((m.p - 0.3 / 256.0).abs() < 1e-15);
    assert!((m.success_within(1) - m.p).abs() < 1e-15);
    assert!((m.expected_trials() - 256.0 / 0.3).abs() < 1e-9);
    assert_eq!(GeometricModel::new(0.0, 1.0, 1.0, 1.0).expected_trials(), f64::INFINITY);
}
