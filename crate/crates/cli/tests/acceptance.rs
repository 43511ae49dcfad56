//! Acceptance criteria. Each prints one PASS/FAIL line; the process exits
//! non-zero if any criterion fails or runs over its time budget.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use stackflip::attacker::{aggressor_offsets, estimate_fault_probability, fault_probability, FlipEntry, FlipMap};
use stackflip::config::ScenarioConfig;
use stackflip::dram::{FlipDirection, HammerPattern};
use stackflip::gadgetscan::{self, golden_lines, Hardness, CORPUS, CORPUS_EXPECTED};
use stackflip::memwalk::{
    detect_contiguous, detect_same_bank, median_trace, trace_from_frames, DetectorConfig, MedianProbe, NoisyProbe,
    TimingTrace, TraceParams,
};
use stackflip::rng::SeedTree;
use stackflip::scenario;
use stackflip::victims::{self, AuthOutcome};

type Outcome = Result<String, String>;
type CliRun = (Vec<u8>, BTreeMap<String, Vec<u8>>);
type Criterion = (u32, &'static str, fn() -> Outcome, u64);

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(&scenarios().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Second, independent evaluation of the closed form through logarithms.
fn oracle_pct(n_avg: f64, n_flippy: f64, pages: f64) -> f64 {
    if n_flippy <= 0.0 {
        return 0.0;
    }
    let r = (n_avg / n_flippy).min(1.0);
    if r >= 1.0 {
        return if pages > 0.0 { 100.0 } else { 0.0 };
    }
    -(pages * (-r).ln_1p()).exp_m1() * 100.0
}

fn c1_formula() -> Outcome {
    let mut rng = SeedTree::new(1).stream("formula");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n_flippy: f64 = rng.random_range(1.0..20_000.0);
        let n_avg = rng.random_range(0.0..=n_flippy);
        let n_pages: f64 = rng.random_range(1_000.0..8_000_000.0);
        let got = fault_probability(n_avg, n_flippy, n_pages / 1000.0);
        let want = oracle_pct(n_avg, n_flippy, n_pages / 1000.0);
        worst = worst.max(rel_err(got, want));
        check((0.0..=100.0).contains(&got), format!("out of range: {got}"))?;
    }
    check(worst <= 1e-9, format!("max relative error {worst:e}"))?;
    check(fault_probability(0.0, 500.0, 2000.0) == 0.0, "n_avg = 0 must give 0")?;
    check(fault_probability(5.0, 0.0, 2000.0) == 0.0, "n_flippy = 0 must give 0")?;
    let sat = fault_probability(500.0, 500.0, 2_000_000.0 / 1000.0);
    check((sat - 100.0).abs() < 1e-12, format!("saturation gave {sat}"))?;
    let ex = fault_probability(0.5, 500.0, 2_000_000.0 / 1000.0);
    check(rel_err(ex, oracle_pct(0.5, 500.0, 2000.0)) <= 1e-9, "worked example")?;
    // monotone in n_avg and pages
    let mut prev = 0.0;
    for k in 0..100 {
        let p = fault_probability(f64::from(k) * 0.1, 50.0, 2000.0);
        check(p >= prev, "not monotone in n_avg")?;
        prev = p;
    }
    // the map-level estimate uses the same form
    let map = FlipMap {
        trials: 1,
        entries: (0..40).map(|i| FlipEntry { frame: i / 4, bit: (i as u32 % 4) * 1024 + 64, direction: FlipDirection::ZeroToOne, count: 1 }).collect(),
    };
    let e = estimate_fault_probability(&map, 2_000_000, 0.001, 8, 4);
    check(rel_err(e.probability_pct, oracle_pct(40.0 / 256.0, 10.0, 2000.0)) <= 1e-9, "map estimate")?;
    Ok(format!("max rel err {worst:.1e} over 1000 triples"))
}

fn c2_aslr() -> Outcome {
    let cfg = load("relaunch.toml");
    let mut os = cfg.boot().map_err(|e| e.to_string())?;
    let program = victims::preset("sudo").unwrap();
    let depth = program.resident_depth();
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    let n = 100_000u64;
    for _ in 0..n {
        let pid = os.spawn(&program.spawn, depth).map_err(|e| e.to_string())?;
        let off = os.process(pid).unwrap().stack_addr(depth) % 4096;
        *counts.entry(off).or_insert(0) += 1;
        os.exit(pid).unwrap();
        os.reap(pid);
    }
    let nibbles: std::collections::BTreeSet<u64> = counts.keys().map(|o| o % 16).collect();
    check(nibbles.len() == 1, format!("low nibble varies: {nibbles:?}"))?;
    check(counts.len() <= 256, format!("{} distinct offsets", counts.len()))?;
    let k = counts.len() as f64;
    let expect = n as f64 / k;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let p = 1.0 - ChiSquared::new(k - 1.0).unwrap().cdf(chi2);
    check(p > 0.01, format!("chi-square p = {p:.4}"))?;
    Ok(format!("{} offsets, nibble {:#x}, chi-square p = {p:.3}", counts.len(), nibbles.first().unwrap()))
}

fn c3_baiting() -> Outcome {
    let mut cfg = load("relaunch.toml");
    cfg.trials = 1000;
    cfg.attack.plan.rounds = 1;
    let shipped = cfg.os.placement_noise;
    cfg.os.placement_noise = 0.0;
    let quiet = scenario::run_attack(&cfg).map_err(|e| e.to_string())?;
    let q = quiet.summary.correct_baiting;
    check(q == 1.0, format!("noise 0 co-location {q}"))?;
    cfg.os.placement_noise = shipped;
    let noisy = scenario::run_attack(&cfg).map_err(|e| e.to_string())?;
    let r = noisy.summary.correct_baiting;
    check((0.20..=0.40).contains(&r), format!("shipped noise co-location {r:.3}"))?;
    Ok(format!("noise 0: {:.1}%, noise {shipped}: {:.1}% (bait count {})", q * 100.0, r * 100.0, noisy.plan.bait_count))
}

fn c4_trr() -> Outcome {
    let mut double_flips = 0;
    let mut multi_hits = 0;
    for seed in 1..=100u64 {
        let mut cfg = load("trr.toml");
        cfg.seed = seed;
        let mut os = cfg.boot().map_err(|e| e.to_string())?;
        let g = *os.dram.geometry();
        let (_, end) = cfg.profile_region();
        let rows = (end / u64::from(g.row_size_bytes) / u64::from(g.banks)) as u32;
        let mut rng = cfg.seeds().stream("trr-target");
        let bank = rng.random_range(0..g.banks);
        let victim = rng.random_range(11..rows - 10);
        let around = |n: u32| {
            HammerPattern::new(bank, aggressor_offsets(n).iter().map(|o| (i64::from(victim) + o) as u32))
        };
        double_flips += os.dram.hammer(&around(2)).map_err(|e| e.to_string())?.len();
        if !os.dram.hammer(&around(11)).map_err(|e| e.to_string())?.is_empty() {
            multi_hits += 1;
        }
    }
    check(double_flips == 0, format!("double-sided caused {double_flips} flips"))?;
    check(multi_hits >= 95, format!("11-sided flipped in {multi_hits}/100 runs"))?;
    Ok(format!("double-sided 0 flips; 11-sided flipped in {multi_hits}/100 runs"))
}

fn c5_sweep() -> Outcome {
    let cfg = load("ddr3-sweep.toml");
    let r = scenario::run_profile(&cfg).map_err(|e| e.to_string())?;
    let n = r.map.len();
    check(r.map.trials == 100, "expected 100 sweeps")?;
    check((1500..=1834).contains(&n), format!("{n} unique flippy bits"))?;
    let rare = r.map.entries.iter().filter(|e| e.count <= 5).count() as f64 / n as f64;
    check(rare >= 0.70, format!("only {:.1}% flip <=5 times", rare * 100.0))?;
    Ok(format!("{n} unique flippy bits, {:.1}% flip <=5/100", rare * 100.0))
}

fn c6_gadgets() -> Outcome {
    let mut lines = Vec::new();
    let mut by_var: BTreeMap<(String, String), gadgetscan::GadgetReport> = BTreeMap::new();
    for (file, src) in CORPUS {
        let reports = gadgetscan::scan(src).map_err(|e| format!("{file}: {e}"))?;
        lines.extend(golden_lines(file, &reports));
        for r in reports {
            by_var.insert((file.to_string(), r.variable.clone()), r);
        }
    }
    let want: Vec<&str> = CORPUS_EXPECTED.lines().filter(|l| !l.trim().is_empty()).collect();
    check(lines == want, format!("corpus differs from golden file:\n{}", lines.join("\n")))?;
    let get = |f: &str, v: &str| by_var.get(&(f.to_string(), v.to_string())).cloned().ok_or(format!("{f} {v} missing"));
    for (f, v) in [
        ("listing04_sudo.c", "matched"),
        ("listing06_openssh_result.c", "result"),
        ("listing07_bellcore.c", "ret"),
        ("listing07_bellcore.c", "zero"),
    ] {
        let r = get(f, v)?;
        check(r.hardness == Hardness::AnyBit && r.exploitable_flips == 32 && r.width_bits == 32, format!("{f} {v}"))?;
    }
    let auth = get("listing05_openssh_authenticated.c", "authenticated")?;
    check(auth.hardness == Hardness::LsbOnly && auth.exploitable_flips == 1, "openssh authenticated")?;
    let mysql = get("listing08_mysql.c", "first")?;
    check(mysql.exploitable_flips == 1, "mysql first")?;
    let pat = get("listing14_pattern.c", "matched")?;
    let pop = 0x69d6_1fc8u32.count_ones();
    check(pop == 17, "popcount oracle")?;
    check(pat.hardness == Hardness::ExactPattern { min_flips: Some(pop) } && pat.exploitable_flips == 0, "pattern")?;
    for p in victims::PRESETS {
        let v = victims::preset(p).unwrap();
        let t = v.target();
        let (h, _) = gadgetscan::classify(t.width_bits, t.init_value, t.check);
        let want = if p == "openssh-authenticated" || p == "mysql" { Hardness::LsbOnly } else { Hardness::AnyBit };
        check(h == want, format!("preset {p} classified {h}"))?;
    }
    Ok(format!("{} findings match the golden file; pattern needs {pop} flips", lines.len()))
}

fn c7_tls() -> Outcome {
    let mut parts = Vec::new();
    for name in ["tls-stack.toml", "tls-register.toml"] {
        let cfg = load(name);
        let r = scenario::run_attack(&cfg).map_err(|e| format!("{name}: {e}"))?;
        check(r.records.len() == 500, format!("{name}: {} trials", r.records.len()))?;
        let wins: Vec<_> = r.records.iter().filter(|t| t.outcome == AuthOutcome::Success).collect();
        check(!wins.is_empty(), format!("{name}: no SUCCESS"))?;
        for t in &wins {
            let (a, b) = t.window_ns;
            check(
                t.in_window && !t.flipped_bits.is_empty() && t.target_flip_ns.iter().all(|&x| a <= x && x <= b),
                format!("{name}: trial {} succeeded without a flip in the window", t.trial),
            )?;
        }
        let co = r.summary.correct_baiting;
        check((0.15..=0.35).contains(&co), format!("{name}: co-location {co:.3}"))?;
        parts.push(format!("{name}: {} SUCCESS, co-location {:.1}%", wins.len(), co * 100.0));
    }
    Ok(parts.join("; "))
}

fn c8_relaunch() -> Outcome {
    let cfg = load("relaunch.toml");
    let r = scenario::run_relaunch(&cfg).map_err(|e| e.to_string())?;
    let n = r.loops.len() as f64;
    check(n == 10_000.0, "expected 10000 loops")?;
    let m = r.model_success;
    let se = (m * (1.0 - m) / n).sqrt();
    let z = (r.success_rate - m) / se;
    check(z.abs() <= 2.0, format!("rate {:.4} vs model {m:.4} ({z:.2} SE)", r.success_rate))?;
    Ok(format!("rate {:.4} vs model {m:.4} ({z:+.2} SE, p per launch {:.5})", r.success_rate, r.model.p))
}

fn c9_memwalk() -> Outcome {
    let det = DetectorConfig::default();
    let clean = TraceParams::default();
    let noisy = TraceParams { noise_sd: 0.1 * clean.base_latency as f64, outlier_rate: 0.1, ..clean };
    let mut rng = SeedTree::new(9).stream("memwalk");
    let mut contiguous = [0u32; 2];
    for _ in 0..100 {
        let n = 512;
        let mut frames: Vec<u64> = (0..n as u64).map(|i| i * 5 + 2).collect();
        frames.shuffle(&mut rng);
        for i in 1..n {
            if frames[i] == frames[i - 1] + 1 {
                frames[i] += 1 << 20;
            }
        }
        let len = rng.random_range(16..=128usize);
        let start = rng.random_range(1..n - len);
        let base = rng.random_range(10_000_000..20_000_000u64);
        for k in 0..len {
            frames[start + k] = base + k as u64;
        }
        let t = trace_from_frames(&frames, &clean, &mut rng).map_err(|e| e.to_string())?;
        if detect_contiguous(&t, &det) == vec![(start, len)] {
            contiguous[0] += 1;
        }
        let reps: Vec<TimingTrace> =
            (0..9).map(|_| trace_from_frames(&frames, &noisy, &mut rng)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        if detect_contiguous(&median_trace(&reps, det.outlier_cutoff).map_err(|e| e.to_string())?, &det) == vec![(start, len)] {
            contiguous[1] += 1;
        }
    }
    let cfg = load("relaunch.toml");
    let mut dram = cfg.dram().map_err(|e| e.to_string())?;
    let g = *dram.geometry();
    let rs = u64::from(g.row_size_bytes);
    let blocks = g.capacity() / rs;
    let threshold = (dram.config().fast_latency + dram.config().slow_latency) / 2;
    let jitter = 0.1 * dram.config().fast_latency as f64;
    let mut banks = [0u32; 2];
    for trial in 0..100 {
        let mut ids: Vec<u64> = (1..blocks).collect();
        ids.shuffle(&mut rng);
        let cands: Vec<u64> = ids[..64].iter().map(|b| b * rs + 128).collect();
        let exact = |part: &stackflip::memwalk::BankPartition, dram: &stackflip::dram::Dram| {
            let bank = |a: u64| dram.map_phys_to_dram(a).unwrap().bank;
            let pure = part.groups.iter().all(|gr| gr.iter().all(|&a| bank(a) == bank(gr[0])));
            let distinct: std::collections::BTreeSet<u32> = part.groups.iter().map(|gr| bank(gr[0])).collect();
            let base_ok = part.same_as_base.iter().all(|&a| bank(a) == bank(0));
            let all_base = cands.iter().filter(|&&a| bank(a) == bank(0)).count() == part.same_as_base.len();
            pure && distinct.len() == part.groups.len() && base_ok && all_base
        };
        let p = detect_same_bank(&mut dram, 0, &cands, threshold).map_err(|e| e.to_string())?;
        if exact(&p, &dram) {
            banks[0] += 1;
        }
        let p = {
            let mut noisy_probe = NoisyProbe { inner: &mut dram, sd: jitter, rng: SeedTree::new(9).indexed("jitter", trial) };
            let mut probe = MedianProbe { inner: &mut noisy_probe, repeats: 5 };
            detect_same_bank(&mut probe, 0, &cands, threshold).map_err(|e| e.to_string())?
        };
        if exact(&p, &dram) {
            banks[1] += 1;
        }
    }
    check(contiguous[0] == 100 && banks[0] == 100, format!("noise 0: regions {}/100, banks {}/100", contiguous[0], banks[0]))?;
    check(contiguous[1] >= 95 && banks[1] >= 95, format!("10% noise: regions {}/100, banks {}/100", contiguous[1], banks[1]))?;
    Ok(format!(
        "noise 0: {}/100 regions, {}/100 partitions; 10% noise: {}/100 regions, {}/100 partitions",
        contiguous[0], banks[0], contiguous[1], banks[1]
    ))
}

fn run_cli(args: &[&str], out: &Path) -> Result<CliRun, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stackflip"));
    cmd.args(args).arg("--out").arg(out);
    let o = cmd.output().map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    let mut files = BTreeMap::new();
    if let Ok(rd) = std::fs::read_dir(out) {
        for e in rd.flatten() {
            files.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap());
        }
    }
    Ok((o.stdout, files))
}

fn run_plain(args: &[&str]) -> Result<(Vec<u8>, i32), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_stackflip")).args(args).output().map_err(|e| e.to_string())?;
    Ok((o.stdout, o.status.code().unwrap_or(-1)))
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sc = |f: &str| scenarios().join(f).to_string_lossy().into_owned();
    let (relaunch, sudo) = (sc("relaunch.toml"), sc("sudo.toml"));
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("profile", vec!["profile", "-c", &relaunch]),
        ("calibrate", vec!["calibrate", "-c", &sudo]),
        ("attack", vec!["attack", "-c", &sudo, "--trials", "60"]),
        ("relaunch", vec!["relaunch", "-c", &relaunch, "--trials", "300"]),
        ("mem-dump", vec!["mem-dump", "-c", &sudo]),
    ];
    let mut checked = 0;
    for (name, args) in &runs {
        let a = run_cli(args, &tmp.path().join(format!("{name}-a")))?;
        let b = run_cli(args, &tmp.path().join(format!("{name}-b")))?;
        check(!a.1.is_empty(), format!("{name} wrote nothing"))?;
        check(a == b, format!("{name} output differs between runs"))?;
        checked += 1;
    }
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/corpus");
    let files: Vec<String> = CORPUS.iter().map(|(f, _)| corpus.join(f).to_string_lossy().into_owned()).collect();
    let mut scan: Vec<&str> = vec!["scan", "--json", "--advice"];
    scan.extend(files.iter().map(String::as_str));
    let trials = tmp.path().join("attack-a/trials.jsonl").to_string_lossy().into_owned();
    for args in [scan, vec!["fuzz", "--check", "==0x69d61fc8"], vec!["report", &trials]] {
        let a = run_plain(&args)?;
        let b = run_plain(&args)?;
        check(!a.0.is_empty(), format!("{} printed nothing", args[0]))?;
        check(a == b, format!("{} output differs between runs", args[0]))?;
        checked += 1;
    }
    let (_, code) = run_plain(&["scan", &files[1]])?;
    check(code == 1, "scan must exit 1 on ANY_BIT")?;
    Ok(format!("{checked} subcommands byte-identical across two runs"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "formula fidelity", c1_formula, 1),
        (2, "ASLR entropy", c2_aslr, 10),
        (3, "LIFO baiting", c3_baiting, 30),
        (4, "TRR bypass", c4_trr, 30),
        (5, "reproducibility sweep", c5_sweep, 120),
        (6, "gadget classifications", c6_gadgets, 1),
        (7, "end-to-end TLS", c7_tls, 120),
        (8, "relaunch closed form", c8_relaunch, 60),
        (9, "detector accuracy", c9_memwalk, 30),
        (10, "determinism", c10_determinism, 600),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f, limit) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let r = f();
        let dt = t.elapsed();
        let over = dt > Duration::from_secs(limit);
        let (tag, detail) = match (&r, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; took {:.1}s, budget {limit}s", dt.as_secs_f64())),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("criterion {n:>2} {name:<24} {tag} ({:.2}s) {detail}", dt.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
