use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use stackflip::config::{ConfigError, ScenarioConfig};
use stackflip::attacker::AttackSummary;
use stackflip::gadgetscan::{self, Hardness};
use stackflip::report::{self, TrialStats};
use stackflip::rng::SeedTree;
use stackflip::scenario::{self, ScenarioError};
use stackflip::victims::{self, Check, Timing};

#[derive(Parser)]
#[command(name = "stackflip", version, about = "Rowhammer attack simulator for stack and register variables")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario trial count.
    #[arg(long)]
    trials: Option<u32>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep the profiling region and write the flip map and a heatmap CSV.
    Profile(Common),
    /// Measure the bait count for the scenario's victim.
    Calibrate(Common),
    /// Profile, calibrate, then run the online attack for `trials` launches.
    Attack(Common),
    /// Run `trials` relaunch loops and compare with the geometric model.
    Relaunch(Common),
    /// Spawn the victim and dump its memory while it waits.
    MemDump(Common),
    /// Find gadgets in C sources. Exits with 1 if any ANY_BIT gadget is found.
    Scan {
        files: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
        /// Add rewrite advice to each finding.
        #[arg(long)]
        advice: bool,
        /// Seed for generated constants in the advice.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Enumerate the flips that make a check pass.
    Fuzz {
        #[arg(long, default_value_t = 32)]
        width: u32,
        #[arg(long, default_value = "0", value_parser = parse_u64)]
        init: u64,
        /// e.g. "!=0" or "==0x69d61fc8"
        #[arg(long, allow_hyphen_values = true)]
        check: Check,
    },
    /// Summarise a trials.jsonl file written by `attack`.
    Report { trials: PathBuf },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{0}")]
    Other(String),
}

fn parse_u64(s: &str) -> Result<u64, String> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    }
    .map_err(|e| e.to_string())
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io { path: dir.into(), msg: e.to_string() })?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io { path: path.clone(), msg: e.to_string() })?;
    Ok(path)
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io { path: path.into(), msg: e.to_string() })
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn load(c: &Common) -> Result<ScenarioConfig, CliError> {
    let mut cfg = ScenarioConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.cmd {
        Cmd::Profile(c) => {
            let cfg = load(&c)?;
            let r = scenario::run_profile(&cfg)?;
            write(&c.out, "flipmap.txt", &r.map.to_text())?;
            write(&c.out, "heatmap.csv", &r.map.heatmap_csv())?;
            write(&c.out, "estimate.json", &json(&r.estimate))?;
            let hist = r.map.count_histogram();
            let rare: usize = hist.iter().take(6).sum();
            println!("unique flippy bits: {}", r.map.len());
            println!("flippy pages: {}", r.map.flippy_pages());
            if !r.map.is_empty() {
                println!("flipping <=5 of {} sweeps: {:.1}%", r.map.trials, 100.0 * rare as f64 / r.map.len() as f64);
            }
            println!("fault probability: {:.4}%", r.estimate.probability_pct);
            println!("simulated time: {:.3} s", r.sim_time_ns as f64 / 1e9);
        }
        Cmd::Calibrate(c) => {
            let cfg = load(&c)?;
            let cal = scenario::run_calibrate(&cfg)?;
            write(&c.out, "calibration.json", &json(&cal))?;
            match cal.bait_count() {
                Some(b) => println!("bait_count {b} ({:.1}% of {} spawns)", 100.0 * cal.mode_rate(), cal.spawns()),
                None => println!("target never found in {} spawns", cal.spawns()),
            }
            if let Some(n) = cal.nibble() {
                println!("target low nibble {n:#x}");
            }
        }
        Cmd::Attack(c) => {
            let cfg = load(&c)?;
            let r = scenario::run_attack(&cfg)?;
            write(&c.out, "trials.jsonl", &report::to_jsonl(&r.records))?;
            write(&c.out, "summary.csv", &format!("{}\n{}\n", AttackSummary::CSV_HEADER, r.summary.csv_row()))?;
            write(&c.out, "plan.json", &json(&r.plan))?;
            println!("flippy frame {} covering {} slots, bait_count {}", r.plan.flippy_frame, r.plan.covered_slots.len(), r.plan.bait_count);
            println!(
                "{} trials: {} SUCCESS, co-located {:.1}%",
                r.summary.trials,
                r.summary.successes,
                100.0 * r.summary.correct_baiting
            );
        }
        Cmd::Relaunch(c) => {
            let cfg = load(&c)?;
            let r = scenario::run_relaunch(&cfg)?;
            write(&c.out, "relaunch.jsonl", &report::to_jsonl(&r.loops))?;
            let csv = format!(
                "loops,budget,success_rate,model_p,model_success,online_sim_time\n{},{},{:.4},{:.6},{:.4},{:.3}\n",
                r.loops.len(),
                r.budget,
                r.success_rate,
                r.model.p,
                r.model_success,
                r.online_sim_time_ns as f64 / 1e9
            );
            write(&c.out, "relaunch_summary.csv", &csv)?;
            print!("{csv}");
        }
        Cmd::MemDump(c) => {
            let cfg = load(&c)?;
            let mut os = cfg.boot()?;
            let program = cfg.program()?;
            let mut dump = String::new();
            victims::run(&mut os, &program, false, Timing::InWindow, |os, w| {
                dump = os.mem_dump(w.pid)?;
                Ok(())
            })
            .map_err(|e| CliError::Other(e.to_string()))?;
            write(&c.out, "memdump.txt", &dump)?;
            print!("{dump}");
        }
        Cmd::Scan { files, json: as_json, advice, seed } => {
            if files.is_empty() {
                return Err(CliError::Other("no input files".into()));
            }
            let mut rng = SeedTree::new(seed).stream("advice");
            let mut any_bit = false;
            let mut all = Vec::new();
            for f in &files {
                let src = read(f)?;
                let reports = gadgetscan::scan(&src).map_err(|e| CliError::Other(format!("{}:{e}", f.display())))?;
                any_bit |= reports.iter().any(|r| r.hardness == Hardness::AnyBit);
                let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                for r in &reports {
                    let adv = advice.then(|| gadgetscan::suggest(r, &mut rng));
                    if !as_json {
                        println!(
                            "{}:{}:{}: {} `{}` {} {}/{} (init {:#x}, needs {})",
                            f.display(),
                            r.line,
                            r.column,
                            r.function,
                            r.variable,
                            r.hardness,
                            r.exploitable_flips,
                            r.width_bits,
                            r.init_value,
                            r.check
                        );
                        if let Some(a) = &adv {
                            println!("  advice: {}", a.summary);
                            for n in &a.notes {
                                println!("  note: {n}");
                            }
                        }
                    }
                    all.push(serde_json::json!({ "file": name, "report": r, "advice": adv }));
                }
                if !as_json && reports.is_empty() {
                    println!("{}: no gadgets", f.display());
                }
            }
            if as_json {
                print!("{}", json(&all));
            }
            return Ok(if any_bit { ExitCode::from(1) } else { ExitCode::SUCCESS });
        }
        Cmd::Fuzz { width, init, check } => {
            if width == 0 || width > 64 {
                return Err(CliError::Other("width must be in 1..=64".into()));
            }
            let (hardness, r) = gadgetscan::classify(width, init, check);
            println!("hardness: {hardness}");
            println!("single flips: {}/{} {:?}", r.single_flips.len(), width, r.single_flips);
            match r.min_flips {
                Some(n) => println!("min flips: {n}"),
                None => println!("min flips: unreachable"),
            }
        }
        Cmd::Report { trials } => {
            let recs = report::read_trials(&read(&trials)?).map_err(|e| CliError::Other(format!("{}: {e}", trials.display())))?;
            print!("{}", TrialStats::of(&recs).to_csv());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
