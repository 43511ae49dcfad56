//! Browser demo. The plain functions do the work and are tested natively;
//! the `#[wasm_bindgen]` wrappers hand JSON strings to the page.

use rand::Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use stackflip::attacker::aggressor_offsets;
use stackflip::config::ScenarioConfig;
use stackflip::dram::HammerPattern;
use stackflip::gadgetscan;
use stackflip::victims::{self, Check};

const SLOTS: usize = 256;

fn small_machine(seed: u64, extra: &str) -> Result<ScenarioConfig, String> {
    let text = format!("seed = {seed}\n[geometry]\nbanks = 8\nrows_per_bank = 256\n{extra}");
    ScenarioConfig::parse(&text, std::path::Path::new(".")).map_err(|e| e.to_string())
}

/// Counts how often the victim's target lands in each 16-byte slot of its
/// page over `spawns` launches.
pub fn aslr_histogram(seed: u64, victim: &str, spawns: u32) -> Result<Vec<u64>, String> {
    let cfg = small_machine(seed, "")?;
    let mut os = cfg.boot().map_err(|e| e.to_string())?;
    let program = victims::preset(victim).map_err(|e| e.to_string())?;
    let depth = program.resident_depth();
    let mut counts = vec![0u64; SLOTS];
    for _ in 0..spawns {
        let pid = os.spawn(&program.spawn, depth).map_err(|e| e.to_string())?;
        let addr = os.process(pid).map_err(|e| e.to_string())?.stack_addr(depth);
        counts[(addr % 4096 / 16) as usize] += 1;
        os.exit(pid).map_err(|e| e.to_string())?;
        os.reap(pid);
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrrRun {
    pub bank: u32,
    pub victim_row: u32,
    pub double_sided: usize,
    pub many_sided: usize,
}

/// Hammers a random row of a TRR-protected module double-sided, then with
/// `sides` aggressors, once per seed in `seed..seed + runs`.
pub fn trr_compare(seed: u64, runs: u32, sides: u32) -> Result<Vec<TrrRun>, String> {
    if !(2..=31).contains(&sides) {
        return Err("sides must be in 2..=31".into());
    }
    let trr = "[dram.trr]\nenabled = true\nsampler_capacity = 4\nmac = 50000\n[profile]\npreset = \"ddr4-dense\"\n";
    let mut out = Vec::new();
    for s in seed..seed + u64::from(runs) {
        let cfg = small_machine(s, trr)?;
        let mut os = cfg.boot().map_err(|e| e.to_string())?;
        let g = *os.dram.geometry();
        let mut rng = cfg.seeds().stream("trr-target");
        let bank = rng.random_range(0..g.banks);
        let victim_row = rng.random_range(sides + 1..g.rows_per_bank - sides);
        let around = |n: u32| HammerPattern::new(bank, aggressor_offsets(n).iter().map(|o| (i64::from(victim_row) + o) as u32));
        let double_sided = os.dram.hammer(&around(2)).map_err(|e| e.to_string())?.len();
        let many_sided = os.dram.hammer(&around(sides)).map_err(|e| e.to_string())?.len();
        out.push(TrrRun { bank, victim_row, double_sided, many_sided });
    }
    Ok(out)
}

/// Which single flips of `init` pass `check`, plus the gadget class.
pub fn explore_check(width: u32, init: u64, check: &str) -> Result<Value, String> {
    if width == 0 || width > 64 {
        return Err("width must be in 1..=64".into());
    }
    let check = check.parse::<Check>().map_err(|e| e.to_string())?;
    let (hardness, r) = gadgetscan::classify(width, init, check);
    Ok(json!({
        "hardness": hardness.to_string(),
        "single_flips": r.single_flips,
        "min_flips": r.min_flips,
        "width": width,
    }))
}

fn js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = aslrHistogram)]
pub fn aslr_histogram_js(seed: u64, victim: &str, spawns: u32) -> Result<String, JsValue> {
    js(aslr_histogram(seed, victim, spawns).map(|c| json!(c)))
}

#[wasm_bindgen(js_name = trrCompare)]
pub fn trr_compare_js(seed: u64, runs: u32, sides: u32) -> Result<String, JsValue> {
    js(trr_compare(seed, runs, sides).map(|rs| {
        json!(rs
            .iter()
            .map(|r| json!({"bank": r.bank, "row": r.victim_row, "double": r.double_sided, "many": r.many_sided}))
            .collect::<Vec<_>>())
    }))
}

#[wasm_bindgen(js_name = exploreCheck)]
pub fn explore_check_js(width: u32, init: &str, check: &str) -> Result<String, JsValue> {
    let init = match init.trim().strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => init.trim().parse(),
    }
    .map_err(|e| JsValue::from_str(&format!("init: {e}")))?;
    js(explore_check(width, init, check))
}

#[wasm_bindgen(js_name = victimPresets)]
pub fn victim_presets() -> String {
    json!(victims::PRESETS).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_keeps_one_nibble() {
        let c = aslr_histogram(3, "sudo", 2000).unwrap();
        assert_eq!(c.iter().sum::<u64>(), 2000);
        assert!(c.iter().filter(|&&n| n > 0).count() > 200);
        assert!(aslr_histogram(3, "nope", 10).is_err());
        assert_eq!(c, aslr_histogram(3, "sudo", 2000).unwrap());
    }

    #[test]
    fn trr_stops_double_sided_only() {
        let runs = trr_compare(1, 5, 11).unwrap();
        assert_eq!(runs.len(), 5);
        assert!(runs.iter().all(|r| r.double_sided == 0));
        assert!(runs.iter().filter(|r| r.many_sided > 0).count() >= 4);
        assert!(trr_compare(1, 1, 1).is_err());
    }

    #[test]
    fn explorer_matches_classes() {
        let v = explore_check(32, 0, "!=0").unwrap();
        assert_eq!(v["hardness"], "ANY_BIT");
        assert_eq!(v["single_flips"].as_array().unwrap().len(), 32);
        let v = explore_check(32, 0, "==0x69d61fc8").unwrap();
        assert_eq!(v["min_flips"], 17);
        assert!(explore_check(0, 0, "!=0").is_err());
        assert!(explore_check(8, 0, "<3").is_err());
    }
}
