//! Declarative scenario files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacker::PlanParams;
use crate::dram::{Dram, DramConfig, DramGeometry, FlipProfile, ProfileParams};
use crate::osmodel::{Os, OsConfig};
use crate::rng::{streams, SeedTree};
use crate::victims::{self, GadgetProgram};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Field { path: String, msg: String },
    #[error("parse error: {0}")]
    Syntax(String),
    #[error("{path}: cannot read {file}: {msg}")]
    File { path: String, file: PathBuf, msg: String },
}

fn field(path: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field { path: path.into(), msg: msg.into() }
}

/// Where the device's flip profile comes from. Exactly one of the three.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSource {
    pub preset: Option<String>,
    pub path: Option<PathBuf>,
    pub params: Option<ProfileParams>,
}

impl Default for ProfileSource {
    fn default() -> Self {
        Self { preset: Some("ddr3-default".into()), path: None, params: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSource {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
}

impl Default for VictimSource {
    fn default() -> Self {
        Self { preset: Some("sudo".into()), file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub plan: PlanParams,
    /// Sweeps in the offline profile.
    #[serde(default = "default_profile_trials")]
    pub profile_trials: u32,
    /// Aggressor rows per profiling pattern.
    #[serde(default = "default_sides")]
    pub profile_sides: u32,
    /// Reproducibility cut applied to the written flip map.
    #[serde(default)]
    pub profile_threshold: f64,
    /// Low nibble and width of the target assumed by the fault estimate.
    #[serde(default = "default_nibble")]
    pub estimate_nibble: u64,
    /// Physical byte range the attacker profiles; defaults to the profile
    /// generator's region, else the first 8 MiB.
    pub profile_region: Option<(u64, u64)>,
    #[serde(default = "default_spawns")]
    pub calibration_spawns: u32,
    #[serde(default = "default_release")]
    pub bait_release: usize,
    /// Overrides the calibrated bait count.
    pub bait_count: Option<usize>,
    #[serde(default = "default_budget")]
    pub relaunch_budget: u32,
    /// Share of memory the attacker may profile unnoticed.
    #[serde(default = "default_fraction")]
    pub stealth_fraction: f64,
}

fn default_profile_trials() -> u32 {
    10
}
fn default_sides() -> u32 {
    2
}
fn default_nibble() -> u64 {
    8
}
fn default_spawns() -> u32 {
    100
}
fn default_release() -> usize {
    500
}
fn default_budget() -> u32 {
    256
}
fn default_fraction() -> f64 {
    0.001
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            plan: PlanParams::default(),
            profile_trials: default_profile_trials(),
            profile_sides: default_sides(),
            profile_threshold: 0.0,
            estimate_nibble: default_nibble(),
            profile_region: None,
            calibration_spawns: default_spawns(),
            bait_release: default_release(),
            bait_count: None,
            relaunch_budget: default_budget(),
            stealth_fraction: default_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default)]
    pub geometry: DramGeometry,
    #[serde(default)]
    pub dram: DramConfig,
    #[serde(default)]
    pub profile: ProfileSource,
    #[serde(default)]
    pub os: OsConfig,
    #[serde(default)]
    pub victim: VictimSource,
    #[serde(default)]
    pub attack: AttackConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_trials() -> u32 {
    100
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: "config".into(),
            file: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.message().to_string()))?;
        let mut cfg: ScenarioConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            field(if path == "." { "config" } else { &path }, e.into_inner().message().to_string())
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.geometry.validate().map_err(|e| field("geometry", e.to_string()))?;
        self.os.validate().map_err(|e| field("os", e.to_string()))?;
        self.attack.plan.validate().map_err(|e| field("attack.plan", e.to_string()))?;
        let p = &self.profile;
        let sources = [p.preset.is_some(), p.path.is_some(), p.params.is_some()].iter().filter(|b| **b).count();
        if sources != 1 {
            return Err(field("profile", "set exactly one of preset, path, params"));
        }
        if let Some(name) = &p.preset {
            if ProfileParams::preset(name).is_none() {
                return Err(field("profile.preset", format!("unknown preset `{name}`")));
            }
        }
        if let Some(params) = &p.params {
            params.validate().map_err(|e| field("profile.params", e.to_string()))?;
        }
        if let Some(path) = &p.path {
            if !self.resolve(path).is_file() {
                return Err(field("profile.path", format!("{} does not exist", path.display())));
            }
        }
        let v = &self.victim;
        match (&v.preset, &v.file) {
            (Some(name), None) => {
                victims::preset(name).map_err(|e| field("victim.preset", e.to_string()))?;
            }
            (None, Some(file)) => {
                if !self.resolve(file).is_file() {
                    return Err(field("victim.file", format!("{} does not exist", file.display())));
                }
            }
            _ => return Err(field("victim", "set exactly one of preset, file")),
        }
        let cap = self.geometry.capacity();
        if let Some((a, b)) = self.attack.profile_region {
            if a >= b || b > cap {
                return Err(field("attack.profile_region", format!("must satisfy start < end <= {cap}")));
            }
        }
        if !(0.0..=1.0).contains(&self.attack.profile_threshold) {
            return Err(field("attack.profile_threshold", "must be in [0, 1]"));
        }
        if self.attack.profile_sides == 0 {
            return Err(field("attack.profile_sides", "must be > 0"));
        }
        if self.attack.profile_trials == 0 {
            return Err(field("attack.profile_trials", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.attack.stealth_fraction) {
            return Err(field("attack.stealth_fraction", "must be in [0, 1]"));
        }
        if self.attack.bait_release == 0 {
            return Err(field("attack.bait_release", "must be > 0"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    pub fn program(&self) -> Result<GadgetProgram, ConfigError> {
        match (&self.victim.preset, &self.victim.file) {
            (Some(name), _) => victims::preset(name).map_err(|e| field("victim.preset", e.to_string())),
            (None, Some(file)) => {
                let path = self.resolve(file);
                let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::File {
                    path: "victim.file".into(),
                    file: path.clone(),
                    msg: e.to_string(),
                })?;
                GadgetProgram::from_toml(&text).map_err(|e| field("victim.file", e.to_string()))
            }
            (None, None) => Err(field("victim", "no victim")),
        }
    }

    pub fn flip_profile(&self) -> Result<FlipProfile, ConfigError> {
        let p = &self.profile;
        if let Some(path) = &p.path {
            let path = self.resolve(path);
            let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::File {
                path: "profile.path".into(),
                file: path.clone(),
                msg: e.to_string(),
            })?;
            let prof = FlipProfile::from_text(&text).map_err(|e| field("profile.path", e.to_string()))?;
            prof.validate(&self.geometry).map_err(|e| field("profile.path", e.to_string()))?;
            return Ok(prof);
        }
        let params = match (&p.preset, &p.params) {
            (Some(name), _) => ProfileParams::preset(name).ok_or_else(|| field("profile.preset", "unknown preset"))?,
            (None, Some(params)) => params.clone(),
            _ => return Err(field("profile", "no profile source")),
        };
        params
            .generate(&self.geometry, &crate::dram::BankInterleaved, &mut self.seeds().stream(streams::PROFILE))
            .map_err(|e| field("profile", e.to_string()))
    }

    /// Generator region of the profile, used as the default profiling region.
    pub fn profile_region(&self) -> (u64, u64) {
        let cap = self.geometry.capacity();
        if let Some(r) = self.attack.profile_region {
            return r;
        }
        let gen = self
            .profile
            .preset
            .as_deref()
            .and_then(ProfileParams::preset)
            .or_else(|| self.profile.params.clone())
            .and_then(|p| p.region);
        gen.unwrap_or((0, (8u64 << 20).min(cap)))
    }

    pub fn dram(&self) -> Result<Dram, ConfigError> {
        Dram::new(self.geometry, self.dram, self.flip_profile()?, self.seeds().stream(streams::DRAM))
            .map_err(|e| field("dram", e.to_string()))
    }

    /// Boot a fresh machine for this scenario.
    pub fn boot(&self) -> Result<Os, ConfigError> {
        Os::boot(self.dram()?, self.os, &self.seeds()).map_err(|e| field("os", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ScenarioConfig, ConfigError> {
        ScenarioConfig::parse(s, Path::new("."))
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse("seed = 7\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.geometry, DramGeometry::default());
        assert_eq!(c.victim.preset.as_deref(), Some("sudo"));
        assert_eq!(c.attack.plan.n_sided, 11);
    }

    #[test]
    fn seed_is_mandatory() {
        let e = parse("trials = 3\n").unwrap_err().to_string();
        assert!(e.contains("seed"), "{e}");
    }

    #[test]
    fn errors_carry_field_paths() {
        let e = parse("seed = 1\n[attack.plan]\nn_sidd = 3\n").unwrap_err().to_string();
        assert!(e.starts_with("attack.plan"), "{e}");
        let e = parse("seed = 1\n[geometry]\nbanks = 0\nrows_per_bank = 4\n").unwrap_err().to_string();
        assert!(e.starts_with("geometry"), "{e}");
        let e = parse("seed = 1\n[os]\nplacement_noise = 2.0\n").unwrap_err().to_string();
        assert!(e.starts_with("os"), "{e}");
        let e = parse("seed = 1\n[victim]\npreset = \"nope\"\n").unwrap_err().to_string();
        assert!(e.starts_with("victim.preset"), "{e}");
        let e = parse("seed = 1\n[profile]\npath = \"missing.txt\"\n").unwrap_err().to_string();
        assert!(e.starts_with("profile"), "{e}");
        let e = parse("seed = 1\n[victim]\nfile = \"missing.toml\"\n").unwrap_err().to_string();
        assert!(e.starts_with("victim.file"), "{e}");
    }

    #[test]
    fn same_seed_same_machine() {
        let c = parse("seed = 3\n[geometry]\nbanks = 2\nrows_per_bank = 32\n").unwrap();
        let a = c.boot().unwrap();
        let b = c.boot().unwrap();
        assert_eq!(a.free_list().iter().collect::<Vec<_>>(), b.free_list().iter().collect::<Vec<_>>());
        assert_eq!(a.dram.profile(), b.dram.profile());
    }
}
