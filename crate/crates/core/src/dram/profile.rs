//! Per-cell flip susceptibility.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::geometry::{AddressMapping, CellAddress, DramGeometry};
use super::DramError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FlipDirection {
    #[serde(rename = "1->0")]
    OneToZero,
    #[serde(rename = "0->1")]
    ZeroToOne,
}

impl FlipDirection {
    /// Bit value a cell must hold for this flip to be possible.
    pub fn required_bit(self) -> bool {
        matches!(self, FlipDirection::OneToZero)
    }
}

impl fmt::Display for FlipDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlipDirection::OneToZero => "1->0",
            FlipDirection::ZeroToOne => "0->1",
        })
    }
}

impl FromStr for FlipDirection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1->0" => Ok(FlipDirection::OneToZero),
            "0->1" => Ok(FlipDirection::ZeroToOne),
            other => Err(format!("bad direction `{other}` (want 1->0 or 0->1)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfiledCell {
    pub bit: u32,
    pub prob: f64,
    pub direction: FlipDirection,
}

/// Cells that can flip, grouped by (bank, row). Cells not listed never flip.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlipProfile {
    rows: BTreeMap<(u32, u32), Vec<ProfiledCell>>,
    len: usize,
}

impl FlipProfile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cell: CellAddress, prob: f64, direction: FlipDirection) -> Result<(), DramError> {
        if !(prob > 0.0 && prob <= 1.0) {
            return Err(DramError::Profile(format!("flip probability {prob} outside (0, 1]")));
        }
        let row = self.rows.entry((cell.bank, cell.row)).or_default();
        match row.binary_search_by_key(&cell.bit, |c| c.bit) {
            Ok(i) => row[i] = ProfiledCell { bit: cell.bit, prob, direction },
            Err(i) => {
                row.insert(i, ProfiledCell { bit: cell.bit, prob, direction });
                self.len += 1;
            }
        }
        Ok(())
    }

    pub fn get(&self, cell: CellAddress) -> Option<&ProfiledCell> {
        let row = self.rows.get(&(cell.bank, cell.row))?;
        row.binary_search_by_key(&cell.bit, |c| c.bit).ok().map(|i| &row[i])
    }

    pub fn row(&self, bank: u32, row: u32) -> &[ProfiledCell] {
        self.rows.get(&(bank, row)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (CellAddress, &ProfiledCell)> {
        self.rows.iter().flat_map(|(&(bank, row), cells)| {
            cells.iter().map(move |c| (CellAddress { bank, row, bit: c.bit }, c))
        })
    }

    /// Check every cell against a geometry.
    pub fn validate(&self, g: &DramGeometry) -> Result<(), DramError> {
        for (cell, _) in self.iter() {
            if cell.bank >= g.banks || cell.row >= g.rows_per_bank || cell.bit >= g.bits_per_row() {
                return Err(DramError::Profile(format!(
                    "cell bank {} row {} bit {} outside geometry",
                    cell.bank, cell.row, cell.bit
                )));
            }
        }
        Ok(())
    }

    /// One record per line: `bank row bit direction prob`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len * 24);
        out.push_str("# bank row bit direction prob\n");
        for (cell, c) in self.iter() {
            out.push_str(&format!("{} {} {} {} {}\n", cell.bank, cell.row, cell.bit, c.direction, c.prob));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DramError> {
        let mut profile = FlipProfile::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| DramError::Parse { line: n + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            }
            let num = |s: &str, what: &str| s.parse::<u32>().map_err(|e| bad(format!("{what}: {e}")));
            let cell = CellAddress {
                bank: num(fields[0], "bank")?,
                row: num(fields[1], "row")?,
                bit: num(fields[2], "bit")?,
            };
            let direction = fields[3].parse().map_err(bad)?;
            let prob: f64 = fields[4].parse().map_err(|e| bad(format!("prob: {e}")))?;
            profile
                .insert(cell, prob, direction)
                .map_err(|e| bad(e.to_string()))?;
        }
        Ok(profile)
    }
}

/// Parameters of the synthetic profile generator.
///
/// Cells are scattered with a Poisson count per row. Each cell belongs to a
/// rarely-reproducible arm (probability drawn from a Beta shape scaled into
/// `low`) or a highly-reproducible arm (uniform in `high`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileParams {
    pub cells_per_row: f64,
    #[serde(default = "default_reproducible")]
    pub reproducible_fraction: f64,
    #[serde(default = "default_low")]
    pub low: (f64, f64),
    #[serde(default = "default_high")]
    pub high: (f64, f64),
    #[serde(default = "default_shape")]
    pub low_shape: (f64, f64),
    #[serde(default = "default_zero_to_one")]
    pub zero_to_one_fraction: f64,
    /// Physical byte range `[start, end)` to populate; whole device if absent.
    #[serde(default)]
    pub region: Option<(u64, u64)>,
}

fn default_reproducible() -> f64 {
    0.15
}
fn default_low() -> (f64, f64) {
    (0.001, 0.05)
}
fn default_high() -> (f64, f64) {
    (0.9, 1.0)
}
fn default_shape() -> (f64, f64) {
    (2.0, 4.0)
}
fn default_zero_to_one() -> f64 {
    0.5
}

impl ProfileParams {
    /// Density tuned so a 64 MiB double-sided sweep repeated 100 times sees
    /// about 1667 distinct flipping cells.
    pub fn ddr3_default() -> Self {
        Self {
            cells_per_row: 0.2563,
            reproducible_fraction: default_reproducible(),
            low: default_low(),
            high: default_high(),
            low_shape: default_shape(),
            zero_to_one_fraction: default_zero_to_one(),
            region: None,
        }
    }

    /// A very flippy module, restricted to the first 32 MiB so the profile
    /// stays small. Used by the end-to-end attack scenarios.
    pub fn ddr4_dense() -> Self {
        Self {
            cells_per_row: 128.0,
            region: Some((0, 32 << 20)),
            ..Self::ddr3_default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "ddr3-default" => Some(Self::ddr3_default()),
            "ddr4-dense" => Some(Self::ddr4_dense()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), DramError> {
        let in_unit = |(a, b): (f64, f64)| a > 0.0 && a <= b && b <= 1.0;
        if !(self.cells_per_row >= 0.0 && self.cells_per_row.is_finite()) {
            return Err(DramError::Profile("cells_per_row must be >= 0".into()));
        }
        if !in_unit(self.low) || !in_unit(self.high) {
            return Err(DramError::Profile("probability arms must satisfy 0 < lo <= hi <= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.reproducible_fraction) || !(0.0..=1.0).contains(&self.zero_to_one_fraction) {
            return Err(DramError::Profile("fractions must be in [0, 1]".into()));
        }
        if self.low_shape.0 <= 0.0 || self.low_shape.1 <= 0.0 {
            return Err(DramError::Profile("beta shape must be positive".into()));
        }
        Ok(())
    }

    pub fn generate<R: Rng + ?Sized>(
        &self,
        geometry: &DramGeometry,
        mapping: &dyn AddressMapping,
        rng: &mut R,
    ) -> Result<FlipProfile, DramError> {
        self.validate()?;
        let mut profile = FlipProfile::new();
        if self.cells_per_row == 0.0 {
            return Ok(profile);
        }
        let poisson = Poisson::new(self.cells_per_row).map_err(|e| DramError::Profile(e.to_string()))?;
        let beta = Beta::new(self.low_shape.0, self.low_shape.1).map_err(|e| DramError::Profile(e.to_string()))?;
        let row_size = u64::from(geometry.row_size_bytes);
        let (start, end) = self.region.unwrap_or((0, geometry.capacity()));
        let end = end.min(geometry.capacity());
        let bits = geometry.bits_per_row();
        let mut block = start / row_size;
        while block * row_size < end {
            let loc = mapping.to_dram(geometry, block * row_size);
            let count = poisson.sample(rng) as u64;
            for _ in 0..count {
                let bit = rng.random_range(0..bits);
                let prob = if rng.random_bool(self.reproducible_fraction) {
                    rng.random_range(self.high.0..=self.high.1)
                } else {
                    self.low.0 + (self.low.1 - self.low.0) * beta.sample(rng)
                };
                let direction = if rng.random_bool(self.zero_to_one_fraction) {
                    FlipDirection::ZeroToOne
                } else {
                    FlipDirection::OneToZero
                };
                profile.insert(CellAddress { bank: loc.bank, row: loc.row, bit }, prob, direction)?;
            }
            block += 1;
        }
        Ok(profile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::geometry::BankInterleaved;
    use crate::rng::SeedTree;

    #[test]
    fn text_round_trip() {
        let mut p = FlipProfile::new();
        p.insert(CellAddress { bank: 1, row: 2, bit: 3 }, 0.5, FlipDirection::ZeroToOne).unwrap();
        p.insert(CellAddress { bank: 0, row: 9, bit: 65535 }, 1.0, FlipDirection::OneToZero).unwrap();
        let back = FlipProfile::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn rejects_bad_probability_and_lines() {
        let mut p = FlipProfile::new();
        assert!(p.insert(CellAddress { bank: 0, row: 0, bit: 0 }, 0.0, FlipDirection::ZeroToOne).is_err());
        assert!(p.insert(CellAddress { bank: 0, row: 0, bit: 0 }, 1.5, FlipDirection::ZeroToOne).is_err());
        let err = FlipProfile::from_text("0 0 0 0->1 0.5\n1 2 3 sideways 0.1\n").unwrap_err();
        assert!(matches!(err, DramError::Parse { line: 2, .. }));
    }

    #[test]
    fn generator_is_deterministic_and_mixture_shaped() {
        let g = DramGeometry::default();
        let params = ProfileParams { cells_per_row: 2.0, ..ProfileParams::ddr3_default() };
        let a = params.generate(&g, &BankInterleaved, &mut SeedTree::new(3).stream("profile")).unwrap();
        let b = params.generate(&g, &BankInterleaved, &mut SeedTree::new(3).stream("profile")).unwrap();
        assert_eq!(a, b);
        a.validate(&g).unwrap();
        let n = a.len() as f64;
        let high = a.iter().filter(|(_, c)| c.prob >= 0.9).count() as f64;
        let low = a.iter().filter(|(_, c)| (0.001..=0.05).contains(&c.prob)).count() as f64;
        assert!((high / n - 0.15).abs() < 0.01, "high share {}", high / n);
        assert_eq!(high + low, n);
    }
}
