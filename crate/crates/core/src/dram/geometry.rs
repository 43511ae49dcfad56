use serde::{Deserialize, Serialize};

use super::DramError;

/// Shape of the simulated DRAM device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramGeometry {
    pub banks: u32,
    pub rows_per_bank: u32,
    #[serde(default = "default_row_size")]
    pub row_size_bytes: u32,
    #[serde(default = "default_page_size")]
    pub page_size_bytes: u32,
    /// Refresh period in simulated milliseconds.
    #[serde(default = "default_refresh_ms")]
    pub refresh_period_ms: u32,
}

fn default_row_size() -> u32 {
    8192
}
fn default_page_size() -> u32 {
    4096
}
fn default_refresh_ms() -> u32 {
    64
}

impl Default for DramGeometry {
    /// 16 banks x 4096 rows x 8 KiB = 512 MiB.
    fn default() -> Self {
        Self {
            banks: 16,
            rows_per_bank: 4096,
            row_size_bytes: default_row_size(),
            page_size_bytes: default_page_size(),
            refresh_period_ms: default_refresh_ms(),
        }
    }
}

impl DramGeometry {
    pub fn new(banks: u32, rows_per_bank: u32) -> Result<Self, DramError> {
        let g = Self {
            banks,
            rows_per_bank,
            ..Self::default()
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), DramError> {
        if self.banks == 0 || self.rows_per_bank == 0 || self.row_size_bytes == 0 || self.page_size_bytes == 0 {
            return Err(DramError::Geometry("all counts must be > 0".into()));
        }
        if !self.row_size_bytes.is_multiple_of(self.page_size_bytes) {
            return Err(DramError::Geometry(format!(
                "row size {} is not a multiple of page size {}",
                self.row_size_bytes, self.page_size_bytes
            )));
        }
        if !self.page_size_bytes.is_power_of_two() {
            return Err(DramError::Geometry("page size must be a power of two".into()));
        }
        if self.refresh_period_ms == 0 {
            return Err(DramError::Geometry("refresh period must be > 0".into()));
        }
        Ok(())
    }

    pub fn capacity(&self) -> u64 {
        u64::from(self.banks) * u64::from(self.rows_per_bank) * u64::from(self.row_size_bytes)
    }

    pub fn total_pages(&self) -> u64 {
        self.capacity() / u64::from(self.page_size_bytes)
    }

    pub fn pages_per_row(&self) -> u32 {
        self.row_size_bytes / self.page_size_bytes
    }

    pub fn bits_per_row(&self) -> u32 {
        self.row_size_bytes * 8
    }

    pub fn refresh_period_ns(&self) -> u64 {
        u64::from(self.refresh_period_ms) * 1_000_000
    }
}

/// One DRAM cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellAddress {
    pub bank: u32,
    pub row: u32,
    /// Bit index within the row, `0 <= bit < 8 * row_size_bytes`.
    pub bit: u32,
}

/// Byte location inside the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DramLocation {
    pub bank: u32,
    pub row: u32,
    pub offset: u32,
}

/// Physical address to (bank, row, column) translation.
///
/// Detectors in `memwalk` never call this; they only see timings.
pub trait AddressMapping: std::fmt::Debug + Send + Sync {
    fn to_dram(&self, geometry: &DramGeometry, phys: u64) -> DramLocation;
    fn to_phys(&self, geometry: &DramGeometry, loc: DramLocation) -> u64;
}

/// Row-major, bank-interleaved: consecutive row-sized blocks cycle through
/// the banks, then advance the row.
///
/// ```text
/// block = phys / row_size
/// bank  = block % banks
/// row   = block / banks
/// ```
#[derive(Debug, Clone, Copy, Default)]
pub struct BankInterleaved;

impl AddressMapping for BankInterleaved {
    fn to_dram(&self, g: &DramGeometry, phys: u64) -> DramLocation {
        let row_size = u64::from(g.row_size_bytes);
        let block = phys / row_size;
        DramLocation {
            bank: (block % u64::from(g.banks)) as u32,
            row: (block / u64::from(g.banks)) as u32,
            offset: (phys % row_size) as u32,
        }
    }

    fn to_phys(&self, g: &DramGeometry, loc: DramLocation) -> u64 {
        (u64::from(loc.row) * u64::from(g.banks) + u64::from(loc.bank)) * u64::from(g.row_size_bytes)
            + u64::from(loc.offset)
    }
}

/// Bank index XOR-ed with low row bits, as many memory controllers do.
/// Useful to check that timing-only detectors don't depend on the layout.
#[derive(Debug, Clone, Copy, Default)]
pub struct XorBanked;

impl AddressMapping for XorBanked {
    fn to_dram(&self, g: &DramGeometry, phys: u64) -> DramLocation {
        let mut loc = BankInterleaved.to_dram(g, phys);
        loc.bank = (loc.bank ^ loc.row) % g.banks;
        loc
    }

    fn to_phys(&self, g: &DramGeometry, loc: DramLocation) -> u64 {
        // banks is a power of two in every shipped geometry; fall back to a
        // search otherwise.
        let bank = if g.banks.is_power_of_two() {
            (loc.bank ^ loc.row) & (g.banks - 1)
        } else {
            (0..g.banks)
                .find(|b| (b ^ loc.row) % g.banks == loc.bank)
                .unwrap_or(loc.bank)
        };
        BankInterleaved.to_phys(g, DramLocation { bank, ..loc })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent statement of the documented formula.
    fn oracle(banks: u64, row_size: u64, phys: u64) -> (u64, u64, u64) {
        let block = phys / row_size;
        (block % banks, block / banks, phys % row_size)
    }

    #[test]
    fn interleaved_examples() {
        let g = DramGeometry::default();
        let m = BankInterleaved;
        assert_eq!(m.to_dram(&g, 0), DramLocation { bank: 0, row: 0, offset: 0 });
        let l = m.to_dram(&g, u64::from(g.row_size_bytes));
        assert_eq!((l.bank, l.row, l.offset), (1, 0, 0));
        let l = m.to_dram(&g, u64::from(g.banks) * u64::from(g.row_size_bytes));
        assert_eq!((l.bank, l.row, l.offset), (0, 1, 0));
        for phys in [0u64, 1, 8191, 8192, 131_071, 131_072, 9_999_999, g.capacity() - 1] {
            let l = m.to_dram(&g, phys);
            assert_eq!(
                (u64::from(l.bank), u64::from(l.row), u64::from(l.offset)),
                oracle(16, 8192, phys)
            );
        }
    }

    #[test]
    fn mappings_are_bijective_on_small_geometry() {
        let g = DramGeometry {
            banks: 4,
            rows_per_bank: 8,
            row_size_bytes: 64,
            page_size_bytes: 32,
            refresh_period_ms: 64,
        };
        for mapping in [&BankInterleaved as &dyn AddressMapping, &XorBanked] {
            let mut seen = std::collections::HashSet::new();
            for phys in 0..g.capacity() {
                let l = mapping.to_dram(&g, phys);
                assert!(l.bank < g.banks && l.row < g.rows_per_bank);
                assert!(seen.insert(l));
                assert_eq!(mapping.to_phys(&g, l), phys);
            }
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut g = DramGeometry { row_size_bytes: 6000, ..DramGeometry::default() };
        assert!(g.validate().is_err());
        g = DramGeometry::default();
        g.banks = 0;
        assert!(g.validate().is_err());
    }
}
