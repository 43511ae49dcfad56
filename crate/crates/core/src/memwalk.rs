//! Timing side channels and their detectors.
//!
//! Detectors only ever see latencies: contiguity comes from a store-to-load
//! aliasing trace, bank membership from row-buffer conflict timing through
//! [`TimingProbe`]. Neither calls the DRAM address mapping.

use std::fmt::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::{Dram, DramError, HammerPattern, RowId};
use crate::osmodel::{Os, OsError};

#[derive(Debug, Error, PartialEq)]
pub enum MemwalkError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("latency must be > 0 (sample {0})")]
    ZeroLatency(usize),
    #[error("region of {rows} rows is too small for {n_sided}-sided hammering")]
    TooSmall { rows: usize, n_sided: usize },
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error(transparent)]
    Os(#[from] OsError),
    #[error(transparent)]
    Dram(#[from] DramError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingTrace {
    samples: Vec<(usize, u64)>,
}

impl TimingTrace {
    pub fn new(samples: Vec<(usize, u64)>) -> Result<Self, MemwalkError> {
        if samples.is_empty() {
            return Err(MemwalkError::EmptyTrace);
        }
        if let Some((i, _)) = samples.iter().find(|(_, l)| *l == 0) {
            return Err(MemwalkError::ZeroLatency(*i));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(usize, u64)] {
        &self.samples
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,latency\n");
        for (i, l) in &self.samples {
            let _ = writeln!(s, "{i},{l}");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceParams {
    pub base_latency: u64,
    pub peak_height: u64,
    pub noise_sd: f64,
    /// Probability that a sample is replaced by an interrupt spike.
    pub outlier_rate: f64,
    pub outlier_latency: u64,
    /// Physical contiguity, in pages, needed to alias and produce a peak.
    pub aliasing_pages: u64,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            base_latency: 200,
            peak_height: 50,
            noise_sd: 0.0,
            outlier_rate: 0.0,
            outlier_latency: 1500,
            aliasing_pages: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub outlier_cutoff: u64,
    pub peak_threshold: u64,
    pub min_region_pages: usize,
    /// Expected distance between peaks, in samples.
    pub peak_spacing: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            outlier_cutoff: 600,
            peak_threshold: 225,
            min_region_pages: 8,
            peak_spacing: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), MemwalkError> {
        if !(self.outlier_cutoff > self.peak_threshold && self.peak_threshold > 0) {
            return Err(MemwalkError::Config("need outlier_cutoff > peak_threshold > 0".into()));
        }
        if self.peak_spacing == 0 {
            return Err(MemwalkError::Config("peak_spacing must be > 0".into()));
        }
        Ok(())
    }
}

/// Contiguity trace over a buffer given as the physical frame behind each
/// virtual page, in virtual order.
pub fn trace_from_frames<R: Rng + ?Sized>(frames: &[u64], p: &TraceParams, rng: &mut R) -> Result<TimingTrace, MemwalkError> {
    let a = p.aliasing_pages.max(1) as usize;
    let noise = if p.noise_sd > 0.0 {
        Some(Normal::new(0.0, p.noise_sd).map_err(|e| MemwalkError::Config(e.to_string()))?)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(frames.len());
    for i in 0..frames.len() {
        let peak = i >= a && frames[i] == frames[i - a] + a as u64;
        let mut lat = (p.base_latency + if peak { p.peak_height } else { 0 }) as f64;
        if let Some(n) = &noise {
            lat += n.sample(rng);
        }
        if p.outlier_rate > 0.0 && rng.random_bool(p.outlier_rate) {
            lat = p.outlier_latency as f64;
        }
        samples.push((i, lat.round().max(1.0) as u64));
    }
    TimingTrace::new(samples)
}

/// Contiguity trace of `vpages` (virtual page numbers) in process `pid`.
pub fn spoiler_trace<R: Rng + ?Sized>(
    os: &Os,
    pid: u32,
    vpages: &[u64],
    p: &TraceParams,
    rng: &mut R,
) -> Result<TimingTrace, MemwalkError> {
    let ps = os.page_size();
    let frames = vpages
        .iter()
        .map(|v| os.translate(pid, v * ps).map(|a| a / ps))
        .collect::<Result<Vec<_>, _>>()?;
    trace_from_frames(&frames, p, rng)
}

/// Per-index median of repeated measurements of the same buffer. Samples
/// above `cutoff` are interrupts and are left out; an index where every
/// repeat was interrupted keeps its largest value.
pub fn median_trace(traces: &[TimingTrace], cutoff: u64) -> Result<TimingTrace, MemwalkError> {
    let first = traces.first().ok_or(MemwalkError::EmptyTrace)?;
    let mut out = Vec::with_capacity(first.samples().len());
    for (k, &(idx, _)) in first.samples().iter().enumerate() {
        let mut v: Vec<u64> = traces.iter().filter_map(|t| t.samples().get(k).map(|s| s.1)).collect();
        v.sort_unstable();
        let kept = v.iter().take_while(|&&l| l <= cutoff).count();
        let m = if kept == 0 { v[v.len() - 1] } else { v[kept / 2] };
        out.push((idx, m));
    }
    TimingTrace::new(out)
}

/// Runs of equidistant peaks, as `(start index, length)`.
pub fn detect_contiguous(trace: &TimingTrace, cfg: &DetectorConfig) -> Vec<(usize, usize)> {
    let spacing = cfg.peak_spacing.max(1);
    let peaks: Vec<usize> = trace
        .samples()
        .iter()
        .filter(|(_, l)| *l <= cfg.outlier_cutoff && *l > cfg.peak_threshold)
        .map(|(i, _)| *i)
        .collect();
    let mut out = Vec::new();
    let mut k = 0;
    while k < peaks.len() {
        let mut end = k;
        while end + 1 < peaks.len() && peaks[end + 1] - peaks[end] <= spacing + 1 && peaks[end + 1] - peaks[end] + 1 >= spacing {
            end += 1;
        }
        let start = peaks[k].saturating_sub(spacing);
        let len = peaks[end] - start + 1;
        if len >= cfg.min_region_pages {
            out.push((start, len));
        }
        k = end + 1;
    }
    out
}

/// Something that can time an access to `b` right after `a`.
pub trait TimingProbe {
    fn pair_latency(&mut self, a: u64, b: u64) -> Result<u64, MemwalkError>;
}

impl TimingProbe for Dram {
    fn pair_latency(&mut self, a: u64, b: u64) -> Result<u64, MemwalkError> {
        Ok(Dram::pair_latency(self, a, b)?)
    }
}

/// Adds Gaussian jitter to another probe.
pub struct NoisyProbe<'a, P, R> {
    pub inner: &'a mut P,
    pub sd: f64,
    pub rng: R,
}

impl<P: TimingProbe, R: Rng> TimingProbe for NoisyProbe<'_, P, R> {
    fn pair_latency(&mut self, a: u64, b: u64) -> Result<u64, MemwalkError> {
        let l = self.inner.pair_latency(a, b)? as f64;
        let n = if self.sd > 0.0 {
            Normal::new(0.0, self.sd).map_err(|e| MemwalkError::Config(e.to_string()))?.sample(&mut self.rng)
        } else {
            0.0
        };
        Ok((l + n).round().max(1.0) as u64)
    }
}

/// Takes the median of `repeats` measurements of another probe.
pub struct MedianProbe<'a, P: ?Sized> {
    pub inner: &'a mut P,
    pub repeats: usize,
}

impl<P: TimingProbe + ?Sized> TimingProbe for MedianProbe<'_, P> {
    fn pair_latency(&mut self, a: u64, b: u64) -> Result<u64, MemwalkError> {
        let mut v = (0..self.repeats.max(1)).map(|_| self.inner.pair_latency(a, b)).collect::<Result<Vec<_>, _>>()?;
        v.sort_unstable();
        Ok(v[v.len() / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankPartition {
    /// Candidates that conflict with `base`.
    pub same_as_base: Vec<u64>,
    /// All candidates grouped by mutual conflicts; the group containing the
    /// base's bank comes first when non-empty.
    pub groups: Vec<Vec<u64>>,
}

/// Group `candidates` into banks by row-conflict timing. Candidates are
/// assumed to sit in distinct rows.
pub fn detect_same_bank<P: TimingProbe + ?Sized>(
    probe: &mut P,
    base: u64,
    candidates: &[u64],
    threshold: u64,
) -> Result<BankPartition, MemwalkError> {
    let mut same_as_base = Vec::new();
    let mut rest = Vec::new();
    for &c in candidates {
        if probe.pair_latency(base, c)? > threshold {
            same_as_base.push(c);
        } else {
            rest.push(c);
        }
    }
    let mut groups = Vec::new();
    if !same_as_base.is_empty() {
        groups.push(same_as_base.clone());
    }
    while let Some((&pivot, tail)) = rest.split_first() {
        let mut group = vec![pivot];
        let mut left = Vec::new();
        for &c in tail {
            if probe.pair_latency(pivot, c)? > threshold {
                group.push(c);
            } else {
                left.push(c);
            }
        }
        groups.push(group);
        rest = left;
    }
    Ok(BankPartition { same_as_base, groups })
}

/// Aggressor and victim addresses for one pattern, in row order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HammerSet {
    pub aggressors: Vec<u64>,
    pub victims: Vec<u64>,
}

impl HammerSet {
    /// Turn into a pattern; the DRAM resolves addresses to rows the way the
    /// memory controller would.
    pub fn to_pattern(&self, dram: &Dram) -> Result<HammerPattern, MemwalkError> {
        let rows = self
            .aggressors
            .iter()
            .map(|a| dram.map_phys_to_dram(*a).map(|l| RowId { bank: l.bank, row: l.row }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(HammerPattern { aggressors: rows, ..HammerPattern::new(0, []) })
    }
}

/// Split each run of consecutive same-bank rows into interleaved
/// aggressor/victim sets. A run of `2n+1` rows puts the `n` aggressors on the
/// odd positions; a run of `2n-1` rows puts them on the even positions.
pub fn assemble_hammer_sets(runs: &[Vec<u64>], n_sided: usize) -> Result<Vec<HammerSet>, MemwalkError> {
    let mut out = Vec::new();
    let mut largest = 0;
    for run in runs {
        largest = largest.max(run.len());
        let mut rest = run.as_slice();
        while let Some((set, used)) = one_set(rest, n_sided) {
            out.push(set);
            rest = &rest[used..];
        }
    }
    if out.is_empty() {
        return Err(MemwalkError::TooSmall { rows: largest, n_sided });
    }
    Ok(out)
}

fn one_set(rows: &[u64], n: usize) -> Option<(HammerSet, usize)> {
    if n == 0 {
        return None;
    }
    let (width, first_aggr) = if rows.len() > 2 * n {
        (2 * n + 1, 1)
    } else if rows.len() >= 2 * n - 1 {
        (2 * n - 1, 0)
    } else {
        return None;
    };
    let mut set = HammerSet { aggressors: Vec::new(), victims: Vec::new() };
    for (i, &r) in rows[..width].iter().enumerate() {
        if i % 2 == first_aggr {
            set.aggressors.push(r);
        } else {
            set.victims.push(r);
        }
    }
    Some((set, width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::{DramConfig, DramGeometry, FlipProfile};
    use crate::rng::SeedTree;
    use rand::seq::SliceRandom;

    fn scattered(n: usize, seed: u64) -> Vec<u64> {
        let mut f: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
        f.shuffle(&mut SeedTree::new(seed).stream("t"));
        // no accidental neighbours
        for i in 1..f.len() {
            if f[i] == f[i - 1] + 1 {
                f[i] += 100_000;
            }
        }
        f
    }

    fn planted(n: usize, start: usize, len: usize) -> Vec<u64> {
        let mut f = scattered(n, 1);
        for k in 0..len {
            f[start + k] = 1_000_000 + k as u64;
        }
        f
    }

    #[test]
    fn flat_trace_has_no_regions() {
        let mut rng = SeedTree::new(1).stream("n");
        let t = trace_from_frames(&scattered(512, 2), &TraceParams::default(), &mut rng).unwrap();
        assert!(t.samples().iter().all(|(_, l)| *l == 200));
        assert!(detect_contiguous(&t, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn planted_run_is_recovered_exactly() {
        let mut rng = SeedTree::new(1).stream("n");
        let f = planted(512, 100, 64);
        let t = trace_from_frames(&f, &TraceParams::default(), &mut rng).unwrap();
        let peaks: Vec<usize> = t.samples().iter().filter(|(_, l)| *l > 225).map(|(i, _)| *i).collect();
        assert!(peaks.windows(2).all(|w| w[1] - w[0] == 1));
        assert_eq!(detect_contiguous(&t, &DetectorConfig::default()), vec![(100, 64)]);
        let noisy = TraceParams { noise_sd: 5.0, ..TraceParams::default() };
        let t = trace_from_frames(&f, &noisy, &mut rng).unwrap();
        assert_eq!(detect_contiguous(&t, &DetectorConfig::default()), vec![(100, 64)]);
    }

    #[test]
    fn median_of_repeats_survives_heavy_noise() {
        let mut rng = SeedTree::new(8).stream("n");
        let f = planted(512, 200, 48);
        let noisy = TraceParams { noise_sd: 20.0, outlier_rate: 0.1, ..TraceParams::default() };
        let reps: Vec<TimingTrace> = (0..9).map(|_| trace_from_frames(&f, &noisy, &mut rng).unwrap()).collect();
        let det = DetectorConfig::default();
        let m = median_trace(&reps, det.outlier_cutoff).unwrap();
        assert_eq!(detect_contiguous(&m, &det), vec![(200, 48)]);
        assert_eq!(median_trace(&[], 600), Err(MemwalkError::EmptyTrace));
        let spikes = TimingTrace::new(vec![(0, 1500), (1, 200)]).unwrap();
        let calm = TimingTrace::new(vec![(0, 1400), (1, 1500)]).unwrap();
        let m = median_trace(&[spikes.clone(), spikes, calm], 600).unwrap();
        assert_eq!(m.samples(), &[(0, 1500), (1, 200)]);
    }

    #[test]
    fn outliers_are_dropped_not_peaks() {
        let t = TimingTrace::new((0..50).map(|i| (i, if i % 7 == 0 { 2000 } else { 200 })).collect()).unwrap();
        assert!(detect_contiguous(&t, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn trace_validation_and_csv() {
        assert_eq!(TimingTrace::new(vec![]), Err(MemwalkError::EmptyTrace));
        assert_eq!(TimingTrace::new(vec![(0, 0)]), Err(MemwalkError::ZeroLatency(0)));
        let t = TimingTrace::new(vec![(0, 5), (1, 6)]).unwrap();
        assert_eq!(t.to_csv(), "index,latency\n0,5\n1,6\n");
        let bad = DetectorConfig { outlier_cutoff: 10, peak_threshold: 20, ..DetectorConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bank_partition_matches_mapping() {
        let g = DramGeometry::new(8, 256).unwrap();
        let mut d = Dram::new(g, DramConfig::default(), FlipProfile::new(), SeedTree::new(3).stream("d")).unwrap();
        let rs = u64::from(g.row_size_bytes);
        // one address per row block: distinct rows everywhere
        let mut blocks: Vec<u64> = (1..g.capacity() / rs).collect();
        blocks.shuffle(&mut SeedTree::new(4).stream("s"));
        let cands: Vec<u64> = blocks[..100].iter().map(|b| b * rs + 64).collect();
        let part = detect_same_bank(&mut d, 0, &cands, 250).unwrap();
        for c in &part.same_as_base {
            assert_eq!(d.map_phys_to_dram(*c).unwrap().bank, 0);
        }
        for group in &part.groups {
            let bank = d.map_phys_to_dram(group[0]).unwrap().bank;
            assert!(group.iter().all(|a| d.map_phys_to_dram(*a).unwrap().bank == bank));
        }
        let banks: std::collections::BTreeSet<u32> =
            part.groups.iter().map(|gr| d.map_phys_to_dram(gr[0]).unwrap().bank).collect();
        assert_eq!(banks.len(), part.groups.len());
    }

    #[test]
    fn hammer_set_shapes() {
        let rows: Vec<u64> = (0..23).collect();
        let sets = assemble_hammer_sets(&[rows], 11).unwrap();
        assert_eq!(sets[0].aggressors.len(), 11);
        assert_eq!(sets[0].victims.len(), 12);
        assert!(sets[0].aggressors.iter().all(|r| r % 2 == 1));

        let sets = assemble_hammer_sets(&[vec![0, 1, 2]], 2).unwrap();
        assert_eq!(sets[0].aggressors, vec![0, 2]);
        assert_eq!(sets[0].victims, vec![1]);

        assert_eq!(
            assemble_hammer_sets(&[vec![0, 1, 2, 3]], 3),
            Err(MemwalkError::TooSmall { rows: 4, n_sided: 3 })
        );
    }
}
