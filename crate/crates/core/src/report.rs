//! JSON-lines trial logs and their summaries.

use std::fmt::Write;

use serde::Serialize;
use thiserror::Error;

use crate::attacker::TrialRecord;
use crate::victims::AuthOutcome;

#[derive(Debug, Error)]
#[error("line {line}: {msg}")]
pub struct ReportError {
    pub line: usize,
    pub msg: String,
}

/// One compact JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("serializable"));
        s.push('\n');
    }
    s
}

pub fn read_trials(text: &str) -> Result<Vec<TrialRecord>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ReportError { line: i + 1, msg: e.to_string() }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialStats {
    pub trials: usize,
    pub successes: usize,
    pub crashes: usize,
    pub co_located: usize,
    pub in_window: usize,
    /// Successes whose target saw no flip while resident. Always 0 for a
    /// sound run.
    pub unexplained_successes: usize,
    pub last_sim_time_ns: u64,
}

impl TrialStats {
    pub fn of(records: &[TrialRecord]) -> Self {
        let count = |f: &dyn Fn(&TrialRecord) -> bool| records.iter().filter(|r| f(r)).count();
        Self {
            trials: records.len(),
            successes: count(&|r| r.outcome == AuthOutcome::Success),
            crashes: count(&|r| r.outcome == AuthOutcome::Crash),
            co_located: count(&|r| r.co_located),
            in_window: count(&|r| r.in_window),
            unexplained_successes: count(&|r| r.outcome == AuthOutcome::Success && r.flipped_bits.is_empty()),
            last_sim_time_ns: records.iter().map(|r| r.sim_time_ns).max().unwrap_or(0),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trials,successes,crashes,co_located,in_window,unexplained_successes,last_sim_time\n");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.3}",
            self.trials,
            self.successes,
            self.crashes,
            self.co_located,
            self.in_window,
            self.unexplained_successes,
            self.last_sim_time_ns as f64 / 1e9
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(trial: u32, outcome: AuthOutcome, bits: Vec<u32>) -> TrialRecord {
        TrialRecord {
            seed: 1,
            trial,
            co_located: !bits.is_empty(),
            target_flip_ns: bits.iter().map(|_| 5).collect(),
            flipped_bits: bits,
            window_ns: (0, 10),
            total_flips: 3,
            outcome,
            in_window: true,
            sim_time_ns: u64::from(trial) * 10,
        }
    }

    #[test]
    fn jsonl_round_trip_and_stats() {
        let recs = vec![
            rec(0, AuthOutcome::Failure, vec![]),
            rec(1, AuthOutcome::Success, vec![4]),
            rec(2, AuthOutcome::Success, vec![]),
        ];
        let text = to_jsonl(&recs);
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains("\"outcome\":\"FAILURE\""));
        assert_eq!(read_trials(&text).unwrap(), recs);
        let s = TrialStats::of(&recs);
        assert_eq!((s.trials, s.successes, s.co_located, s.unexplained_successes), (3, 2, 1, 1));
        assert_eq!(s.last_sim_time_ns, 20);
        let e = read_trials("{}\n").unwrap_err();
        assert_eq!(e.line, 1);
    }
}
