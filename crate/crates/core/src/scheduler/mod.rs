//! Scoring, selection and energy assignment.
//!
//! A candidate's score counts the coverage it added to the global store:
//! each newly seen file is worth 10, each newly covered line 1. The pool
//! always hands out the best-scoring candidate, which is then mutated
//! `clamp(5 + score, 5, 50)` times.

mod pool;
mod store;

pub use pool::{CandidatePool, PoolId};
pub use store::{GlobalCoverageStore, SyncStats, MAX_RECORD_BYTES};

use thiserror::Error;

use crate::model::FeedbackRecord;
use crate::mutation::MutationBudget;

pub const FILE_WEIGHT: u64 = 10;
pub const MIN_ENERGY: u32 = 5;
pub const MAX_ENERGY: u32 = 50;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("candidate pool is empty")]
    EmptyPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreReport {
    pub new_files: u64,
    pub new_lines: u64,
    pub score: u64,
}

impl ScoreReport {
    pub fn new(new_files: u64, new_lines: u64) -> Self {
        ScoreReport {
            new_files,
            new_lines,
            score: FILE_WEIGHT * new_files + new_lines,
        }
    }
}

/// Scores `fb` against the store as it was before this call, then merges
/// the coverage into the store.
pub fn score_candidate(fb: &FeedbackRecord, store: &mut GlobalCoverageStore) -> ScoreReport {
    let mut new_files = 0;
    let mut new_lines = 0;
    for (file, lines) in &fb.coverage {
        if lines.is_empty() {
            continue;
        }
        if !store.knows_file(file) {
            new_files += 1;
        }
        new_lines += lines
            .iter()
            .filter(|&&l| !store.is_covered(file, l))
            .count() as u64;
    }
    store.merge_coverage(fb);
    ScoreReport::new(new_files, new_lines)
}

pub fn energy_for(score: u64) -> u32 {
    (MIN_ENERGY as u64 + score).clamp(MIN_ENERGY as u64, MAX_ENERGY as u64) as u32
}

pub fn assign_energy(report: &ScoreReport, rng_seed: u64) -> MutationBudget {
    MutationBudget::new(energy_for(report.score), rng_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn fb(entries: &[(&str, &[u32])]) -> FeedbackRecord {
        let mut rec = FeedbackRecord::empty("t");
        for (file, lines) in entries {
            rec.coverage
                .insert(file.to_string(), lines.iter().copied().collect::<BTreeSet<_>>());
        }
        rec
    }

    #[test]
    fn empty_store_counts_everything() {
        let mut store = GlobalCoverageStore::in_memory();
        let report = score_candidate(&fb(&[("a.php", &[1, 2, 3])]), &mut store);
        assert_eq!(report, ScoreReport { new_files: 1, new_lines: 3, score: 13 });
    }

    #[test]
    fn resubmission_scores_zero() {
        let mut store = GlobalCoverageStore::in_memory();
        let rec = fb(&[("a.php", &[1, 2, 3])]);
        score_candidate(&rec, &mut store);
        assert_eq!(score_candidate(&rec, &mut store).score, 0);
    }

    #[test]
    fn partial_overlap() {
        let mut store = GlobalCoverageStore::in_memory();
        score_candidate(&fb(&[("a.php", &[1, 2])]), &mut store);
        let r = score_candidate(&fb(&[("a.php", &[2, 3]), ("b.php", &[7])]), &mut store);
        assert_eq!((r.new_files, r.new_lines, r.score), (1, 2, 12));
    }

    #[test]
    fn energy_formula() {
        assert_eq!(energy_for(0), 5);
        assert_eq!(energy_for(13), 18);
        assert_eq!(energy_for(45), 50);
        assert_eq!(energy_for(100), 50);
        assert_eq!(assign_energy(&ScoreReport::new(1, 3), 7).energy, 18);
    }

    #[test]
    fn zero_score_iff_nothing_new() {
        assert_eq!(ScoreReport::new(0, 0).score, 0);
        assert!(ScoreReport::new(1, 0).score > 0);
        assert!(ScoreReport::new(0, 1).score > 0);
    }
}
