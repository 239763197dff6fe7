use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use super::{ScoreReport, SchedulerError};
use crate::model::Candidate;

/// Handle to a pool entry; also its creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PoolId(u64);

#[derive(Debug)]
struct Entry {
    candidate: Candidate,
    score: u64,
    exhausted: u32,
}

/// Scored candidates awaiting mutation.
///
/// Selection order is: fewest exhausted rounds, then highest score, then
/// earliest insertion. Exhausting a candidate pushes it behind every entry
/// that has been exhausted fewer times, so it is revisited only once the
/// rest of its tier has been worked through.
#[derive(Debug, Default)]
pub struct CandidatePool {
    entries: HashMap<PoolId, Entry>,
    order: BTreeSet<(u32, Reverse<u64>, PoolId)>,
    insertion: Vec<PoolId>,
    next: u64,
}

impl CandidatePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, candidate: Candidate, score: u64) -> PoolId {
        let id = PoolId(self.next);
        self.next += 1;
        self.order.insert((0, Reverse(score), id));
        self.entries.insert(
            id,
            Entry {
                candidate,
                score,
                exhausted: 0,
            },
        );
        self.insertion.push(id);
        id
    }

    pub fn get(&self, id: PoolId) -> Option<&Candidate> {
        self.entries.get(&id).map(|e| &e.candidate)
    }

    pub fn score(&self, id: PoolId) -> Option<u64> {
        self.entries.get(&id).map(|e| e.score)
    }

    pub fn exhausted_rounds(&self, id: PoolId) -> Option<u32> {
        self.entries.get(&id).map(|e| e.exhausted)
    }

    /// Highest-scoring candidate of the least-exhausted tier; FIFO on ties.
    pub fn select_next(&self) -> Result<PoolId, SchedulerError> {
        self.order
            .first()
            .map(|(_, _, id)| *id)
            .ok_or(SchedulerError::EmptyPool)
    }

    /// Uniform choice, ignoring scores.
    pub fn select_random<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PoolId, SchedulerError> {
        if self.insertion.is_empty() {
            return Err(SchedulerError::EmptyPool);
        }
        Ok(self.insertion[rng.random_range(0..self.insertion.len())])
    }

    /// Demotes `id` if none of its latest children scored. Returns whether
    /// it was demoted.
    pub fn mark_exhausted(&mut self, id: PoolId, children_scores: &[ScoreReport]) -> bool {
        if children_scores.iter().any(|s| s.score > 0) {
            return false;
        }
        let Some(entry) = self.entries.get_mut(&id) else {
            return false;
        };
        self.order.remove(&(entry.exhausted, Reverse(entry.score), id));
        entry.exhausted += 1;
        self.order.insert((entry.exhausted, Reverse(entry.score), id));
        true
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = PoolId> + '_ {
        self.insertion.iter().copied()
    }
}
