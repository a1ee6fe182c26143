//! Waiting rooms and the grouping search that turns a queue into an instance.
//!
//! Candidate groups are searched in seniority order: the oldest waiter is
//! anchored first, and among groups containing it the one whose remaining
//! members joined earliest wins. With no predicate this is plain FIFO.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// The bits of a player's profile that grouping predicates look at,
/// captured when the player joins the queue.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSnapshot {
    pub language: Option<String>,
    pub location: Option<String>,
    pub score: f64,
}

/// A relation every pair of players in a group must satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    /// Scores differ by at most `band`.
    SimilarScore { band: f64 },
    /// Nobody shares a location; a missing location never qualifies.
    DistinctLocation,
    /// Everyone has the same, known language.
    SameLanguage,
}

impl Predicate {
    /// Whether a player can be in any group under this predicate at all.
    pub fn qualifies(&self, p: &ProfileSnapshot) -> bool {
        match self {
            Predicate::SimilarScore { .. } => p.score.is_finite(),
            Predicate::DistinctLocation => p.location.is_some(),
            Predicate::SameLanguage => p.language.is_some(),
        }
    }

    pub fn compatible(&self, a: &ProfileSnapshot, b: &ProfileSnapshot) -> bool {
        match self {
            Predicate::SimilarScore { band } => (a.score - b.score).abs() <= *band,
            Predicate::DistinctLocation => match (&a.location, &b.location) {
                (Some(x), Some(y)) => x != y,
                _ => false,
            },
            Predicate::SameLanguage => match (&a.language, &b.language) {
                (Some(x), Some(y)) => x == y,
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingConstraint {
    pub required_players: usize,
    #[serde(default)]
    pub predicates: Vec<Predicate>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConstraintError {
    #[error("an instance needs at least one player")]
    NoPlayers,
    #[error("similar-score band must be a finite non-negative number")]
    BadBand,
}

impl GroupingConstraint {
    pub fn new(required_players: usize, predicates: Vec<Predicate>) -> Result<Self, ConstraintError> {
        let c = GroupingConstraint {
            required_players,
            predicates,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        if self.required_players == 0 {
            return Err(ConstraintError::NoPlayers);
        }
        for p in &self.predicates {
            if let Predicate::SimilarScore { band } = p {
                if !band.is_finite() || *band < 0.0 {
                    return Err(ConstraintError::BadBand);
                }
            }
        }
        Ok(())
    }

    fn compatible(&self, a: &ProfileSnapshot, b: &ProfileSnapshot) -> bool {
        self.predicates.iter().all(|p| p.compatible(a, b))
    }

    fn qualifies(&self, p: &ProfileSnapshot) -> bool {
        self.predicates.iter().all(|pred| pred.qualifies(p))
    }

    /// Whole-group check for a candidate set of exactly `required_players`.
    pub fn admits(&self, group: &[&ProfileSnapshot]) -> bool {
        debug_assert_eq!(group.len(), self.required_players);
        group.iter().enumerate().all(|(i, a)| {
            self.qualifies(a) && group[i + 1..].iter().all(|b| self.compatible(a, b))
        })
    }
}

#[derive(Debug, Clone)]
pub struct QueueEntry<K> {
    pub key: K,
    pub joined_at: Instant,
    pub snapshot: ProfileSnapshot,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("already waiting in this room")]
pub struct AlreadyQueued;

/// Upper bound on search nodes per formation attempt; a queue pathological
/// enough to exceed it simply waits for the next join.
const SEARCH_BUDGET: usize = 250_000;

/// Finds the seniority-first group of queue indices satisfying `constraint`.
pub fn find_group(constraint: &GroupingConstraint, queue: &[&ProfileSnapshot]) -> Option<Vec<usize>> {
    let k = constraint.required_players;
    if k == 0 || queue.len() < k {
        return None;
    }
    if constraint.predicates.is_empty() {
        return Some((0..k).collect());
    }
    let mut chosen = Vec::with_capacity(k);
    let mut budget = SEARCH_BUDGET;
    if extend(constraint, queue, k, 0, &mut chosen, &mut budget) {
        Some(chosen)
    } else {
        None
    }
}

fn extend(
    constraint: &GroupingConstraint,
    queue: &[&ProfileSnapshot],
    k: usize,
    from: usize,
    chosen: &mut Vec<usize>,
    budget: &mut usize,
) -> bool {
    if chosen.len() == k {
        return true;
    }
    let need = k - chosen.len();
    for idx in from..=queue.len() - need {
        if *budget == 0 {
            return false;
        }
        *budget -= 1;
        if constraint.qualifies(queue[idx])
            && chosen
                .iter()
                .all(|&c| constraint.compatible(queue[c], queue[idx]))
        {
            chosen.push(idx);
            if extend(constraint, queue, k, idx + 1, chosen, budget) {
                return true;
            }
            chosen.pop();
        }
    }
    false
}

/// Per-game FIFO queue of players waiting for an instance.
#[derive(Debug, Clone)]
pub struct WaitingRoom<K> {
    constraint: GroupingConstraint,
    queue: Vec<QueueEntry<K>>,
}

impl<K: PartialEq + Clone> WaitingRoom<K> {
    pub fn new(constraint: GroupingConstraint) -> Self {
        WaitingRoom {
            constraint,
            queue: Vec::new(),
        }
    }

    pub fn constraint(&self) -> &GroupingConstraint {
        &self.constraint
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.queue.iter().any(|e| e.key == *key)
    }

    pub fn entries(&self) -> &[QueueEntry<K>] {
        &self.queue
    }

    /// 1-based position of `key` in the queue.
    pub fn position(&self, key: &K) -> Option<usize> {
        self.queue.iter().position(|e| e.key == *key).map(|p| p + 1)
    }

    pub fn enqueue(&mut self, key: K, joined_at: Instant, snapshot: ProfileSnapshot) -> Result<(), AlreadyQueued> {
        if self.contains(&key) {
            return Err(AlreadyQueued);
        }
        self.queue.push(QueueEntry {
            key,
            joined_at,
            snapshot,
        });
        Ok(())
    }

    /// Removes and returns the first qualifying group, in queue order.
    pub fn try_form(&mut self) -> Option<Vec<QueueEntry<K>>> {
        let snapshots: Vec<_> = self.queue.iter().map(|e| &e.snapshot).collect();
        let picked = find_group(&self.constraint, &snapshots)?;
        let mut group = Vec::with_capacity(picked.len());
        for idx in picked.into_iter().rev() {
            group.push(self.queue.remove(idx));
        }
        group.reverse();
        Some(group)
    }

    pub fn remove(&mut self, key: &K) -> Option<QueueEntry<K>> {
        let idx = self.queue.iter().position(|e| e.key == *key)?;
        Some(self.queue.remove(idx))
    }

    /// Dequeues everyone who has waited longer than `timeout`.
    pub fn expire(&mut self, now: Instant, timeout: Duration) -> Vec<K> {
        let mut expired = Vec::new();
        self.queue.retain(|e| {
            if now.saturating_duration_since(e.joined_at) > timeout {
                expired.push(e.key.clone());
                false
            } else {
                true
            }
        });
        expired
    }
}
