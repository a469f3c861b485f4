//! Cumulative pair-to-set memory behind the historical decoder.
//!
//! The entity-side store marks, per `(subject, relation)`, every object
//! seen strictly before the frontier; the relation-side mirror marks, per
//! `(subject, object)`, every relation. Snapshots must be absorbed in
//! chronological order, and the snapshot for time `t` only after the
//! queries at `t` have been served.

use std::collections::{HashMap, HashSet};

use crate::dataset::Quadruple;
use crate::error::{LmsError, Result};

/// Generic cumulative `(a, b) -> set of c` memory with a time frontier.
#[derive(Debug, Clone, Default)]
pub struct PairStore {
    seen: HashMap<(u32, u32), HashSet<u32>>,
    frontier: u32,
}

impl PairStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Time index up to which (exclusively) facts have been absorbed.
    pub fn frontier(&self) -> u32 {
        self.frontier
    }

    fn absorb<I: Iterator<Item = (u32, u32, u32)>>(&mut self, triples: I, t: u32) -> Result<()> {
        if t != self.frontier {
            return Err(LmsError::Ordering {
                got: t,
                expected: self.frontier,
            });
        }
        for (a, b, c) in triples {
            self.seen.entry((a, b)).or_default().insert(c);
        }
        self.frontier = t + 1;
        Ok(())
    }

    /// Skips time `t` without absorbing anything (strict evaluation mode).
    pub fn skip(&mut self, t: u32) -> Result<()> {
        self.absorb(std::iter::empty(), t)
    }

    pub fn contains(&self, a: u32, b: u32, c: u32) -> bool {
        self.seen.get(&(a, b)).is_some_and(|s| s.contains(&c))
    }

    /// Binary membership vector of length `size` for the pair `(a, b)`.
    /// An unseen pair yields the all-zero vector.
    pub fn lookup(&self, a: u32, b: u32, size: usize) -> Vec<f64> {
        let mut out = vec![0.0; size];
        if let Some(set) = self.seen.get(&(a, b)) {
            for &c in set {
                out[c as usize] = 1.0;
            }
        }
        out
    }

    pub fn num_pairs(&self) -> usize {
        self.seen.len()
    }

    /// Sorted `a \t b \t c` dump for oracle diffing.
    pub fn dump(&self) -> String {
        let mut lines: Vec<(u32, u32, u32)> = self
            .seen
            .iter()
            .flat_map(|(&(a, b), set)| set.iter().map(move |&c| (a, b, c)))
            .collect();
        lines.sort_unstable();
        let mut out = String::new();
        for (a, b, c) in lines {
            out.push_str(&format!("{a}\t{b}\t{c}\n"));
        }
        out
    }
}

/// Entity-side indicator: `(subject, relation) -> objects`.
#[derive(Debug, Clone, Default)]
pub struct IndicatorStore {
    store: PairStore,
}

impl IndicatorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frontier(&self) -> u32 {
        self.store.frontier()
    }

    /// Absorbs the snapshot at time `t`; the frontier becomes `t + 1`.
    pub fn advance(&mut self, snapshot: &[Quadruple], t: u32) -> Result<()> {
        self.store
            .absorb(snapshot.iter().map(|q| (q.subject, q.relation, q.object)), t)
    }

    pub fn skip(&mut self, t: u32) -> Result<()> {
        self.store.skip(t)
    }

    pub fn lookup(&self, subject: u32, relation: u32, num_entities: usize) -> Vec<f64> {
        self.store.lookup(subject, relation, num_entities)
    }

    pub fn contains(&self, subject: u32, relation: u32, object: u32) -> bool {
        self.store.contains(subject, relation, object)
    }

    pub fn dump(&self) -> String {
        self.store.dump()
    }
}

/// Relation-side indicator: `(subject, object) -> relations`.
#[derive(Debug, Clone, Default)]
pub struct RelationIndicator {
    store: PairStore,
}

impl RelationIndicator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&mut self, snapshot: &[Quadruple], t: u32) -> Result<()> {
        self.store
            .absorb(snapshot.iter().map(|q| (q.subject, q.object, q.relation)), t)
    }

    pub fn skip(&mut self, t: u32) -> Result<()> {
        self.store.skip(t)
    }

    pub fn lookup(&self, subject: u32, object: u32, num_relations: usize) -> Vec<f64> {
        self.store.lookup(subject, object, num_relations)
    }
}
