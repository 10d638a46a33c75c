//! Pairwise (dis-)similarity constraints and their samplers.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::data::FeatureSet;
use crate::error::{Error, Result};

/// `(i, j, y)` with `i < j` and `y = +1` for similar, `-1` for dissimilar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairConstraint {
    pub i: usize,
    pub j: usize,
    pub y: i8,
}

impl PairConstraint {
    /// Canonicalizes to `i < j`.
    pub fn new(i: usize, j: usize, y: i8) -> Result<Self> {
        if i == j {
            return Err(Error::InvalidArgument(format!("constraint joins item {i} to itself")));
        }
        if y != 1 && y != -1 {
            return Err(Error::InvalidArgument(format!("constraint label must be +1 or -1, got {y}")));
        }
        Ok(Self {
            i: i.min(j),
            j: i.max(j),
            y,
        })
    }

    pub fn y_f64(&self) -> f64 {
        f64::from(self.y)
    }
}

/// The constraint set of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub task_id: usize,
    constraints: Vec<PairConstraint>,
}

impl PairSet {
    pub fn new(task_id: usize, constraints: Vec<PairConstraint>) -> Self {
        Self {
            task_id,
            constraints,
        }
    }

    pub fn constraints(&self) -> &[PairConstraint] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.constraints.iter().filter(|c| c.y > 0).count()
    }

    /// Checks index bounds and that no pair appears with both signs.
    pub fn validate(&self, n_items: usize) -> Result<()> {
        let mut seen: HashMap<(usize, usize), i8> = HashMap::new();
        for c in &self.constraints {
            if c.j >= n_items {
                return Err(Error::InvalidArgument(format!(
                    "constraint ({}, {}) indexes past {n_items} items",
                    c.i, c.j
                )));
            }
            if let Some(&prev) = seen.get(&(c.i, c.j)) {
                if prev != c.y {
                    return Err(Error::InvalidArgument(format!(
                        "pair ({}, {}) appears with conflicting labels",
                        c.i, c.j
                    )));
                }
            } else {
                seen.insert((c.i, c.j), c.y);
            }
        }
        Ok(())
    }

    /// Sorted, de-duplicated indices of every item referenced by a constraint.
    pub fn referenced_items(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.constraints.iter().flat_map(|c| [c.i, c.j]).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

/// A task's training data: the constraints and the features they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub features: FeatureSet,
    pub pairs: PairSet,
}

impl Task {
    pub fn new(features: FeatureSet, pairs: PairSet) -> Self {
        Self { features, pairs }
    }

    pub fn validate(&self) -> Result<()> {
        self.pairs.validate(self.features.len())
    }
}

/// Concatenates several tasks into one, re-indexing constraints onto the stacked features.
pub fn pool_tasks(tasks: &[Task]) -> Result<Task> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no tasks to pool".into()))?;
    let mut features = FeatureSet::empty(first.features.dim());
    let mut constraints = Vec::new();
    for task in tasks {
        let offset = features.len();
        features.extend(&task.features)?;
        constraints.extend(task.pairs.constraints().iter().map(|c| PairConstraint {
            i: c.i + offset,
            j: c.j + offset,
            y: c.y,
        }));
    }
    Ok(Task::new(features, PairSet::new(0, constraints)))
}

/// Every valid positive and negative pair in canonical order.
pub fn enumerate_pairs(labels: &[i64]) -> (Vec<PairConstraint>, Vec<PairConstraint>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let c = PairConstraint {
                i,
                j,
                y: if labels[i] == labels[j] { 1 } else { -1 },
            };
            if c.y > 0 {
                pos.push(c);
            } else {
                neg.push(c);
            }
        }
    }
    (pos, neg)
}

/// Draws `n_pos` similar and `n_neg` dissimilar pairs uniformly, with replacement, from all
/// valid unordered pairs of `labels`. Positives come first in the returned set.
pub fn generate_pairs<R: Rng + ?Sized>(
    labels: &[i64],
    n_pos: usize,
    n_neg: usize,
    task_id: usize,
    rng: &mut R,
) -> Result<PairSet> {
    if labels.len() < 2 {
        return Err(Error::InvalidArgument("need at least two items to form pairs".into()));
    }
    // Group item indices by label, in order of first appearance.
    let mut order: Vec<i64> = Vec::new();
    let mut groups: HashMap<i64, Vec<usize>> = HashMap::new();
    for (idx, &l) in labels.iter().enumerate() {
        groups
            .entry(l)
            .or_insert_with(|| {
                order.push(l);
                Vec::new()
            })
            .push(idx);
    }
    let classes: Vec<&Vec<usize>> = order.iter().map(|l| &groups[l]).collect();
    let n = labels.len();
    let mut out = Vec::with_capacity(n_pos + n_neg);

    if n_pos > 0 {
        // P(class c) proportional to its pair count; then two distinct members uniformly.
        let weights: Vec<f64> = classes
            .iter()
            .map(|g| (g.len() * g.len().saturating_sub(1) / 2) as f64)
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::NoPositiveSupport);
        }
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for _ in 0..n_pos {
            let g = classes[pick.sample(rng)];
            let a = rng.random_range(0..g.len());
            let mut b = rng.random_range(0..g.len() - 1);
            if b >= a {
                b += 1;
            }
            out.push(PairConstraint::new(g[a], g[b], 1)?);
        }
    }

    if n_neg > 0 {
        if classes.len() < 2 {
            return Err(Error::NoNegativeSupport);
        }
        // Pick item i with weight (n - |class(i)|), then j uniformly outside its class: every
        // unordered dissimilar pair is hit with equal probability.
        let class_of: Vec<usize> = {
            let mut v = vec![0; n];
            for (c, g) in classes.iter().enumerate() {
                for &i in g.iter() {
                    v[i] = c;
                }
            }
            v
        };
        let weights: Vec<f64> = (0..n).map(|i| (n - classes[class_of[i]].len()) as f64).collect();
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        // Items grouped by class; the complement of class c is everything outside its block.
        let flat: Vec<usize> = classes.iter().flat_map(|g| g.iter().copied()).collect();
        let mut start = Vec::with_capacity(classes.len());
        let mut acc = 0;
        for g in &classes {
            start.push(acc);
            acc += g.len();
        }
        for _ in 0..n_neg {
            let i = pick.sample(rng);
            let c = class_of[i];
            let size = classes[c].len();
            let mut k = rng.random_range(0..n - size);
            if k >= start[c] {
                k += size;
            }
            out.push(PairConstraint::new(i, flat[k], -1)?);
        }
    }

    Ok(PairSet::new(task_id, out))
}

/// One constraint drawn uniformly with replacement.
pub fn sample_constraint<R: Rng + ?Sized>(ps: &PairSet, rng: &mut R) -> Result<PairConstraint> {
    if ps.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    Ok(ps.constraints[rng.random_range(0..ps.len())])
}
