//! Pairwise-order re-ranking baseline.
//!
//! Strong per-user pairwise order preferences from training lists are turned
//! into a constraint graph over a default ranking, which is then re-sorted
//! topologically. The default ranking breaks ties and cycles.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::corpus::{Session, TagId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairStrengths {
    /// (a, b) → times a was listed before b.
    before: BTreeMap<(TagId, TagId), usize>,
    /// Unordered pair (lo, hi) → times both were listed together.
    together: BTreeMap<(TagId, TagId), usize>,
}

fn unordered(a: TagId, b: TagId) -> (TagId, TagId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl PairStrengths {
    /// Counts ordered co-occurrences over a user's training lists.
    pub fn compute<T>(train_sessions_of_user: &[&Session<T>]) -> Self {
        let mut s = PairStrengths::default();
        for session in train_sessions_of_user {
            let tags = &session.tags;
            for (i, &a) in tags.iter().enumerate() {
                for &b in &tags[i + 1..] {
                    *s.before.entry((a, b)).or_insert(0) += 1;
                    *s.together.entry(unordered(a, b)).or_insert(0) += 1;
                }
            }
        }
        s
    }

    /// Builds a table from raw counts without checking consistency between
    /// the ordered and unordered counts.
    pub fn from_raw_counts(
        before: impl IntoIterator<Item = ((TagId, TagId), usize)>,
        together: impl IntoIterator<Item = ((TagId, TagId), usize)>,
    ) -> Self {
        PairStrengths {
            before: before.into_iter().collect(),
            together: together
                .into_iter()
                .map(|((a, b), c)| (unordered(a, b), c))
                .collect(),
        }
    }

    pub fn before_count(&self, a: TagId, b: TagId) -> usize {
        self.before.get(&(a, b)).copied().unwrap_or(0)
    }

    pub fn together_count(&self, a: TagId, b: TagId) -> usize {
        self.together.get(&unordered(a, b)).copied().unwrap_or(0)
    }

    /// `p_ab`, or `None` when the tags never co-occurred.
    pub fn strength(&self, a: TagId, b: TagId) -> Option<f64> {
        match self.together_count(a, b) {
            0 => None,
            n => Some(self.before_count(a, b) as f64 / n as f64),
        }
    }

    /// Ordered pairs with a non-zero "before" count.
    pub fn observed(&self) -> impl Iterator<Item = (TagId, TagId)> + '_ {
        self.before.keys().copied()
    }
}

/// Directed edges `a → b` over a candidate set: `a` must precede `b`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConstraintGraph {
    pub nodes: Vec<TagId>,
    pub edges: BTreeSet<(TagId, TagId)>,
}

impl ConstraintGraph {
    /// Adds `a → b` for every pair of nodes with `p_ab > threshold` and at
    /// least `min_cooccur` joint observations.
    pub fn build(nodes: &[TagId], strengths: &PairStrengths, threshold: f64, min_cooccur: usize) -> Self {
        let present: BTreeSet<TagId> = nodes.iter().copied().collect();
        let edges = strengths
            .observed()
            .filter(|(a, b)| a != b && present.contains(a) && present.contains(b))
            .filter(|&(a, b)| {
                strengths.together_count(a, b) >= min_cooccur
                    && strengths.strength(a, b).is_some_and(|p| p > threshold)
            })
            .collect();
        ConstraintGraph {
            nodes: nodes.to_vec(),
            edges,
        }
    }
}

/// Priority topological sort of `default_order` under the graph's edges.
///
/// Among nodes with no pending predecessor the one earliest in the default
/// order goes next. When every remaining node has a predecessor (a cycle),
/// the earliest remaining node is emitted and its incoming edges dropped.
pub fn topological_rerank(default_order: &[TagId], graph: &ConstraintGraph) -> Result<Vec<TagId>> {
    let pos: HashMap<TagId, usize> = default_order.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    if pos.len() != default_order.len() {
        return Err(Error::invalid("default order contains duplicate tags"));
    }
    let n = default_order.len();
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for &(a, b) in &graph.edges {
        if let (Some(&i), Some(&j)) = (pos.get(&a), pos.get(&b)) {
            out_edges[i].push(j);
            indegree[j] += 1;
        }
    }
    let mut remaining: BTreeSet<usize> = (0..n).collect();
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&first) = remaining.iter().next() {
        let next = match ready.pop_first() {
            Some(i) => i,
            // Cycle: force the earliest remaining node.
            None => first,
        };
        remaining.remove(&next);
        order.push(default_order[next]);
        for &j in &out_edges[next] {
            if remaining.contains(&j) {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }
    }
    Ok(order)
}

pub fn rerank(default_order: &[TagId], strengths: &PairStrengths, threshold: f64, min_cooccur: usize) -> Result<Vec<TagId>> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0.5, 1]")));
    }
    let graph = ConstraintGraph::build(default_order, strengths, threshold, min_cooccur);
    topological_rerank(default_order, &graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SessionId, UserId};

    fn s(tags: &[usize]) -> Session<f64> {
        Session {
            id: SessionId(0),
            image_id: String::new(),
            user: UserId(0),
            tags: tags.iter().map(|&t| TagId(t)).collect(),
            features: vec![],
        }
    }

    fn ids(v: &[usize]) -> Vec<TagId> {
        v.iter().map(|&t| TagId(t)).collect()
    }

    #[test]
    fn strengths_from_lists() {
        let lists = [s(&[0, 1]), s(&[0, 1]), s(&[0, 2, 1]), s(&[1, 0]), s(&[0, 1])];
        let refs: Vec<_> = lists.iter().collect();
        let p = PairStrengths::compute(&refs);
        assert_eq!(p.strength(TagId(0), TagId(1)), Some(0.8));
        assert_eq!(p.strength(TagId(1), TagId(0)), Some(0.2));
        assert_eq!(p.strength(TagId(1), TagId(3)), None);
        let single = [s(&[0, 1, 2])];
        let refs: Vec<_> = single.iter().collect();
        let p = PairStrengths::compute(&refs);
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            assert_eq!(p.strength(TagId(a), TagId(b)), Some(1.0));
        }
    }

    #[test]
    fn single_edge_moves_tag_forward() {
        // a=0, b=1, c=2; D = [b, a, c]; a before b in 3 of 3 lists.
        let lists = [s(&[0, 1]), s(&[0, 1]), s(&[0, 1])];
        let refs: Vec<_> = lists.iter().collect();
        let p = PairStrengths::compute(&refs);
        assert_eq!(rerank(&ids(&[1, 0, 2]), &p, 0.8, 2).unwrap(), ids(&[0, 1, 2]));
    }

    #[test]
    fn no_edges_is_identity() {
        let p = PairStrengths::default();
        let d = ids(&[4, 2, 9, 1]);
        assert_eq!(rerank(&d, &p, 0.8, 2).unwrap(), d);
    }

    #[test]
    fn strict_threshold_and_support() {
        // p = 0.8 exactly is not strong enough.
        let lists = [s(&[0, 1]), s(&[0, 1]), s(&[0, 1]), s(&[0, 1]), s(&[1, 0])];
        let refs: Vec<_> = lists.iter().collect();
        let p = PairStrengths::compute(&refs);
        assert_eq!(rerank(&ids(&[1, 0]), &p, 0.8, 2).unwrap(), ids(&[1, 0]));
        // A single observation is below the default support.
        let one = [s(&[0, 1])];
        let refs: Vec<_> = one.iter().collect();
        let p = PairStrengths::compute(&refs);
        assert_eq!(rerank(&ids(&[1, 0]), &p, 0.8, 2).unwrap(), ids(&[1, 0]));
        assert_eq!(rerank(&ids(&[1, 0]), &p, 0.8, 1).unwrap(), ids(&[0, 1]));
    }

    #[test]
    fn degenerate_cycle_broken_by_default_order() {
        let (a, b) = (TagId(0), TagId(1));
        let p = PairStrengths::from_raw_counts([((a, b), 1), ((b, a), 1)], [((a, b), 1)]);
        let g = ConstraintGraph::build(&[a, b], &p, 0.8, 1);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(rerank(&[a, b], &p, 0.8, 1).unwrap(), vec![a, b]);
        assert_eq!(rerank(&[b, a], &p, 0.8, 1).unwrap(), vec![b, a]);
    }

    #[test]
    fn errors() {
        let p = PairStrengths::default();
        assert!(rerank(&ids(&[1, 1]), &p, 0.8, 2).is_err());
        assert!(rerank(&ids(&[1]), &p, 0.5, 2).is_err());
    }
}
