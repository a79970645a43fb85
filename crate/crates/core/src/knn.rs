//! Exact Euclidean nearest-neighbor search over session feature vectors.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::corpus::{Session, SessionId};
use crate::error::{Error, Result};
use crate::scalar::{squared_distance, Scalar};

/// Row-major matrix of feature vectors with their session ids.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualIndex<T> {
    dim: usize,
    data: Vec<T>,
    ids: Vec<SessionId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<T> {
    pub id: SessionId,
    /// Squared Euclidean distance to the query.
    pub distance_sq: T,
}

fn by_distance_then_id<T: Scalar>(a: &Neighbor<T>, b: &Neighbor<T>) -> Ordering {
    a.distance_sq
        .partial_cmp(&b.distance_sq)
        .unwrap_or(Ordering::Equal)
        .then(a.id.cmp(&b.id))
}

impl<T: Scalar> VisualIndex<T> {
    pub fn build<'a, I>(sessions: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Session<T>>,
    {
        let mut iter = sessions.into_iter().peekable();
        let dim = iter
            .peek()
            .map(|s| s.features.len())
            .ok_or_else(|| Error::invalid("cannot build an index from zero sessions"))?;
        let mut index = VisualIndex {
            dim,
            data: Vec::new(),
            ids: Vec::new(),
        };
        for s in iter {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: s.features.len(),
                    line: None,
                });
            }
            index.data.extend_from_slice(&s.features);
            index.ids.push(s.id);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[SessionId] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The `m` closest indexed sessions not in `exclude`, nearest first.
    /// Equal distances are ordered by ascending session id.
    pub fn nearest(
        &self,
        query: &[T],
        m: usize,
        exclude: &HashSet<SessionId>,
    ) -> Result<Vec<Neighbor<T>>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
                line: None,
            });
        }
        if m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        let mut all: Vec<Neighbor<T>> = self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, id)| !exclude.contains(id))
            .map(|(i, &id)| Neighbor {
                id,
                distance_sq: squared_distance(query, self.row(i)),
            })
            .collect();
        if all.len() > m {
            all.select_nth_unstable_by(m - 1, by_distance_then_id);
            all.truncate(m);
        }
        all.sort_unstable_by(by_distance_then_id);
        Ok(all)
    }

    pub fn nearest_ids(
        &self,
        query: &[T],
        m: usize,
        exclude: &HashSet<SessionId>,
    ) -> Result<Vec<SessionId>> {
        Ok(self
            .nearest(query, m, exclude)?
            .into_iter()
            .map(|n| n.id)
            .collect())
    }
}
