//! Per-user, per-neighborhood and corpus-wide tag statistics.
//!
//! Everything here is a pure function of the sessions handed in; callers pass
//! only training sessions.

use std::collections::BTreeMap;
use std::io::Write;

use crate::corpus::{Session, SessionId, TagId, TagVocabulary};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sparse tag → probability map; absent tags read as zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TagProbabilities<T> {
    probs: BTreeMap<TagId, T>,
}

impl<T: Scalar> TagProbabilities<T> {
    fn from_counts(counts: BTreeMap<TagId, usize>, denominator: usize) -> Self {
        let denom = T::from_count(denominator);
        TagProbabilities {
            probs: counts
                .into_iter()
                .map(|(t, c)| (t, T::from_count(c) / denom))
                .collect(),
        }
    }

    pub fn get(&self, tag: TagId) -> T {
        self.probs.get(&tag).copied().unwrap_or_else(T::zero)
    }

    /// Tags with a non-zero probability, ascending by id.
    pub fn iter(&self) -> impl Iterator<Item = (TagId, T)> + '_ {
        self.probs.iter().map(|(&t, &p)| (t, p))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Personal bias of one user: share of their images carrying each tag.
pub type UserTagStats<T> = TagProbabilities<T>;

/// Similarity bias of one image's neighborhood.
pub type NeighborhoodStats<T> = TagProbabilities<T>;

fn membership_counts<'a, T: 'a, I>(sessions: I) -> (BTreeMap<TagId, usize>, usize)
where
    I: IntoIterator<Item = &'a Session<T>>,
{
    let mut counts = BTreeMap::new();
    let mut n = 0;
    for s in sessions {
        n += 1;
        for &t in &s.tags {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    (counts, n)
}

/// `pb_u(t)`: fraction of the user's sessions whose list contains `t`.
pub fn compute_pb<T: Scalar>(sessions_of_user: &[&Session<T>]) -> Result<UserTagStats<T>> {
    let (counts, n) = membership_counts(sessions_of_user.iter().copied());
    if n == 0 {
        return Err(Error::invalid("user has no sessions"));
    }
    Ok(TagProbabilities::from_counts(counts, n))
}

/// `cb(t)` for every vocabulary tag: fraction of all sessions containing it.
pub fn compute_cb<T: Scalar>(all_sessions: &[&Session<T>], vocab_size: usize) -> Result<Vec<T>> {
    let (counts, n) = membership_counts(all_sessions.iter().copied());
    if n == 0 {
        return Err(Error::invalid("no sessions to compute corpus bias from"));
    }
    let denom = T::from_count(n);
    let mut cb = vec![T::zero(); vocab_size];
    for (t, c) in counts {
        *cb.get_mut(t.0).ok_or_else(|| Error::UnknownTag(t.to_string()))? = T::from_count(c) / denom;
    }
    Ok(cb)
}

/// `sb(t)`: fraction of the `m` neighbors carrying `t`. The denominator is
/// always `m`, even when fewer neighbors were retrieved.
pub fn compute_sb<'a, T, F>(neighbor_ids: &[SessionId], tag_lists: F, m: usize) -> Result<NeighborhoodStats<T>>
where
    T: Scalar,
    F: Fn(SessionId) -> Option<&'a [TagId]>,
{
    if m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    if neighbor_ids.len() > m {
        return Err(Error::invalid(format!(
            "{} neighbors exceed m = {m}",
            neighbor_ids.len()
        )));
    }
    let mut counts = BTreeMap::new();
    for &id in neighbor_ids {
        let tags = tag_lists(id).ok_or(Error::UnknownSession(id.0))?;
        for &t in tags {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    Ok(TagProbabilities::from_counts(counts, m))
}

/// Mean and population variance of each tag's 1-based list position.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionStats<T> {
    pub mp: Vec<T>,
    pub vp: Vec<T>,
    /// Number of lists each tag was observed on; `mp`/`vp` are zero when this is zero.
    pub observations: Vec<usize>,
}

pub fn compute_position_stats<T: Scalar>(
    all_sessions: &[&Session<T>],
    vocab_size: usize,
) -> Result<PositionStats<T>> {
    if all_sessions.is_empty() {
        return Err(Error::invalid("no sessions to compute position statistics from"));
    }
    let mut sum = vec![0usize; vocab_size];
    let mut observations = vec![0usize; vocab_size];
    for s in all_sessions {
        for (i, &t) in s.tags.iter().enumerate() {
            if t.0 >= vocab_size {
                return Err(Error::UnknownTag(t.to_string()));
            }
            sum[t.0] += i + 1;
            observations[t.0] += 1;
        }
    }
    let mp: Vec<T> = sum
        .iter()
        .zip(&observations)
        .map(|(&s, &c)| {
            if c == 0 {
                T::zero()
            } else {
                T::from_count(s) / T::from_count(c)
            }
        })
        .collect();
    let mut vp = vec![T::zero(); vocab_size];
    for s in all_sessions {
        for (i, &t) in s.tags.iter().enumerate() {
            let d = T::from_count(i + 1) - mp[t.0];
            vp[t.0] += d * d;
        }
    }
    for (v, &c) in vp.iter_mut().zip(&observations) {
        if c > 0 {
            *v /= T::from_count(c);
        }
    }
    Ok(PositionStats {
        mp,
        vp,
        observations,
    })
}

/// Corpus-wide statistics over the training sessions.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalTagStats<T> {
    pub cb: Vec<T>,
    pub mp: Vec<T>,
    pub vp: Vec<T>,
    pub observations: Vec<usize>,
}

impl<T: Scalar> GlobalTagStats<T> {
    pub fn compute(train_sessions: &[&Session<T>], vocab_size: usize) -> Result<Self> {
        let cb = compute_cb(train_sessions, vocab_size)?;
        let PositionStats {
            mp,
            vp,
            observations,
        } = compute_position_stats(train_sessions, vocab_size)?;
        Ok(GlobalTagStats {
            cb,
            mp,
            vp,
            observations,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.cb.len()
    }

    /// Writes `tag,cb,mp,vp` rows in tag id order.
    pub fn write_csv<W: Write>(&self, vocabulary: &TagVocabulary, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["tag", "cb", "mp", "vp"])?;
        for (id, name) in vocabulary.iter() {
            let i = id.index();
            w.write_record([
                name.to_string(),
                self.cb[i].to_string(),
                self.mp[i].to_string(),
                self.vp[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::UserId;
    use approx::assert_abs_diff_eq;

    fn s(id: usize, user: usize, tags: &[usize]) -> Session<f64> {
        Session {
            id: SessionId(id),
            image_id: id.to_string(),
            user: UserId(user),
            tags: tags.iter().map(|&t| TagId(t)).collect(),
            features: vec![0.0],
        }
    }

    #[test]
    fn personal_bias_counts() {
        let sessions = [s(0, 0, &[0, 1]), s(1, 0, &[1]), s(2, 0, &[0, 1]), s(3, 0, &[1, 2])];
        let refs: Vec<_> = sessions.iter().collect();
        let pb = compute_pb(&refs).unwrap();
        assert_eq!(pb.get(TagId(0)), 0.5);
        assert_eq!(pb.get(TagId(1)), 1.0);
        assert_eq!(pb.get(TagId(7)), 0.0);
        assert!(compute_pb::<f64>(&[]).is_err());
    }

    #[test]
    fn corpus_bias_counts() {
        let sessions: Vec<_> = (0..10)
            .map(|i| if i < 3 { s(i, i % 2, &[0, 1]) } else { s(i, i % 2, &[1]) })
            .collect();
        let refs: Vec<_> = sessions.iter().collect();
        let cb = compute_cb(&refs, 3).unwrap();
        assert_abs_diff_eq!(cb[0], 0.3, epsilon = 1e-15);
        assert_eq!(cb[1], 1.0);
        assert_eq!(cb[2], 0.0);
        let memberships: usize = sessions.iter().map(|s| s.tags.len()).sum();
        assert_abs_diff_eq!(cb.iter().sum::<f64>() * 10.0, memberships as f64, epsilon = 1e-12);
    }

    #[test]
    fn similarity_bias_fixed_denominator() {
        let lists: Vec<Vec<TagId>> = (0..30).map(|i| if i < 3 { vec![TagId(0)] } else { vec![TagId(1)] }).collect();
        let lookup = |id: SessionId| lists.get(id.0).map(Vec::as_slice);
        let four: Vec<_> = [0, 1, 2, 5].into_iter().map(SessionId).collect();
        let sb = compute_sb::<f64, _>(&four, lookup, 4).unwrap();
        assert_eq!(sb.get(TagId(0)), 0.75);
        assert_eq!(sb.get(TagId(2)), 0.0);
        let thirty: Vec<_> = (0..30).map(SessionId).collect();
        let sb = compute_sb::<f64, _>(&thirty, lookup, 50).unwrap();
        assert_eq!(sb.get(TagId(1)), 27.0 / 50.0);
        let all_tag0: Vec<Vec<TagId>> = vec![vec![TagId(0)]; 30];
        let sb = compute_sb::<f64, _>(&thirty, |id| all_tag0.get(id.0).map(Vec::as_slice), 50).unwrap();
        assert_eq!(sb.get(TagId(0)), 0.6);
        assert!(matches!(
            compute_sb::<f64, _>(&[SessionId(99)], lookup, 4),
            Err(Error::UnknownSession(99))
        ));
    }

    #[test]
    fn position_statistics() {
        // tag 0 at positions 1 and 3; tag 1 once at position 5; tag 2 always first.
        let sessions = [
            s(0, 0, &[0, 2]),
            s(1, 0, &[2, 3, 0, 4, 1]),
        ];
        let refs: Vec<_> = sessions.iter().collect();
        let p = compute_position_stats(&refs, 6).unwrap();
        assert_eq!((p.mp[0], p.vp[0]), (2.0, 1.0));
        assert_eq!((p.mp[1], p.vp[1]), (5.0, 0.0));
        assert_eq!((p.mp[2], p.vp[2]), (1.5, 0.25));
        assert_eq!(p.observations[5], 0);
        let first = [s(0, 0, &[2]), s(1, 0, &[2, 0])];
        let refs: Vec<_> = first.iter().collect();
        let p = compute_position_stats(&refs, 3).unwrap();
        assert_eq!((p.mp[2], p.vp[2]), (1.0, 0.0));
    }

    #[test]
    fn single_user_pb_equals_cb() {
        let sessions = [s(0, 0, &[0, 1]), s(1, 0, &[1, 2]), s(2, 0, &[2])];
        let refs: Vec<_> = sessions.iter().collect();
        let pb = compute_pb(&refs).unwrap();
        let cb = compute_cb(&refs, 3).unwrap();
        for t in 0..3 {
            assert_eq!(pb.get(TagId(t)), cb[t]);
        }
    }

    #[test]
    fn csv_dump() {
        let mut vocab_counts = vec![];
        for name in ["a", "b"] {
            vocab_counts.push((name.to_string(), 1));
        }
        let vocab = TagVocabulary::from_counts(vocab_counts);
        let sessions = [s(0, 0, &[1, 0])];
        let refs: Vec<_> = sessions.iter().collect();
        let stats = GlobalTagStats::compute(&refs, 2).unwrap();
        let mut out = Vec::new();
        stats.write_csv(&vocab, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "tag,cb,mp,vp\na,1,2,0\nb,1,1,0\n");
    }
}
