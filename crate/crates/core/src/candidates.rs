//! Neighbor-mined candidate tags and the augmented training order.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Corpus, Session, SessionId, TagId, UserId};
use crate::error::{Error, Result};
use crate::knn::VisualIndex;
use crate::scalar::Scalar;
use crate::tagstats::{compute_sb, UserTagStats};

/// `v_u(t, I, m) = pb_u(t) + sb(t) - cb(t)`.
#[inline]
pub fn score_tag<T: Scalar>(pb: T, sb: T, cb: T) -> T {
    pb + sb - cb
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate<T> {
    pub tag: TagId,
    pub score: T,
}

/// Tags with non-negative score for one (image, user) query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateList<T> {
    pub entries: Vec<Candidate<T>>,
    pub image_id: String,
    pub user: UserId,
    pub m: usize,
}

impl<T: Scalar> CandidateList<T> {
    pub fn tags(&self) -> Vec<TagId> {
        self.entries.iter().map(|c| c.tag).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `rank,tag,score` rows with 1-based ranks.
    pub fn write_csv<W: Write>(&self, corpus_vocab: &crate::corpus::TagVocabulary, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rank", "tag", "score"])?;
        for (i, c) in self.entries.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                corpus_vocab.name(c.tag).unwrap_or_default().to_string(),
                c.score.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores a dense vocabulary and keeps tags with `v >= 0`, sorted by
/// descending score then ascending tag id.
pub fn rank_scores<T: Scalar>(
    vocab_size: usize,
    mut score: impl FnMut(TagId) -> T,
    mut keep: impl FnMut(TagId) -> bool,
) -> Vec<Candidate<T>> {
    let mut entries: Vec<Candidate<T>> = (0..vocab_size)
        .map(TagId)
        .filter(|&t| keep(t))
        .map(|tag| Candidate {
            tag,
            score: score(tag),
        })
        .filter(|c| c.score >= T::zero())
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.tag.cmp(&b.tag))
    });
    entries
}

/// Everything needed to mine candidates: a training-only visual index and
/// statistics fitted on the training split.
pub struct CandidateGenerator<'a, T> {
    pub corpus: &'a Corpus<T>,
    pub index: &'a VisualIndex<T>,
    pub cb: &'a [T],
    /// Personal bias per user, indexed by [`UserId`].
    pub pb: &'a [UserTagStats<T>],
    pub m: usize,
    /// When false, neighbors owned by the querying user are skipped.
    pub same_user_neighbors: bool,
}

impl<'a, T: Scalar> CandidateGenerator<'a, T> {
    fn exclusions(&self, image: &Session<T>, user: UserId) -> HashSet<SessionId> {
        let mut exclude = HashSet::from([image.id]);
        if !self.same_user_neighbors {
            exclude.extend(self.corpus.user_sessions[user.0].iter().copied());
        }
        exclude
    }

    /// Ids of the image's `m` nearest training neighbors (never the image itself).
    pub fn neighbors(&self, image: &Session<T>, user: UserId) -> Result<Vec<SessionId>> {
        self.index
            .nearest_ids(&image.features, self.m, &self.exclusions(image, user))
    }

    pub fn build_candidates(
        &self,
        image: &Session<T>,
        user: UserId,
        exclude_ground_truth: bool,
    ) -> Result<CandidateList<T>> {
        if self.m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        let pb = self
            .pb
            .get(user.0)
            .ok_or_else(|| Error::UnknownUser(user.to_string()))?;
        let neighbors = self.neighbors(image, user)?;
        let sb = compute_sb(
            &neighbors,
            |id| self.corpus.sessions.get(id.0).map(|s| s.tags.as_slice()),
            self.m,
        )?;
        let truth: BTreeSet<TagId> = if exclude_ground_truth {
            image.tags.iter().copied().collect()
        } else {
            BTreeSet::new()
        };
        let entries = rank_scores(
            self.cb.len(),
            |t| score_tag(pb.get(t), sb.get(t), self.cb[t.0]),
            |t| !truth.contains(&t),
        );
        Ok(CandidateList {
            entries,
            image_id: image.image_id.clone(),
            user,
            m: self.m,
        })
    }
}

/// How many tags of `T :: V̂` to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TagBudget {
    Limited(usize),
    Unbounded,
}

impl TagBudget {
    pub fn limit(self) -> Option<usize> {
        match self {
            TagBudget::Limited(n) => Some(n),
            TagBudget::Unbounded => None,
        }
    }
}

impl fmt::Display for TagBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagBudget::Limited(n) => write!(f, "{n}"),
            TagBudget::Unbounded => f.write_str("inf"),
        }
    }
}

impl FromStr for TagBudget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "all" | "unbounded" => Ok(TagBudget::Unbounded),
            other => match other.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(TagBudget::Limited(n)),
                _ => Err(Error::invalid(format!("tag budget {other:?} is not a positive integer or \"inf\""))),
            },
        }
    }
}

impl Serialize for TagBudget {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TagBudget::Limited(n) => serializer.serialize_u64(*n as u64),
            TagBudget::Unbounded => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for TagBudget {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(usize),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(n) => TagBudget::from_str(&n.to_string()),
            Repr::Text(s) => TagBudget::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Where an entry of the augmented order came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Provenance<T> {
    GroundTruth,
    Candidate(T),
}

/// `T :: V̂` truncated to the budget, with relevance levels.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedOrder<T> {
    pub tags: Vec<TagId>,
    pub levels: Vec<usize>,
    pub provenance: Vec<Provenance<T>>,
    pub budget: TagBudget,
}

/// Positions 1-5 get levels 1-5; afterwards each block of five shares a level.
pub fn assign_levels(len: usize) -> Vec<usize> {
    (0..len)
        .map(|i| if i < 5 { i + 1 } else { 6 + (i - 5) / 5 })
        .collect()
}

pub fn augment_order<T: Scalar>(
    ground_truth: &[TagId],
    candidates: &CandidateList<T>,
    budget: TagBudget,
) -> AugmentedOrder<T> {
    let limit = budget.limit().unwrap_or(usize::MAX);
    let truth: HashSet<TagId> = ground_truth.iter().copied().collect();
    let mut tags = Vec::new();
    let mut provenance = Vec::new();
    for &t in ground_truth.iter().take(limit) {
        tags.push(t);
        provenance.push(Provenance::GroundTruth);
    }
    for c in &candidates.entries {
        if tags.len() >= limit {
            break;
        }
        if !truth.contains(&c.tag) {
            tags.push(c.tag);
            provenance.push(Provenance::Candidate(c.score));
        }
    }
    AugmentedOrder {
        levels: assign_levels(tags.len()),
        tags,
        provenance,
        budget,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(entries: &[(usize, f64)]) -> CandidateList<f64> {
        CandidateList {
            entries: entries
                .iter()
                .map(|&(t, s)| Candidate {
                    tag: TagId(t),
                    score: s,
                })
                .collect(),
            image_id: "i".into(),
            user: UserId(0),
            m: 2,
        }
    }

    fn ids(v: &[usize]) -> Vec<TagId> {
        v.iter().map(|&t| TagId(t)).collect()
    }

    #[test]
    fn score_arithmetic() {
        assert_eq!(score_tag(0.5, 0.75, 0.25), 1.0);
        assert_eq!(score_tag(0.0, 0.0, 0.3), -0.3);
        assert_eq!(score_tag(0.0f64, 0.0, 0.0), 0.0);
    }

    #[test]
    fn negative_scores_dropped_and_ties_by_id() {
        let cb = [0.1, 0.2, 0.3];
        let all_negative = rank_scores(3, |t| -cb[t.0], |_| true);
        assert!(all_negative.is_empty());
        let tied = rank_scores(4, |t| if t.0 == 0 { 0.1 } else { 0.5 }, |t| t.0 != 2);
        assert_eq!(tied.iter().map(|c| c.tag.0).collect::<Vec<_>>(), vec![1, 3, 0]);
        // Exactly zero is kept.
        let zero = rank_scores(1, |_| 0.0f64, |_| true);
        assert_eq!(zero.len(), 1);
    }

    #[test]
    fn levels() {
        assert_eq!(assign_levels(12), vec![1, 2, 3, 4, 5, 6, 6, 6, 6, 6, 7, 7]);
        assert_eq!(assign_levels(3), vec![1, 2, 3]);
        assert_eq!(assign_levels(5), vec![1, 2, 3, 4, 5]);
        assert_eq!(assign_levels(16)[15], 8);
    }

    #[test]
    fn concatenate_and_truncate() {
        let v = list(&[(2, 0.9), (3, 0.5)]);
        let t = ids(&[0, 1]);
        assert_eq!(augment_order(&t, &v, TagBudget::Limited(3)).tags, ids(&[0, 1, 2]));
        assert_eq!(augment_order(&t, &v, TagBudget::Unbounded).tags, ids(&[0, 1, 2, 3]));
        assert_eq!(augment_order(&t, &v, TagBudget::Limited(100)).tags.len(), 4);
        let dup = list(&[(0, 0.9), (1, 0.5)]);
        let out = augment_order(&ids(&[0]), &dup, TagBudget::Unbounded);
        assert_eq!(out.tags, ids(&[0, 1]));
        assert_eq!(out.provenance, vec![Provenance::GroundTruth, Provenance::Candidate(0.5)]);
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("inf".parse::<TagBudget>().unwrap(), TagBudget::Unbounded);
        assert_eq!("40".parse::<TagBudget>().unwrap(), TagBudget::Limited(40));
        assert!("0".parse::<TagBudget>().is_err());
        let v: Vec<TagBudget> = serde_json::from_str("[10, \"inf\"]").unwrap();
        assert_eq!(v, vec![TagBudget::Limited(10), TagBudget::Unbounded]);
        assert_eq!(serde_json::to_string(&v).unwrap(), "[10,\"inf\"]");
    }
}
