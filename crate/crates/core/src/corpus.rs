//! Raw record ingestion, tag/user filtering and per-user train/test splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

macro_rules! dense_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

dense_id!(
    /// Dense vocabulary index, `0..vocabulary.len()`.
    TagId
);
dense_id!(
    /// Dense session index into [`Corpus::sessions`].
    SessionId
);
dense_id!(
    /// Dense user index into [`Corpus::user_names`].
    UserId
);

/// One line of the record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RawRecord<T> {
    pub image_id: String,
    pub user_id: String,
    pub tags: Vec<String>,
    pub features: Vec<T>,
}

/// A single tagging event: one user's ordered tag list for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Session<T> {
    pub id: SessionId,
    pub image_id: String,
    pub user: UserId,
    /// Tags in the order the user applied them; duplicate-free.
    pub tags: Vec<TagId>,
    pub features: Vec<T>,
}

impl<T> Session<T> {
    /// 1-based position of `tag` in this session's list.
    pub fn position_of(&self, tag: TagId) -> Option<usize> {
        self.tags.iter().position(|&t| t == tag).map(|p| p + 1)
    }
}

/// Filtered tag set with dense ids assigned in lexicographic tag order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TagVocabulary {
    names: Vec<String>,
    ids: HashMap<String, TagId>,
    occurrences: Vec<usize>,
}

impl TagVocabulary {
    /// Builds a vocabulary from `(tag, occurrence_count)` pairs.
    pub fn from_counts<I>(counts: I) -> Self
    where
        I: IntoIterator<Item = (String, usize)>,
    {
        let sorted: BTreeMap<String, usize> = counts.into_iter().collect();
        let mut vocab = TagVocabulary::default();
        for (name, count) in sorted {
            vocab.ids.insert(name.clone(), TagId(vocab.names.len()));
            vocab.names.push(name);
            vocab.occurrences.push(count);
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, tag: &str) -> Option<TagId> {
        self.ids.get(tag).copied()
    }

    pub fn name(&self, id: TagId) -> Option<&str> {
        self.names.get(id.0).map(String::as_str)
    }

    /// Number of retained images whose tag list contains `id`.
    pub fn occurrence_count(&self, id: TagId) -> usize {
        self.occurrences.get(id.0).copied().unwrap_or(0)
    }

    pub fn contains(&self, id: TagId) -> bool {
        id.0 < self.names.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TagId, &str)> + '_ {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (TagId(i), n.as_str()))
    }

    /// Writes `tag_id,tag,occurrences` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["tag_id", "tag", "occurrences"])?;
        for (id, name) in self.iter() {
            w.write_record([
                id.to_string(),
                name.to_string(),
                self.occurrence_count(id).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Filtering thresholds applied while loading.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusFilter {
    pub min_occurrences: usize,
    pub min_user_images: usize,
}

impl Default for CorpusFilter {
    fn default() -> Self {
        CorpusFilter {
            min_occurrences: 50,
            min_user_images: 6,
        }
    }
}

/// Immutable filtered corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus<T> {
    pub sessions: Vec<Session<T>>,
    pub vocabulary: TagVocabulary,
    pub user_names: Vec<String>,
    /// Session ids per user, ascending.
    pub user_sessions: Vec<Vec<SessionId>>,
    pub feature_dim: usize,
    user_ids: HashMap<String, UserId>,
}

/// Lowercases, trims and collapses internal whitespace.
pub fn normalize_tag(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalizes a tag list, dropping empty tags and later duplicates.
pub fn normalize_tags<S: AsRef<str>>(raw: &[S]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    raw.iter()
        .map(|t| normalize_tag(t.as_ref()))
        .filter(|t| !t.is_empty() && seen.insert(t.clone()))
        .collect()
}

/// Parses newline-delimited JSON records. Blank lines are skipped.
pub fn parse_records<T: Scalar, R: Read>(reader: R) -> Result<Vec<RawRecord<T>>> {
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord<T> = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.features.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty feature vector".into(),
            });
        }
        if record.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: "non-finite feature value".into(),
            });
        }
        match dim {
            None => dim = Some(record.features.len()),
            Some(d) if d != record.features.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: record.features.len(),
                    line: Some(line_no),
                })
            }
            Some(_) => {}
        }
        records.push(record);
    }
    Ok(records)
}

/// Reads and filters a record file.
pub fn load_corpus<T: Scalar>(path: impl AsRef<Path>, filter: CorpusFilter) -> Result<Corpus<T>> {
    let file = File::open(path)?;
    let records = parse_records(file)?;
    Corpus::from_records(records, filter)
}

impl<T: Scalar> Corpus<T> {
    /// Applies tag and user filtering to a fixed point and assigns dense ids.
    ///
    /// One round counts tags over the surviving sessions, drops rare tags from
    /// every list, drops emptied sessions, then drops users below quota.
    /// Rounds repeat until nothing changes.
    pub fn from_records(records: Vec<RawRecord<T>>, filter: CorpusFilter) -> Result<Self> {
        if filter.min_occurrences == 0 || filter.min_user_images == 0 {
            return Err(Error::invalid("filter thresholds must be at least 1"));
        }
        let feature_dim = records.first().map(|r| r.features.len()).unwrap_or(0);
        if let Some((i, r)) = records
            .iter()
            .enumerate()
            .find(|(_, r)| r.features.len() != feature_dim)
        {
            return Err(Error::DimensionMismatch {
                expected: feature_dim,
                found: r.features.len(),
                line: Some(i + 1),
            });
        }

        // Intern raw tags so the fixed-point loop works on integers.
        let mut interned: HashMap<String, usize> = HashMap::new();
        let mut names: Vec<String> = Vec::new();
        let mut lists: Vec<Vec<usize>> = records
            .iter()
            .map(|r| {
                normalize_tags(&r.tags)
                    .into_iter()
                    .map(|t| {
                        *interned.entry(t.clone()).or_insert_with(|| {
                            names.push(t);
                            names.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();
        let mut alive: Vec<bool> = lists.iter().map(|l| !l.is_empty()).collect();

        let mut counts = vec![0usize; names.len()];
        loop {
            let mut changed = false;
            counts.iter_mut().for_each(|c| *c = 0);
            for (list, _) in lists.iter().zip(&alive).filter(|(_, &a)| a) {
                for &t in list {
                    counts[t] += 1;
                }
            }
            for (list, live) in lists.iter_mut().zip(alive.iter_mut()) {
                if !*live {
                    continue;
                }
                let before = list.len();
                list.retain(|&t| counts[t] >= filter.min_occurrences);
                if list.len() != before {
                    changed = true;
                }
                if list.is_empty() {
                    *live = false;
                }
            }
            let mut per_user: HashMap<&str, usize> = HashMap::new();
            for (r, _) in records.iter().zip(&alive).filter(|(_, &a)| a) {
                *per_user.entry(r.user_id.as_str()).or_default() += 1;
            }
            for (r, live) in records.iter().zip(alive.iter_mut()) {
                if *live && per_user[r.user_id.as_str()] < filter.min_user_images {
                    *live = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        // `counts` reflects the final surviving sessions.
        let vocabulary = TagVocabulary::from_counts(
            counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(t, &c)| (names[t].clone(), c)),
        );
        let user_names: Vec<String> = records
            .iter()
            .zip(&alive)
            .filter(|(_, &a)| a)
            .map(|(r, _)| r.user_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let user_ids: HashMap<String, UserId> = user_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), UserId(i)))
            .collect();

        let mut sessions = Vec::new();
        let mut user_sessions = vec![Vec::new(); user_names.len()];
        for ((record, list), _) in records
            .into_iter()
            .zip(lists)
            .zip(alive)
            .filter(|(_, a)| *a)
        {
            let id = SessionId(sessions.len());
            let user = user_ids[&record.user_id];
            user_sessions[user.0].push(id);
            sessions.push(Session {
                id,
                image_id: record.image_id,
                user,
                tags: list
                    .into_iter()
                    .map(|t| vocabulary.id(&names[t]).expect("surviving tag in vocabulary"))
                    .collect(),
                features: record.features,
            });
        }
        if sessions.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Corpus {
            sessions,
            vocabulary,
            user_names,
            user_sessions,
            feature_dim,
            user_ids,
        })
    }

    pub fn session(&self, id: SessionId) -> Result<&Session<T>> {
        self.sessions.get(id.0).ok_or(Error::UnknownSession(id.0))
    }

    pub fn user_id(&self, name: &str) -> Option<UserId> {
        self.user_ids.get(name).copied()
    }

    pub fn user_name(&self, user: UserId) -> &str {
        &self.user_names[user.0]
    }

    pub fn num_users(&self) -> usize {
        self.user_names.len()
    }

    /// Converts a session back to its record form.
    pub fn to_record(&self, session: &Session<T>) -> RawRecord<T> {
        RawRecord {
            image_id: session.image_id.clone(),
            user_id: self.user_name(session.user).to_string(),
            tags: session
                .tags
                .iter()
                .map(|&t| self.vocabulary.name(t).unwrap_or_default().to_string())
                .collect(),
            features: session.features.clone(),
        }
    }

    /// Writes the corpus in the same record format it was read from.
    pub fn write_jsonl<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        for session in &self.sessions {
            serde_json::to_writer(&mut w, &self.to_record(session))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test,
}

impl Partition {
    fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
        }
    }
}

/// Disjoint per-user halving of the sessions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: BTreeSet<SessionId>,
    pub test: BTreeSet<SessionId>,
    pub seed: u64,
}

/// Shuffles each user's sessions with a seeded generator and halves them;
/// an odd session goes to train.
pub fn split_corpus<T>(corpus: &Corpus<T>, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: BTreeSet::new(),
        test: BTreeSet::new(),
        seed,
    };
    for (user, ids) in corpus.user_sessions.iter().enumerate() {
        if ids.len() < 2 {
            return Err(Error::Unsplittable {
                user: corpus.user_names[user].clone(),
            });
        }
        let mut ids = ids.clone();
        ids.shuffle(&mut rng);
        let n_train = ids.len().div_ceil(2);
        split.train.extend(&ids[..n_train]);
        split.test.extend(&ids[n_train..]);
    }
    Ok(split)
}

impl Split {
    pub fn partition(&self, id: SessionId) -> Option<Partition> {
        if self.train.contains(&id) {
            Some(Partition::Train)
        } else if self.test.contains(&id) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    pub fn train_sessions<'a, T>(&self, corpus: &'a Corpus<T>) -> Vec<&'a Session<T>> {
        self.train.iter().map(|id| &corpus.sessions[id.0]).collect()
    }

    pub fn test_sessions<'a, T>(&self, corpus: &'a Corpus<T>) -> Vec<&'a Session<T>> {
        self.test.iter().map(|id| &corpus.sessions[id.0]).collect()
    }

    /// Training sessions grouped by user, in user id order.
    pub fn train_by_user<'a, T>(&self, corpus: &'a Corpus<T>) -> Vec<Vec<&'a Session<T>>> {
        corpus
            .user_sessions
            .iter()
            .map(|ids| {
                ids.iter()
                    .filter(|id| self.train.contains(id))
                    .map(|id| &corpus.sessions[id.0])
                    .collect()
            })
            .collect()
    }

    /// Writes `session_id,partition` rows in session order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["session_id", "partition"])?;
        let mut all: Vec<(SessionId, Partition)> = self
            .train
            .iter()
            .map(|&id| (id, Partition::Train))
            .chain(self.test.iter().map(|&id| (id, Partition::Test)))
            .collect();
        all.sort_by_key(|(id, _)| *id);
        for (id, part) in all {
            w.write_record([id.to_string(), part.as_str().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, seed: u64) -> Result<Self> {
        let mut split = Split {
            train: BTreeSet::new(),
            test: BTreeSet::new(),
            seed,
        };
        let mut rdr = csv::Reader::from_reader(reader);
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let line = i + 2;
            let bad = |message: String| Error::Parse { line, message };
            let id: usize = row
                .get(0)
                .ok_or_else(|| bad("missing session id".into()))?
                .parse()
                .map_err(|e| bad(format!("session id: {e}")))?;
            match row.get(1) {
                Some("train") => split.train.insert(SessionId(id)),
                Some("test") => split.test.insert(SessionId(id)),
                other => return Err(bad(format!("bad partition {other:?}"))),
            };
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(image: &str, user: &str, tags: &[&str], x: f64) -> RawRecord<f64> {
        RawRecord {
            image_id: image.into(),
            user_id: user.into(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            features: vec![x, 0.0],
        }
    }

    fn filter(min_occurrences: usize, min_user_images: usize) -> CorpusFilter {
        CorpusFilter {
            min_occurrences,
            min_user_images,
        }
    }

    #[test]
    fn nothing_filtered() {
        let mut records = Vec::new();
        for u in ["u1", "u2", "u3"] {
            for i in 0..2 {
                records.push(rec(&format!("{u}-{i}"), u, &["sky", "blue"], i as f64));
            }
        }
        let corpus = Corpus::from_records(records, filter(2, 2)).unwrap();
        assert_eq!(corpus.sessions.len(), 6);
        assert_eq!(corpus.vocabulary.len(), 2);
        assert_eq!(corpus.num_users(), 3);
        assert_eq!(corpus.vocabulary.occurrence_count(corpus.vocabulary.id("sky").unwrap()), 6);
    }

    #[test]
    fn rare_tag_removed() {
        let records = vec![
            rec("a", "u", &["sky", "rare"], 0.0),
            rec("b", "u", &["sky"], 1.0),
        ];
        let corpus = Corpus::from_records(records, filter(2, 1)).unwrap();
        assert!(corpus.vocabulary.id("rare").is_none());
        assert!(corpus.sessions.iter().all(|s| s.tags.len() == 1));
    }

    #[test]
    fn emptied_session_drops_user_below_quota() {
        // u1 has 6 images, one tagged only with a singleton tag.
        let mut records = Vec::new();
        for i in 0..5 {
            records.push(rec(&format!("a{i}"), "u1", &["sky"], i as f64));
        }
        records.push(rec("a5", "u1", &["unique"], 5.0));
        for i in 0..6 {
            records.push(rec(&format!("b{i}"), "u2", &["sky", "sea"], i as f64));
        }
        let corpus = Corpus::from_records(records, filter(2, 6)).unwrap();
        assert_eq!(corpus.num_users(), 1);
        assert_eq!(corpus.user_names, vec!["u2".to_string()]);
        assert_eq!(corpus.sessions.len(), 6);
        // Counts are over the surviving sessions only.
        assert_eq!(corpus.vocabulary.occurrence_count(corpus.vocabulary.id("sky").unwrap()), 6);
    }

    #[test]
    fn dropping_users_cascades_to_tags() {
        // "sea" reaches the threshold only through u1, who is dropped.
        let records = vec![
            rec("a", "u1", &["sea"], 0.0),
            rec("b", "u2", &["sea", "sky"], 0.0),
            rec("c", "u2", &["sky"], 0.0),
        ];
        let corpus = Corpus::from_records(records, filter(2, 2)).unwrap();
        assert!(corpus.vocabulary.id("sea").is_none());
        assert_eq!(corpus.sessions.len(), 2);
    }

    #[test]
    fn normalization_keeps_first_occurrence() {
        assert_eq!(
            normalize_tags(&["  New   York ", "sky", "new york", "", "SKY"]),
            vec!["new york".to_string(), "sky".to_string()]
        );
    }

    #[test]
    fn parse_error_names_line() {
        let text = "{\"image_id\":\"a\",\"user_id\":\"u\",\"tags\":[\"x\"],\"features\":[1.0]}\nnot json\n";
        match parse_records::<f64, _>(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_names_both_dims() {
        let text = "{\"image_id\":\"a\",\"user_id\":\"u\",\"tags\":[\"x\"],\"features\":[1.0,2.0]}\n\
                    {\"image_id\":\"b\",\"user_id\":\"u\",\"tags\":[\"x\"],\"features\":[1.0]}\n";
        let err = parse_records::<f64, _>(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 2") && msg.contains("found 1"), "{msg}");
    }

    #[test]
    fn empty_corpus_error() {
        let records = vec![rec("a", "u", &["x"], 0.0)];
        assert!(matches!(
            Corpus::from_records(records, filter(2, 1)),
            Err(Error::EmptyCorpus)
        ));
    }

    fn users_with(counts: &[usize]) -> Corpus<f64> {
        let mut records = Vec::new();
        for (u, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(rec(&format!("{u}-{i}"), &format!("user{u}"), &["t"], i as f64));
            }
        }
        Corpus::from_records(records, filter(1, 1)).unwrap()
    }

    #[test]
    fn split_halves_per_user() {
        let corpus = users_with(&[6, 7]);
        let split = split_corpus(&corpus, 3).unwrap();
        let train = split.train_by_user(&corpus);
        assert_eq!(train[0].len(), 3);
        assert_eq!(train[1].len(), 4);
        assert_eq!(split.test.len(), 6);
        assert!(split.train.is_disjoint(&split.test));
    }

    #[test]
    fn split_is_deterministic() {
        let corpus = users_with(&[9, 4, 5]);
        let a = split_corpus(&corpus, 11).unwrap();
        let b = split_corpus(&corpus, 11).unwrap();
        assert_eq!(a, b);
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ba).unwrap();
        b.write_csv(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(Split::read_csv(&ba[..], 11).unwrap(), a);
    }

    #[test]
    fn single_session_user_cannot_split() {
        let corpus = users_with(&[3, 1]);
        assert!(matches!(
            split_corpus(&corpus, 0),
            Err(Error::Unsplittable { .. })
        ));
    }
}
