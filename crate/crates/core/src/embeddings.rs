//! Skip-gram tag embeddings trained with negative sampling.
//!
//! Each training image is a document and its tag list the words. Training is
//! single-threaded so the vectors are a pure function of the inputs and seed.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Session, TagId, TagVocabulary};
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

const MAX_EXP: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 100,
            window: 5,
            negatives: 5,
            epochs: 5,
            initial_lr: 0.025,
            min_lr: 1e-4,
            seed: 1,
        }
    }
}

/// One input vector per vocabulary tag, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TagEmbeddings<T> {
    dim: usize,
    vectors: Vec<T>,
    pub seed: u64,
}

impl<T: Scalar> TagEmbeddings<T> {
    /// Wraps precomputed vectors, one row of `dim` values per tag.
    pub fn from_rows(dim: usize, rows: Vec<Vec<T>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be at least 1"));
        }
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                    line: None,
                });
            }
            vectors.extend(row);
        }
        Ok(TagEmbeddings {
            dim,
            vectors,
            seed: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn embedding_of(&self, tag: TagId) -> Result<&[T]> {
        if tag.0 >= self.len() {
            return Err(Error::UnknownTag(tag.to_string()));
        }
        Ok(&self.vectors[tag.0 * self.dim..(tag.0 + 1) * self.dim])
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|x| x.is_finite())
    }

    /// Header `dim vocab_size`, then `tag v_1 ... v_dim` per line.
    pub fn write_text<W: Write>(&self, vocabulary: &TagVocabulary, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        writeln!(w, "{} {}", self.dim, self.len())?;
        for (id, name) in vocabulary.iter() {
            write!(w, "{name}")?;
            for x in self.embedding_of(id)? {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the text format back. Tags may contain spaces: the last `dim`
    /// fields of each line are the vector, everything before is the tag.
    pub fn read_text<R: Read>(reader: R, vocabulary: &TagVocabulary) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = BufReader::new(reader).lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))??;
        let mut fields = header.split_whitespace().map(str::parse::<usize>);
        let (dim, count) = match (fields.next(), fields.next()) {
            (Some(Ok(d)), Some(Ok(n))) if d > 0 => (d, n),
            _ => return Err(bad(1, format!("bad header {header:?}"))),
        };
        if count != vocabulary.len() {
            return Err(bad(
                1,
                format!("{count} vectors but vocabulary has {}", vocabulary.len()),
            ));
        }
        let mut vectors = vec![T::zero(); dim * count];
        let mut seen = vec![false; count];
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() <= dim {
                return Err(bad(line_no, "too few fields".into()));
            }
            let split = parts.len() - dim;
            let name = parts[..split].join(" ");
            let id = vocabulary
                .id(&name)
                .ok_or_else(|| bad(line_no, format!("unknown tag {name:?}")))?;
            for (slot, field) in vectors[id.0 * dim..(id.0 + 1) * dim]
                .iter_mut()
                .zip(&parts[split..])
            {
                *slot = field
                    .parse()
                    .map_err(|_| bad(line_no, format!("bad number {field:?}")))?;
            }
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::UnknownTag(format!(
                "no vector for {:?}",
                vocabulary.name(TagId(missing)).unwrap_or_default()
            )));
        }
        Ok(TagEmbeddings {
            dim,
            vectors,
            seed: 0,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-MAX_EXP, MAX_EXP)).exp())
}

/// Trains skip-gram vectors over the tag lists of `train_sessions`.
///
/// Tags that never occur in a training list keep their random initial vector.
pub fn train_embeddings<T: Scalar>(
    train_sessions: &[&Session<T>],
    vocabulary: &TagVocabulary,
    config: &EmbeddingConfig,
) -> Result<TagEmbeddings<T>> {
    let vocab_size = vocabulary.len();
    let dim = config.dim;
    if train_sessions.is_empty() || vocab_size == 0 {
        return Err(Error::EmptyCorpus);
    }
    if dim == 0 || config.epochs == 0 {
        return Err(Error::invalid("embedding dim and epochs must be at least 1"));
    }
    if !(config.initial_lr > 0.0) {
        return Err(Error::invalid("initial_lr must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let half = 0.5 / dim as f64;
    let mut input: Vec<T> = (0..vocab_size * dim)
        .map(|_| T::lit(rng.random_range(-half..half)))
        .collect();
    let mut output: Vec<T> = vec![T::zero(); vocab_size * dim];

    let mut freq = vec![0usize; vocab_size];
    let mut total_tokens = 0usize;
    for s in train_sessions {
        for &t in &s.tags {
            if t.0 >= vocab_size {
                return Err(Error::UnknownTag(t.to_string()));
            }
            freq[t.0] += 1;
            total_tokens += 1;
        }
    }
    if total_tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    let noise = WeightedIndex::new(freq.iter().map(|&f| (f as f64).powf(0.75)))
        .map_err(|e| Error::invalid(format!("negative-sampling table: {e}")))?;

    let total_steps = (config.epochs * total_tokens) as f64 + 1.0;
    let mut processed = 0usize;
    let mut grad = vec![T::zero(); dim];
    for _ in 0..config.epochs {
        for s in train_sessions {
            let doc = &s.tags;
            for (pos, &center) in doc.iter().enumerate() {
                let lr = (config.initial_lr * (1.0 - processed as f64 / total_steps)).max(config.min_lr);
                processed += 1;
                let lo = pos.saturating_sub(config.window);
                let hi = (pos + config.window + 1).min(doc.len());
                for (cpos, &context) in doc[lo..hi].iter().enumerate() {
                    if lo + cpos == pos {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = T::zero());
                    let c_row = center.0 * dim..(center.0 + 1) * dim;
                    for d in 0..=config.negatives {
                        let (target, label) = if d == 0 {
                            (context.0, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == context.0 {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let t_row = target * dim..(target + 1) * dim;
                        let f = dot(&input[c_row.clone()], &output[t_row.clone()]).as_f64();
                        let g = T::lit((label - sigmoid(f)) * lr);
                        for (gi, &o) in grad.iter_mut().zip(&output[t_row.clone()]) {
                            *gi += g * o;
                        }
                        let (inp, out) = (&input[c_row.clone()], &mut output[t_row]);
                        for (o, &x) in out.iter_mut().zip(inp) {
                            *o += g * x;
                        }
                    }
                    for (x, &g) in input[c_row].iter_mut().zip(&grad) {
                        *x += g;
                    }
                }
            }
        }
    }

    Ok(TagEmbeddings {
        dim,
        vectors: input,
        seed: config.seed,
    })
}
