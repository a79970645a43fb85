//! Tag feature mapping, pairwise preference constraints and the per-user
//! linear ranking model trained by stochastic subgradient descent on the
//! pairwise hinge loss.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::{assign_levels, augment_order, AugmentedOrder, CandidateList, Provenance, TagBudget};
use crate::corpus::{SessionId, TagId};
use crate::embeddings::TagEmbeddings;
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use crate::tagstats::GlobalTagStats;

/// Affine z-score transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardizer<T> {
    pub mean: T,
    pub std_dev: T,
}

impl<T: Scalar> Standardizer<T> {
    /// Population mean and standard deviation; a zero spread maps to 1.
    pub fn fit(values: &[T]) -> Self {
        if values.is_empty() {
            return Standardizer {
                mean: T::zero(),
                std_dev: T::one(),
            };
        }
        let n = T::from_count(values.len());
        let mean = values.iter().copied().sum::<T>() / n;
        let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let std_dev = if var > T::zero() { var.sqrt() } else { T::one() };
        Standardizer { mean, std_dev }
    }

    #[inline]
    pub fn apply(&self, x: T) -> T {
        (x - self.mean) / self.std_dev
    }
}

/// Precomputed `Φ(t) = w2v(t) :: z(mp) :: z(vp) :: z(cb)` for every tag.
///
/// The query image is not part of the mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    dim: usize,
    rows: Vec<T>,
    /// Standardizers for mp, vp and cb, fitted on tags seen in training.
    pub standardization: Option<[Standardizer<T>; 3]>,
}

impl<T: Scalar> FeatureMap<T> {
    /// Tags never seen in a training list have no position statistics; their
    /// mp and vp features are imputed with the training mean (z = 0).
    pub fn new(embeddings: &TagEmbeddings<T>, stats: &GlobalTagStats<T>) -> Result<Self> {
        let vocab = stats.vocab_size();
        if embeddings.len() != vocab {
            return Err(Error::invalid(format!(
                "{} embeddings for a vocabulary of {vocab}",
                embeddings.len()
            )));
        }
        let seen: Vec<usize> = (0..vocab).filter(|&t| stats.observations[t] > 0).collect();
        let pick = |v: &[T]| seen.iter().map(|&t| v[t]).collect::<Vec<_>>();
        let z = [
            Standardizer::fit(&pick(&stats.mp)),
            Standardizer::fit(&pick(&stats.vp)),
            Standardizer::fit(&pick(&stats.cb)),
        ];
        let dim = embeddings.dim() + 3;
        let mut rows = Vec::with_capacity(vocab * dim);
        for t in 0..vocab {
            rows.extend_from_slice(embeddings.embedding_of(TagId(t))?);
            if stats.observations[t] > 0 {
                rows.push(z[0].apply(stats.mp[t]));
                rows.push(z[1].apply(stats.vp[t]));
            } else {
                rows.push(T::zero());
                rows.push(T::zero());
            }
            rows.push(z[2].apply(stats.cb[t]));
        }
        Ok(FeatureMap {
            dim,
            rows,
            standardization: Some(z),
        })
    }

    /// Uses the given rows verbatim as tag features.
    pub fn from_rows(dim: usize, rows: Vec<Vec<T>>) -> Result<Self> {
        let embeddings = TagEmbeddings::from_rows(dim, rows)?;
        let rows = (0..embeddings.len())
            .flat_map(|t| embeddings.embedding_of(TagId(t)).unwrap().to_vec())
            .collect();
        Ok(FeatureMap {
            dim,
            rows,
            standardization: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn phi(&self, tag: TagId) -> Result<&[T]> {
        if tag.0 >= self.vocab_size() {
            return Err(Error::UnknownTag(tag.to_string()));
        }
        Ok(self.phi_unchecked(tag))
    }

    #[inline]
    fn phi_unchecked(&self, tag: TagId) -> &[T] {
        &self.rows[tag.0 * self.dim..(tag.0 + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    /// Both tags from the user's list.
    SupervisedOrder,
    /// User tag over a mined candidate.
    SupervisedVsCandidates,
    /// Two mined candidates with different scores.
    SemiSupervised,
}

/// "`preferred` should rank above `dispreferred`" for one session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PreferencePair {
    pub preferred: TagId,
    pub dispreferred: TagId,
    pub session: SessionId,
    pub origin: PairOrigin,
}

/// Which tags of a session supply constraints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n_tags")]
pub enum PairMode {
    /// Only the user's own list.
    SupervisedOnly,
    /// Only the mined candidate list.
    SemiOnly,
    /// The user's list followed by candidates, truncated to the budget.
    Combined(TagBudget),
}

/// How positions in an order are turned into preference levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairGrouping {
    /// First five positions individually, then blocks of five.
    #[default]
    Levels,
    /// Every position is its own level.
    AllPairs,
}

/// Constraints from an ordered list: each tag is preferred to every tag at a
/// strictly higher level. Two mined candidates with equal scores yield no pair.
pub fn pairs_from_order<T: Scalar>(
    session: SessionId,
    order: &AugmentedOrder<T>,
    grouping: PairGrouping,
) -> Vec<PreferencePair> {
    let levels: Vec<usize> = match grouping {
        PairGrouping::Levels => order.levels.clone(),
        PairGrouping::AllPairs => (1..=order.tags.len()).collect(),
    };
    let mut pairs = Vec::new();
    for i in 0..order.tags.len() {
        for j in i + 1..order.tags.len() {
            if levels[i] >= levels[j] {
                continue;
            }
            let origin = match (order.provenance[i], order.provenance[j]) {
                (Provenance::GroundTruth, Provenance::GroundTruth) => PairOrigin::SupervisedOrder,
                (Provenance::GroundTruth, Provenance::Candidate(_)) => PairOrigin::SupervisedVsCandidates,
                (Provenance::Candidate(a), Provenance::Candidate(b)) => {
                    if a == b {
                        continue;
                    }
                    PairOrigin::SemiSupervised
                }
                // A candidate never precedes a user tag in a well-formed order.
                (Provenance::Candidate(_), Provenance::GroundTruth) => PairOrigin::SupervisedVsCandidates,
            };
            pairs.push(PreferencePair {
                preferred: order.tags[i],
                dispreferred: order.tags[j],
                session,
                origin,
            });
        }
    }
    pairs
}

/// The ordered list a mode trains on.
pub fn order_for_mode<T: Scalar>(
    ground_truth: &[TagId],
    candidates: &CandidateList<T>,
    mode: PairMode,
) -> AugmentedOrder<T> {
    match mode {
        PairMode::SupervisedOnly => AugmentedOrder {
            tags: ground_truth.to_vec(),
            levels: assign_levels(ground_truth.len()),
            provenance: vec![Provenance::GroundTruth; ground_truth.len()],
            budget: TagBudget::Limited(ground_truth.len().max(1)),
        },
        PairMode::SemiOnly => augment_order(&[], candidates, TagBudget::Unbounded),
        PairMode::Combined(budget) => augment_order(ground_truth, candidates, budget),
    }
}

pub fn build_pairs<T: Scalar>(
    session: SessionId,
    ground_truth: &[TagId],
    candidates: &CandidateList<T>,
    mode: PairMode,
    grouping: PairGrouping,
) -> Vec<PreferencePair> {
    pairs_from_order(session, &order_for_mode(ground_truth, candidates, mode), grouping)
}

/// Every user tag over every vocabulary tag outside the user's list.
pub fn full_vocabulary_pairs(session: SessionId, ground_truth: &[TagId], vocab_size: usize) -> Vec<PreferencePair> {
    let truth: HashSet<TagId> = ground_truth.iter().copied().collect();
    ground_truth
        .iter()
        .flat_map(|&t| {
            (0..vocab_size)
                .map(TagId)
                .filter(|v| !truth.contains(v))
                .map(move |v| PreferencePair {
                    preferred: t,
                    dispreferred: v,
                    session,
                    origin: PairOrigin::SupervisedVsCandidates,
                })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Slack penalty weight.
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            c: 0.01,
            epochs: 20,
            seed: 1,
        }
    }
}

/// One user's linear ranking function over `Φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct UserModel<T> {
    pub user: String,
    pub w: Vec<T>,
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
    pub pair_count: usize,
}

fn difference<T: Scalar>(fm: &FeatureMap<T>, pair: &PreferencePair, out: &mut [T]) {
    let (a, b) = (fm.phi_unchecked(pair.preferred), fm.phi_unchecked(pair.dispreferred));
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = x - y;
    }
}

fn check_pairs<T: Scalar>(pairs: &[PreferencePair], fm: &FeatureMap<T>) -> Result<()> {
    let n = fm.vocab_size();
    match pairs
        .iter()
        .flat_map(|p| [p.preferred, p.dispreferred])
        .find(|t| t.0 >= n)
    {
        Some(t) => Err(Error::UnknownTag(t.to_string())),
        None => Ok(()),
    }
}

/// `½‖w‖² + C Σ max(0, 1 − w·(Φ(a) − Φ(b)))`.
pub fn objective<T: Scalar>(w: &[T], pairs: &[PreferencePair], fm: &FeatureMap<T>, c: T) -> T {
    let mut x = vec![T::zero(); fm.dim()];
    let hinge: T = pairs
        .iter()
        .map(|p| {
            difference(fm, p, &mut x);
            (T::one() - dot(w, &x)).max(T::zero())
        })
        .sum();
    dot(w, w) / T::lit(2.0) + c * hinge
}

/// A subgradient of [`objective`]: `w − C Σ_{margin < 1} x`.
pub fn subgradient<T: Scalar>(w: &[T], pairs: &[PreferencePair], fm: &FeatureMap<T>, c: T) -> Vec<T> {
    let mut g = w.to_vec();
    let mut x = vec![T::zero(); fm.dim()];
    for p in pairs {
        difference(fm, p, &mut x);
        if dot(w, &x) < T::one() {
            for (gi, &xi) in g.iter_mut().zip(&x) {
                *gi -= c * xi;
            }
        }
    }
    g
}

/// Pegasos iterate stored as `w = s·v` so shrinking and projection are O(1).
/// The running sum of iterates is `v·acc − correction`.
struct ScaledWeights<T> {
    v: Vec<T>,
    s: T,
    v_norm2: T,
    acc: T,
    correction: Vec<T>,
}

impl<T: Scalar> ScaledWeights<T> {
    fn new(dim: usize) -> Self {
        ScaledWeights {
            v: vec![T::zero(); dim],
            s: T::one(),
            v_norm2: T::zero(),
            acc: T::zero(),
            correction: vec![T::zero(); dim],
        }
    }

    fn margin(&self, a: &[T], b: &[T]) -> T {
        self.s * (dot(&self.v, a) - dot(&self.v, b))
    }

    fn norm(&self) -> T {
        self.s.abs() * self.v_norm2.max(T::zero()).sqrt()
    }

    fn scale(&mut self, factor: T) {
        if factor == T::zero() {
            self.fold();
            self.v.iter_mut().for_each(|x| *x = T::zero());
            self.v_norm2 = T::zero();
        } else {
            self.s *= factor;
            if self.s.abs() < T::lit(1e-4) {
                self.fold();
            }
        }
    }

    /// w += eta·(a − b)
    fn add_difference(&mut self, eta: T, a: &[T], b: &[T]) {
        let delta = eta / self.s;
        let (mut vx, mut xx) = (T::zero(), T::zero());
        for (((v, c), &x), &y) in self.v.iter_mut().zip(&mut self.correction).zip(a).zip(b) {
            let d = x - y;
            vx += *v * d;
            xx += d * d;
            *v += delta * d;
            *c += delta * d * self.acc;
        }
        self.v_norm2 += T::lit(2.0) * delta * vx + delta * delta * xx;
    }

    fn accumulate(&mut self) {
        self.acc += self.s;
    }

    /// Moves the scale into `v` and restarts the sum bookkeeping.
    fn fold(&mut self) {
        for (v, c) in self.v.iter_mut().zip(&mut self.correction) {
            let sum = *v * self.acc - *c;
            *v *= self.s;
            *c = -sum;
        }
        self.v_norm2 = self.v.iter().map(|&x| x * x).sum();
        self.s = T::one();
        self.acc = T::zero();
    }

    fn average(&self, steps: usize) -> Vec<T> {
        let n = T::from_count(steps.max(1));
        self.v
            .iter()
            .zip(&self.correction)
            .map(|(&v, &c)| (v * self.acc - c) / n)
            .collect()
    }
}

/// Minimizes [`objective`] with Pegasos: `λ = 1/(C·P)`, step `1/(λt)`,
/// projection onto the `1/√λ` ball, one seeded shuffle per epoch. Returns the
/// average of all iterates.
pub fn train_user_model<T: Scalar>(
    user: &str,
    pairs: &[PreferencePair],
    fm: &FeatureMap<T>,
    config: &SolverConfig,
) -> Result<UserModel<T>> {
    if pairs.is_empty() {
        return Err(Error::NoConstraints { user: user.into() });
    }
    if !(config.c > 0.0) || config.epochs == 0 {
        return Err(Error::invalid("C must be positive and epochs at least 1"));
    }
    check_pairs(pairs, fm)?;
    let lambda = T::lit(1.0 / (config.c * pairs.len() as f64));
    let radius = T::one() / lambda.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut w = ScaledWeights::new(fm.dim());
    let mut t = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let tt = T::from_count(t);
            let eta = T::one() / (lambda * tt);
            let (a, b) = (fm.phi_unchecked(pairs[i].preferred), fm.phi_unchecked(pairs[i].dispreferred));
            let violated = w.margin(a, b) < T::one();
            w.scale(T::one() - T::one() / tt);
            if violated {
                w.add_difference(eta, a, b);
            }
            let norm = w.norm();
            if norm > radius {
                w.scale(radius / norm);
            }
            w.accumulate();
        }
    }
    let avg = w.average(t);
    if avg.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite weights for user {user}")));
    }
    Ok(UserModel {
        user: user.into(),
        w: avg,
        c: config.c,
        epochs: config.epochs,
        seed: config.seed,
        pair_count: pairs.len(),
    })
}

impl<T: Scalar> UserModel<T> {
    pub fn score(&self, fm: &FeatureMap<T>, tag: TagId) -> Result<T> {
        Ok(dot(&self.w, fm.phi(tag)?))
    }
}

/// Sorts by descending `w·Φ(t)`, ties by ascending tag id.
pub fn rank_tags<T: Scalar>(w: &[T], candidate_tags: &[TagId], fm: &FeatureMap<T>) -> Result<Vec<TagId>> {
    if w.len() != fm.dim() {
        return Err(Error::DimensionMismatch {
            expected: fm.dim(),
            found: w.len(),
            line: None,
        });
    }
    let mut scored = candidate_tags
        .iter()
        .map(|&t| Ok((dot(w, fm.phi(t)?), t)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    Ok(scored.into_iter().map(|(_, t)| t).collect())
}

/// Writes each model as a header line `user_id dim C epochs seed` followed by
/// a line of `dim` weights.
pub fn write_models<T: Scalar, W: Write>(models: &[UserModel<T>], writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for m in models {
        if m.user.is_empty() || m.user.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("user id {:?} cannot be written", m.user)));
        }
        writeln!(w, "{} {} {} {} {}", m.user, m.w.len(), m.c, m.epochs, m.seed)?;
        let line: Vec<String> = m.w.iter().map(T::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_models<T: Scalar, R: Read>(reader: R) -> Result<Vec<UserModel<T>>> {
    let bad = |line: usize, message: String| Error::Parse { line, message };
    let mut models = Vec::new();
    let mut lines = BufReader::new(reader)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
    while let Some((i, header)) = lines.next() {
        let header = header?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(i + 1, format!("bad model header {header:?}")));
        }
        let num = |s: &str, what: &str| bad(i + 1, format!("bad {what} {s:?}"));
        let dim: usize = f[1].parse().map_err(|_| num(f[1], "dim"))?;
        let c: f64 = f[2].parse().map_err(|_| num(f[2], "C"))?;
        let epochs: usize = f[3].parse().map_err(|_| num(f[3], "epochs"))?;
        let seed: u64 = f[4].parse().map_err(|_| num(f[4], "seed"))?;
        let (j, body) = lines
            .next()
            .ok_or_else(|| bad(i + 2, "missing weight line".into()))?;
        let body = body?;
        let w = body
            .split_whitespace()
            .map(|x| x.parse::<T>().map_err(|_| bad(j + 1, format!("bad weight {x:?}"))))
            .collect::<Result<Vec<T>>>()?;
        if w.len() != dim {
            return Err(bad(j + 1, format!("expected {dim} weights, found {}", w.len())));
        }
        models.push(UserModel {
            user: f[0].to_string(),
            w,
            c,
            epochs,
            seed,
            pair_count: 0,
        });
    }
    Ok(models)
}
