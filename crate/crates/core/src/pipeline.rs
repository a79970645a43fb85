//! Experiment orchestration: prepare → train → evaluate, in memory or
//! through on-disk artifacts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{rerank, PairStrengths};
use crate::candidates::{CandidateGenerator, CandidateList, TagBudget};
use crate::corpus::{load_corpus, split_corpus, Corpus, CorpusFilter, RawRecord, SessionId, Split, UserId};
use crate::embeddings::{train_embeddings, EmbeddingConfig, TagEmbeddings};
use crate::error::{Error, Result};
use crate::eval::{ablate_random_user, dcg, dcg_at_k, paired_ttest, welch_ttest, EvalReport, ImageScore, TTestResult};
use crate::knn::VisualIndex;
use crate::ranker::{
    build_pairs, full_vocabulary_pairs, rank_tags, read_models, train_user_model, write_models, FeatureMap, PairGrouping,
    PairMode, SolverConfig, UserModel,
};
use crate::scalar::Scalar;
use crate::tagstats::{compute_pb, GlobalTagStats, UserTagStats};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SPLIT_FILE: &str = "split.csv";
pub const VOCABULARY_FILE: &str = "vocabulary.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    SupervisedOnly,
    SemiOnly,
    Combined,
}

impl FromStr for ModeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised_only" | "supervised" => Ok(ModeKind::SupervisedOnly),
            "semi_only" | "semi" => Ok(ModeKind::SemiOnly),
            "combined" => Ok(ModeKind::Combined),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Raw record file read by `prepare`.
    pub corpus: PathBuf,
    pub seed: u64,
    pub min_occurrences: usize,
    pub min_user_images: usize,
    /// Visual neighbors per image.
    pub m: usize,
    pub c: f64,
    pub epochs: usize,
    pub k: usize,
    pub n_tags: Vec<TagBudget>,
    pub mode: ModeKind,
    pub grouping: PairGrouping,
    /// Adds every user tag over every non-user vocabulary tag.
    pub full_vocabulary_negatives: bool,
    pub same_user_neighbors: bool,
    pub threshold: f64,
    pub min_cooccur: usize,
    /// Unpaired Welch test in reports instead of the paired test.
    pub welch: bool,
    pub embedding: EmbeddingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: PathBuf::from("records.jsonl"),
            seed: 1,
            min_occurrences: 50,
            min_user_images: 6,
            m: 50,
            c: 0.01,
            epochs: 20,
            k: 10,
            n_tags: vec![TagBudget::Unbounded],
            mode: ModeKind::Combined,
            grouping: PairGrouping::Levels,
            full_vocabulary_negatives: false,
            same_user_neighbors: true,
            threshold: 0.8,
            min_cooccur: 2,
            welch: false,
            embedding: EmbeddingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn filter(&self) -> CorpusFilter {
        CorpusFilter {
            min_occurrences: self.min_occurrences,
            min_user_images: self.min_user_images,
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            c: self.c,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    /// Pair modes to train, one per tag budget in combined mode.
    pub fn variants(&self) -> Vec<PairMode> {
        match self.mode {
            ModeKind::SupervisedOnly => vec![PairMode::SupervisedOnly],
            ModeKind::SemiOnly => vec![PairMode::SemiOnly],
            ModeKind::Combined => self.n_tags.iter().map(|&n| PairMode::Combined(n)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.epochs == 0 {
            return Err(Error::invalid("m, k and epochs must be at least 1"));
        }
        if !(self.c > 0.0) {
            return Err(Error::invalid("C must be positive"));
        }
        if !(self.threshold > 0.5 && self.threshold <= 1.0) {
            return Err(Error::invalid("threshold must lie in (0.5, 1]"));
        }
        if self.mode == ModeKind::Combined && self.n_tags.is_empty() {
            return Err(Error::invalid("combined mode needs at least one n_tags value"));
        }
        Ok(())
    }

    fn write_to(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(CONFIG_FILE), self.to_toml())?;
        Ok(())
    }
}

/// Short label of a pair mode, also used in file names.
pub fn variant_label(mode: PairMode) -> String {
    match mode {
        PairMode::SupervisedOnly => "supervised_only".into(),
        PairMode::SemiOnly => "semi_only".into(),
        PairMode::Combined(n) => format!("combined_{n}"),
    }
}

fn variant_n_tags(mode: PairMode) -> String {
    match mode {
        PairMode::SupervisedOnly => "T".into(),
        PairMode::SemiOnly => "V".into(),
        PairMode::Combined(n) => n.to_string(),
    }
}

pub fn models_file(mode: PairMode) -> String {
    format!("models_{}.txt", variant_label(mode))
}

/// Filtered corpus and its split.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared<T> {
    pub corpus: Corpus<T>,
    pub split: Split,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

impl<T: Scalar> Prepared<T> {
    pub fn from_records(records: Vec<RawRecord<T>>, config: &ExperimentConfig) -> Result<Self> {
        let corpus = Corpus::from_records(records, config.filter())?;
        let split = split_corpus(&corpus, config.seed)?;
        Ok(Prepared { corpus, split })
    }

    pub fn load_raw(config: &ExperimentConfig) -> Result<Self> {
        let corpus = load_corpus(require(config.corpus.clone())?, config.filter())?;
        let split = split_corpus(&corpus, config.seed)?;
        Ok(Prepared { corpus, split })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.corpus.write_jsonl(File::create(dir.join(CORPUS_FILE))?)?;
        self.split.write_csv(File::create(dir.join(SPLIT_FILE))?)?;
        self.corpus
            .vocabulary
            .write_csv(File::create(dir.join(VOCABULARY_FILE))?)?;
        Ok(())
    }

    pub fn read(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        let corpus = load_corpus(require(dir.join(CORPUS_FILE))?, config.filter())?;
        let split = Split::read_csv(File::open(require(dir.join(SPLIT_FILE))?)?, config.seed)?;
        let covered = split.train.len() + split.test.len();
        if covered != corpus.sessions.len() || split.train.iter().chain(&split.test).any(|id| id.0 >= covered) {
            return Err(Error::Format {
                path: dir.join(SPLIT_FILE).display().to_string(),
                message: "split does not match the prepared corpus".into(),
            });
        }
        Ok(Prepared { corpus, split })
    }
}

/// Trains embeddings on the training split's tag lists.
pub fn fit_embeddings<T: Scalar>(prepared: &Prepared<T>, config: &ExperimentConfig) -> Result<TagEmbeddings<T>> {
    let train = prepared.split.train_sessions(&prepared.corpus);
    train_embeddings(&train, &prepared.corpus.vocabulary, &config.embedding)
}

/// All training-split state shared by training and evaluation.
pub struct Context<'a, T> {
    pub config: &'a ExperimentConfig,
    pub corpus: &'a Corpus<T>,
    pub split: &'a Split,
    pub stats: GlobalTagStats<T>,
    pub pb: Vec<UserTagStats<T>>,
    pub index: VisualIndex<T>,
    pub feature_map: FeatureMap<T>,
    pub strengths: Vec<PairStrengths>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedUser {
    pub user: String,
    pub variant: String,
    pub reason: String,
}

/// Per-user models for one pair mode; `None` where the user had no pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedVariant<T> {
    pub mode: PairMode,
    pub models: Vec<Option<UserModel<T>>>,
    pub skipped: Vec<SkippedUser>,
}

impl<T: Scalar> TrainedVariant<T> {
    pub fn label(&self) -> String {
        variant_label(self.mode)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let models: Vec<UserModel<T>> = self.models.iter().flatten().cloned().collect();
        write_models(&models, File::create(dir.join(models_file(self.mode)))?)
    }

    pub fn read(dir: &Path, mode: PairMode, corpus: &Corpus<T>) -> Result<Self> {
        let path = require(dir.join(models_file(mode)))?;
        let mut models = vec![None; corpus.num_users()];
        for m in read_models::<T, _>(File::open(&path)?)? {
            let id = corpus.user_id(&m.user).ok_or_else(|| Error::UnknownUser(m.user.clone()))?;
            models[id.0] = Some(m);
        }
        let skipped = models
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_none())
            .map(|(u, _)| SkippedUser {
                user: corpus.user_names[u].clone(),
                variant: variant_label(mode),
                reason: "no model on disk".into(),
            })
            .collect();
        Ok(TrainedVariant { mode, models, skipped })
    }
}

/// Ranking methods compared at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// The user's learned model.
    Ranker,
    /// Pairwise-order re-ranking of the candidate list.
    PtRerank,
    /// The candidate list as mined.
    CandidatesOnly,
    /// Another, randomly drawn user's learned model.
    RandomUser,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranker" => Ok(Method::Ranker),
            "ptrerank" => Ok(Method::PtRerank),
            "candidates_only" => Ok(Method::CandidatesOnly),
            "random_user" => Ok(Method::RandomUser),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ranker => "ranker",
            Method::PtRerank => "ptrerank",
            Method::CandidatesOnly => "candidates_only",
            Method::RandomUser => "random_user",
        })
    }
}

/// A report plus its paired test of DCG@k against a reference method.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodReport<T> {
    pub report: EvalReport<T>,
    pub compared_to: Option<String>,
    pub test: Option<TTestResult<T>>,
}

impl<'a, T: Scalar> Context<'a, T> {
    pub fn new(prepared: &'a Prepared<T>, config: &'a ExperimentConfig, embeddings: &TagEmbeddings<T>) -> Result<Self> {
        config.validate()?;
        let corpus = &prepared.corpus;
        let split = &prepared.split;
        let train = split.train_sessions(corpus);
        let stats = GlobalTagStats::compute(&train, corpus.vocabulary.len())?;
        let by_user = split.train_by_user(corpus);
        let pb = by_user.iter().map(|s| compute_pb(s)).collect::<Result<Vec<_>>>()?;
        let strengths = by_user.iter().map(|s| PairStrengths::compute(s)).collect();
        let index = VisualIndex::build(train.iter().copied())?;
        let feature_map = FeatureMap::new(embeddings, &stats)?;
        Ok(Context {
            config,
            corpus,
            split,
            stats,
            pb,
            index,
            feature_map,
            strengths,
        })
    }

    pub fn generator(&self) -> CandidateGenerator<'_, T> {
        CandidateGenerator {
            corpus: self.corpus,
            index: &self.index,
            cb: &self.stats.cb,
            pb: &self.pb,
            m: self.config.m,
            same_user_neighbors: self.config.same_user_neighbors,
        }
    }

    /// Candidates `V̂` for every training session, excluding its own tags.
    pub fn training_candidates(&self) -> Result<BTreeMap<SessionId, CandidateList<T>>> {
        let gen = self.generator();
        let train: Vec<SessionId> = self.split.train.iter().copied().collect();
        train
            .par_iter()
            .map(|&id| {
                let s = &self.corpus.sessions[id.0];
                Ok((id, gen.build_candidates(s, s.user, true)?))
            })
            .collect()
    }

    /// Test-time candidates; the user's tags are unknown so nothing is excluded.
    pub fn test_candidates(&self) -> Result<BTreeMap<SessionId, CandidateList<T>>> {
        let gen = self.generator();
        let test: Vec<SessionId> = self.split.test.iter().copied().collect();
        test.par_iter()
            .map(|&id| {
                let s = &self.corpus.sessions[id.0];
                Ok((id, gen.build_candidates(s, s.user, false)?))
            })
            .collect()
    }

    /// Trains one model per user; users without any pair are skipped.
    pub fn train_variant(
        &self,
        mode: PairMode,
        candidates: &BTreeMap<SessionId, CandidateList<T>>,
    ) -> Result<TrainedVariant<T>> {
        let solver = self.config.solver();
        let vocab = self.corpus.vocabulary.len();
        let by_user = self.split.train_by_user(self.corpus);
        let results: Vec<Result<std::result::Result<UserModel<T>, SkippedUser>>> = by_user
            .par_iter()
            .enumerate()
            .map(|(u, sessions)| {
                let name = &self.corpus.user_names[u];
                let mut pairs = Vec::new();
                for s in sessions {
                    let cands = candidates.get(&s.id).ok_or(Error::UnknownSession(s.id.0))?;
                    pairs.extend(build_pairs(s.id, &s.tags, cands, mode, self.config.grouping));
                    if self.config.full_vocabulary_negatives {
                        pairs.extend(full_vocabulary_pairs(s.id, &s.tags, vocab));
                    }
                }
                match train_user_model(name, &pairs, &self.feature_map, &solver) {
                    Ok(model) => Ok(Ok(model)),
                    Err(Error::NoConstraints { user }) => Ok(Err(SkippedUser {
                        user,
                        variant: variant_label(mode),
                        reason: "no constraints".into(),
                    })),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut models = Vec::with_capacity(results.len());
        let mut skipped = Vec::new();
        for r in results {
            match r? {
                Ok(m) => models.push(Some(m)),
                Err(s) => {
                    warn!("skipping user {} for {}: {}", s.user, s.variant, s.reason);
                    models.push(None);
                    skipped.push(s);
                }
            }
        }
        Ok(TrainedVariant { mode, models, skipped })
    }

    fn compare(&self, a: &EvalReport<T>, b: &EvalReport<T>) -> Result<TTestResult<T>> {
        if self.config.welch {
            welch_ttest(&a.dcg_at_k_scores(), &b.dcg_at_k_scores())
        } else {
            paired_ttest(&a.dcg_at_k_scores(), &b.dcg_at_k_scores())
        }
    }

    /// Scores each requested method on every test session.
    ///
    /// Ranker and random-user rows are produced per trained variant. A user
    /// without a model keeps the candidate order.
    pub fn evaluate(&self, variants: &[TrainedVariant<T>], methods: &[Method]) -> Result<Vec<MethodReport<T>>> {
        let k = self.config.k;
        let candidates = self.test_candidates()?;
        let sessions: Vec<SessionId> = candidates.keys().copied().collect();
        let owners: Vec<UserId> = sessions.iter().map(|id| self.corpus.sessions[id.0].user).collect();

        let score = |label: String, n_tags: String, rank: &(dyn Fn(usize) -> Result<Vec<crate::corpus::TagId>> + Sync)| {
            let per_image = (0..sessions.len())
                .into_par_iter()
                .map(|i| {
                    let s = &self.corpus.sessions[sessions[i].0];
                    let predicted = rank(i)?;
                    Ok(ImageScore {
                        session: s.id,
                        user: s.user,
                        dcg: dcg(&predicted, &s.tags),
                        dcg_at_k: dcg_at_k(&predicted, &s.tags, k),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            EvalReport::from_scores(label, n_tags, k, per_image)
        };
        let default_order = |i: usize| candidates[&sessions[i]].tags();
        let with_model = |i: usize, model: Option<&UserModel<T>>| -> Result<Vec<crate::corpus::TagId>> {
            match model {
                Some(m) => rank_tags(&m.w, &default_order(i), &self.feature_map),
                None => Ok(default_order(i)),
            }
        };

        let mut out: Vec<MethodReport<T>> = Vec::new();
        let mut sorted = methods.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut baseline: Option<usize> = None;
        for &method in sorted.iter().filter(|m| matches!(m, Method::PtRerank | Method::CandidatesOnly)) {
            let report = match method {
                Method::PtRerank => score(method.to_string(), "-".into(), &|i| {
                    let user = owners[i];
                    rerank(
                        &default_order(i),
                        &self.strengths[user.0],
                        self.config.threshold,
                        self.config.min_cooccur,
                    )
                })?,
                _ => score(method.to_string(), "-".into(), &|i| Ok(default_order(i)))?,
            };
            if method == Method::PtRerank || baseline.is_none() {
                baseline = Some(out.len());
            }
            out.push(MethodReport {
                report,
                compared_to: None,
                test: None,
            });
        }
        for variant in variants {
            let own_index = if sorted.contains(&Method::Ranker) {
                let report = score(
                    format!("ranker({})", variant_n_tags(variant.mode)),
                    variant_n_tags(variant.mode),
                    &|i| with_model(i, variant.models[owners[i].0].as_ref()),
                )?;
                let (compared_to, test) = match baseline {
                    Some(b) => (
                        Some(out[b].report.label.clone()),
                        Some(self.compare(&report, &out[b].report)?),
                    ),
                    None => (None, None),
                };
                out.push(MethodReport { report, compared_to, test });
                Some(out.len() - 1)
            } else {
                None
            };
            if sorted.contains(&Method::RandomUser) {
                let pool: Vec<UserId> = (0..variant.models.len())
                    .filter(|&u| variant.models[u].is_some())
                    .map(UserId)
                    .collect();
                let assigned = ablate_random_user(&owners, &pool, self.config.seed)?;
                let report = score(
                    format!("random_user({})", variant_n_tags(variant.mode)),
                    variant_n_tags(variant.mode),
                    &|i| with_model(i, variant.models[assigned[i].0].as_ref()),
                )?;
                let reference = own_index.or(baseline);
                let (compared_to, test) = match reference {
                    Some(r) => (
                        Some(out[r].report.label.clone()),
                        Some(self.compare(&report, &out[r].report)?),
                    ),
                    None => (None, None),
                };
                out.push(MethodReport { report, compared_to, test });
            }
        }
        Ok(out)
    }
}

/// One row per configuration:
/// `config,n_tags,dcg_per_image,dcg{k}_per_image,dcg_per_user,dcg{k}_per_user,compared_to,t_dcg{k},p_dcg{k}`.
pub fn write_report_csv<T: Scalar, W: Write>(reports: &[MethodReport<T>], k: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "config".to_string(),
        "n_tags".to_string(),
        "dcg_per_image".to_string(),
        format!("dcg{k}_per_image"),
        "dcg_per_user".to_string(),
        format!("dcg{k}_per_user"),
        "compared_to".to_string(),
        format!("t_dcg{k}"),
        format!("p_dcg{k}"),
    ])?;
    for r in reports {
        let e = &r.report;
        w.write_record([
            e.label.clone(),
            e.n_tags.clone(),
            e.dcg_per_image.to_string(),
            e.dcg_at_k_per_image.to_string(),
            e.dcg_per_user.to_string(),
            e.dcg_at_k_per_user.to_string(),
            r.compared_to.clone().unwrap_or_default(),
            r.test.map(|t| t.t_statistic.to_string()).unwrap_or_default(),
            r.test.map(|t| t.p_value.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_train_report<T: Scalar>(variants: &[TrainedVariant<T>], corpus: &Corpus<T>, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(TRAIN_REPORT_FILE))?;
    w.write_record(["user", "variant", "status", "pairs"])?;
    for v in variants {
        for (u, m) in v.models.iter().enumerate() {
            let (status, pairs) = match m {
                Some(m) => ("trained", m.pair_count.to_string()),
                None => ("skipped: no constraints", "0".to_string()),
            };
            w.write_record([corpus.user_names[u].as_str(), &v.label(), status, &pairs])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrepareSummary {
    pub sessions: usize,
    pub users: usize,
    pub tags: usize,
    pub train: usize,
    pub test: usize,
}

impl fmt::Display for PrepareSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} sessions, {} users, {} tags ({} train / {} test)",
            self.sessions, self.users, self.tags, self.train, self.test
        )
    }
}

/// Filters the raw file, splits it and writes the artifacts to `dir`.
pub fn cmd_prepare(config: &ExperimentConfig, dir: &Path) -> Result<PrepareSummary> {
    config.validate()?;
    let prepared = Prepared::<f64>::load_raw(config)?;
    prepared.write(dir)?;
    config.write_to(dir)?;
    let summary = PrepareSummary {
        sessions: prepared.corpus.sessions.len(),
        users: prepared.corpus.num_users(),
        tags: prepared.corpus.vocabulary.len(),
        train: prepared.split.train.len(),
        test: prepared.split.test.len(),
    };
    info!("prepared {summary}");
    Ok(summary)
}

/// Trains embeddings and per-user models for every configured variant.
pub fn cmd_train(config: &ExperimentConfig, dir: &Path) -> Result<Vec<SkippedUser>> {
    config.validate()?;
    let prepared = Prepared::<f64>::read(dir, config)?;
    let embeddings = fit_embeddings(&prepared, config)?;
    embeddings.write_text(&prepared.corpus.vocabulary, File::create(dir.join(EMBEDDINGS_FILE))?)?;
    let ctx = Context::new(&prepared, config, &embeddings)?;
    let candidates = ctx.training_candidates()?;
    let mut variants = Vec::new();
    for mode in config.variants() {
        let variant = ctx.train_variant(mode, &candidates)?;
        variant.write(dir)?;
        info!(
            "{}: {} models, {} skipped",
            variant.label(),
            variant.models.iter().flatten().count(),
            variant.skipped.len()
        );
        variants.push(variant);
    }
    write_train_report(&variants, &prepared.corpus, dir)?;
    config.write_to(dir)?;
    Ok(variants.into_iter().flat_map(|v| v.skipped).collect())
}

/// Evaluates the requested methods and writes `report.csv` (or `out`).
pub fn cmd_evaluate(
    config: &ExperimentConfig,
    dir: &Path,
    methods: &[Method],
    out: Option<&Path>,
) -> Result<Vec<MethodReport<f64>>> {
    config.validate()?;
    let prepared = Prepared::<f64>::read(dir, config)?;
    let embeddings = TagEmbeddings::read_text(
        File::open(require(dir.join(EMBEDDINGS_FILE))?)?,
        &prepared.corpus.vocabulary,
    )?;
    let ctx = Context::new(&prepared, config, &embeddings)?;
    let needs_models = methods.iter().any(|m| matches!(m, Method::Ranker | Method::RandomUser));
    let variants = if needs_models {
        config
            .variants()
            .into_iter()
            .map(|mode| TrainedVariant::read(dir, mode, &prepared.corpus))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let reports = ctx.evaluate(&variants, methods)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join(REPORT_FILE));
    write_report_csv(&reports, config.k, File::create(&path)?)?;
    if let Some(parent) = path.parent() {
        config.write_to(parent)?;
    }
    Ok(reports)
}

/// Writes the candidate list of one session as CSV.
pub fn cmd_dump_candidates<W: Write>(config: &ExperimentConfig, dir: &Path, image_id: &str, writer: W) -> Result<()> {
    let prepared = Prepared::<f64>::read(dir, config)?;
    let session = prepared
        .corpus
        .sessions
        .iter()
        .find(|s| s.image_id == image_id)
        .ok_or_else(|| Error::invalid(format!("no session with image id {image_id:?}")))?;
    let embeddings = placeholder_embeddings(&prepared)?;
    let ctx = Context::new(&prepared, config, &embeddings)?;
    let is_train = prepared.split.train.contains(&session.id);
    let list = ctx.generator().build_candidates(session, session.user, is_train)?;
    list.write_csv(&prepared.corpus.vocabulary, writer)
}

/// Writes `tag,cb,mp,vp` over the training split.
pub fn cmd_dump_stats<W: Write>(config: &ExperimentConfig, dir: &Path, writer: W) -> Result<()> {
    let prepared = Prepared::<f64>::read(dir, config)?;
    let train = prepared.split.train_sessions(&prepared.corpus);
    let stats = GlobalTagStats::compute(&train, prepared.corpus.vocabulary.len())?;
    stats.write_csv(&prepared.corpus.vocabulary, writer)
}

// Candidate mining does not look at embeddings.
fn placeholder_embeddings<T: Scalar>(prepared: &Prepared<T>) -> Result<TagEmbeddings<T>> {
    TagEmbeddings::from_rows(1, vec![vec![T::zero()]; prepared.corpus.vocabulary.len()])
}

/// Runs the whole pipeline in memory and returns the evaluation reports.
pub fn run_in_memory<T: Scalar>(
    records: Vec<RawRecord<T>>,
    config: &ExperimentConfig,
    methods: &[Method],
) -> Result<Vec<MethodReport<T>>> {
    config.validate()?;
    let prepared = Prepared::from_records(records, config)?;
    let embeddings = fit_embeddings(&prepared, config)?;
    let ctx = Context::new(&prepared, config, &embeddings)?;
    let candidates = ctx.training_candidates()?;
    let variants = config
        .variants()
        .into_iter()
        .map(|mode| ctx.train_variant(mode, &candidates))
        .collect::<Result<Vec<_>>>()?;
    ctx.evaluate(&variants, methods)
}

/// Index of each user's sessions in the test split, for per-user analyses.
pub fn test_sessions_by_user<T>(prepared: &Prepared<T>) -> HashMap<UserId, Vec<SessionId>> {
    let mut map: HashMap<UserId, Vec<SessionId>> = HashMap::new();
    for &id in &prepared.split.test {
        map.entry(prepared.corpus.sessions[id.0].user).or_default().push(id);
    }
    map
}
