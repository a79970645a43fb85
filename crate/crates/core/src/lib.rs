//! Personalized tag ranking.
//!
//! A per-user linear ranking function is learned from the order in which the
//! user listed tags on past images, with supervision augmented by candidate
//! tags mined from visually similar images. The crate also contains the
//! pairwise re-ranking baseline, DCG evaluation with significance tests, and a
//! synthetic corpus generator with planted user preferences.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64` for everyday use.

pub mod baseline;
pub mod candidates;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod knn;
pub mod pipeline;
pub mod ranker;
pub mod scalar;
pub mod synthgen;
pub mod tagstats;

pub use candidates::TagBudget;
pub use corpus::{SessionId, TagId, TagVocabulary, UserId};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Session = corpus::Session<f64>;
pub type Corpus = corpus::Corpus<f64>;
pub type RawRecord = corpus::RawRecord<f64>;
pub type VisualIndex = knn::VisualIndex<f64>;
pub type GlobalTagStats = tagstats::GlobalTagStats<f64>;
pub type TagEmbeddings = embeddings::TagEmbeddings<f64>;
pub type CandidateList = candidates::CandidateList<f64>;
pub type FeatureMap = ranker::FeatureMap<f64>;
pub type UserModel = ranker::UserModel<f64>;
pub type EvalReport = eval::EvalReport<f64>;
pub type TTestResult = eval::TTestResult<f64>;

pub type SessionF32 = corpus::Session<f32>;
pub type CorpusF32 = corpus::Corpus<f32>;
pub type TagEmbeddingsF32 = embeddings::TagEmbeddings<f32>;
pub type FeatureMapF32 = ranker::FeatureMap<f32>;
pub type UserModelF32 = ranker::UserModel<f32>;
