//! Forum-thread language modelling: record formatting, byte-level BPE,
//! n-gram models, constrained beam decoding, and blinded human evaluation.

pub mod annotation;
pub mod bpe;
pub mod decode;
pub mod exec;
pub mod format;
pub mod lm;
pub mod study;
pub mod thread;

pub use bpe::{train_bpe, TokenId, TokenSequence, Vocabulary, RECORD_DELIMITER, RECORD_TOKEN};
pub use decode::{generate, generate_many, DecodeConfig, GeneratedResponse};
pub use exec::Execution;
pub use format::{RecordFormatter, TrainingRecord};
pub use lm::{train_ngram, LanguageModel, NGramModel, NextTokenDistribution};
pub use study::{build_study, select_threads, Study, StudyConfig};
pub use thread::{ForumPath, ForumThread, Post, Quote};
