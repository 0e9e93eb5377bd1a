//! Corpus curation and training-mix planning.
//!
//! The modules are independent and share only [`Document`] and the
//! tokenizer model. Everything is deterministic for a fixed seed.

pub mod corpus;
pub mod dedup;
pub mod filtering;
pub mod mixplan;
pub mod ngram_lm;
pub mod scaling;
pub mod tokenizer;

pub use corpus::{normalize_text, CorpusError, CorpusStats, Document, NormalizePolicy, StatsReport, Strictness};
pub use dedup::{DedupError, DuplicateReport, MinHashSignature, MinHasher};
pub use filtering::{FilterDecision, FilterError, RuleConfig, SentencePair, Verdict};
pub use mixplan::{BudgetReport, MixPlan, ModelArch, PlanError};
pub use ngram_lm::{NGramConfig, NGramError, NGramModel};
pub use scaling::{FitOptions, LanguageFit, LossObservation, ScalingError, ScalingFit};
pub use tokenizer::{TokenId, TokenizerConfig, TokenizerError, TokenizerModel};
