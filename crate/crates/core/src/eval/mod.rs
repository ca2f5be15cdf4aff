//! Evaluation: pseudo-perplexity, embedding retrieval, classification fine-tunes.

pub mod classify;
pub mod pppl;
pub mod retrieval;

pub use pppl::{pppl_curve, pseudo_perplexity, pseudo_perplexity_at, EncoderLm, MaskedLm, PpplReport};
pub use classify::{classify_finetune, ClassifyConfig, ClassifyReport, Grid, LabeledText, Pooling, TaskKind};
pub use retrieval::{retrieval_eval, RetrievalScores};
