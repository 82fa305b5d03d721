//! Divide-and-conquer inference for multiple-choice questions.
//!
//! Each question is sampled several times; the share of the most common
//! answer decides whether it is kept as is (high confidence) or re-asked
//! with one of several conquer strategies that reuse the earlier answers.

pub mod backend;
pub mod conquer;
pub mod divide;
pub mod error;
pub mod eval;
pub mod extract;
pub mod io;
pub mod model;
pub mod prompt;
pub mod run;
pub mod transcript;

pub use backend::{Backend, Completion, CompletionRequest, MockBackend, Phase, ResponseCache, SimConfig};
pub use conquer::{ConquerOutcome, ConquerParams, ScMode, Strategy};
pub use divide::{AnswerHistogram, ConfidenceReport, FineBin, Subset};
pub use error::{Error, Result};
pub use model::{Answer, Choice, DatasetSpec, Fraction, Label, LabelMapping, Question};
pub use transcript::InferenceRecord;
