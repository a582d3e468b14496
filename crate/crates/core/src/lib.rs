//! Vulnerability detection over source snippets from three views: the whole
//! function, the structure of its lines, and its single most sensitive line.
//!
//! The pipeline is: [`tokenize`] and [`linealign`] turn a [`corpus`] snippet
//! into a global token sequence and a line-by-token grid; [`encoders`] embed
//! both; [`structure`] runs a transformer over (detached) line embeddings;
//! [`sensitive`] picks the line with the lowest mean activation; [`head`]
//! classifies the concatenation. [`trainkit`] trains and evaluates models.

pub mod autograd;
pub mod batch;
pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod head;
pub mod linealign;
pub mod model;
pub mod nn;
pub mod params;
pub mod sensitive;
pub mod structure;
pub mod tokenize;
pub mod trainkit;

pub use batch::{GlobalTokenBatch, ModelBatch, PreprocessConfig};
pub use corpus::{CodeSnippet, CorpusStats, DatasetSplit};
pub use error::{CslsError, Result};
pub use linealign::{AlignMode, LineTokenBatch};
pub use model::{Branches, CslsModel, ModelConfig};
pub use tokenize::{ByteTokenizer, NormalizeMode, Tokenizer};
