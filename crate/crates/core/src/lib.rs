//! Medical complaint classification pipeline.
//!
//! Raw complaints are scrubbed and split ([`corpus`]), rewritten by an LLM into
//! refined, summarized and entity-list forms ([`gateway`], [`preprocess`]),
//! combined into training variants ([`variants`]), used to fine-tune a text
//! encoder through low-rank adapters ([`adapter`], [`trainer`]) and finally
//! scored per task and condition ([`evaluator`]). [`pipeline`] wires the stages
//! together for the command-line front end.

pub mod adapter;
pub mod config;
pub mod corpus;
pub mod evaluator;
pub mod fsutil;
pub mod gateway;
pub mod lexicon;
pub mod pipeline;
pub mod preprocess;
pub mod synthetic;
pub mod trainer;
pub mod variants;

pub use corpus::{ComplaintRecord, CorpusManifest, Gender, LabelSet, Task};
