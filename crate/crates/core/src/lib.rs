//! Engine for theory-driven, human-LLM collaborative qualitative coding.
//!
//! The crate is organised around the coding workflow:
//!
//! * [`codebook`]: versioned coding schemes and their evolution.
//! * [`corpus`]: message ingestion, descriptive statistics, stratified re-check samples,
//!   and code assignments.
//! * [`prompt`]: the prompt-variant grid and deterministic prompt assembly.
//! * [`gateway`]: model backends (mock and HTTP), response caching, retries, voting and
//!   output parsing, plus batch runs of a variant over a corpus.
//! * [`stats`]: Cohen's kappa, bootstrap intervals, chi-square tests, positional
//!   frequency and per-variant agreement matrices.
//! * [`triage`]: disagreement selection, coder votes and summaries.
//! * [`board`]: the inductive board (proposals, LLM suggestions, theme hierarchy,
//!   autonomous baseline, re-validation and codebook ratings).
//! * [`fixtures`]: bundled synthetic fixtures used by the demo pipeline and replay tests.

pub mod board;
pub mod codebook;
pub mod corpus;
pub mod fixtures;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod stats;
pub mod triage;

pub use codebook::{Code, CodeId, CodeKind, Codebook, CodedExample};
pub use corpus::{Assignment, Corpus, Message, MessageId};
