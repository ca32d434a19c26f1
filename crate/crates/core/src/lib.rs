//! Data side of the overpainting toolkit: scores, lead sheets, chord
//! alignment, the pair corpus, tokenization and evaluation metrics.

pub mod alignment;
pub mod dataset;
pub mod leadsheet;
pub mod metrics;
pub mod midi_io;
pub mod tokenizer;
