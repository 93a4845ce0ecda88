//! Two-layer lexicon, prefix-tree word segmentation and backoff n-gram language models.

mod lexicon;
mod ngram;
mod segment;

pub use lexicon::{
    compile_lexicon, parse_entries, read_lexicon, Lexicon, OOV_PHONE, OOV_WORD, SILENCE_PHONE,
};
pub use ngram::{
    perplexity, train_ngram, NgramLm, Smoothing, BOS, EOS, GT_MAX_DISCOUNTED, KN_DISCOUNT,
};
pub use segment::{segment_text, Segment, WordTrie, OOV_PENALTY};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LexError {
    #[error("word `{word}` uses unknown syllable `{syllable}`")]
    UnknownSyllable { word: String, syllable: String },
    #[error("`{0}` has an empty pronunciation")]
    EmptyPronunciation(String),
    #[error("syllable `{0}` listed with conflicting phones")]
    ConflictingSyllable(String),
    #[error("malformed lexicon: {0}")]
    Format(String),
}

#[derive(Debug, Error)]
pub enum LmError {
    #[error("n-gram order must be 2, 3 or 4, got {0}")]
    Order(usize),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("perplexity of empty text is undefined")]
    EmptyText,
    #[error("malformed language model: {0}")]
    Format(String),
}
