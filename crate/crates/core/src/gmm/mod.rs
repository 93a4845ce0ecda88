//! Diagonal-GMM/HMM acoustic modelling: EM, flat-start monophone training, forced
//! alignment and LDA.

mod diag;
mod hmm;
mod lda;

pub use diag::{fit_gmm_em, log_sum_exp, variance_floor, DiagGmm, EmFit, VARIANCE_FLOOR_FRACTION};
pub use hmm::{
    alignment_to_targets, linear_viterbi, train_monophone, train_monophone_from_alignments,
    viterbi_align, AcousticModelGmm, AlignedFrame, Alignment, MonophoneConfig, MonophoneTraining,
    TrainUtterance, STATES_PER_PHONE,
};
pub use lda::{estimate_lda, lda_from_scatter};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("no training data")]
    EmptyData,
    #[error("cannot fit {k} components to {frames} frames")]
    TooManyComponents { k: usize, frames: usize },
    #[error("empty corpus (no usable utterances)")]
    EmptyCorpus,
    #[error("{frames} frames cannot cover {states} HMM states")]
    Infeasible { frames: usize, states: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("phone index {0} not in the model")]
    UnknownPhone(usize),
    #[error("LDA needs at least two classes, found {0}")]
    SingleClass(usize),
    #[error("LDA target dim {target} exceeds input dim {input}")]
    LdaDim { target: usize, input: usize },
    #[error("within-class scatter is not positive definite")]
    Singular,
    #[error("invalid model: {0}")]
    Shape(String),
    #[error("malformed model data: {0}")]
    Format(String),
}
