//! Speech recognition toolkit built around cross-language transfer learning of a
//! TDNN-LSTM acoustic model.
//!
//! The modules follow the pipeline order: [`audio`] ingestion and augmentation,
//! [`features`], GMM-HMM alignment in [`gmm`], [`ivector`] extraction, the [`nnet`]
//! frame classifier and its layer [`transfer`], the lexicon and language model in
//! [`lexlm`], the [`decoder`] with error-rate scoring, a [`synthetic`] language-pair
//! generator, and the stage runner in [`pipeline`].

pub mod audio;
pub mod decoder;
pub mod features;
pub mod gmm;
pub mod ivector;
pub mod lexlm;
pub mod nnet;
pub mod transfer;

mod binio;
pub mod pipeline;
pub mod synthetic;

/// Named sub-seed: first 8 bytes of SHA-256 over the root seed and a path-like name.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
