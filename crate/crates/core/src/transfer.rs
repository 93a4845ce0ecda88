//! Copying the leading hidden layers of a parent network into a child network.

use thiserror::Error;

use crate::nnet::{LayerSpec, Network, NnetError};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("k = {k} out of range: the parent has {hidden} transferable hidden layers")]
    KOutOfRange { k: usize, hidden: usize },
    #[error("layer {index} differs between parent and child: {detail}")]
    Mismatch { index: usize, detail: String },
    #[error("lr multiplier must be >= 0, got {0}")]
    Multiplier(f64),
    #[error(transparent)]
    Nnet(#[from] NnetError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferConfig {
    /// Number of leading layers copied, counted over the layer list.
    pub k: usize,
    /// Learning-rate multiplier of the copied layers.
    pub x: f64,
    /// Seed for the freshly initialized layers.
    pub seed: u64,
}

/// Child network whose first `k` layers are bitwise copies of the parent's (with multiplier
/// `x`) and whose remaining layers are seeded fresh with multiplier 1. The child takes the
/// parent's input dim, so the copied layers see the same input layout.
pub fn transfer_weights(
    parent: &Network,
    child_spec: &[LayerSpec],
    cfg: &TransferConfig,
) -> Result<Network, TransferError> {
    if !(cfg.x >= 0.0 && cfg.x.is_finite()) {
        return Err(TransferError::Multiplier(cfg.x));
    }
    let hidden = parent.layers().len().saturating_sub(1);
    if cfg.k > hidden || cfg.k >= child_spec.len() {
        return Err(TransferError::KOutOfRange { k: cfg.k, hidden });
    }
    let mut child = Network::random(parent.input_dim(), child_spec, cfg.seed)?;
    for i in 0..cfg.k {
        let (p, c) = (&parent.layers()[i], &child.layers()[i]);
        if p.spec.kind != c.spec.kind {
            return Err(TransferError::Mismatch {
                index: i,
                detail: format!("{:?} vs {:?}", p.spec.kind, c.spec.kind),
            });
        }
    }
    for (i, layer) in child.layers_mut().iter_mut().enumerate() {
        if i < cfg.k {
            layer.params = parent.layers()[i].params.clone();
            layer.lr_multiplier = cfg.x;
        } else {
            layer.lr_multiplier = 1.0;
        }
    }
    Ok(child)
}

/// Cartesian product of k and x values, k-major.
pub fn build_transfer_grid(ks: &[usize], xs: &[f64], seed: u64) -> Vec<TransferConfig> {
    ks.iter()
        .flat_map(|&k| xs.iter().map(move |&x| TransferConfig { k, x, seed }))
        .collect()
}
