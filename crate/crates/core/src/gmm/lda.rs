use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use super::GmmError;
use crate::features::FeatureMatrix;

/// Within-class scatter regularization, relative to trace / dim.
const WITHIN_REGULARIZATION: f64 = 1e-6;

/// LDA from precomputed scatter matrices. Rows of the result are the leading generalized
/// eigenvectors of (between, within), scaled so the projected within-class scatter is
/// the identity.
pub fn lda_from_scatter(
    within: &Array2<f64>,
    between: &Array2<f64>,
    target_dim: usize,
) -> Result<Array2<f64>, GmmError> {
    let d = within.nrows();
    if within.dim() != (d, d) || between.dim() != (d, d) {
        return Err(GmmError::Shape(
            "scatter matrices must be square and equal".into(),
        ));
    }
    if target_dim > d {
        return Err(GmmError::LdaDim {
            target: target_dim,
            input: d,
        });
    }
    let trace: f64 = (0..d).map(|i| within[[i, i]]).sum();
    let reg = WITHIN_REGULARIZATION * trace / d as f64;
    let sw = DMatrix::from_fn(d, d, |i, j| within[[i, j]] + if i == j { reg } else { 0.0 });
    let sb = DMatrix::from_fn(d, d, |i, j| 0.5 * (between[[i, j]] + between[[j, i]]));
    let chol = sw.cholesky().ok_or(GmmError::Singular)?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or(GmmError::Singular)?;
    let m = &l_inv * sb * l_inv.transpose();
    let m = 0.5 * (&m + m.transpose());
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    // w = L^-T v for each eigenvector v
    let proj = l_inv.transpose() * &eig.eigenvectors;
    Ok(Array2::from_shape_fn((target_dim, d), |(r, c)| {
        proj[(c, order[r])]
    }))
}

/// Estimates an LDA transform (target_dim x input_dim) from spliced frames and per-frame
/// class labels (pdf-ids).
pub fn estimate_lda(
    spliced: &[FeatureMatrix],
    labels: &[Vec<usize>],
    target_dim: usize,
) -> Result<Array2<f64>, GmmError> {
    let d = spliced
        .first()
        .map(|f| f.dims())
        .ok_or(GmmError::EmptyData)?;
    if target_dim > d {
        return Err(GmmError::LdaDim {
            target: target_dim,
            input: d,
        });
    }
    if spliced.len() != labels.len() {
        return Err(GmmError::Shape(
            "one label sequence per utterance required".into(),
        ));
    }
    let num_classes = labels
        .iter()
        .flatten()
        .copied()
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let mut count = vec![0.0f64; num_classes];
    let mut sums = Array2::<f64>::zeros((num_classes, d));
    let mut scatter = Array2::<f64>::zeros((d, d));
    let mut n = 0.0;
    for (fm, lab) in spliced.iter().zip(labels) {
        if fm.frames() != lab.len() {
            return Err(GmmError::Shape(format!(
                "{} frames but {} labels",
                fm.frames(),
                lab.len()
            )));
        }
        if fm.dims() != d {
            return Err(GmmError::DimMismatch {
                expected: d,
                got: fm.dims(),
            });
        }
        let x = fm.values();
        scatter += &x.t().dot(x);
        for (t, &c) in lab.iter().enumerate() {
            count[c] += 1.0;
            let mut row = sums.row_mut(c);
            row += &x.row(t);
        }
        n += lab.len() as f64;
    }
    let present = count.iter().filter(|&&c| c > 0.0).count();
    if present < 2 {
        return Err(GmmError::SingleClass(present));
    }
    let mean = sums.sum_axis(ndarray::Axis(0)) / n;
    // total = E[xx^T] - mu mu^T; between = sum_c n_c/N mu_c mu_c^T - mu mu^T
    let outer = |v: &ndarray::Array1<f64>| {
        let col = v.view().insert_axis(ndarray::Axis(1));
        col.dot(&col.t())
    };
    let total = scatter / n - outer(&mean);
    let mut between = Array2::<f64>::zeros((d, d));
    for c in 0..num_classes {
        if count[c] > 0.0 {
            let mu = sums.row(c).to_owned() / count[c];
            between += &(outer(&mu) * (count[c] / n));
        }
    }
    between -= &outer(&mean);
    let within = &total - &between;
    lda_from_scatter(&within, &between, target_dim)
}
