//! Total-variability i-vector extractor over a diagonal UBM.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::binio::{BinError, BinReader, BinWriter};
use crate::features::FeatureMatrix;
use crate::gmm::{fit_gmm_em, DiagGmm, GmmError};

#[derive(Debug, Error)]
pub enum IvectorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("need at least {needed} utterances to train a {needed}-dim extractor, got {got}")]
    TooFewUtterances { needed: usize, got: usize },
    #[error("i-vector dimension must be at least 1")]
    ZeroDim,
    #[error("posterior precision is not positive definite")]
    Singular,
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error("malformed extractor data: {0}")]
    Format(String),
}

impl From<BinError> for IvectorError {
    fn from(e: BinError) -> Self {
        IvectorError::Format(e.to_string())
    }
}

/// Zeroth- and centered first-order Baum-Welch statistics of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchStats {
    /// Per-component occupancy.
    pub n: Array1<f64>,
    /// Per-component sum of posterior-weighted (x - mean), M x F.
    pub f: Array2<f64>,
}

impl BaumWelchStats {
    pub fn frames(&self) -> f64 {
        self.n.sum()
    }

    pub fn merged(&self, other: &BaumWelchStats) -> BaumWelchStats {
        BaumWelchStats {
            n: &self.n + &other.n,
            f: &self.f + &other.f,
        }
    }
}

pub fn accumulate_stats(ubm: &DiagGmm, fm: &FeatureMatrix) -> Result<BaumWelchStats, IvectorError> {
    if fm.dims() != ubm.dim() {
        return Err(IvectorError::DimMismatch {
            expected: ubm.dim(),
            got: fm.dims(),
        });
    }
    let (m, d) = (ubm.num_components(), ubm.dim());
    let mut n = Array1::zeros(m);
    let mut f = Array2::zeros((m, d));
    let mut post = vec![0.0; m];
    for x in fm.values().rows() {
        ubm.posteriors(x, &mut post);
        for c in 0..m {
            let g = post[c];
            if g == 0.0 {
                continue;
            }
            n[c] += g;
            for j in 0..d {
                f[[c, j]] += g * (x[j] - ubm.means()[[c, j]]);
            }
        }
    }
    Ok(BaumWelchStats { n, f })
}

/// UBM plus total-variability matrix T ((M*F) x D, component-major rows).
#[derive(Debug, Clone, PartialEq)]
pub struct IvectorExtractor {
    ubm: DiagGmm,
    t: Array2<f64>,
}

/// Posterior of the latent i-vector for one utterance.
struct Posterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// -0.5 log|P| + 0.5 b^T P^-1 b: the T-dependent part of the utterance log-likelihood.
    objective: f64,
}

impl IvectorExtractor {
    pub fn new(ubm: DiagGmm, t: Array2<f64>) -> Result<Self, IvectorError> {
        let rows = ubm.num_components() * ubm.dim();
        if t.nrows() != rows {
            return Err(IvectorError::DimMismatch {
                expected: rows,
                got: t.nrows(),
            });
        }
        if t.ncols() == 0 {
            return Err(IvectorError::ZeroDim);
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(IvectorError::Format("T has non-finite entries".into()));
        }
        Ok(Self { ubm, t })
    }

    pub fn ubm(&self) -> &DiagGmm {
        &self.ubm
    }

    pub fn t_matrix(&self) -> &Array2<f64> {
        &self.t
    }

    pub fn ivector_dim(&self) -> usize {
        self.t.ncols()
    }

    fn block(&self, c: usize) -> DMatrix<f64> {
        let f = self.ubm.dim();
        DMatrix::from_fn(f, self.t.ncols(), |j, k| self.t[[c * f + j, k]])
    }

    /// T_c^T Sigma_c^-1 T_c for each component.
    fn precompute(&self) -> Vec<DMatrix<f64>> {
        (0..self.ubm.num_components())
            .map(|c| {
                let tc = self.block(c);
                let inv = DVector::from_fn(self.ubm.dim(), |j, _| 1.0 / self.ubm.vars()[[c, j]]);
                let scaled = DMatrix::from_fn(tc.nrows(), tc.ncols(), |j, k| tc[(j, k)] * inv[j]);
                tc.transpose() * scaled
            })
            .collect()
    }

    fn posterior(
        &self,
        stats: &BaumWelchStats,
        tst: &[DMatrix<f64>],
    ) -> Result<Posterior, IvectorError> {
        let dim = self.ivector_dim();
        let f = self.ubm.dim();
        let mut precision = DMatrix::<f64>::identity(dim, dim);
        let mut linear = DVector::<f64>::zeros(dim);
        for c in 0..self.ubm.num_components() {
            let n = stats.n[c];
            if n != 0.0 {
                precision += &tst[c] * n;
            }
            for j in 0..f {
                let v = stats.f[[c, j]] / self.ubm.vars()[[c, j]];
                if v == 0.0 {
                    continue;
                }
                for k in 0..dim {
                    linear[k] += self.t[[c * f + j, k]] * v;
                }
            }
        }
        let chol = precision.cholesky().ok_or(IvectorError::Singular)?;
        let mean = chol.solve(&linear);
        let cov = chol.inverse();
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let objective = -0.5 * log_det + 0.5 * linear.dot(&mean);
        Ok(Posterior {
            mean,
            cov,
            objective,
        })
    }

    fn check_stats(&self, stats: &BaumWelchStats) -> Result<(), IvectorError> {
        let (m, f) = (self.ubm.num_components(), self.ubm.dim());
        if stats.n.len() != m || stats.f.dim() != (m, f) {
            return Err(IvectorError::DimMismatch {
                expected: m * f,
                got: stats.f.len(),
            });
        }
        Ok(())
    }

    /// Posterior mean w = (I + T' S^-1 N T)^-1 T' S^-1 f.
    pub fn extract_from_stats(&self, stats: &BaumWelchStats) -> Result<Vec<f64>, IvectorError> {
        self.check_stats(stats)?;
        let tst = self.precompute();
        Ok(self.posterior(stats, &tst)?.mean.iter().copied().collect())
    }

    /// Auxiliary objective (sum over utterances of the T-dependent log-likelihood).
    pub fn objective(&self, stats: &[BaumWelchStats]) -> Result<f64, IvectorError> {
        let tst = self.precompute();
        stats
            .iter()
            .map(|s| {
                self.check_stats(s)?;
                Ok(self.posterior(s, &tst)?.objective)
            })
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(b"IVEX", 1);
        w.array1(self.ubm.weights());
        w.array2(self.ubm.means());
        w.array2(self.ubm.vars());
        w.array2(&self.t);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, IvectorError> {
        let mut r = BinReader::new(data, b"IVEX", 1)?;
        let weights = r.array1("weights")?;
        let means = r.array2("means")?;
        let vars = r.array2("vars")?;
        let t = r.array2("T")?;
        r.finish()?;
        Self::new(DiagGmm::new(weights, means, vars)?, t)
    }
}

pub fn extract_ivector(
    ex: &IvectorExtractor,
    fm: &FeatureMatrix,
) -> Result<Vec<f64>, IvectorError> {
    let stats = accumulate_stats(&ex.ubm, fm)?;
    ex.extract_from_stats(&stats)
}

/// Trains the UBM on pooled frames.
pub fn train_ubm(
    frames: &Array2<f64>,
    components: usize,
    iters: usize,
    seed: u64,
) -> Result<DiagGmm, IvectorError> {
    Ok(fit_gmm_em(frames.view(), components, iters, seed)?.gmm)
}

#[derive(Debug, Clone)]
pub struct TvTraining {
    pub extractor: IvectorExtractor,
    /// Auxiliary objective of the initial T and after every iteration.
    pub objective: Vec<f64>,
}

/// EM estimation of the total-variability matrix. T starts from seeded unit Gaussian
/// draws scaled by 0.1.
pub fn train_total_variability(
    stats: &[BaumWelchStats],
    ubm: &DiagGmm,
    dim: usize,
    iters: usize,
    seed: u64,
) -> Result<TvTraining, IvectorError> {
    if dim == 0 {
        return Err(IvectorError::ZeroDim);
    }
    if stats.len() < dim {
        return Err(IvectorError::TooFewUtterances {
            needed: dim,
            got: stats.len(),
        });
    }
    let (m, f) = (ubm.num_components(), ubm.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Array2::from_shape_simple_fn((m * f, dim), || {
        0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let mut ex = IvectorExtractor::new(ubm.clone(), t)?;
    for s in stats {
        ex.check_stats(s)?;
    }
    let mut objective = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let tst = ex.precompute();
        let mut a: Vec<DMatrix<f64>> = vec![DMatrix::zeros(dim, dim); m];
        let mut cacc = vec![DMatrix::<f64>::zeros(f, dim); m];
        let mut total = 0.0;
        for s in stats {
            let post = ex.posterior(s, &tst)?;
            total += post.objective;
            let eww = &post.cov + &post.mean * post.mean.transpose();
            for c in 0..m {
                if s.n[c] != 0.0 {
                    a[c] += &eww * s.n[c];
                }
                for j in 0..f {
                    let fv = s.f[[c, j]];
                    if fv == 0.0 {
                        continue;
                    }
                    for k in 0..dim {
                        cacc[c][(j, k)] += fv * post.mean[k];
                    }
                }
            }
        }
        objective.push(total);
        let mut t = ex.t.clone();
        for c in 0..m {
            // T_c = C_c A_c^-1, solved as A_c^T T_c^T = C_c^T (A_c symmetric)
            let Some(chol) = a[c].clone().cholesky() else {
                continue;
            };
            let tc = chol.solve(&cacc[c].transpose()).transpose();
            for j in 0..f {
                for k in 0..dim {
                    t[[c * f + j, k]] = tc[(j, k)];
                }
            }
        }
        ex = IvectorExtractor::new(ex.ubm, t)?;
    }
    objective.push(ex.objective(stats)?);
    Ok(TvTraining {
        extractor: ex,
        objective,
    })
}

/// Text dump, one `utt-id v1 ... vD` line per utterance.
pub fn format_ivectors<'a>(items: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut out = String::new();
    for (id, v) in items {
        out.push_str(id);
        for x in v {
            let _ = write!(out, " {x:e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_ivectors(text: &str) -> Result<Vec<(String, Vec<f64>)>, IvectorError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let mut it = line.split_whitespace();
            let id = it.next().expect("nonempty line").to_string();
            let v = it
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        IvectorError::Format(format!("line {}: bad value `{t}`", i + 1))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((id, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn scalar_ubm() -> DiagGmm {
        DiagGmm::new(array![1.0], array![[0.0]], array![[1.0]]).unwrap()
    }

    #[test]
    fn single_component_occupancy() {
        let fm = FeatureMatrix::new(Array2::from_shape_fn((7, 1), |(t, _)| t as f64)).unwrap();
        let s = accumulate_stats(&scalar_ubm(), &fm).unwrap();
        assert_eq!(s.n[0], 7.0);
    }

    #[test]
    fn data_at_mean_has_zero_first_order() {
        let ubm = DiagGmm::new(
            array![0.5, 0.5],
            array![[-10.0, 0.0], [10.0, 2.0]],
            array![[1.0, 1.0], [1.0, 1.0]],
        )
        .unwrap();
        let fm =
            FeatureMatrix::new(Array2::from_shape_fn((5, 2), |(_, d)| [10.0, 2.0][d])).unwrap();
        let s = accumulate_stats(&ubm, &fm).unwrap();
        assert!(s.f.row(1).iter().all(|v| v.abs() < 1e-12));
        assert!((s.frames() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn concatenation_doubles_stats() {
        let ubm =
            DiagGmm::new(array![0.3, 0.7], array![[0.0], [3.0]], array![[1.0], [2.0]]).unwrap();
        let x = Array2::from_shape_fn((6, 1), |(t, _)| (t as f64 * 0.9).sin() * 3.0);
        let one = FeatureMatrix::new(x.clone()).unwrap();
        let two = FeatureMatrix::new(ndarray::concatenate![ndarray::Axis(0), x, x]).unwrap();
        let a = accumulate_stats(&ubm, &one).unwrap();
        let b = accumulate_stats(&ubm, &two).unwrap();
        for c in 0..2 {
            assert!((b.n[c] - 2.0 * a.n[c]).abs() < 1e-12);
            assert!((b.f[[c, 0]] - 2.0 * a.f[[c, 0]]).abs() < 1e-12);
        }
        let ex = IvectorExtractor::new(ubm, array![[0.5], [1.5]]).unwrap();
        let w_cat = extract_ivector(&ex, &two).unwrap();
        let w_doubled = ex.extract_from_stats(&a.merged(&a)).unwrap();
        assert!((w_cat[0] - w_doubled[0]).abs() < 1e-12);
    }

    #[test]
    fn scalar_closed_form() {
        let ex = IvectorExtractor::new(scalar_ubm(), array![[2.0]]).unwrap();
        let s = BaumWelchStats {
            n: array![3.0],
            f: array![[6.0]],
        };
        let w = ex.extract_from_stats(&s).unwrap();
        assert!((w[0] - 12.0 / 13.0).abs() < 1e-12);
        let zero = BaumWelchStats {
            n: array![3.0],
            f: array![[0.0]],
        };
        assert_eq!(ex.extract_from_stats(&zero).unwrap(), vec![0.0]);
        let doubled = ex.extract_from_stats(&s.merged(&s)).unwrap();
        assert!(doubled[0].abs() >= w[0].abs());
    }

    #[test]
    fn matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let m = rng.random_range(1..=4);
            let f = rng.random_range(1..=3);
            let d = rng.random_range(1..=3);
            let weights = Array1::from_elem(m, 1.0 / m as f64);
            let means = Array2::from_shape_fn((m, f), |_| rng.random_range(-1.0..1.0));
            let vars = Array2::from_shape_fn((m, f), |_| rng.random_range(0.5..2.0));
            let t = Array2::from_shape_fn((m * f, d), |_| rng.random_range(-1.0..1.0));
            let ex = IvectorExtractor::new(
                DiagGmm::new(weights, means, vars.clone()).unwrap(),
                t.clone(),
            )
            .unwrap();
            let stats = BaumWelchStats {
                n: Array1::from_shape_fn(m, |_| rng.random_range(0.0..5.0)),
                f: Array2::from_shape_fn((m, f), |_| rng.random_range(-3.0..3.0)),
            };
            // dense: build the (MF x MF) block-diagonal N and Sigma and solve directly
            let mf = m * f;
            let tm = DMatrix::from_fn(mf, d, |i, k| t[[i, k]]);
            let sig_inv = DMatrix::from_fn(mf, mf, |i, j| {
                if i == j {
                    1.0 / vars[[i / f, i % f]]
                } else {
                    0.0
                }
            });
            let nmat = DMatrix::from_fn(mf, mf, |i, j| if i == j { stats.n[i / f] } else { 0.0 });
            let fv = DVector::from_fn(mf, |i, _| stats.f[[i / f, i % f]]);
            let lhs = DMatrix::identity(d, d) + tm.transpose() * &sig_inv * nmat * &tm;
            let rhs = tm.transpose() * sig_inv * fv;
            let dense = lhs.lu().solve(&rhs).unwrap();
            let w = ex.extract_from_stats(&stats).unwrap();
            for k in 0..d {
                assert!((w[k] - dense[k]).abs() < 1e-8);
            }
        }
    }

    fn subspace_stats(t_true: &[f64], count: usize, seed: u64) -> Vec<BaumWelchStats> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = t_true.len();
        (0..count)
            .map(|_| {
                let n = 50.0;
                let lambda: f64 =
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let fv = Array2::from_shape_fn((1, f), |(_, j)| {
                    let noise: f64 =
                        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                    n * lambda * t_true[j] + noise * n.sqrt()
                });
                BaumWelchStats {
                    n: array![n],
                    f: fv,
                }
            })
            .collect()
    }

    #[test]
    fn recovers_known_subspace() {
        let t_true = [1.0, -2.0, 0.5];
        let stats = subspace_stats(&t_true, 200, 4);
        let ubm = DiagGmm::new(array![1.0], Array2::zeros((1, 3)), Array2::ones((1, 3))).unwrap();
        let out = train_total_variability(&stats, &ubm, 1, 10, 1).unwrap();
        let t = out.extractor.t_matrix().column(0).to_vec();
        let dot: f64 = t.iter().zip(&t_true).map(|(a, b)| a * b).sum();
        let cos = dot
            / (t.iter().map(|v| v * v).sum::<f64>().sqrt()
                * t_true.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!(cos.abs() > 0.95, "cos {cos}");
        for w in out.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "{:?}", out.objective);
        }
    }

    #[test]
    fn zero_iterations_keeps_init_and_seed_is_deterministic() {
        let stats = subspace_stats(&[1.0, 1.0], 5, 2);
        let ubm = DiagGmm::new(array![1.0], Array2::zeros((1, 2)), Array2::ones((1, 2))).unwrap();
        let a = train_total_variability(&stats, &ubm, 2, 0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = Array2::from_shape_simple_fn((2, 2), || {
            0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        assert_eq!(a.extractor.t_matrix(), &init);
        let b = train_total_variability(&stats, &ubm, 2, 3, 9).unwrap();
        let c = train_total_variability(&stats, &ubm, 2, 3, 9).unwrap();
        assert_eq!(b.extractor, c.extractor);
        assert!(matches!(
            train_total_variability(&stats[..1], &ubm, 2, 1, 0),
            Err(IvectorError::TooFewUtterances { .. })
        ));
    }

    #[test]
    fn serialization_and_dump() {
        let ex = IvectorExtractor::new(scalar_ubm(), array![[2.0, -1.0]]).unwrap();
        assert_eq!(IvectorExtractor::from_bytes(&ex.to_bytes()).unwrap(), ex);
        let v = vec![0.25, -3.5];
        let text = format_ivectors([("u1", v.as_slice())]);
        let parsed = parse_ivectors(&text).unwrap();
        assert_eq!(parsed, vec![("u1".to_string(), v)]);
    }
}
