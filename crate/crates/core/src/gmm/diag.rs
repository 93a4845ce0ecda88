use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GmmError;

/// Fraction of the per-dimension data variance used as the variance floor.
pub const VARIANCE_FLOOR_FRACTION: f64 = 1e-4;

const MIN_OCCUPANCY: f64 = 1e-10;

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    weights: Array1<f64>,
    means: Array2<f64>,
    vars: Array2<f64>,
    /// Per component: log w_k - 0.5 * (D log 2pi + sum log var + sum mean^2/var).
    gconsts: Array1<f64>,
    /// Per component and dim: 1 / var.
    inv_vars: Array2<f64>,
}

impl DiagGmm {
    pub fn new(
        weights: Array1<f64>,
        means: Array2<f64>,
        vars: Array2<f64>,
    ) -> Result<Self, GmmError> {
        let k = weights.len();
        if k == 0 || means.nrows() != k || vars.dim() != means.dim() {
            return Err(GmmError::Shape(format!(
                "weights {}, means {:?}, vars {:?}",
                k,
                means.dim(),
                vars.dim()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(GmmError::Shape("weights must be nonnegative".into()));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(GmmError::Shape(format!("weights sum to {total}")));
        }
        if vars.iter().any(|&v| !(v > 0.0) || !v.is_finite())
            || means.iter().any(|m| !m.is_finite())
        {
            return Err(GmmError::Shape(
                "variances must be positive and finite".into(),
            ));
        }
        let mut g = Self {
            weights,
            means,
            vars,
            gconsts: Array1::zeros(k),
            inv_vars: Array2::zeros((0, 0)),
        };
        g.refresh();
        Ok(g)
    }

    /// Single Gaussian with the sample mean and (population) variance of `data`.
    pub fn single(data: ArrayView2<'_, f64>, floor: ArrayView1<'_, f64>) -> Result<Self, GmmError> {
        if data.nrows() == 0 {
            return Err(GmmError::EmptyData);
        }
        let mean = data.mean_axis(Axis(0)).expect("nonempty");
        let var = data.var_axis(Axis(0), 0.0);
        let var = Array1::from_shape_fn(var.len(), |d| var[d].max(floor[d]));
        Self::new(
            Array1::ones(1),
            mean.insert_axis(Axis(0)),
            var.insert_axis(Axis(0)),
        )
    }

    fn refresh(&mut self) {
        let d = self.dim() as f64;
        self.inv_vars = self.vars.mapv(|v| 1.0 / v);
        self.gconsts = Array1::from_shape_fn(self.num_components(), |k| {
            let w = self.weights[k];
            let logw = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
            let mut c = logw - 0.5 * d * (2.0 * PI).ln();
            for j in 0..self.dim() {
                let v = self.vars[[k, j]];
                let m = self.means[[k, j]];
                c -= 0.5 * (v.ln() + m * m / v);
            }
            c
        });
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn vars(&self) -> &Array2<f64> {
        &self.vars
    }

    /// Per-component joint log densities log(w_k N(x; mu_k, var_k)).
    pub fn component_log_likes(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate() {
            let mut acc = self.gconsts[k];
            let mu = self.means.row(k);
            let iv = self.inv_vars.row(k);
            for j in 0..x.len() {
                let xj = x[j];
                acc += xj * mu[j] * iv[j] - 0.5 * xj * xj * iv[j];
            }
            *slot = acc;
        }
    }

    pub fn log_likelihood(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut buf = vec![0.0; self.num_components()];
        self.component_log_likes(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// Posterior responsibilities; returns the frame log-likelihood.
    pub fn posteriors(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) -> f64 {
        self.component_log_likes(x, out);
        let total = log_sum_exp(out);
        for v in out.iter_mut() {
            *v = (*v - total).exp();
        }
        total
    }

    pub fn total_log_likelihood(&self, data: ArrayView2<'_, f64>) -> f64 {
        let mut buf = vec![0.0; self.num_components()];
        data.rows()
            .into_iter()
            .map(|x| {
                self.component_log_likes(x, &mut buf);
                log_sum_exp(&buf)
            })
            .sum()
    }

    /// One EM iteration on `data` (with optional per-frame weights); returns the new model.
    /// Variances are floored at `floor`; components with no occupancy keep their parameters.
    pub fn em_step(&self, data: ArrayView2<'_, f64>, floor: ArrayView1<'_, f64>) -> DiagGmm {
        let (k, d) = (self.num_components(), self.dim());
        let mut occ = Array1::<f64>::zeros(k);
        let mut sum = Array2::<f64>::zeros((k, d));
        let mut sumsq = Array2::<f64>::zeros((k, d));
        let mut post = vec![0.0; k];
        for x in data.rows() {
            self.posteriors(x, &mut post);
            for c in 0..k {
                let g = post[c];
                if g == 0.0 {
                    continue;
                }
                occ[c] += g;
                for j in 0..d {
                    sum[[c, j]] += g * x[j];
                    sumsq[[c, j]] += g * x[j] * x[j];
                }
            }
        }
        let total = occ.sum();
        let mut weights = occ.mapv(|o| o / total);
        let mut means = self.means.clone();
        let mut vars = self.vars.clone();
        for c in 0..k {
            if occ[c] < MIN_OCCUPANCY {
                continue;
            }
            for j in 0..d {
                let m = sum[[c, j]] / occ[c];
                means[[c, j]] = m;
                vars[[c, j]] = (sumsq[[c, j]] / occ[c] - m * m).max(floor[j]);
            }
        }
        let wsum = weights.sum();
        weights.mapv_inplace(|w| w / wsum);
        DiagGmm::new(weights, means, vars).expect("em update preserves invariants")
    }

    /// Splits the heaviest component into two, perturbing means by +-0.2 standard deviations.
    pub fn split_heaviest(&self) -> DiagGmm {
        let heaviest = self
            .weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("nonempty");
        let k = self.num_components();
        let mut weights = Array1::zeros(k + 1);
        let mut means = Array2::zeros((k + 1, self.dim()));
        let mut vars = Array2::zeros((k + 1, self.dim()));
        for c in 0..k {
            weights[c] = self.weights[c];
            means.row_mut(c).assign(&self.means.row(c));
            vars.row_mut(c).assign(&self.vars.row(c));
        }
        weights[heaviest] /= 2.0;
        weights[k] = weights[heaviest];
        vars.row_mut(k).assign(&self.vars.row(heaviest));
        for j in 0..self.dim() {
            let sd = self.vars[[heaviest, j]].sqrt();
            let m = self.means[[heaviest, j]];
            means[[heaviest, j]] = m + 0.2 * sd;
            means[[k, j]] = m - 0.2 * sd;
        }
        DiagGmm::new(weights, means, vars).expect("split preserves invariants")
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-dimension variance floor for `data`.
pub fn variance_floor(data: ArrayView2<'_, f64>) -> Array1<f64> {
    data.var_axis(Axis(0), 0.0)
        .mapv(|v| (v * VARIANCE_FLOOR_FRACTION).max(1e-12))
}

/// Result of [`fit_gmm_em`]: the model and the total log-likelihood after
/// initialization and after every iteration.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: DiagGmm,
    pub log_likelihoods: Vec<f64>,
}

fn kmeans_pp_centers(data: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.nrows();
    let mut centers = vec![rng.random_range(0..n)];
    let mut dist = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = data.row(*centers.last().expect("nonempty"));
        for (i, x) in data.rows().into_iter().enumerate() {
            let d: f64 = x
                .iter()
                .zip(last.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i] = dist[i].min(d);
        }
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // all remaining points coincide with a center
            (0..n).find(|i| !centers.contains(i)).unwrap_or(0)
        };
        centers.push(next);
    }
    centers
}

/// Fits a K-component diagonal GMM with k-means++ seeding followed by `iters` EM passes.
pub fn fit_gmm_em(
    data: ArrayView2<'_, f64>,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<EmFit, GmmError> {
    let n = data.nrows();
    if n == 0 || data.ncols() == 0 {
        return Err(GmmError::EmptyData);
    }
    if k == 0 || k > n {
        return Err(GmmError::TooManyComponents { k, frames: n });
    }
    let floor = variance_floor(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp_centers(data, k, &mut rng);
    let d = data.ncols();

    // hard assignment to nearest seed gives the initial model
    let mut occ = vec![0.0f64; k];
    let mut sum = Array2::<f64>::zeros((k, d));
    let mut sumsq = Array2::<f64>::zeros((k, d));
    for x in data.rows() {
        let c = centers
            .iter()
            .enumerate()
            .map(|(c, &i)| {
                let m = data.row(i);
                (
                    c,
                    x.iter()
                        .zip(m.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>(),
                )
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .expect("k >= 1");
        occ[c] += 1.0;
        for j in 0..d {
            sum[[c, j]] += x[j];
            sumsq[[c, j]] += x[j] * x[j];
        }
    }
    let global_var = data.var_axis(Axis(0), 0.0);
    let mut means = Array2::zeros((k, d));
    let mut vars = Array2::zeros((k, d));
    for c in 0..k {
        for j in 0..d {
            if occ[c] > 0.0 {
                let m = sum[[c, j]] / occ[c];
                means[[c, j]] = m;
                vars[[c, j]] = (sumsq[[c, j]] / occ[c] - m * m).max(floor[j]);
            } else {
                means[[c, j]] = data[[centers[c], j]];
                vars[[c, j]] = global_var[j].max(floor[j]);
            }
        }
    }
    let weights = Array1::from_iter(occ.iter().map(|o| o / n as f64));
    let mut gmm = DiagGmm::new(weights, means, vars)?;
    let mut log_likelihoods = vec![gmm.total_log_likelihood(data)];
    for _ in 0..iters {
        gmm = gmm.em_step(data, floor.view());
        log_likelihoods.push(gmm.total_log_likelihood(data));
    }
    Ok(EmFit {
        gmm,
        log_likelihoods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn two_clusters(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((n, 1), |(i, _)| {
            let c = if i % 2 == 0 { 5.0 } else { -5.0 };
            c + noise.sample(&mut rng)
        })
    }

    #[test]
    fn single_component_is_closed_form() {
        let data =
            Array2::from_shape_vec((4, 2), vec![1.0, 2.0, 3.0, 2.0, 5.0, 8.0, 7.0, 4.0]).unwrap();
        let fit = fit_gmm_em(data.view(), 1, 3, 0).unwrap();
        let mean = data.mean_axis(Axis(0)).unwrap();
        let var = data.var_axis(Axis(0), 0.0);
        for j in 0..2 {
            assert!((fit.gmm.means()[[0, j]] - mean[j]).abs() < 1e-12);
            assert!((fit.gmm.vars()[[0, j]] - var[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_two_clusters() {
        let data = two_clusters(2000, 3);
        let fit = fit_gmm_em(data.view(), 2, 20, 11).unwrap();
        let mut means: Vec<f64> = fit.gmm.means().column(0).to_vec();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 5.0).abs() < 0.2, "{means:?}");
        assert!((means[1] - 5.0).abs() < 0.2, "{means:?}");
    }

    #[test]
    fn errors() {
        let data = Array2::zeros((2, 3));
        assert!(matches!(
            fit_gmm_em(data.view(), 3, 1, 0),
            Err(GmmError::TooManyComponents { k: 3, frames: 2 })
        ));
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(
            fit_gmm_em(empty.view(), 1, 1, 0),
            Err(GmmError::EmptyData)
        ));
    }

    #[test]
    fn monotone_and_floored() {
        let data = two_clusters(500, 9);
        for seed in 0..5 {
            let fit = fit_gmm_em(data.view(), 4, 15, seed).unwrap();
            for w in fit.log_likelihoods.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "{:?}", fit.log_likelihoods);
            }
            let floor = variance_floor(data.view());
            assert!(fit.gmm.vars().column(0).iter().all(|&v| v >= floor[0]));
            assert!((fit.gmm.weights().sum() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let data = two_clusters(300, 1);
        let a = fit_gmm_em(data.view(), 3, 5, 42).unwrap();
        let b = fit_gmm_em(data.view(), 3, 5, 42).unwrap();
        assert_eq!(a.gmm, b.gmm);
    }

    #[test]
    fn split_keeps_weight_sum() {
        let data = two_clusters(100, 2);
        let g = fit_gmm_em(data.view(), 1, 1, 0)
            .unwrap()
            .gmm
            .split_heaviest();
        assert_eq!(g.num_components(), 2);
        assert!((g.weights().sum() - 1.0).abs() < 1e-12);
    }
}
