//! Gaussian-mixture terminal laws and integer-power product-of-experts fusion.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::rng::{stream, Domain};

/// Components lighter than this fraction of the heaviest one are dropped after fusion.
pub const PRUNE_RELATIVE_WEIGHT: f64 = 1e-12;

/// Largest total trust degree `k1 + k2` accepted by default.
pub const DEFAULT_MAX_TRUST_DEGREE: u32 = 3;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureDoc", into = "MixtureDoc")]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<DMatrix<f64>>,
    /// Lower Cholesky factors of the covariances.
    factors: Vec<DMatrix<f64>>,
    /// `Σ log L_ii`, i.e. half the log-determinant.
    half_log_dets: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MixtureDoc {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MixtureDoc> for GaussianMixture {
    type Error = Error;

    fn try_from(doc: MixtureDoc) -> Result<Self> {
        let d = doc.dim;
        let mut covs = Vec::with_capacity(doc.covariances.len());
        for rows in &doc.covariances {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::InvalidTarget(format!("covariance is not {d}x{d}")));
            }
            covs.push(DMatrix::from_fn(d, d, |i, j| rows[i][j]));
        }
        let g = GaussianMixture::new(doc.weights, doc.means, covs)?;
        if g.dim != d {
            return Err(Error::DimensionMismatch { expected: d, got: g.dim });
        }
        Ok(g)
    }
}

impl From<GaussianMixture> for MixtureDoc {
    fn from(g: GaussianMixture) -> Self {
        let covariances = g
            .covariances
            .iter()
            .map(|c| (0..g.dim).map(|i| (0..g.dim).map(|j| c[(i, j)]).collect()).collect())
            .collect();
        MixtureDoc { dim: g.dim, weights: g.weights, means: g.means, covariances }
    }
}

impl PartialEq for GaussianMixture {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.covariances == other.covariances
    }
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Cholesky::<f64, Dyn>::new(m.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::InvalidTarget("mixture needs at least one component".into()));
        }
        if means.len() != n || covariances.len() != n {
            return Err(Error::InvalidTarget(format!(
                "{n} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidTarget("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidTarget(format!("weights sum to {total}, not 1")));
        }
        let weights: Vec<f64> = if total == 1.0 { weights } else { weights.iter().map(|w| w / total).collect() };
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidTarget("dimension must be positive".into()));
        }
        let mut factors = Vec::with_capacity(n);
        let mut half_log_dets = Vec::with_capacity(n);
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: m.len() });
            }
            if c.nrows() != dim || c.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.nrows() });
            }
            if m.iter().chain(c.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidTarget(format!("component {i} has non-finite entries")));
            }
            let scale = c.amax().max(f64::MIN_POSITIVE);
            if (c - c.transpose()).amax() > 1e-12 * scale {
                return Err(Error::InvalidTarget(format!("covariance {i} is not symmetric")));
            }
            let l = cholesky(c, &format!("covariance of component {i}"))?;
            half_log_dets.push((0..dim).map(|j| l[(j, j)].ln()).sum());
            factors.push(l);
        }
        Ok(Self { dim, weights, means, covariances, factors, half_log_dets })
    }

    /// Mixture with isotropic components `N(μ_n, σ_n² I)`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: &[f64]) -> Result<Self> {
        let d = means.first().map_or(0, Vec::len);
        let covs = variances.iter().map(|v| DMatrix::identity(d, d) * *v).collect();
        Self::new(weights, means, covs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, n: usize) -> &[f64] {
        &self.means[n]
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariance(&self, n: usize) -> &DMatrix<f64> {
        &self.covariances[n]
    }

    pub fn cholesky_factor(&self, n: usize) -> &DMatrix<f64> {
        &self.factors[n]
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected: self.dim, got: x.len() })
        }
    }

    /// `log ϱ_n + log N(x; μ_n, Σ_n)` for every component.
    pub fn component_log_terms(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let norm = 0.5 * self.dim as f64 * (2.0 * PI).ln();
        Ok((0..self.components())
            .map(|n| {
                let diff = DVector::from_iterator(self.dim, x.iter().zip(&self.means[n]).map(|(a, b)| a - b));
                let white = self.factors[n]
                    .solve_lower_triangular(&diff)
                    .expect("Cholesky factor has a positive diagonal");
                self.weights[n].ln() - 0.5 * white.norm_squared() - self.half_log_dets[n] - norm
            })
            .collect())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.component_log_terms(x)?))
    }

    /// Posterior component probabilities given an observation `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let terms = self.component_log_terms(x)?;
        let lse = log_sum_exp(&terms);
        Ok(terms.iter().map(|t| (t - lse).exp()).collect())
    }

    /// Index of the most responsible component (ties go to the lower index).
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        let terms = self.component_log_terms(x)?;
        let mut best = 0;
        for (i, t) in terms.iter().enumerate() {
            if *t > terms[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<Vec<f64>> {
        let mut cumulative = Vec::with_capacity(self.components());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cumulative.push(acc);
        }
        let last_live = self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
        (0..count)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let n = cumulative.iter().position(|c| u < *c).unwrap_or(last_live);
                let n = if self.weights[n] > 0.0 { n } else { last_live };
                let z = DVector::from_iterator(self.dim, (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let y = &self.factors[n] * z;
                y.iter().zip(&self.means[n]).map(|(a, m)| a + m).collect()
            })
            .collect()
    }

    /// `count` draws, reproducible for a given seed.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        self.sample_with(&mut stream(seed, Domain::TargetSample, 0), count)
    }

    pub fn mean_and_cov(&self) -> (Vec<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        let mut second = DMatrix::zeros(d, d);
        for n in 0..self.components() {
            let w = self.weights[n];
            let m = DVector::from_column_slice(&self.means[n]);
            for i in 0..d {
                mean[i] += w * m[i];
            }
            second += (&self.covariances[n] + &m * m.transpose()) * w;
        }
        let m = DVector::from_column_slice(&mean);
        let cov = second - &m * m.transpose();
        (mean, cov)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Integer trust exponents of the two experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32)", into = "(u32, u32)")]
pub struct TrustWeights {
    k1: u32,
    k2: u32,
}

impl TryFrom<(u32, u32)> for TrustWeights {
    type Error = Error;
    fn try_from((k1, k2): (u32, u32)) -> Result<Self> {
        TrustWeights::new(k1, k2)
    }
}

impl From<TrustWeights> for (u32, u32) {
    fn from(t: TrustWeights) -> Self {
        (t.k1, t.k2)
    }
}

impl TrustWeights {
    pub fn new(k1: u32, k2: u32) -> Result<Self> {
        Self::with_max_degree(k1, k2, DEFAULT_MAX_TRUST_DEGREE)
    }

    pub fn with_max_degree(k1: u32, k2: u32, max_degree: u32) -> Result<Self> {
        if k1 + k2 == 0 {
            return Err(Error::InvalidConfig("trust exponents cannot both be zero".into()));
        }
        if k1 + k2 > max_degree {
            return Err(Error::InvalidConfig(format!(
                "trust degree {} exceeds the maximum {max_degree}",
                k1 + k2
            )));
        }
        Ok(Self { k1, k2 })
    }

    pub fn k1(&self) -> u32 {
        self.k1
    }

    pub fn k2(&self) -> u32 {
        self.k2
    }
}

/// Exact mixture proportional to `p₁^{k1} · p₂^{k2}`.
pub fn poe_fuse(g1: &GaussianMixture, g2: &GaussianMixture, trust: TrustWeights) -> Result<GaussianMixture> {
    if g1.dim != g2.dim {
        return Err(Error::DimensionMismatch { expected: g1.dim, got: g2.dim });
    }
    let d = g1.dim;
    let half_d_log_2pi = 0.5 * d as f64 * (2.0 * PI).ln();

    // (precision, precision·mean, log constant) per component, both experts
    let prep = |g: &GaussianMixture| -> Vec<(DMatrix<f64>, DVector<f64>, f64)> {
        (0..g.components())
            .map(|n| {
                let lambda = Cholesky::<f64, Dyn>::new(g.covariances[n].clone())
                    .expect("validated at construction")
                    .inverse();
                let mu = DVector::from_column_slice(&g.means[n]);
                let eta = &lambda * &mu;
                let log_c = g.weights[n].ln() - half_d_log_2pi - g.half_log_dets[n] - 0.5 * mu.dot(&eta);
                (lambda, eta, log_c)
            })
            .collect()
    };
    let parts = [prep(g1), prep(g2)];

    // multiset of (expert, component) indices -> log of the accumulated tuple weight
    let mut tuples: BTreeMap<Vec<(usize, usize)>, Vec<f64>> = BTreeMap::new();
    let members: Vec<usize> = std::iter::repeat_n(0, trust.k1 as usize)
        .chain(std::iter::repeat_n(1, trust.k2 as usize))
        .collect();
    let mut index = vec![0usize; members.len()];
    let mut ordered = 0usize;
    'outer: loop {
        ordered += 1;
        let mut key: Vec<(usize, usize)> = members.iter().zip(&index).map(|(e, c)| (*e, *c)).collect();
        key.sort_unstable();
        tuples.entry(key).or_default().push(0.0);
        for slot in (0..index.len()).rev() {
            index[slot] += 1;
            if index[slot] < parts[members[slot]].len() {
                continue 'outer;
            }
            index[slot] = 0;
        }
        break;
    }

    let mut log_w = Vec::with_capacity(tuples.len());
    let mut means = Vec::with_capacity(tuples.len());
    let mut covs = Vec::with_capacity(tuples.len());
    for (key, copies) in &tuples {
        let multiplicity = (copies.len() as f64).ln();
        if key.len() == 1 {
            let (e, c) = key[0];
            let g = if e == 0 { g1 } else { g2 };
            log_w.push(g.weights[c].ln());
            means.push(g.means[c].clone());
            covs.push(g.covariances[c].clone());
            continue;
        }
        let mut lambda = DMatrix::zeros(d, d);
        let mut eta = DVector::zeros(d);
        let mut log_c = 0.0;
        for &(e, c) in key {
            let (l, h, lc) = &parts[e][c];
            lambda += l;
            eta += h;
            log_c += lc;
        }
        let chol = Cholesky::<f64, Dyn>::new(lambda)
            .ok_or_else(|| Error::NotPositiveDefinite("fused precision".into()))?;
        let mean = chol.solve(&eta);
        let half_log_det_lambda: f64 = (0..d).map(|i| chol.l()[(i, i)].ln()).sum();
        let mut cov = chol.inverse();
        cov = (&cov + cov.transpose()) * 0.5;
        log_w.push(multiplicity + log_c + 0.5 * eta.dot(&mean) + half_d_log_2pi - half_log_det_lambda);
        means.push(mean.iter().copied().collect());
        covs.push(cov);
    }
    debug_assert!(tuples.len() <= ordered);

    let best = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = best + PRUNE_RELATIVE_WEIGHT.ln();
    let keep: Vec<usize> = (0..log_w.len()).filter(|&i| log_w[i] >= cutoff).collect();
    let kept: Vec<f64> = keep.iter().map(|&i| log_w[i]).collect();
    let lse = log_sum_exp(&kept);
    let weights: Vec<f64> = kept.iter().map(|l| (l - lse).exp()).collect();
    let total: f64 = weights.iter().sum();
    GaussianMixture::new(
        weights.iter().map(|w| w / total).collect(),
        keep.iter().map(|&i| means[i].clone()).collect(),
        keep.iter().map(|&i| covs[i].clone()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal(d: usize) -> GaussianMixture {
        GaussianMixture::isotropic(vec![1.0], vec![vec![0.0; d]], &[1.0]).unwrap()
    }

    fn scalar(weights: Vec<f64>, means: &[f64], vars: &[f64]) -> GaussianMixture {
        GaussianMixture::isotropic(weights, means.iter().map(|m| vec![*m]).collect(), vars).unwrap()
    }

    #[test]
    fn standard_normal_at_origin() {
        let v = std_normal(2).log_density(&[0.0, 0.0]).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn bisector_has_equal_responsibilities() {
        let g = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-2.0, 0.0], vec![2.0, 0.0]], &[0.3, 0.3])
            .unwrap();
        let r = g.responsibilities(&[0.0, 7.3]).unwrap();
        assert_eq!(r[0], r[1]);
    }

    #[test]
    fn far_points_stay_finite() {
        let g = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-2.0, 0.0], vec![2.0, 0.0]], &[0.01, 0.01])
            .unwrap();
        let v = g.log_density(&[300.0, -250.0]).unwrap();
        assert!(v.is_finite() && v < -1e6);
        let r = g.responsibilities(&[300.0, -250.0]).unwrap();
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(GaussianMixture::isotropic(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], &[1.0, 1.0]).is_err());
        assert!(GaussianMixture::isotropic(vec![1.0], vec![vec![0.0]], &[-1.0]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0, 0.0]], vec![asym]).is_err());
        assert!(matches!(
            std_normal(2).log_density(&[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_respects_zero_weights() {
        let g = GaussianMixture::isotropic(vec![1.0, 0.0], vec![vec![0.0], vec![100.0]], &[1.0, 1.0]).unwrap();
        let a = g.sample(500, 9);
        assert_eq!(a, g.sample(500, 9));
        assert!(a.iter().all(|x| x[0].abs() < 10.0));
    }

    #[test]
    fn sample_mean_of_single_gaussian() {
        let g = GaussianMixture::isotropic(vec![1.0], vec![vec![1.5, -2.0]], &[1.0]).unwrap();
        let n = 100_000;
        let xs = g.sample(n, 1);
        for i in 0..2 {
            let m = xs.iter().map(|x| x[i]).sum::<f64>() / n as f64;
            assert!((m - g.mean(0)[i]).abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn moments_of_symmetric_and_single() {
        let g = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-1.0, 2.0], vec![1.0, -2.0]], &[0.2, 0.2])
            .unwrap();
        let (m, c) = g.mean_and_cov();
        assert_eq!(m, vec![0.0, 0.0]);
        assert!((c[(0, 0)] - 1.2).abs() < 1e-15 && (c[(0, 1)] + 2.0).abs() < 1e-15);
        let s = std_normal(3);
        let (m, c) = s.mean_and_cov();
        assert_eq!(m, vec![0.0; 3]);
        assert_eq!(c, DMatrix::identity(3, 3));
    }

    #[test]
    fn product_of_two_unit_gaussians() {
        let a = scalar(vec![1.0], &[-1.0], &[1.0]);
        let b = scalar(vec![1.0], &[1.0], &[1.0]);
        let f = poe_fuse(&a, &b, TrustWeights::new(1, 1).unwrap()).unwrap();
        assert_eq!(f.components(), 1);
        assert!(f.mean(0)[0].abs() < 1e-12);
        assert!((f.covariance(0)[(0, 0)] - 0.5).abs() < 1e-12);
        let f = poe_fuse(&a, &b, TrustWeights::new(2, 1).unwrap()).unwrap();
        assert!((f.mean(0)[0] + 1.0 / 3.0).abs() < 1e-12);
        assert!((f.covariance(0)[(0, 0)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identity_fusion_keeps_single_gaussian() {
        let a = GaussianMixture::new(
            vec![1.0],
            vec![vec![0.3, -1.0]],
            vec![DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])],
        )
        .unwrap();
        let b = std_normal(2);
        assert_eq!(poe_fuse(&a, &b, TrustWeights::new(1, 0).unwrap()).unwrap(), a);
    }

    #[test]
    fn squared_mixture_merges_cross_terms() {
        let a = scalar(vec![0.5, 0.5], &[-1.0, 1.0], &[0.5, 0.5]);
        let f = poe_fuse(&a, &a, TrustWeights::new(2, 0).unwrap()).unwrap();
        // ordered 4 tuples, 3 distinct multisets
        assert_eq!(f.components(), 3);
        assert!((f.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trust_validation() {
        assert!(TrustWeights::new(0, 0).is_err());
        assert!(TrustWeights::new(3, 1).is_err());
        assert!(TrustWeights::with_max_degree(3, 1, 4).is_ok());
        let t: TrustWeights = serde_json::from_str("[2, 1]").unwrap();
        assert_eq!((t.k1(), t.k2()), (2, 1));
    }

    #[test]
    fn json_round_trip() {
        let g = GaussianMixture::new(
            vec![0.25, 0.75],
            vec![vec![0.1, 0.2], vec![-3.0, 1.0 / 3.0]],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
                DMatrix::identity(2, 2) * 0.7,
            ],
        )
        .unwrap();
        let back = GaussianMixture::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(g, back);
    }
}
