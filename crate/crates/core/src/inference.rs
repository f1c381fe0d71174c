//! Posterior over terminal states and the optimal drift.
//!
//! Dividing the backward kernel by the forward kernel at `t = 1` leaves a Gaussian in `y` with
//! precision `K_t = c⁻_t − a⁺(1)` and an affine-in-`x` mean `μ_t(x)`. Multiplying it into a
//! mixture target gives another mixture whose mean is `ŷ(t; x)`. The optimal drift is
//!
//! ```text
//! u*(t, x) = −a⁻(x − ν_t) + b⁻(ŷ − ν_t) + r⁻
//! ```
//!
//! [`DriftPlan`] precompiles everything that does not depend on `x` for one time step.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::greens::{BackwardCoeffs, GreensTable};
use crate::numeric::log_sum_exp;
use crate::target::GaussianMixture;

/// The x-independent part of the reweighting Gaussian at one time.
///
/// As a density in `y` it is `exp(−K_t/2 ‖y‖² + η(x)·y)` with `η(x) = b⁻_t x + eta_offset`, so
/// its mean is `μ_t(x) = η(x) / K_t`.
#[derive(Debug, Clone)]
pub struct ReweightState {
    pub t: f64,
    /// Precision `K_t`.
    pub k_t: f64,
    /// `ψ_t = s⁻_t − s⁺(1)`.
    pub psi: Vec<f64>,
    pub eta_offset: Vec<f64>,
    /// `μ_t(x) = gain · x + offset`.
    pub gain: f64,
    pub offset: Vec<f64>,
    pub nu_t: Vec<f64>,
    pub backward: BackwardCoeffs,
}

impl ReweightState {
    pub fn at(table: &GreensTable, t: f64) -> Result<Self> {
        table.backward_at(t)?;
        Self::build(table, t)
    }

    /// Skips the exclusion-band check; `t` must lie strictly inside `(0, 1)`.
    pub(crate) fn build(table: &GreensTable, t: f64) -> Result<Self> {
        let bw = table.backward_unchecked(t);
        let protocol = table.protocol();
        let nu_t = protocol.nu(protocol.piece_index(t)).to_vec();
        let (_, s1) = table.terminal_forward();
        let (k_t, l) = table.reweight_unchecked(t, bw.b_minus);
        if !(k_t > 0.0 && k_t.is_finite()) {
            return Err(Error::DegeneratePrecision { t, k: k_t });
        }
        let psi: Vec<f64> = bw.s_minus.iter().zip(s1).map(|(s, s1)| s - s1).collect();
        let eta_offset: Vec<f64> = l.iter().zip(&nu_t).map(|(l, v)| l - bw.b_minus * v).collect();
        let gain = bw.b_minus / k_t;
        let offset = eta_offset.iter().map(|e| e / k_t).collect();
        Ok(Self { t, k_t, psi, eta_offset, gain, offset, nu_t, backward: bw })
    }

    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.offset).map(|(xi, o)| self.gain * xi + o).collect()
    }

    /// Natural parameter `η(x) = K_t μ_t(x)`.
    pub fn eta(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.eta_offset).map(|(xi, o)| self.backward.b_minus * xi + o).collect()
    }
}

pub fn reweight(table: &GreensTable, t: f64) -> Result<ReweightState> {
    ReweightState::at(table, t)
}

/// Mixture posterior over terminal states at `(t, x)`.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    pub k_t: f64,
    /// Reweighting mean `μ_t(x)`.
    pub mu: Vec<f64>,
    /// Normalized component weights `w̃_n`.
    pub weights: Vec<f64>,
    /// Component means `μ̃_n`.
    pub means: Vec<Vec<f64>>,
    pub yhat: Vec<f64>,
    /// `log Σ_n ϱ_n N(μ_t(x); μ_n, Σ_n + I/K_t)`.
    pub log_evidence: f64,
}

impl PosteriorState {
    /// `Σ̃_n = Σ_n (I + K_t Σ_n)⁻¹`.
    pub fn covariance(&self, gmm: &GaussianMixture, n: usize) -> Result<DMatrix<f64>> {
        let d = gmm.dim();
        let sigma = gmm.covariance(n);
        let a = DMatrix::identity(d, d) + sigma * self.k_t;
        let chol = Cholesky::<f64, Dyn>::new(a).ok_or_else(|| Error::NotPositiveDefinite("I + K Σ".into()))?;
        let out = chol.solve(sigma);
        Ok((&out + out.transpose()) * 0.5)
    }
}

fn check_x(gmm: &GaussianMixture, table: &GreensTable, x: &[f64]) -> Result<()> {
    if gmm.dim() != table.dim() {
        return Err(Error::DimensionMismatch { expected: table.dim(), got: gmm.dim() });
    }
    if x.len() != gmm.dim() {
        return Err(Error::DimensionMismatch { expected: gmm.dim(), got: x.len() });
    }
    Ok(())
}

pub fn posterior(table: &GreensTable, gmm: &GaussianMixture, t: f64, x: &[f64]) -> Result<PosteriorState> {
    check_x(gmm, table, x)?;
    let rw = ReweightState::at(table, t)?;
    posterior_from(&rw, gmm, x)
}

pub fn posterior_from(rw: &ReweightState, gmm: &GaussianMixture, x: &[f64]) -> Result<PosteriorState> {
    let d = gmm.dim();
    let k = rw.k_t;
    let mu = DVector::from_vec(rw.mean(x));
    let eye = DMatrix::<f64>::identity(d, d);
    let half_d_log_2pi = 0.5 * d as f64 * (2.0 * PI).ln();
    let mut log_w = Vec::with_capacity(gmm.components());
    let mut means = Vec::with_capacity(gmm.components());
    for n in 0..gmm.components() {
        let sigma = gmm.covariance(n);
        let mu_n = DVector::from_column_slice(gmm.mean(n));
        let s = sigma + &eye / k;
        let l = Cholesky::<f64, Dyn>::new(s)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("S_{n}")))?
            .l();
        let white = l.solve_lower_triangular(&(&mu - &mu_n)).expect("positive diagonal");
        let half_log_det: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
        log_w.push(gmm.weights()[n].ln() - 0.5 * white.norm_squared() - half_log_det - half_d_log_2pi);

        let a = &eye + sigma * k;
        let chol = Cholesky::<f64, Dyn>::new(a).ok_or_else(|| Error::NotPositiveDefinite(format!("A_{n}")))?;
        let rhs = &mu_n + sigma * &mu * k;
        means.push(chol.solve(&rhs).iter().copied().collect::<Vec<f64>>());
    }
    let lse = log_sum_exp(&log_w);
    let weights: Vec<f64> = log_w.iter().map(|l| (l - lse).exp()).collect();
    let mut yhat = vec![0.0; d];
    for (w, m) in weights.iter().zip(&means) {
        for i in 0..d {
            yhat[i] += w * m[i];
        }
    }
    Ok(PosteriorState { k_t: k, mu: mu.iter().copied().collect(), weights, means, yhat, log_evidence: lse })
}

pub fn yhat(table: &GreensTable, gmm: &GaussianMixture, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    Ok(posterior(table, gmm, t, x)?.yhat)
}

/// Optimal drift `−a⁻(x − ν_t) + b⁻(ŷ − ν_t) + r⁻`.
pub fn drift(table: &GreensTable, gmm: &GaussianMixture, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_x(gmm, table, x)?;
    let rw = ReweightState::at(table, t)?;
    let post = posterior_from(&rw, gmm, x)?;
    let bw = &rw.backward;
    Ok((0..x.len())
        .map(|i| {
            -bw.a_minus * (x[i] - rw.nu_t[i]) + bw.b_minus * (post.yhat[i] - rw.nu_t[i]) + bw.r_minus[i]
        })
        .collect())
}

/// `b⁻ (ŷ − μ_t(x))`, the gradient of the log-normalizer of the reweighted target.
///
/// It differs from [`drift`] by `b⁻ μ_t(x) − a⁻(x − ν_t) − b⁻ ν_t + r⁻`, which is not zero in
/// general; only [`drift`] transports the origin onto the target.
pub fn drift_compact(table: &GreensTable, gmm: &GaussianMixture, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let post = posterior(table, gmm, t, x)?;
    let b = table.backward_at(t)?.b_minus;
    Ok(post.yhat.iter().zip(&post.mu).map(|(y, m)| b * (y - m)).collect())
}

/// Per-time-step affine maps for fast drift evaluation over many particles.
///
/// Works in natural parameters so nothing divides by `K_t`. With `Σ̃_n = Σ_n (I + K_t Σ_n)⁻¹`
/// and `η = b⁻x + η₀`, component `n` has mean `μ̃_n = M_n x + m_n` (`M_n = b⁻Σ̃_n`) and, up
/// to a term shared by all components, log-weight `c_n + b⁻ m_n·x + ½ b⁻ x·M_n x`. Matrices are
/// stored row-major in flat buffers.
#[derive(Debug, Clone)]
pub struct DriftPlan {
    dim: usize,
    comps: usize,
    a: f64,
    b: f64,
    r: Vec<f64>,
    nu: Vec<f64>,
    k: f64,
    eta_offset: Vec<f64>,
    log_c: Vec<f64>,
    m: Vec<f64>,
    m0: Vec<f64>,
}

impl DriftPlan {
    pub fn new(rw: &ReweightState, gmm: &GaussianMixture) -> Result<Self> {
        let d = gmm.dim();
        if rw.nu_t.len() != d {
            return Err(Error::DimensionMismatch { expected: rw.nu_t.len(), got: d });
        }
        let comps = gmm.components();
        let k = rw.k_t;
        let b = rw.backward.b_minus;
        let eye = DMatrix::<f64>::identity(d, d);
        let e0 = DVector::from_column_slice(&rw.eta_offset);
        let mut plan = Self {
            dim: d,
            comps,
            a: rw.backward.a_minus,
            b,
            r: rw.backward.r_minus.clone(),
            nu: rw.nu_t.clone(),
            k,
            eta_offset: rw.eta_offset.clone(),
            log_c: Vec::with_capacity(comps),
            m: Vec::with_capacity(comps * d * d),
            m0: Vec::with_capacity(comps * d),
        };
        for n in 0..comps {
            let sigma = gmm.covariance(n);
            let mu_n = DVector::from_column_slice(gmm.mean(n));
            let chol = Cholesky::<f64, Dyn>::new(&eye + sigma * k)
                .ok_or_else(|| Error::NotPositiveDefinite(format!("A_{n}")))?;
            let half_log_det: f64 = (0..d).map(|i| chol.l()[(i, i)].ln()).sum();
            let mut post_cov = chol.solve(sigma);
            post_cov = (&post_cov + post_cov.transpose()) * 0.5;
            let h = chol.solve(&mu_n);
            let se0 = &post_cov * &e0;
            let m0 = &h + &se0;
            plan.log_c.push(
                gmm.weights()[n].ln() - half_log_det - 0.5 * k * mu_n.dot(&h) + 0.5 * e0.dot(&se0) + h.dot(&e0),
            );
            for i in 0..d {
                for j in 0..d {
                    plan.m.push(b * post_cov[(i, j)]);
                }
                plan.m0.push(m0[i]);
            }
        }
        if plan.log_c.iter().chain(&plan.m).chain(&plan.m0).any(|v| !v.is_finite()) {
            return Err(Error::DegeneratePrecision { t: rw.t, k });
        }
        Ok(plan)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.comps
    }

    /// Writes `ŷ(t; x)`; `scratch` needs `components() · (dim() + 1)` slots.
    pub fn yhat_into(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        match self.dim {
            1 => self.yhat_impl::<1>(x, scratch, out),
            2 => self.yhat_impl::<2>(x, scratch, out),
            3 => self.yhat_impl::<3>(x, scratch, out),
            _ => self.yhat_impl::<0>(x, scratch, out),
        }
    }

    /// `D > 0` fixes the dimension at compile time; `D = 0` reads it from the plan.
    #[inline(always)]
    fn yhat_impl<const D: usize>(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let d = if D == 0 { self.dim } else { D };
        let x = &x[..d];
        let out = &mut out[..d];
        let (log_w, means) = scratch.split_at_mut(self.comps);
        let mut best = f64::NEG_INFINITY;
        let params = self.m.chunks_exact(d * d).zip(self.m0.chunks_exact(d)).zip(&self.log_c);
        for ((lw, mean), ((mat, m0), lc)) in log_w.iter_mut().zip(means.chunks_exact_mut(d)).zip(params) {
            let mut lin = 0.0;
            let mut quad = 0.0;
            for ((mi, row), (&m0i, &xi)) in mean.iter_mut().zip(mat.chunks_exact(d)).zip(m0.iter().zip(x)) {
                let mut v = 0.0;
                for (r, xj) in row.iter().zip(x) {
                    v += r * xj;
                }
                *mi = v + m0i;
                lin += m0i * xi;
                quad += v * xi;
            }
            *lw = lc + self.b * (lin + 0.5 * quad);
            if *lw > best {
                best = *lw;
            }
        }
        out.fill(0.0);
        let mut total = 0.0;
        for (lw, mean) in log_w.iter().zip(means.chunks_exact(d)) {
            let w = (lw - best).exp();
            total += w;
            for (o, m) in out.iter_mut().zip(mean) {
                *o += w * m;
            }
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    pub fn scratch_len(&self) -> usize {
        self.comps * (self.dim + 1)
    }

    /// Writes `u*(t, x)`.
    pub fn drift_into(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        match self.dim {
            1 => self.drift_impl::<1>(x, scratch, out),
            2 => self.drift_impl::<2>(x, scratch, out),
            3 => self.drift_impl::<3>(x, scratch, out),
            _ => self.drift_impl::<0>(x, scratch, out),
        }
    }

    #[inline(always)]
    fn drift_impl<const D: usize>(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        self.yhat_impl::<D>(x, scratch, out);
        let d = if D == 0 { self.dim } else { D };
        for (((o, xi), nu), r) in out[..d].iter_mut().zip(&x[..d]).zip(&self.nu[..d]).zip(&self.r[..d]) {
            *o = -self.a * (xi - nu) + self.b * (*o - nu) + r;
        }
    }

    /// Writes `b⁻(ŷ − μ_t(x))`.
    pub fn compact_drift_into(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        self.yhat_into(x, scratch, out);
        for i in 0..self.dim {
            let mu = (self.b * x[i] + self.eta_offset[i]) / self.k;
            out[i] = self.b * (out[i] - mu);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::PwcProtocol;

    fn table(beta: f64, nu: Vec<Vec<f64>>) -> GreensTable {
        let k = nu.len();
        GreensTable::new(&PwcProtocol::uniform(vec![beta; k], nu).unwrap()).unwrap()
    }

    fn two_modes() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.4, 0.6],
            vec![vec![2.0, 1.0], vec![3.0, -1.5]],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]),
                DMatrix::from_row_slice(2, 2, &[0.15, -0.05, -0.05, 0.4]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn free_limit_reweighting() {
        let g = table(1e-8, vec![vec![0.0, 0.0]]);
        let rw = reweight(&g, 0.5).unwrap();
        assert!((rw.k_t - 1.0).abs() < 1e-6);
        let mu = rw.mean(&[0.3, -0.7]);
        assert!((mu[0] - 0.6).abs() < 1e-5 && (mu[1] + 1.4).abs() < 1e-5);
    }

    #[test]
    fn constant_center_has_no_shift() {
        let g = table(4.0, vec![vec![0.0, 0.0]; 5]);
        for t in [0.1, 0.33, 0.5, 0.9] {
            assert_eq!(reweight(&g, t).unwrap().psi, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn accumulated_and_subtracted_reweighting_agree() {
        // includes a first center away from the starting point
        for nu0 in [[0.0, 0.0], [0.7, -1.2]] {
            let g = table(3.0, vec![nu0.to_vec(), vec![1.0, 2.0], vec![-0.5, 0.3], vec![2.0, 0.0]]);
            let (a1, s1) = g.terminal_forward();
            let nu_end = g.protocol().end_center().to_vec();
            for i in 1..100 {
                let t = i as f64 / 100.0;
                let rw = reweight(&g, t).unwrap();
                let bw = &rw.backward;
                let k_direct = bw.c_minus - a1;
                assert!((rw.k_t - k_direct).abs() < 1e-12 * bw.c_minus, "t={t}");
                for j in 0..2 {
                    let l_direct = bw.c_minus * rw.nu_t[j] + bw.s_minus[j] - s1[j] - a1 * nu_end[j];
                    let l = rw.eta_offset[j] + bw.b_minus * rw.nu_t[j];
                    assert!((l - l_direct).abs() < 1e-11 * (1.0 + l_direct.abs()), "t={t}: {l} vs {l_direct}");
                }
            }
        }
    }

    #[test]
    fn early_precision_stays_positive_for_stiff_guides() {
        let g = table(900.0, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]]);
        let rw = reweight(&g, 1e-3).unwrap();
        assert!(rw.k_t > 0.0 && rw.k_t < 1e-12);
    }

    #[test]
    fn precision_grows_near_the_end() {
        let g = table(2.0, vec![vec![0.0], vec![1.0], vec![0.5]]);
        let mut last = 0.0;
        for i in 0..=99 {
            let t = 0.9 + 0.0999 * i as f64 / 99.0;
            let k = reweight(&g, t).unwrap().k_t;
            assert!(k > last);
            last = k;
        }
    }

    #[test]
    fn single_gaussian_weight_and_closed_form() {
        let g = table(3.0, vec![vec![0.0, 0.0], vec![1.0, -0.5]]);
        let target = GaussianMixture::isotropic(vec![1.0], vec![vec![2.0, 1.0]], &[0.25]).unwrap();
        let x = [0.4, 0.2];
        let p = posterior(&g, &target, 0.6, &x).unwrap();
        assert_eq!(p.weights, vec![1.0]);
        let k = p.k_t;
        for i in 0..2 {
            let expected = (target.mean(0)[i] + k * 0.25 * p.mu[i]) / (1.0 + k * 0.25);
            assert!((p.yhat[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_modes_split_evenly_on_axis() {
        let g = table(2.0, vec![vec![0.0, 0.0], vec![2.0, 0.0]]);
        let target =
            GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![4.0, 1.0], vec![4.0, -1.0]], &[0.1, 0.1]).unwrap();
        let p = posterior(&g, &target, 0.4, &[1.0, 0.0]).unwrap();
        assert!((p.weights[0] - 0.5).abs() < 1e-15);
        let u = drift(&g, &target, 0.4, &[1.0, 0.0]).unwrap();
        assert!(u[1].abs() < 1e-10);
    }

    #[test]
    fn unguided_drift_reduces_to_bridge_form() {
        let g = table(1.7, vec![vec![0.0, 0.0]; 3]);
        let target = two_modes();
        let x = [0.5, -0.2];
        let t = 0.45;
        let bw = g.backward_at(t).unwrap();
        let y = yhat(&g, &target, t, &x).unwrap();
        let u = drift(&g, &target, t, &x).unwrap();
        for i in 0..2 {
            assert!((u[i] - (bw.b_minus * y[i] - bw.a_minus * x[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn distant_state_keeps_weights_finite() {
        let g = table(1.0, vec![vec![0.0, 0.0]]);
        let target = two_modes();
        let p = posterior(&g, &target, 0.99, &[400.0, -300.0]).unwrap();
        assert!(p.log_evidence < -1e4);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn plan_matches_reference_path() {
        let g = table(5.0, vec![vec![0.0, 0.0], vec![1.0, 0.8], vec![2.5, -0.4], vec![3.0, 0.0]]);
        let target = two_modes();
        let mut scratch = vec![0.0; 6];
        let mut out = [0.0; 2];
        for &t in &[0.001, 0.2, 0.5, 0.77, 0.999] {
            let rw = reweight(&g, t).unwrap();
            let plan = DriftPlan::new(&rw, &target).unwrap();
            for x in [[0.0, 0.0], [1.3, -0.7], [-4.0, 6.0]] {
                let y = yhat(&g, &target, t, &x).unwrap();
                plan.yhat_into(&x, &mut scratch, &mut out);
                for i in 0..2 {
                    assert!((out[i] - y[i]).abs() <= 1e-12 * (1.0 + y[i].abs()), "t={t} x={x:?}");
                }
                // the drift is a difference of terms of size a⁻|x|
                let scale = rw.backward.a_minus * (1.0 + x[0].abs() + x[1].abs());
                let reference = drift(&g, &target, t, &x).unwrap();
                plan.drift_into(&x, &mut scratch, &mut out);
                for i in 0..2 {
                    assert!((out[i] - reference[i]).abs() <= 1e-13 * scale, "t={t} x={x:?}");
                }
            }
        }
    }

    #[test]
    fn posterior_covariance_is_spd() {
        let g = table(1.0, vec![vec![0.0, 0.0]]);
        let target = two_modes();
        let p = posterior(&g, &target, 0.5, &[0.1, 0.1]).unwrap();
        for n in 0..2 {
            let c = p.covariance(&target, n).unwrap();
            assert!(Cholesky::<f64, Dyn>::new(c).is_some());
        }
    }
}
