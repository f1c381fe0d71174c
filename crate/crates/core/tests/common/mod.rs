//! Independent numerical references: adaptive RK4 for the kernel coefficient ODEs and brute-force
//! grid quadrature for posterior quantities.
#![allow(dead_code)]

use ghpid::protocol::PwcProtocol;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use ghpid::{GaussianMixture, GreensTable};

/// Classical RK4 with step doubling on `[t0, t1]`; the right-hand side must be smooth inside.
pub fn rk4_adaptive<F>(f: &F, t0: f64, t1: f64, y: &mut [f64], tol: f64)
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let step = |t: f64, y: &[f64], h: f64, out: &mut [f64]| {
        let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        f(t, y, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        f(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        f(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        f(t + h, &tmp, &mut k4);
        for i in 0..n {
            out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    };
    let mut t = t0;
    let mut h = (t1 - t0) / 16.0;
    let (mut full, mut half, mut two) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    while t < t1 {
        if t + h > t1 {
            h = t1 - t;
        }
        step(t, y, h, &mut full);
        step(t, y, 0.5 * h, &mut half);
        step(t + 0.5 * h, &half, 0.5 * h, &mut two);
        let mut err: f64 = 0.0;
        for i in 0..n {
            let scale = 1.0 + two[i].abs();
            err = err.max((two[i] - full[i]).abs() / 15.0 / scale);
        }
        if err <= tol || h < 1e-14 {
            t += h;
            for i in 0..n {
                y[i] = two[i] + (two[i] - full[i]) / 15.0;
            }
        }
        let factor = if err == 0.0 { 4.0 } else { (0.9 * (tol / err).powf(0.2)).clamp(0.2, 4.0) };
        h *= factor;
    }
}

/// Guide center with each jump replaced by a linear ramp of width `delta` centered on the
/// breakpoint. `probe` picks the smooth branch the value is taken from.
pub fn ramped_center(p: &PwcProtocol, delta: f64, t: f64, probe: f64) -> Vec<f64> {
    let b = p.breakpoints();
    for k in 1..p.pieces() {
        let (lo, hi) = (b[k] - 0.5 * delta, b[k] + 0.5 * delta);
        if probe > lo && probe < hi {
            let w = (t - lo) / delta;
            return p.nu(k - 1).iter().zip(p.nu(k)).map(|(a, c)| a + w * (c - a)).collect();
        }
    }
    p.nu(p.piece_index(probe.clamp(0.0, 1.0 - 1e-15))).to_vec()
}

fn stops(p: &PwcProtocol, delta: f64, extra: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = p.breakpoints().to_vec();
    if delta > 0.0 {
        for k in 1..p.pieces() {
            s.push(p.breakpoints()[k] - 0.5 * delta);
            s.push(p.breakpoints()[k] + 0.5 * delta);
        }
    }
    s.extend_from_slice(extra);
    s.retain(|v| (0.0..=1.0).contains(v));
    s.sort_by(f64::total_cmp);
    s.dedup();
    s
}

#[derive(Debug, Clone)]
pub struct OracleBackward {
    pub t: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
}

/// Backward coefficients at each time in `times` (all below `1 − tau0`), integrating in
/// time-to-go `τ = 1 − t` from `tau0` inside the last piece.
///
/// State: `p = 1/a`, `m = b/a`, `e = c − a` and the uncentered linear coefficients
/// `R = r + (a − b)ν`, `S = s + (c − b)ν`, with
/// `p' = 1 − βp²`, `m' = −βmp`, `e' = (1 − m²)/p² − β`, `R' = −aR + βν`, `S' = bR`.
pub fn backward_oracle(p: &PwcProtocol, delta: f64, times: &[f64], tau0: f64, tol: f64) -> Vec<OracleBackward> {
    let d = p.dim();
    let k_last = p.pieces() - 1;
    let beta_end = p.beta(k_last);
    let g = beta_end.sqrt();
    // constant-stiffness solution on the last piece
    let p0 = (g * tau0).tanh() / g;
    let m0 = 1.0 / (g * tau0).cosh();
    let (a0, b0) = (1.0 / p0, m0 / p0);
    let nu_end = p.end_center();
    let mut y = vec![0.0; 3 + 2 * d];
    y[0] = p0;
    y[1] = m0;
    y[2] = 0.0;
    for i in 0..d {
        y[3 + i] = (a0 - b0) * nu_end[i];
        y[3 + d + i] = (a0 - b0) * nu_end[i];
    }
    let taus: Vec<f64> = times.iter().map(|t| 1.0 - t).collect();
    let mut marks: Vec<f64> = stops(p, delta, times).into_iter().map(|t| 1.0 - t).filter(|s| *s > tau0).collect();
    marks.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut tau = tau0;
    for &next in &marks {
        let mid = 1.0 - 0.5 * (tau + next);
        let beta = p.beta(p.piece_index(mid));
        let rhs = |s: f64, y: &[f64], dy: &mut [f64]| {
            let nu = ramped_center(p, delta, 1.0 - s, mid);
            let (pp, m, _e) = (y[0], y[1], y[2]);
            dy[0] = 1.0 - beta * pp * pp;
            dy[1] = -beta * m * pp;
            dy[2] = (1.0 - m * m) / (pp * pp) - beta;
            let a = 1.0 / pp;
            let b = m / pp;
            for i in 0..d {
                dy[3 + i] = -a * y[3 + i] + beta * nu[i];
                dy[3 + d + i] = b * y[3 + i];
            }
        };
        rk4_adaptive(&rhs, tau, next, &mut y, tol);
        tau = next;
        if let Some(idx) = taus.iter().position(|v| *v == next) {
            let t = times[idx];
            let nu = ramped_center(p, delta, t, t);
            let a = 1.0 / y[0];
            let b = y[1] / y[0];
            let c = y[2] + a;
            out.push(OracleBackward {
                t,
                a,
                b,
                c,
                r: (0..d).map(|i| y[3 + i] - (a - b) * nu[i]).collect(),
                s: (0..d).map(|i| y[3 + d + i] - (c - b) * nu[i]).collect(),
            });
        }
    }
    out.sort_by(|u, v| u.t.total_cmp(&v.t));
    out
}

/// Forward coefficients `(t, a⁺, s⁺)`, integrating `p⁺ = 1/a⁺` from `t = 0` and the uncentered
/// `S⁺ = s⁺ + a⁺ν` from `t0` inside the first piece: `p⁺' = 1 − βp⁺²`, `S⁺' = −a⁺S⁺ + βν`.
pub fn forward_oracle(p: &PwcProtocol, delta: f64, times: &[f64], t0: f64, tol: f64) -> Vec<(f64, f64, Vec<f64>)> {
    let d = p.dim();
    let beta0 = p.beta(0);
    let g = beta0.sqrt();
    let nu0 = p.nu(0);
    let mut y = vec![0.0; 1 + d];
    // p⁺ from zero up to t0, then the constant-stiffness S⁺ from a start at the origin
    let first = |_: f64, y: &[f64], dy: &mut [f64]| {
        dy[0] = 1.0 - beta0 * y[0] * y[0];
    };
    let mut pp = [0.0];
    rk4_adaptive(&first, 0.0, t0, &mut pp, tol);
    y[0] = pp[0];
    for i in 0..d {
        y[1 + i] = nu0[i] * g * (0.5 * g * t0).tanh();
    }
    let marks: Vec<f64> = stops(p, delta, times).into_iter().filter(|s| *s > t0).collect();
    let mut out = Vec::new();
    let mut t = t0;
    for &next in &marks {
        let mid = 0.5 * (t + next);
        let beta = p.beta(p.piece_index(mid));
        let rhs = |s: f64, y: &[f64], dy: &mut [f64]| {
            let nu = ramped_center(p, delta, s, mid);
            dy[0] = 1.0 - beta * y[0] * y[0];
            let a = 1.0 / y[0];
            for i in 0..d {
                dy[1 + i] = -a * y[1 + i] + beta * nu[i];
            }
        };
        rk4_adaptive(&rhs, t, next, &mut y, tol);
        t = next;
        if times.contains(&next) {
            let nu = ramped_center(p, delta, next, next);
            let a = 1.0 / y[0];
            out.push((next, a, (0..d).map(|i| y[1 + i] - a * nu[i]).collect()));
        }
    }
    out
}

/// Probe-density integrals over a box by the midpoint rule with `n` cells per axis (`d ≤ 2`).
pub struct ProbeQuadrature<'a> {
    pub gmm: &'a GaussianMixture,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: usize,
}

/// Quadratic-form pieces of the probe density at one `(t, x)`, read off kernel coefficients.
#[derive(Debug, Clone)]
pub struct ProbeCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub nu: Vec<f64>,
    pub a1: f64,
    pub s1: Vec<f64>,
    pub nu_end: Vec<f64>,
}

impl ProbeCoeffs {
    /// `log G⁻(x, t; y) − log G⁺(y, 1)` up to constants.
    pub fn log_kernel_ratio(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut v = 0.0;
        for i in 0..x.len() {
            let (dx, dy, de) = (x[i] - self.nu[i], y[i] - self.nu[i], y[i] - self.nu_end[i]);
            v += -0.5 * self.a * dx * dx + self.b * dx * dy - 0.5 * self.c * dy * dy + self.r[i] * dx + self.s[i] * dy;
            v += 0.5 * self.a1 * de * de - self.s1[i] * de;
        }
        v
    }

    /// Precision and linear coefficient of the `y`-Gaussian `exp(−K/2‖y‖² + η·y)` in the ratio.
    pub fn reweighting(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let k = self.c - self.a1;
        let eta = (0..x.len())
            .map(|i| self.b * (x[i] - self.nu[i]) + self.c * self.nu[i] + self.s[i] - self.a1 * self.nu_end[i] - self.s1[i])
            .collect();
        (k, eta)
    }
}

impl ProbeQuadrature<'_> {
    /// Box covering every component to `width` standard deviations.
    pub fn covering(gmm: &GaussianMixture, width: f64, n: usize) -> ProbeQuadrature<'_> {
        let d = gmm.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for k in 0..gmm.components() {
            let cov = gmm.covariance(k);
            for i in 0..d {
                let sd = cov[(i, i)].sqrt();
                lo[i] = lo[i].min(gmm.mean(k)[i] - width * sd);
                hi[i] = hi[i].max(gmm.mean(k)[i] + width * sd);
            }
        }
        ProbeQuadrature { gmm, lo, hi, n }
    }

    /// Box covering the target and every component of the probe density at `(pc, x)`.
    pub fn covering_probe<'a>(gmm: &'a GaussianMixture, pc: &ProbeCoeffs, x: &[f64], width: f64, n: usize) -> ProbeQuadrature<'a> {
        let mut q = Self::covering(gmm, width, n);
        let d = gmm.dim();
        let (k, eta) = pc.reweighting(x);
        for c in 0..gmm.components() {
            let prec = gmm.covariance(c).clone().try_inverse().unwrap();
            let tilted = (&prec + nalgebra::DMatrix::<f64>::identity(d, d) * k).try_inverse().unwrap();
            let rhs = &prec * nalgebra::DVector::from_column_slice(gmm.mean(c)) + nalgebra::DVector::from_column_slice(&eta);
            let m = &tilted * rhs;
            for i in 0..d {
                let sd = tilted[(i, i)].sqrt();
                q.lo[i] = q.lo[i].min(m[i] - width * sd);
                q.hi[i] = q.hi[i].max(m[i] + width * sd);
            }
        }
        q
    }

    fn nodes(&self) -> Vec<Vec<f64>> {
        let d = self.lo.len();
        let h: Vec<f64> = (0..d).map(|i| (self.hi[i] - self.lo[i]) / self.n as f64).collect();
        let axis = |i: usize, j: usize| self.lo[i] + (j as f64 + 0.5) * h[i];
        match d {
            1 => (0..self.n).map(|j| vec![axis(0, j)]).collect(),
            2 => (0..self.n).flat_map(|j| (0..self.n).map(move |k| vec![axis(0, j), axis(1, k)])).collect(),
            _ => panic!("quadrature supports d ≤ 2"),
        }
    }

    fn cell(&self) -> f64 {
        (0..self.lo.len()).map(|i| (self.hi[i] - self.lo[i]) / self.n as f64).product()
    }

    /// `(log ∫ p(y) e^{f(y)} dy, ∫ y p(y) e^{f(y)} dy / ∫ p(y) e^{f(y)} dy)`.
    pub fn moments(&self, f: impl Fn(&[f64]) -> f64) -> (f64, Vec<f64>) {
        let nodes = self.nodes();
        let logs: Vec<f64> = nodes.iter().map(|y| self.gmm.log_density(y).unwrap() + f(y)).collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let d = self.lo.len();
        let mut total = 0.0;
        let mut first = vec![0.0; d];
        for (y, l) in nodes.iter().zip(&logs) {
            let w = (l - top).exp();
            total += w;
            for i in 0..d {
                first[i] += w * y[i];
            }
        }
        (top + (total * self.cell()).ln(), first.iter().map(|v| v / total).collect())
    }

    /// Posterior mean `ŷ(t; x)`.
    pub fn yhat(&self, pc: &ProbeCoeffs, x: &[f64]) -> Vec<f64> {
        self.moments(|y| pc.log_kernel_ratio(x, y)).1
    }

    /// `log ∫ p(y) G⁻(x,t;y) / G⁺(y,1) dy` including every `x`-dependent factor.
    pub fn log_h(&self, pc: &ProbeCoeffs, x: &[f64]) -> f64 {
        self.moments(|y| pc.log_kernel_ratio(x, y)).0
    }

    /// Same integral after normalizing the reweighting Gaussian in `y` for each `x`.
    pub fn log_z_normalized(&self, pc: &ProbeCoeffs, x: &[f64]) -> f64 {
        let (k, eta) = pc.reweighting(x);
        let (log_int, _) = self.moments(|y| {
            let mut v = 0.0;
            for i in 0..y.len() {
                v += -0.5 * k * y[i] * y[i] + eta[i] * y[i];
            }
            v
        });
        let norm: f64 = eta.iter().map(|e| e * e).sum::<f64>() / (2.0 * k);
        log_int - norm
    }
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Probe coefficients read off a coefficient table at `t`.
pub fn probe_coeffs(table: &GreensTable, t: f64) -> ProbeCoeffs {
    let p = table.protocol();
    let bc = table.backward_at(t).unwrap();
    let (a1, s1) = table.terminal_forward();
    ProbeCoeffs {
        a: bc.a_minus,
        b: bc.b_minus,
        c: bc.c_minus,
        r: bc.r_minus,
        s: bc.s_minus,
        nu: p.nu(p.piece_index(t)).to_vec(),
        a1,
        s1: s1.to_vec(),
        nu_end: p.end_center().to_vec(),
    }
}

/// Random protocol with well-separated breakpoints; `constant_beta` shares one stiffness.
pub fn random_protocol(rng: &mut ChaCha8Rng, pieces: usize, constant_beta: bool, dim: usize) -> PwcProtocol {
    let mut cuts: Vec<f64> = (0..pieces - 1).map(|_| rng.random_range(0.05..0.95)).collect();
    cuts.sort_by(f64::total_cmp);
    // keep pieces at least 0.02 long
    let mut b = vec![0.0];
    for c in cuts {
        let last = *b.last().unwrap();
        b.push(c.max(last + 0.02));
    }
    if *b.last().unwrap() > 0.98 {
        b = ghpid::protocol::uniform_breakpoints(pieces);
    } else {
        b.push(1.0);
    }
    let beta0 = rng.random_range(0.1..50.0);
    let beta = (0..pieces).map(|_| if constant_beta { beta0 } else { rng.random_range(0.1..50.0) }).collect();
    let nu = (0..pieces).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    PwcProtocol::new(b, beta, nu).unwrap()
}

pub fn random_mixture(rng: &mut ChaCha8Rng, dim: usize, comps: usize) -> GaussianMixture {
    let w: Vec<f64> = (0..comps).map(|_| rng.random_range(0.2..1.0)).collect();
    let sum: f64 = w.iter().sum();
    let means = (0..comps).map(|_| (0..dim).map(|_| rng.random_range(-2.0..3.0)).collect()).collect();
    let covs = (0..comps)
        .map(|_| {
            let mut m = nalgebra::DMatrix::<f64>::zeros(dim, dim);
            for i in 0..dim {
                m[(i, i)] = rng.random_range(0.15..0.6);
            }
            if dim == 2 {
                let c = rng.random_range(-0.5..0.5) * (m[(0, 0)] * m[(1, 1)]).sqrt();
                m[(0, 1)] = c;
                m[(1, 0)] = c;
            }
            m
        })
        .collect();
    GaussianMixture::new(w.iter().map(|v| v / sum).collect(), means, covs).unwrap()
}
