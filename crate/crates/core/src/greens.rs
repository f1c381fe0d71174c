//! Closed-form Green-function coefficients for piecewise-constant protocols.
//!
//! The backward kernel is parameterized around the current guide center `ν_t`:
//!
//! ```text
//! G⁻_t(x|y) ∝ exp(−a/2 ‖x−ν_t‖² + b (x−ν_t)·(y−ν_t) − c/2 ‖y−ν_t‖² + r·(x−ν_t) + s·(y−ν_t))
//! ```
//!
//! and the forward kernel started at the origin as `exp(−a⁺/2 ‖y−ν_t‖² + s⁺·(y−ν_t))`.
//! Quadratic coefficients are continuous in time; the linear ones jump wherever `ν` does.
//!
//! The table also carries the reweighting precision `K_t = c⁻_t − a⁺(1)` and the linear
//! coefficient `L_t = c⁻_t ν_t + s⁻_t − s⁺(1) − a⁺(1) ν_end`. Both vanish-or-cancel near `t = 0`,
//! so they are accumulated forward from their exact values at `t = 0` (`K_0 = 0`,
//! `L_0 = b⁻_0 ν_0`) using `dK/dt = (b⁻)²` and `dL/dt = b⁻(b⁻ν − r⁻)` instead of by subtraction.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numeric::{sinhc, tanhc};
use crate::protocol::PwcProtocol;

/// Default half-width of the excluded bands at `t = 0` and `t = 1`.
pub const DEFAULT_EXCLUSION: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardCoeffs {
    pub a_minus: f64,
    pub b_minus: f64,
    pub c_minus: f64,
    pub r_minus: Vec<f64>,
    pub s_minus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCoeffs {
    pub a_plus: f64,
    pub s_plus: Vec<f64>,
}

/// Per-piece edge constants of the backward and forward passes.
#[derive(Debug, Clone)]
pub struct GreensTable {
    protocol: PwcProtocol,
    /// Backward state at `t_{k+1}` seen from piece `k` (after the kick). Unused for the last piece.
    back_left: Vec<BackwardCoeffs>,
    /// Backward state at `t_{k+1}` seen from piece `k + 1` (before the kick).
    back_right: Vec<BackwardCoeffs>,
    /// Forward state at `t_k` seen from piece `k` (after the kick). Unused for piece 0.
    fwd_right: Vec<ForwardCoeffs>,
    a_plus_1: f64,
    s_plus_1: Vec<f64>,
    /// `K` and `L` at `t_k` (right side of the interface).
    k_left: Vec<f64>,
    l_left: Vec<Vec<f64>>,
    /// `b⁻` at `t_k` and the in-piece constant `r⁻ / b⁻`.
    b_left: Vec<f64>,
    r_over_b: Vec<Vec<f64>>,
    eps_start: f64,
    eps_end: f64,
}

/// `1 / cosh z` without overflow.
fn sech(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    2.0 * e / (1.0 + e * e)
}

impl GreensTable {
    pub fn new(protocol: &PwcProtocol) -> Result<Self> {
        let k_pieces = protocol.pieces();
        let dim = protocol.dim();
        let zero = || vec![0.0; dim];
        let mut table = Self {
            protocol: protocol.clone(),
            back_left: vec![
                BackwardCoeffs {
                    a_minus: f64::INFINITY,
                    b_minus: f64::INFINITY,
                    c_minus: f64::INFINITY,
                    r_minus: zero(),
                    s_minus: zero(),
                };
                k_pieces
            ],
            back_right: Vec::new(),
            fwd_right: vec![ForwardCoeffs { a_plus: f64::INFINITY, s_plus: zero() }; k_pieces],
            a_plus_1: f64::NAN,
            s_plus_1: zero(),
            k_left: vec![0.0; k_pieces],
            l_left: vec![zero(); k_pieces],
            b_left: vec![0.0; k_pieces],
            r_over_b: vec![zero(); k_pieces],
            eps_start: DEFAULT_EXCLUSION,
            eps_end: DEFAULT_EXCLUSION,
        };
        table.back_right = table.back_left.clone();

        let bp = protocol.breakpoints();
        for k in (0..k_pieces.saturating_sub(1)).rev() {
            let right = table.back_piece(k + 1, bp[k + 2] - bp[k + 1]);
            let mut left = right.clone();
            for i in 0..dim {
                let jump = protocol.nu(k)[i] - protocol.nu(k + 1)[i];
                left.r_minus[i] -= (right.a_minus - right.b_minus) * jump;
                left.s_minus[i] -= (right.c_minus - right.b_minus) * jump;
            }
            check_backward(&left, bp[k + 1])?;
            table.back_left[k] = left;
            table.back_right[k] = right;
        }

        for k in 1..k_pieces {
            let mut state = table.fwd_piece(k - 1, bp[k]);
            for i in 0..dim {
                state.s_plus[i] -= state.a_plus * (protocol.nu(k)[i] - protocol.nu(k - 1)[i]);
            }
            check_forward(&state, bp[k])?;
            table.fwd_right[k] = state;
        }
        let end = table.fwd_piece(k_pieces - 1, 1.0);
        check_forward(&end, 1.0)?;
        table.a_plus_1 = end.a_plus;
        table.s_plus_1 = end.s_plus;

        let mut k_acc = 0.0;
        let mut l_acc = vec![0.0; dim];
        for k in 0..k_pieces {
            let width = bp[k + 1] - bp[k];
            let b_start = table.back_piece(k, width).b_minus;
            if k == 0 {
                l_acc = protocol.nu(0).iter().map(|v| b_start * v).collect();
            }
            table.k_left[k] = k_acc;
            table.l_left[k] = l_acc.clone();
            table.b_left[k] = b_start;
            if k + 1 < k_pieces {
                let e = &table.back_left[k];
                table.r_over_b[k] = e.r_minus.iter().map(|r| r / e.b_minus).collect();
                let dk = e.b_minus * b_start * width * sinhc(protocol.beta(k).sqrt() * width);
                k_acc += dk;
                for i in 0..dim {
                    l_acc[i] += (protocol.nu(k)[i] - table.r_over_b[k][i]) * dk
                        - e.b_minus * (protocol.nu(k)[i] - protocol.nu(k + 1)[i]);
                }
                if !(k_acc.is_finite() && l_acc.iter().all(|v| v.is_finite())) {
                    return Err(Error::InvalidProtocol(format!(
                        "reweighting coefficients overflow at t = {}",
                        bp[k + 1]
                    )));
                }
            }
        }
        Ok(table)
    }

    /// `(K_t, L_t)`; `ν_t`-independent parts of the reweighting Gaussian `exp(−K/2‖y‖² + η·y)`
    /// with `η(x) = b⁻_t (x − ν_t) + L_t`. Caller guarantees `0 < t < 1`.
    pub(crate) fn reweight_unchecked(&self, t: f64, b_t: f64) -> (f64, Vec<f64>) {
        let k = self.protocol.piece_index(t);
        let delta = t - self.protocol.breakpoints()[k];
        let g = self.protocol.beta(k).sqrt();
        let dk = b_t * self.b_left[k] * delta * sinhc(g * delta);
        let nu = self.protocol.nu(k);
        let l = (0..self.dim())
            .map(|i| self.l_left[k][i] + (nu[i] - self.r_over_b[k][i]) * dk)
            .collect();
        (self.k_left[k] + dk, l)
    }

    /// Same table with different exclusion half-widths near `t = 0` and `t = 1`.
    pub fn with_exclusion(mut self, eps_start: f64, eps_end: f64) -> Result<Self> {
        if !(eps_start > 0.0 && eps_end > 0.0 && eps_start + eps_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "exclusion bands ({eps_start}, {eps_end}) must be positive and leave room inside [0, 1]"
            )));
        }
        self.eps_start = eps_start;
        self.eps_end = eps_end;
        Ok(self)
    }

    pub fn protocol(&self) -> &PwcProtocol {
        &self.protocol
    }

    pub fn dim(&self) -> usize {
        self.protocol.dim()
    }

    pub fn exclusion(&self) -> (f64, f64) {
        (self.eps_start, self.eps_end)
    }

    pub fn backward_at(&self, t: f64) -> Result<BackwardCoeffs> {
        let (lo, hi) = (self.eps_start, 1.0 - self.eps_end);
        if !(t >= lo && t <= hi) {
            return Err(Error::OutOfDomain { t, lo, hi });
        }
        Ok(self.backward_unchecked(t))
    }

    pub fn forward_at(&self, t: f64) -> Result<ForwardCoeffs> {
        if !(t >= self.eps_start && t <= 1.0) {
            return Err(Error::OutOfDomain { t, lo: self.eps_start, hi: 1.0 });
        }
        Ok(self.forward_unchecked(t))
    }

    /// `(a⁺(1), s⁺(1))`.
    pub fn terminal_forward(&self) -> (f64, &[f64]) {
        (self.a_plus_1, &self.s_plus_1)
    }

    /// Backward values on both sides of the interface at `t_{k+1}`: `(left, right)`.
    pub fn interface(&self, k: usize) -> Option<(&BackwardCoeffs, &BackwardCoeffs)> {
        (k + 1 < self.protocol.pieces()).then(|| (&self.back_left[k], &self.back_right[k]))
    }

    /// Evaluation without the band check; callers guarantee `0 < t < 1`.
    pub(crate) fn backward_unchecked(&self, t: f64) -> BackwardCoeffs {
        let k = self.protocol.piece_index(t);
        let edge = self.protocol.breakpoints()[k + 1];
        self.back_piece(k, edge - t)
    }

    pub(crate) fn forward_unchecked(&self, t: f64) -> ForwardCoeffs {
        self.fwd_piece(self.protocol.piece_index(t), t)
    }

    /// Backward solution on piece `k` at distance `tau` to the left of its right edge.
    fn back_piece(&self, k: usize, tau: f64) -> BackwardCoeffs {
        let beta = self.protocol.beta(k);
        let z = beta.sqrt() * tau;
        if k + 1 == self.protocol.pieces() {
            let a = 1.0 / (tau * tanhc(z));
            let zero = vec![0.0; self.dim()];
            return BackwardCoeffs {
                a_minus: a,
                b_minus: 1.0 / (tau * sinhc(z)),
                c_minus: a,
                r_minus: zero.clone(),
                s_minus: zero,
            };
        }
        let e = &self.back_left[k];
        let th = tau * tanhc(z);
        let den = 1.0 + e.a_minus * th;
        let ratio = sech(z) / den;
        let gain = e.b_minus * th / den;
        BackwardCoeffs {
            a_minus: (e.a_minus + beta * th) / den,
            b_minus: e.b_minus * ratio,
            c_minus: e.c_minus - e.b_minus * gain,
            r_minus: e.r_minus.iter().map(|r| r * ratio).collect(),
            s_minus: e.s_minus.iter().zip(&e.r_minus).map(|(s, r)| s + r * gain).collect(),
        }
    }

    fn fwd_piece(&self, k: usize, t: f64) -> ForwardCoeffs {
        let beta = self.protocol.beta(k);
        if k == 0 {
            // identically zero when the first center sits at the starting point
            let decay = 1.0 / (t * sinhc(beta.sqrt() * t));
            return ForwardCoeffs {
                a_plus: 1.0 / (t * tanhc(beta.sqrt() * t)),
                s_plus: self.protocol.nu(0).iter().map(|v| -v * decay).collect(),
            };
        }
        let tau = t - self.protocol.breakpoints()[k];
        let z = beta.sqrt() * tau;
        let e = &self.fwd_right[k];
        let th = tau * tanhc(z);
        let den = 1.0 + e.a_plus * th;
        let ratio = sech(z) / den;
        ForwardCoeffs {
            a_plus: (e.a_plus + beta * th) / den,
            s_plus: e.s_plus.iter().map(|s| s * ratio).collect(),
        }
    }

    /// Coefficient trace `t, a⁻, b⁻, c⁻, |r⁻|, |s⁻|, a⁺, |s⁺|` as CSV.
    pub fn trace_csv(&self, grid: &[f64]) -> Result<String> {
        let mut out = String::from("t,a_minus,b_minus,c_minus,r_minus_norm,s_minus_norm,a_plus,s_plus_norm\n");
        for &t in grid {
            let bw = self.backward_at(t)?;
            let fw = self.forward_at(t)?;
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                t,
                bw.a_minus,
                bw.b_minus,
                bw.c_minus,
                norm(&bw.r_minus),
                norm(&bw.s_minus),
                fw.a_plus,
                norm(&fw.s_plus)
            )
            .expect("writing to a String cannot fail");
        }
        Ok(out)
    }
}

fn check_backward(c: &BackwardCoeffs, t: f64) -> Result<()> {
    let finite = [c.a_minus, c.b_minus, c.c_minus]
        .iter()
        .chain(&c.r_minus)
        .chain(&c.s_minus)
        .all(|v| v.is_finite());
    if finite && c.a_minus > 0.0 && c.b_minus >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidProtocol(format!("backward coefficients overflow at t = {t}")))
    }
}

fn check_forward(c: &ForwardCoeffs, t: f64) -> Result<()> {
    if c.a_plus.is_finite() && c.a_plus > 0.0 && c.s_plus.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidProtocol(format!("forward coefficients overflow at t = {t}")))
    }
}
