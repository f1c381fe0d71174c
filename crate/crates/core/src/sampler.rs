//! Euler–Maruyama ensemble simulation with the analytic drift.
//!
//! Particles are processed in fixed chunks of [`CHUNK`]; every particle owns its RNG stream and
//! chunk partial sums are reduced in chunk order, so results do not depend on the thread count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::greens::GreensTable;
use crate::inference::{DriftPlan, ReweightState};
use crate::rng::{stream, Domain};
use crate::target::GaussianMixture;

pub const CHUNK: usize = 64;

/// Which drift expression drives the particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftForm {
    /// `−a⁻(x − ν) + b⁻(ŷ − ν) + r⁻`.
    #[default]
    Expanded,
    /// `b⁻(ŷ − μ_t(x))`; kept for comparison only.
    Compact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub steps: usize,
    pub particles: usize,
    pub seed: u64,
    pub snapshot_times: Vec<f64>,
    pub record_full_paths: bool,
    /// Multiplies the Brownian increments; `0` gives the deterministic flow.
    pub noise_scale: f64,
    pub drift_form: DriftForm,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            particles: 4000,
            seed: 0,
            snapshot_times: uniform_snapshot_times(10),
            record_full_paths: false,
            noise_scale: 1.0,
            drift_form: DriftForm::Expanded,
        }
    }
}

/// `count` equally spaced times from `0` to `1`.
pub fn uniform_snapshot_times(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..count).map(|i| i as f64 / (count - 1) as f64).collect(),
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 10 {
            return Err(Error::InvalidConfig(format!("steps = {} (need at least 10)", self.steps)));
        }
        if self.particles == 0 {
            return Err(Error::InvalidConfig("particles must be positive".into()));
        }
        if let Some(t) = self.snapshot_times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidConfig(format!("snapshot time {t} outside [0, 1]")));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig("noise scale must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Half-width of the excluded bands, `1 / (2T)`.
    pub fn end_clamp(&self) -> f64 {
        0.5 / self.steps as f64
    }

    /// Drift evaluation time of step `n`.
    pub fn step_time(&self, n: usize) -> f64 {
        let eps = self.end_clamp();
        ((n as f64 + 0.5) * self.dt()).clamp(eps, 1.0 - eps)
    }

    /// Grid index a requested snapshot time snaps to; `0` maps to the first step (`0⁺`).
    pub fn snapshot_index(&self, t: f64) -> usize {
        ((t * self.steps as f64).round() as usize).clamp(1, self.steps)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    /// Row-major `M × d`.
    pub positions: Vec<f64>,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleRun {
    pub dim: usize,
    pub steps: usize,
    pub particles: usize,
    pub seed: u64,
    pub snapshots: Vec<Snapshot>,
    /// Row-major `M × d` positions after the last step.
    pub terminal: Vec<f64>,
    /// `Σ_i x_n^i` for grid points `n = 0..=T`, row-major `(T+1) × d`.
    pub sum_x: Vec<f64>,
    /// `Σ_i x_n^i (x_n^i)ᵀ`, row-major `(T+1) × d × d`.
    pub sum_xx: Vec<f64>,
    /// `Σ_i ‖u(t_n, x_n^i)‖²` per step.
    pub sum_u2: Vec<f64>,
    /// Row-major `(T+1) × M × d` when requested.
    pub paths: Option<Vec<f64>>,
}

impl EnsembleRun {
    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn terminal_point(&self, i: usize) -> &[f64] {
        &self.terminal[i * self.dim..(i + 1) * self.dim]
    }

    pub fn terminal_points(&self) -> impl Iterator<Item = &[f64]> {
        self.terminal.chunks_exact(self.dim)
    }

    pub fn mean_at(&self, n: usize) -> Vec<f64> {
        let m = self.particles as f64;
        self.sum_x[n * self.dim..(n + 1) * self.dim].iter().map(|s| s / m).collect()
    }

    /// Empirical covariance at grid point `n` (normalized by `M`).
    pub fn covariance_at(&self, n: usize) -> Vec<f64> {
        let d = self.dim;
        let m = self.particles as f64;
        let mean = self.mean_at(n);
        (0..d * d)
            .map(|ij| self.sum_xx[n * d * d + ij] / m - mean[ij / d] * mean[ij % d])
            .collect()
    }

    /// `E‖x_n − c‖²` over the ensemble.
    pub fn mean_sq_dist(&self, n: usize, c: &[f64]) -> f64 {
        let d = self.dim;
        let m = self.particles as f64;
        let mut total = 0.0;
        for i in 0..d {
            let s1 = self.sum_x[n * d + i];
            let s2 = self.sum_xx[n * d * d + i * d + i];
            total += (s2 - 2.0 * c[i] * s1) / m + c[i] * c[i];
        }
        total.max(0.0)
    }

    /// `E‖u‖²` at step `n`.
    pub fn mean_drift_sq(&self, n: usize) -> f64 {
        self.sum_u2[n] / self.particles as f64
    }
}

struct ChunkOut {
    terminal: Vec<f64>,
    sum_x: Vec<f64>,
    sum_xx: Vec<f64>,
    sum_u2: Vec<f64>,
    snaps: Vec<Vec<f64>>,
    paths: Option<Vec<f64>>,
}

/// Drift plans for every step of `config`.
pub fn build_plans(table: &GreensTable, gmm: &GaussianMixture, config: &SimConfig) -> Result<Vec<DriftPlan>> {
    (0..config.steps)
        .map(|n| {
            let rw = ReweightState::build(table, config.step_time(n))?;
            DriftPlan::new(&rw, gmm)
        })
        .collect()
}

pub fn simulate(table: &GreensTable, gmm: &GaussianMixture, config: &SimConfig) -> Result<EnsembleRun> {
    config.validate()?;
    if table.dim() != gmm.dim() {
        return Err(Error::DimensionMismatch { expected: table.dim(), got: gmm.dim() });
    }
    let plans = build_plans(table, gmm, config)?;
    simulate_with_plans(&plans, config)
}

pub fn simulate_with_plans(plans: &[DriftPlan], config: &SimConfig) -> Result<EnsembleRun> {
    config.validate()?;
    if plans.len() != config.steps {
        return Err(Error::InvalidConfig(format!("{} drift plans for {} steps", plans.len(), config.steps)));
    }
    let d = plans[0].dim();
    let steps = config.steps;
    let m = config.particles;
    let snap_idx: Vec<usize> = config.snapshot_times.iter().map(|t| config.snapshot_index(*t)).collect();
    let chunks: Vec<(usize, usize)> = (0..m).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(m))).collect();

    let outs: Vec<Result<ChunkOut>> = chunks
        .par_iter()
        .map(|&(start, end)| run_chunk(plans, config, d, start, end, &snap_idx))
        .collect();

    let mut run = EnsembleRun {
        dim: d,
        steps,
        particles: m,
        seed: config.seed,
        snapshots: Vec::with_capacity(snap_idx.len()),
        terminal: Vec::with_capacity(m * d),
        sum_x: vec![0.0; (steps + 1) * d],
        sum_xx: vec![0.0; (steps + 1) * d * d],
        sum_u2: vec![0.0; steps],
        paths: config.record_full_paths.then(|| vec![0.0; (steps + 1) * m * d]),
    };
    let mut snap_positions: Vec<Vec<f64>> = vec![Vec::with_capacity(m * d); snap_idx.len()];
    for (out, &(start, end)) in outs.into_iter().zip(&chunks) {
        let out = out?;
        run.terminal.extend_from_slice(&out.terminal);
        for (a, b) in run.sum_x.iter_mut().zip(&out.sum_x) {
            *a += b;
        }
        for (a, b) in run.sum_xx.iter_mut().zip(&out.sum_xx) {
            *a += b;
        }
        for (a, b) in run.sum_u2.iter_mut().zip(&out.sum_u2) {
            *a += b;
        }
        for (dst, src) in snap_positions.iter_mut().zip(&out.snaps) {
            dst.extend_from_slice(src);
        }
        if let (Some(all), Some(part)) = (run.paths.as_mut(), out.paths.as_ref()) {
            let width = (end - start) * d;
            for n in 0..=steps {
                all[(n * m + start) * d..(n * m + end) * d].copy_from_slice(&part[n * width..(n + 1) * width]);
            }
        }
    }
    for (positions, &n) in snap_positions.into_iter().zip(&snap_idx) {
        let (mean, covariance) = empirical_moments(&positions, d);
        run.snapshots.push(Snapshot { step: n, t: n as f64 / steps as f64, positions, mean, covariance });
    }
    Ok(run)
}

fn run_chunk(
    plans: &[DriftPlan],
    config: &SimConfig,
    d: usize,
    start: usize,
    end: usize,
    snap_idx: &[usize],
) -> Result<ChunkOut> {
    let steps = config.steps;
    let count = end - start;
    let dt = config.dt();
    let noise = config.noise_scale * dt.sqrt();
    let compact = config.drift_form == DriftForm::Compact;
    let mut rngs: Vec<_> = (start..end).map(|i| stream(config.seed, Domain::ParticleNoise, i as u64)).collect();
    let mut x = vec![0.0; count * d];
    let mut u = vec![0.0; d];
    let mut scratch = vec![0.0; plans[0].scratch_len()];
    let mut out = ChunkOut {
        terminal: Vec::new(),
        sum_x: vec![0.0; (steps + 1) * d],
        sum_xx: vec![0.0; (steps + 1) * d * d],
        sum_u2: vec![0.0; steps],
        snaps: vec![Vec::new(); snap_idx.len()],
        paths: config.record_full_paths.then(|| vec![0.0; (steps + 1) * count * d]),
    };
    // x_0 = 0 contributes nothing to the grid-0 sums
    for (n, plan) in plans.iter().enumerate() {
        let mut u2 = 0.0;
        for p in 0..count {
            let xp = &mut x[p * d..(p + 1) * d];
            if compact {
                plan.compact_drift_into(xp, &mut scratch, &mut u);
            } else {
                plan.drift_into(xp, &mut scratch, &mut u);
            }
            let rng = &mut rngs[p];
            let mut sq = 0.0;
            for i in 0..d {
                let xi: f64 = rng.sample(StandardNormal);
                xp[i] += u[i] * dt + noise * xi;
                sq += u[i] * u[i];
            }
            u2 += sq;
            if xp.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: n, particle: start + p });
            }
            let g = n + 1;
            for i in 0..d {
                out.sum_x[g * d + i] += xp[i];
                for j in 0..d {
                    out.sum_xx[(g * d + i) * d + j] += xp[i] * xp[j];
                }
            }
        }
        out.sum_u2[n] = u2;
        for (k, &idx) in snap_idx.iter().enumerate() {
            if idx == n + 1 {
                out.snaps[k] = x.clone();
            }
        }
        if let Some(paths) = out.paths.as_mut() {
            paths[(n + 1) * count * d..(n + 2) * count * d].copy_from_slice(&x);
        }
    }
    out.terminal = x;
    Ok(out)
}

fn empirical_moments(positions: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (positions.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for p in positions.chunks_exact(d) {
        for i in 0..d {
            mean[i] += p[i];
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    let mut cov = vec![0.0; d * d];
    for p in positions.chunks_exact(d) {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    for v in cov.iter_mut() {
        *v /= m;
    }
    (mean, cov)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
}

/// Counts of terminal points by most responsible target component.
pub fn mode_assignment(run: &EnsembleRun, gmm: &GaussianMixture) -> Result<ModeCounts> {
    let mut counts = vec![0usize; gmm.components()];
    for x in run.terminal_points() {
        counts[gmm.assign(x)?] += 1;
    }
    let m = run.particles as f64;
    let frequencies = counts.iter().map(|c| *c as f64 / m).collect();
    Ok(ModeCounts { counts, frequencies })
}
