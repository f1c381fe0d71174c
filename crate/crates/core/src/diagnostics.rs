//! Path diagnostics and terminal-fidelity tests computed from an [`EnsembleRun`].

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::dist_sq;
use crate::protocol::GuideReference;
use crate::rng::{stream, Domain};
use crate::sampler::{mode_assignment, EnsembleRun};
use crate::target::GaussianMixture;

/// Draws used to estimate each component's argmax-assignment probability under the target.
pub const ASSIGNMENT_REFERENCE_DRAWS: usize = 200_000;

/// Null quantile at which the energy-distance test rejects.
pub const FIDELITY_QUANTILE: f64 = 0.95;

/// Half-widths of the per-mode frequency bands, in binomial standard errors.
pub const MODE_BAND_SE: f64 = 3.0;

fn check_dim(run: &EnsembleRun, dim: usize) -> Result<()> {
    if run.dim == dim {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected: run.dim, got: dim })
    }
}

/// `(t_mid, β̄(t_mid), ½(E‖x_n − ν̄‖² + E‖x_{n+1} − ν̄‖²))` for every step.
fn step_deviations(run: &EnsembleRun, reference: &dyn GuideReference) -> Result<Vec<(f64, f64, f64)>> {
    check_dim(run, reference.dim())?;
    let dt = run.dt();
    let mut center = vec![0.0; run.dim];
    Ok((0..run.steps)
        .map(|n| {
            let t = (n as f64 + 0.5) * dt;
            reference.center_into(t, &mut center);
            let dev = 0.5 * (run.mean_sq_dist(n, &center) + run.mean_sq_dist(n + 1, &center));
            (t, reference.stiffness(t), dev)
        })
        .collect())
}

/// Instantaneous guide cost `A(t) = (β̄_t / 2) E‖x_t − ν̄_t‖²` at step midpoints.
pub fn adherence_curve(run: &EnsembleRun, reference: &dyn GuideReference) -> Result<Vec<(f64, f64)>> {
    Ok(step_deviations(run, reference)?
        .into_iter()
        .map(|(t, beta, dev)| (t, 0.5 * beta * dev))
        .collect())
}

/// `∫ (β̄_t / 2) E‖x_t − ν̄_t‖² dt` as a midpoint sum.
pub fn guide_cost(run: &EnsembleRun, reference: &dyn GuideReference) -> Result<f64> {
    let dt = run.dt();
    Ok(adherence_curve(run, reference)?.iter().map(|(_, a)| a * dt).sum())
}

/// Time average of `E‖x_t − ν̄_t‖²`.
pub fn mean_sq_deviation(run: &EnsembleRun, reference: &dyn GuideReference) -> Result<f64> {
    let dt = run.dt();
    Ok(step_deviations(run, reference)?.iter().map(|(_, _, d)| d * dt).sum())
}

/// `∫ E‖u*‖² dt`.
pub fn drift_effort(run: &EnsembleRun) -> f64 {
    let dt = run.dt();
    (0..run.steps).map(|n| run.mean_drift_sq(n) * dt).sum()
}

/// `∫ E[½‖u*‖² + V_t(x_t)] dt` under the sampling protocol.
pub fn pid_cost(run: &EnsembleRun, sampling: &dyn GuideReference) -> Result<f64> {
    Ok(0.5 * drift_effort(run) + guide_cost(run, sampling)?)
}

/// `−(1/M) Σ log p(x₁ⁱ)`.
pub fn cross_entropy(run: &EnsembleRun, gmm: &GaussianMixture) -> Result<f64> {
    check_dim(run, gmm.dim())?;
    let mut total = 0.0;
    for x in run.terminal_points() {
        total += gmm.log_density(x)?;
    }
    Ok(-total / run.particles as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}

/// Energy distance `2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖` between two row-major point sets
/// (V-statistic form).
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let (na, nb) = ((a.len() / dim) as f64, (b.len() / dim) as f64);
    let mean_within = |s: &[f64]| -> f64 {
        let rows: Vec<&[f64]> = s.chunks_exact(dim).collect();
        let total: f64 = (0..rows.len())
            .into_par_iter()
            .with_min_len(64)
            .map(|i| rows[i + 1..].iter().map(|r| dist(rows[i], r)).sum::<f64>())
            .sum();
        2.0 * total
    };
    let rows_b: Vec<&[f64]> = b.chunks_exact(dim).collect();
    let cross: f64 = a
        .par_chunks_exact(dim)
        .with_min_len(64)
        .map(|x| rows_b.iter().map(|y| dist(x, y)).sum::<f64>())
        .sum();
    2.0 * cross / (na * nb) - mean_within(a) / (na * na) - mean_within(b) / (nb * nb)
}

/// Null distribution of the energy distance between two independent target samples of size
/// `m`, obtained by repeatedly splitting one pooled target sample of size `2m` at random.
pub fn energy_null(gmm: &GaussianMixture, m: usize, resamples: usize, seed: u64) -> Vec<f64> {
    let pool = gmm.sample_with(&mut stream(seed, Domain::FidelityNull, 0), 2 * m);
    let n = pool.len();
    // packed upper triangle, single precision
    let offsets: Vec<usize> = (0..n).map(|i| i * n - i * (i + 1) / 2).collect();
    let mut upper = vec![0f32; n * (n - 1) / 2];
    let mut rows: Vec<&mut [f32]> = Vec::with_capacity(n);
    let mut rest = upper.as_mut_slice();
    for i in 0..n {
        let (row, tail) = rest.split_at_mut(n - i - 1);
        rows.push(row);
        rest = tail;
    }
    rows.into_par_iter().enumerate().for_each(|(i, row)| {
        for (k, j) in (i + 1..n).enumerate() {
            row[k] = dist(&pool[i], &pool[j]) as f32;
        }
    });
    let scale = 2.0 / (m as f64 * m as f64);
    (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut labels: Vec<f32> = (0..n).map(|i| if i < m { 1.0 } else { -1.0 }).collect();
            labels.shuffle(&mut stream(seed, Domain::FidelityNull, r as u64 + 1));
            let mut q = 0.0f64;
            for i in 0..n - 1 {
                let row = &upper[offsets[i]..offsets[i] + n - i - 1];
                let w: f32 = row.iter().zip(&labels[i + 1..]).map(|(d, l)| d * l).sum();
                q += labels[i] as f64 * w as f64;
            }
            -scale * q
        })
        .collect()
}

/// Empirical quantile (nearest rank).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub energy_distance: f64,
    pub null_threshold: f64,
    /// Fraction of null draws at or above the observed statistic.
    pub p_value: f64,
    pub energy_pass: bool,
    pub mode_frequencies: Vec<f64>,
    /// Probability that a target draw is assigned to each component.
    pub mode_expected: Vec<f64>,
    pub mode_standard_errors: Vec<f64>,
    pub modes_pass: bool,
    pub passed: bool,
}

/// Two-sample energy-distance test against a fresh target sample plus per-mode frequency bands.
pub fn fidelity(run: &EnsembleRun, gmm: &GaussianMixture, resamples: usize, seed: u64) -> Result<FidelityReport> {
    check_dim(run, gmm.dim())?;
    if resamples < 20 {
        return Err(Error::InvalidConfig(format!("{resamples} resamples (need at least 20)")));
    }
    let m = run.particles;
    if m < 100 {
        return Err(Error::InvalidConfig(format!("{m} particles (need at least 100)")));
    }
    let d = gmm.dim();
    let reference: Vec<f64> = gmm
        .sample_with(&mut stream(seed, Domain::FidelityReference, 0), m)
        .into_iter()
        .flatten()
        .collect();
    let observed = energy_distance(&run.terminal, &reference, d);
    let null = energy_null(gmm, m, resamples, seed);
    let threshold = quantile(&null, FIDELITY_QUANTILE);
    let p_value = null.iter().filter(|v| **v >= observed).count() as f64 / null.len() as f64;
    let energy_pass = observed <= threshold;

    let freq = mode_assignment(run, gmm)?.frequencies;
    let expected = assignment_probabilities(gmm, seed)?;
    let se: Vec<f64> = expected.iter().map(|p| (p * (1.0 - p) / m as f64).sqrt()).collect();
    let modes_pass = freq
        .iter()
        .zip(&expected)
        .zip(&se)
        .all(|((f, p), s)| (f - p).abs() <= MODE_BAND_SE * s + 1.0 / m as f64);
    Ok(FidelityReport {
        energy_distance: observed,
        null_threshold: threshold,
        p_value,
        energy_pass,
        mode_frequencies: freq,
        mode_expected: expected,
        mode_standard_errors: se,
        modes_pass,
        passed: energy_pass && modes_pass,
    })
}

/// Monte-Carlo estimate of `P(argmax responsibility = n)` for target draws. Equals the mixture
/// weights when the components are well separated.
pub fn assignment_probabilities(gmm: &GaussianMixture, seed: u64) -> Result<Vec<f64>> {
    let draws = gmm.sample_with(&mut stream(seed, Domain::FidelityReference, 1), ASSIGNMENT_REFERENCE_DRAWS);
    let mut counts = vec![0usize; gmm.components()];
    for y in &draws {
        counts[gmm.assign(y)?] += 1;
    }
    Ok(counts.iter().map(|c| *c as f64 / draws.len() as f64).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub guide_cost: f64,
    pub adherence_curve: Vec<(f64, f64)>,
    pub mean_sq_deviation: f64,
    pub drift_effort: f64,
    pub pid_cost: f64,
    pub cross_entropy: f64,
    pub mode_counts: Vec<usize>,
    pub fidelity: Option<FidelityReport>,
}

impl DiagnosticReport {
    /// Path costs against `reference`, PID cost under `sampling`, and optional fidelity.
    pub fn compute(
        run: &EnsembleRun,
        sampling: &dyn GuideReference,
        reference: &dyn GuideReference,
        gmm: &GaussianMixture,
        fidelity: Option<FidelityReport>,
    ) -> Result<Self> {
        let curve = adherence_curve(run, reference)?;
        let dt = run.dt();
        Ok(Self {
            guide_cost: curve.iter().map(|(_, a)| a * dt).sum(),
            adherence_curve: curve,
            mean_sq_deviation: mean_sq_deviation(run, reference)?,
            drift_effort: drift_effort(run),
            pid_cost: pid_cost(run, sampling)?,
            cross_entropy: cross_entropy(run, gmm)?,
            mode_counts: mode_assignment(run, gmm)?.counts,
            fidelity,
        })
    }

    pub fn adherence_csv(&self) -> String {
        let mut out = String::from("t,adherence\n");
        for (t, a) in &self.adherence_curve {
            out.push_str(&format!("{t},{a}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::greens::GreensTable;
    use crate::protocol::PwcProtocol;
    use crate::sampler::{simulate, SimConfig};

    fn run_for(beta: f64, seed: u64) -> (EnsembleRun, PwcProtocol, GaussianMixture) {
        let p = PwcProtocol::uniform(vec![beta; 4], vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![2.0, 0.5], vec![3.0, 0.0]])
            .unwrap();
        let g = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![3.0, 1.0], vec![3.0, -1.0]], &[0.05, 0.05])
            .unwrap();
        let cfg = SimConfig { steps: 200, particles: 300, seed, ..SimConfig::default() };
        let run = simulate(&GreensTable::new(&p).unwrap(), &g, &cfg).unwrap();
        (run, p, g)
    }

    #[test]
    fn zero_reference_stiffness_costs_nothing() {
        let (run, p, _) = run_for(2.0, 1);
        let flat = PwcProtocol::uniform(vec![1e-300; 4], p.centers().to_vec()).unwrap();
        assert!(guide_cost(&run, &flat).unwrap() < 1e-290);
    }

    #[test]
    fn adherence_integrates_to_guide_cost() {
        let (run, p, g) = run_for(2.0, 2);
        let report = DiagnosticReport::compute(&run, &p, &p, &g, None).unwrap();
        let integral: f64 = report.adherence_curve.iter().map(|(_, a)| a / run.steps as f64).sum();
        assert!((integral - report.guide_cost).abs() <= 1e-12 * report.guide_cost);
        assert!(report.pid_cost >= report.guide_cost);
        assert!(report.adherence_curve.iter().all(|(_, a)| *a >= 0.0));
        assert!(report.adherence_curve[0].1 < report.adherence_curve[100].1);
    }

    #[test]
    fn pinned_particles_have_zero_cost() {
        let (mut run, p, _) = run_for(2.0, 3);
        let d = run.dim;
        let m = run.particles as f64;
        // every particle sits on the guide center of its step
        for n in 0..=run.steps {
            let c = p.nu(p.piece_index(((n as f64) / run.steps as f64).min(1.0 - 1e-12)));
            for i in 0..d {
                run.sum_x[n * d + i] = m * c[i];
                for j in 0..d {
                    run.sum_xx[(n * d + i) * d + j] = m * c[i] * c[j];
                }
            }
        }
        // only steps that straddle a breakpoint see a center other than their own
        let curve = adherence_curve(&run, &p).unwrap();
        let nonzero = curve.iter().filter(|(_, a)| *a > 1e-12).count();
        assert!(nonzero <= 3, "{nonzero}");
    }

    #[test]
    fn cross_entropy_at_the_mode() {
        let g = GaussianMixture::isotropic(vec![1.0], vec![vec![1.0, 2.0]], &[0.5]).unwrap();
        let run = EnsembleRun {
            dim: 2,
            steps: 10,
            particles: 3,
            seed: 0,
            snapshots: vec![],
            terminal: vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0],
            sum_x: vec![],
            sum_xx: vec![],
            sum_u2: vec![],
            paths: None,
        };
        let expected = (2.0 * std::f64::consts::PI).ln() + 0.5f64.ln();
        assert!((cross_entropy(&run, &g).unwrap() - expected).abs() < 1e-14);
        let mut far = run.clone();
        far.terminal.iter_mut().for_each(|v| *v += 3.0);
        assert!(cross_entropy(&far, &g).unwrap() > expected);
    }

    #[test]
    fn energy_distance_basics() {
        let a = vec![0.0, 0.0, 1.0, 0.0];
        assert!(energy_distance(&a, &a, 2).abs() < 1e-15);
        let b = vec![10.0, 0.0, 11.0, 0.0];
        assert!(energy_distance(&a, &b, 2) > 15.0);
    }

    #[test]
    fn null_matches_direct_split() {
        let g = GaussianMixture::isotropic(vec![1.0], vec![vec![0.0, 0.0]], &[1.0]).unwrap();
        let (m, seed) = (50, 4);
        let null = energy_null(&g, m, 3, seed);
        assert_eq!(null.len(), 3);
        let pool = g.sample_with(&mut stream(seed, Domain::FidelityNull, 0), 2 * m);
        for (r, value) in null.iter().enumerate() {
            let mut order: Vec<usize> = (0..2 * m).collect();
            let mut labels: Vec<f32> = (0..2 * m).map(|i| if i < m { 1.0 } else { -1.0 }).collect();
            let mut rng = stream(seed, Domain::FidelityNull, r as u64 + 1);
            labels.shuffle(&mut rng);
            order.sort_by_key(|i| labels[*i] < 0.0);
            let (a, b): (Vec<f64>, Vec<f64>) = (
                order[..m].iter().flat_map(|i| pool[*i].clone()).collect(),
                order[m..].iter().flat_map(|i| pool[*i].clone()).collect(),
            );
            let direct = energy_distance(&a, &b, 2);
            assert!((value - direct).abs() < 1e-5 * direct.max(1e-3), "{value} vs {direct}");
        }
    }

    #[test]
    fn quantile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(quantile(&v, 0.95), 95.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
    }

    #[test]
    fn fidelity_rejects_small_inputs() {
        let (run, _, g) = run_for(2.0, 5);
        assert!(fidelity(&run, &g, 10, 0).is_err());
    }
}
