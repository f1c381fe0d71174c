//! Protocol learning: Monte-Carlo objectives over piecewise-constant centers, common-random-number
//! gradient estimates and a plateau-decayed Adam loop.
//!
//! Parameters are the free center coordinates `ν_1, …, ν_{K−1}` flattened row-major; `ν_0` is
//! anchored to the start point and never moves.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{cross_entropy, drift_effort, guide_cost};
use crate::error::{Error, Result};
use crate::greens::GreensTable;
use crate::protocol::{uniform_breakpoints, ContinuousProtocol, GuideReference, PwcProtocol};
use crate::rng::{stream, Domain};
use crate::sampler::{simulate, EnsembleRun, SimConfig};
use crate::target::{poe_fuse, GaussianMixture, TrustWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// Central differences per coordinate, all probes sharing one noise seed.
    #[default]
    FdCrn,
    /// Two probes along a Rademacher direction, sharing one noise seed.
    Spsa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub lambda_ce: f64,
    pub lambda_nu: f64,
    pub lambda_smooth: f64,
    pub lambda_drift: f64,
    pub iterations: usize,
    pub particles: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub decay: f64,
    pub gradient: GradientMethod,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 0.1,
            lambda_nu: 0.01,
            lambda_smooth: 0.0,
            lambda_drift: 0.0,
            iterations: 200,
            particles: 4000,
            steps: 1000,
            learning_rate: 0.05,
            patience: 10,
            decay: 0.5,
            gradient: GradientMethod::FdCrn,
            fd_step: 1e-3,
            seed: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_ce", self.lambda_ce),
            ("lambda_nu", self.lambda_nu),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_drift", self.lambda_drift),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} = {w} must be finite and nonnegative")));
            }
        }
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidConfig(format!("decay = {} outside (0, 1)", self.decay)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::InvalidConfig("fd step must be positive".into()));
        }
        self.sim_config(0).validate()
    }

    /// Simulation settings used inside objective evaluations.
    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            steps: self.steps,
            particles: self.particles,
            seed,
            snapshot_times: Vec::new(),
            ..SimConfig::default()
        }
    }
}

/// One objective evaluation split into its reported parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub total: f64,
    /// Path-adherence part: `J_des` for a single task, `Σ k_m ∫E[V^(m)]` for a consensus.
    pub adherence: f64,
    /// Unweighted terminal cross-entropy.
    pub cross_entropy: f64,
    /// Weighted regularizers.
    pub regularizer: f64,
}

/// Anything [`gradient`] and [`optimize`] can work on.
pub trait Objective: Sync {
    fn initial(&self) -> Vec<f64>;
    fn evaluate(&self, params: &[f64], seed: u64) -> Result<ObjectiveTerms>;
}

/// Wraps a plain function of `(params, seed)`.
pub struct FnObjective<F> {
    pub initial: Vec<f64>,
    pub f: F,
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64], u64) -> f64 + Sync,
{
    fn initial(&self) -> Vec<f64> {
        self.initial.clone()
    }

    fn evaluate(&self, params: &[f64], seed: u64) -> Result<ObjectiveTerms> {
        let v = (self.f)(params, seed);
        Ok(ObjectiveTerms { total: v, adherence: v, cross_entropy: 0.0, regularizer: 0.0 })
    }
}

fn midpoints(pieces: usize) -> Vec<f64> {
    let b = uniform_breakpoints(pieces);
    (0..pieces).map(|k| 0.5 * (b[k] + b[k + 1])).collect()
}

fn unflatten(anchor: &[f64], params: &[f64]) -> Vec<Vec<f64>> {
    let mut centers = vec![anchor.to_vec()];
    centers.extend(params.chunks_exact(anchor.len()).map(<[f64]>::to_vec));
    centers
}

/// Free coordinates of a full center list (drops the anchored first center).
pub fn flatten_free(centers: &[Vec<f64>]) -> Vec<f64> {
    centers[1..].iter().flatten().copied().collect()
}

fn check_params(expected: usize, params: &[f64]) -> Result<()> {
    if params.len() != expected {
        return Err(Error::DimensionMismatch { expected, got: params.len() });
    }
    Ok(())
}

fn simulate_protocol(protocol: &PwcProtocol, gmm: &GaussianMixture, config: &LearnConfig, seed: u64) -> Result<EnsembleRun> {
    simulate(&GreensTable::new(protocol)?, gmm, &config.sim_config(seed))
}

/// Single-task learning against an expert (desiderata) protocol.
#[derive(Debug, Clone)]
pub struct DesiderataTask {
    pub expert: ContinuousProtocol,
    pub target: GaussianMixture,
    pub pieces: usize,
}

impl DesiderataTask {
    pub fn new(expert: ContinuousProtocol, target: GaussianMixture, pieces: usize) -> Result<Self> {
        expert.validate()?;
        if expert.dim() != target.dim() {
            return Err(Error::DimensionMismatch { expected: expert.dim(), got: target.dim() });
        }
        if pieces < 2 {
            return Err(Error::InvalidConfig(format!("{pieces} pieces (need at least 2)")));
        }
        Ok(Self { expert, target, pieces })
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    pub fn anchor(&self) -> &[f64] {
        self.expert.frame.x_in()
    }

    /// Expert centers at the piece midpoints.
    pub fn expert_midpoints(&self) -> Vec<Vec<f64>> {
        midpoints(self.pieces).iter().map(|t| self.expert.center(*t)).collect()
    }

    /// Anchored start followed by the expert midpoints.
    pub fn initial_centers(&self) -> Vec<Vec<f64>> {
        let mut c = self.expert_midpoints();
        c[0] = self.anchor().to_vec();
        c
    }

    /// Learnable protocol with the expert's stiffness sampled at piece midpoints.
    pub fn protocol(&self, centers: Vec<Vec<f64>>) -> Result<PwcProtocol> {
        let beta = midpoints(self.pieces).iter().map(|t| self.expert.stiffness(*t)).collect();
        PwcProtocol::new(uniform_breakpoints(self.pieces), beta, centers)
    }

    /// Straight-axis protocol from the start point to the corridor exit.
    pub fn baseline(&self) -> Result<PwcProtocol> {
        let frame = &self.expert.frame;
        let b = uniform_breakpoints(self.pieces);
        let centers = (0..self.pieces)
            .map(|k| match k {
                0 => frame.x_in().to_vec(),
                k if k == self.pieces - 1 => frame.x_out().to_vec(),
                k => frame.axis_point(0.5 * (b[k] + b[k + 1])),
            })
            .collect();
        self.protocol(centers)
    }
}

/// `J_des + λ_CE·J_CE + λ_ν Σ_k ‖ν_k − ν̄(t_k^mid)‖²` for the full center list `theta`.
pub fn objective_case_b(theta: &[Vec<f64>], task: &DesiderataTask, config: &LearnConfig, seed: u64) -> Result<ObjectiveTerms> {
    if theta.len() != task.pieces {
        return Err(Error::DimensionMismatch { expected: task.pieces, got: theta.len() });
    }
    let protocol = task.protocol(theta.to_vec())?;
    let run = simulate_protocol(&protocol, &task.target, config, seed)?;
    let des = guide_cost(&run, &task.expert)?;
    let ce = cross_entropy(&run, &task.target)?;
    let reg: f64 = theta
        .iter()
        .zip(task.expert_midpoints())
        .map(|(nu, bar)| nu.iter().zip(&bar).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        * config.lambda_nu;
    Ok(ObjectiveTerms { total: des + config.lambda_ce * ce + reg, adherence: des, cross_entropy: ce, regularizer: reg })
}

/// Two experts fused by trust weights into one terminal law and one path cost.
#[derive(Debug, Clone)]
pub struct ConsensusTask {
    pub experts: [ContinuousProtocol; 2],
    pub targets: [GaussianMixture; 2],
    pub trust: TrustWeights,
    pub fused: GaussianMixture,
    pub pieces: usize,
}

impl ConsensusTask {
    pub fn new(
        experts: [ContinuousProtocol; 2],
        targets: [GaussianMixture; 2],
        trust: TrustWeights,
        pieces: usize,
    ) -> Result<Self> {
        let d = targets[0].dim();
        for e in &experts {
            e.validate()?;
            if e.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: e.dim() });
            }
        }
        if experts[0].frame.x_in() != experts[1].frame.x_in() {
            return Err(Error::InvalidConfig("experts must share the entry point".into()));
        }
        if pieces < 3 {
            return Err(Error::InvalidConfig(format!("{pieces} pieces (need at least 3)")));
        }
        let fused = poe_fuse(&targets[0], &targets[1], trust)?;
        Ok(Self { experts, targets, trust, fused, pieces })
    }

    pub fn dim(&self) -> usize {
        self.fused.dim()
    }

    pub fn anchor(&self) -> &[f64] {
        self.experts[0].frame.x_in()
    }

    /// Anchored start followed by the average of both experts' midpoints.
    pub fn initial_centers(&self) -> Vec<Vec<f64>> {
        let mut c: Vec<Vec<f64>> = midpoints(self.pieces)
            .iter()
            .map(|t| {
                let (a, b) = (self.experts[0].center(*t), self.experts[1].center(*t));
                a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
            })
            .collect();
        c[0] = self.anchor().to_vec();
        c
    }

    /// Learnable protocol with the experts' average stiffness at piece midpoints.
    pub fn protocol(&self, centers: Vec<Vec<f64>>) -> Result<PwcProtocol> {
        let beta = midpoints(self.pieces)
            .iter()
            .map(|t| 0.5 * (self.experts[0].stiffness(*t) + self.experts[1].stiffness(*t)))
            .collect();
        PwcProtocol::new(uniform_breakpoints(self.pieces), beta, centers)
    }
}

/// Sum of squared second differences of consecutive centers.
pub fn roughness(theta: &[Vec<f64>]) -> f64 {
    theta
        .windows(3)
        .map(|w| (0..w[0].len()).map(|i| (w[2][i] - 2.0 * w[1][i] + w[0][i]).powi(2)).sum::<f64>())
        .sum()
}

/// `k1∫E[V¹] + k2∫E[V²] + λ_CE·J_CE + λ_smooth·roughness + λ_drift∫E‖u*‖²`.
pub fn objective_case_c(theta: &[Vec<f64>], task: &ConsensusTask, config: &LearnConfig, seed: u64) -> Result<ObjectiveTerms> {
    if theta.len() != task.pieces {
        return Err(Error::DimensionMismatch { expected: task.pieces, got: theta.len() });
    }
    let protocol = task.protocol(theta.to_vec())?;
    let run = simulate_protocol(&protocol, &task.fused, config, seed)?;
    let (k1, k2) = (task.trust.k1() as f64, task.trust.k2() as f64);
    let mut adherence = 0.0;
    for (k, expert) in [(k1, &task.experts[0]), (k2, &task.experts[1])] {
        if k > 0.0 {
            adherence += k * guide_cost(&run, expert)?;
        }
    }
    let ce = cross_entropy(&run, &task.fused)?;
    let reg = config.lambda_smooth * roughness(theta) + config.lambda_drift * drift_effort(&run);
    Ok(ObjectiveTerms { total: adherence + config.lambda_ce * ce + reg, adherence, cross_entropy: ce, regularizer: reg })
}

/// A task paired with the config its objective is evaluated under.
pub struct TaskObjective<'a, T> {
    pub task: &'a T,
    pub config: &'a LearnConfig,
}

impl Objective for TaskObjective<'_, DesiderataTask> {
    fn initial(&self) -> Vec<f64> {
        flatten_free(&self.task.initial_centers())
    }

    fn evaluate(&self, params: &[f64], seed: u64) -> Result<ObjectiveTerms> {
        check_params((self.task.pieces - 1) * self.task.dim(), params)?;
        objective_case_b(&unflatten(self.task.anchor(), params), self.task, self.config, seed)
    }
}

impl Objective for TaskObjective<'_, ConsensusTask> {
    fn initial(&self) -> Vec<f64> {
        flatten_free(&self.task.initial_centers())
    }

    fn evaluate(&self, params: &[f64], seed: u64) -> Result<ObjectiveTerms> {
        check_params((self.task.pieces - 1) * self.task.dim(), params)?;
        objective_case_c(&unflatten(self.task.anchor(), params), self.task, self.config, seed)
    }
}

/// Rebuilds the full center list from free parameters.
pub fn centers_from_params(anchor: &[f64], params: &[f64]) -> Vec<Vec<f64>> {
    unflatten(anchor, params)
}

fn probe(objective: &dyn Objective, params: &[f64], seed: u64, index: usize) -> Result<f64> {
    let v = objective.evaluate(params, seed)?.total;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteObjective(index))
    }
}

/// Gradient estimate at `params`; every probe uses the noise seed `seed`.
pub fn gradient(objective: &dyn Objective, params: &[f64], config: &LearnConfig, seed: u64) -> Result<Vec<f64>> {
    let h = config.fd_step;
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("fd step must be positive".into()));
    }
    match config.gradient {
        GradientMethod::FdCrn => {
            let values: Vec<f64> = (0..2 * params.len())
                .into_par_iter()
                .map(|j| {
                    let mut p = params.to_vec();
                    p[j / 2] += if j % 2 == 0 { h } else { -h };
                    probe(objective, &p, seed, j)
                })
                .collect::<Result<_>>()?;
            Ok(values.chunks_exact(2).map(|v| (v[0] - v[1]) / (2.0 * h)).collect())
        }
        GradientMethod::Spsa => {
            let mut rng = stream(seed, Domain::Spsa, 0);
            let delta: Vec<f64> = (0..params.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let shifted = |sign: f64| -> Vec<f64> { params.iter().zip(&delta).map(|(p, d)| p + sign * h * d).collect() };
            let (plus, minus) = rayon::join(
                || probe(objective, &shifted(1.0), seed, 0),
                || probe(objective, &shifted(-1.0), seed, 1),
            );
            let diff = (plus? - minus?) / (2.0 * h);
            Ok(delta.iter().map(|d| diff / d).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub j: f64,
    pub j_des: f64,
    pub j_ce: f64,
    pub j_reg: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("iteration,J,J_des,J_CE,J_reg,lr\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.iteration, r.j, r.j_des, r.j_ce, r.j_reg, r.lr));
    }
    out
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    /// Parameters with the lowest recorded objective.
    pub best: Vec<f64>,
    pub best_value: f64,
    pub history: Vec<HistoryRow>,
}

/// An aborted optimization together with everything recorded before the failure.
#[derive(Debug)]
pub struct LearnFailure {
    pub error: Error,
    pub partial: LearnOutcome,
}

impl std::fmt::Display for LearnFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "optimization stopped after {} iterations: {}", self.partial.history.len(), self.error)
    }
}

impl std::error::Error for LearnFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction; the learning rate is multiplied by `decay` whenever the best
/// objective has not improved for `patience` iterations. Each iteration draws a fresh noise seed
/// from the master stream and uses it for both the recorded value and the gradient.
pub fn optimize(objective: &dyn Objective, config: &LearnConfig) -> std::result::Result<LearnOutcome, LearnFailure> {
    let mut params = objective.initial();
    let mut outcome = LearnOutcome { best: params.clone(), best_value: f64::INFINITY, history: Vec::new() };
    if let Err(error) = config.validate() {
        return Err(LearnFailure { error, partial: outcome });
    }
    let mut master = stream(config.seed, Domain::LearnMaster, 0);
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut lr = config.learning_rate;
    let mut stale = 0;
    for it in 0..config.iterations {
        let seed = master.next_u64();
        let step = objective.evaluate(&params, seed).and_then(|terms| {
            if terms.total.is_finite() {
                Ok(terms)
            } else {
                Err(Error::NonFiniteObjective(it))
            }
        });
        let terms = match step {
            Ok(t) => t,
            Err(error) => return Err(LearnFailure { error, partial: outcome }),
        };
        outcome.history.push(HistoryRow {
            iteration: it,
            j: terms.total,
            j_des: terms.adherence,
            j_ce: terms.cross_entropy,
            j_reg: terms.regularizer,
            lr,
        });
        if terms.total < outcome.best_value {
            outcome.best_value = terms.total;
            outcome.best.clone_from(&params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                lr *= config.decay;
                stale = 0;
            }
        }
        if it + 1 == config.iterations {
            break;
        }
        let g = match gradient(objective, &params, config, seed) {
            Ok(g) => g,
            Err(error) => return Err(LearnFailure { error, partial: outcome }),
        };
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for i in 0..params.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(outcome)
}

/// Projection of `point` onto the axis from `from` to `to`, as a fraction of its length.
pub fn axis_projection(point: &[f64], from: &[f64], to: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..point.len() {
        let axis = to[i] - from[i];
        num += (point[i] - from[i]) * axis;
        den += axis * axis;
    }
    num / den
}
