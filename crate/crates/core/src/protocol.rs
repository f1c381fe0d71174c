//! Guidance protocols: the piecewise-constant schedule consumed by the sampler and the
//! continuous corridor templates it is generated from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Something that supplies a guide stiffness and center at every time in `[0, 1]`.
///
/// Both the sampling protocol and the reference ("desiderata") protocols used by the cost
/// functions implement this.
pub trait GuideReference {
    fn dim(&self) -> usize;
    fn stiffness(&self, t: f64) -> f64;
    fn center_into(&self, t: f64, out: &mut [f64]);

    fn center(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.center_into(t, &mut out);
        out
    }
}

/// Piecewise-constant guidance schedule `{(β_k, ν_k)}` on a partition of `[0, 1]`.
///
/// Piece `k` covers the half-open interval `[t_k, t_{k+1})`; the last piece also owns `t = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProtocolDoc", into = "ProtocolDoc")]
pub struct PwcProtocol {
    dim: usize,
    breakpoints: Vec<f64>,
    beta: Vec<f64>,
    nu: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ProtocolDoc {
    dim: usize,
    breakpoints: Vec<f64>,
    beta: Vec<f64>,
    nu: Vec<Vec<f64>>,
}

impl TryFrom<ProtocolDoc> for PwcProtocol {
    type Error = Error;

    fn try_from(doc: ProtocolDoc) -> Result<Self> {
        let p = PwcProtocol::new(doc.breakpoints, doc.beta, doc.nu)?;
        if p.dim != doc.dim {
            return Err(Error::DimensionMismatch { expected: doc.dim, got: p.dim });
        }
        Ok(p)
    }
}

impl From<PwcProtocol> for ProtocolDoc {
    fn from(p: PwcProtocol) -> Self {
        ProtocolDoc { dim: p.dim, breakpoints: p.breakpoints, beta: p.beta, nu: p.nu }
    }
}

impl PwcProtocol {
    pub fn new(breakpoints: Vec<f64>, beta: Vec<f64>, nu: Vec<Vec<f64>>) -> Result<Self> {
        let pieces = beta.len();
        if pieces == 0 {
            return Err(Error::InvalidProtocol("at least one piece is required".into()));
        }
        if nu.len() != pieces || breakpoints.len() != pieces + 1 {
            return Err(Error::InvalidProtocol(format!(
                "{} pieces need {} breakpoints and {} centers (got {} and {})",
                pieces,
                pieces + 1,
                pieces,
                breakpoints.len(),
                nu.len()
            )));
        }
        if breakpoints[0] != 0.0 || breakpoints[pieces] != 1.0 {
            return Err(Error::InvalidProtocol("breakpoints must start at 0 and end at 1".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidProtocol("breakpoints must be strictly increasing".into()));
        }
        if let Some(k) = beta.iter().position(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::InvalidProtocol(format!(
                "stiffness must be positive and finite (beta[{k}] = {})",
                beta[k]
            )));
        }
        let dim = nu[0].len();
        if dim == 0 {
            return Err(Error::InvalidProtocol("state dimension must be positive".into()));
        }
        for c in &nu {
            if c.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.len() });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidProtocol("guide centers must be finite".into()));
            }
        }
        Ok(Self { dim, breakpoints, beta, nu })
    }

    /// Protocol on the uniform partition `{0, 1/K, …, 1}`.
    pub fn uniform(beta: Vec<f64>, nu: Vec<Vec<f64>>) -> Result<Self> {
        let breakpoints = uniform_breakpoints(beta.len());
        Self::new(breakpoints, beta, nu)
    }

    /// Single stiffness and a single center for the whole horizon, split into `pieces`.
    pub fn constant(beta: f64, center: Vec<f64>, pieces: usize) -> Result<Self> {
        Self::uniform(vec![beta; pieces], vec![center; pieces])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pieces(&self) -> usize {
        self.beta.len()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.nu
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }

    pub fn nu(&self, k: usize) -> &[f64] {
        &self.nu[k]
    }

    /// Center of the last piece, i.e. the guide position at `t = 1`.
    pub fn end_center(&self) -> &[f64] {
        &self.nu[self.pieces() - 1]
    }

    /// Index of the piece containing `t` under the half-open convention.
    pub fn piece_index(&self, t: f64) -> usize {
        let k = self.pieces();
        // first breakpoint strictly greater than t, minus one
        let idx = self.breakpoints[1..k].partition_point(|&b| b <= t);
        idx.min(k - 1)
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        0.5 * (self.breakpoints[k] + self.breakpoints[k + 1])
    }

    /// `true` when the first center coincides with `x0`.
    pub fn is_anchored_at(&self, x0: &[f64]) -> bool {
        self.nu[0].as_slice() == x0
    }

    /// Copy of this protocol with the centers replaced.
    pub fn with_centers(&self, nu: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.breakpoints.clone(), self.beta.clone(), nu)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl GuideReference for PwcProtocol {
    fn dim(&self) -> usize {
        self.dim
    }

    fn stiffness(&self, t: f64) -> f64 {
        self.beta[self.piece_index(t)]
    }

    fn center_into(&self, t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.nu[self.piece_index(t)]);
    }
}

pub fn uniform_breakpoints(pieces: usize) -> Vec<f64> {
    let k = pieces as f64;
    (0..=pieces).map(|i| i as f64 / k).collect()
}

/// Straight corridor axis from `x_in` to `x_out` with a transverse unit normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FrameDoc", into = "FrameDoc")]
pub struct CorridorFrame {
    x_in: Vec<f64>,
    x_out: Vec<f64>,
    axis: Vec<f64>,
    normal: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FrameDoc {
    x_in: Vec<f64>,
    x_out: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normal: Option<Vec<f64>>,
}

impl TryFrom<FrameDoc> for CorridorFrame {
    type Error = Error;

    fn try_from(doc: FrameDoc) -> Result<Self> {
        match doc.normal {
            Some(n) => CorridorFrame::with_normal(doc.x_in, doc.x_out, n),
            None => CorridorFrame::planar(doc.x_in, doc.x_out),
        }
    }
}

impl From<CorridorFrame> for FrameDoc {
    fn from(f: CorridorFrame) -> Self {
        let normal = (f.x_in.len() != 2).then_some(f.normal);
        FrameDoc { x_in: f.x_in, x_out: f.x_out, normal }
    }
}

impl CorridorFrame {
    /// Planar frame with `n = (−e₂, e₁)`.
    pub fn planar(x_in: Vec<f64>, x_out: Vec<f64>) -> Result<Self> {
        if x_in.len() != 2 || x_out.len() != 2 {
            return Err(Error::InvalidProtocol("planar corridor frames need 2-D endpoints".into()));
        }
        let axis = unit_axis(&x_in, &x_out)?;
        let normal = vec![-axis[1], axis[0]];
        Ok(Self { x_in, x_out, axis, normal })
    }

    /// Frame in any dimension; `normal` is normalized and must be orthogonal to the axis.
    pub fn with_normal(x_in: Vec<f64>, x_out: Vec<f64>, normal: Vec<f64>) -> Result<Self> {
        if x_in.len() != x_out.len() || normal.len() != x_in.len() {
            return Err(Error::DimensionMismatch { expected: x_in.len(), got: normal.len() });
        }
        let axis = unit_axis(&x_in, &x_out)?;
        let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(len > 0.0) {
            return Err(Error::InvalidProtocol("corridor normal has zero length".into()));
        }
        let normal: Vec<f64> = normal.iter().map(|v| v / len).collect();
        let overlap: f64 = axis.iter().zip(&normal).map(|(a, b)| a * b).sum();
        if overlap.abs() > 1e-12 {
            return Err(Error::InvalidProtocol("corridor normal is not orthogonal to the axis".into()));
        }
        Ok(Self { x_in, x_out, axis, normal })
    }

    pub fn dim(&self) -> usize {
        self.x_in.len()
    }

    pub fn x_in(&self) -> &[f64] {
        &self.x_in
    }

    pub fn x_out(&self) -> &[f64] {
        &self.x_out
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    /// `x_in + s (x_out − x_in)`, written so that both endpoints are reproduced exactly.
    pub fn axis_point(&self, s: f64) -> Vec<f64> {
        self.x_in.iter().zip(&self.x_out).map(|(a, b)| (1.0 - s) * a + s * b).collect()
    }
}

fn unit_axis(x_in: &[f64], x_out: &[f64]) -> Result<Vec<f64>> {
    let v: Vec<f64> = x_out.iter().zip(x_in).map(|(o, i)| o - i).collect();
    let len = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::InvalidProtocol("corridor endpoints coincide (zero-length axis)".into()));
    }
    Ok(v.into_iter().map(|c| c / len).collect())
}

/// Transverse offset templates `Δ(s)` along the corridor normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Centerline {
    Straight,
    /// `Δ(s) = −A (1 − |2s − 1|)`.
    VNeck { amplitude: f64 },
    /// `Δ(s) = A sin(2πs)`.
    STunnel { amplitude: f64 },
    /// `A tanh(κ(2s − 1))` plus the linear correction that pins both endpoints.
    TanhS {
        amplitude: f64,
        #[serde(default = "default_kappa")]
        kappa: f64,
    },
}

pub const DEFAULT_AMPLITUDE: f64 = 1.5;
pub const DEFAULT_KAPPA: f64 = 2.5;

fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

/// `sin(πx)` with exact zeros at integer `x`.
fn sin_pi(x: f64) -> f64 {
    if x == x.round() {
        0.0
    } else {
        (std::f64::consts::PI * x).sin()
    }
}

impl Centerline {
    pub fn offset(&self, s: f64) -> f64 {
        match *self {
            Centerline::Straight => 0.0,
            Centerline::VNeck { amplitude } => -amplitude * (1.0 - (2.0 * s - 1.0).abs()),
            Centerline::STunnel { amplitude } => amplitude * sin_pi(2.0 * s),
            Centerline::TanhS { amplitude, kappa } => {
                // raw swing minus its endpoint values interpolated linearly
                let raw = (kappa * (2.0 * s - 1.0)).tanh();
                let at0 = (-kappa).tanh();
                let at1 = kappa.tanh();
                amplitude * (raw - (1.0 - s) * at0 - s * at1)
            }
        }
    }

    pub fn eval(&self, frame: &CorridorFrame, s: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::OutOfDomain { t: s, lo: 0.0, hi: 1.0 });
        }
        let delta = self.offset(s);
        let mut p = frame.axis_point(s);
        if delta != 0.0 {
            for (pi, ni) in p.iter_mut().zip(frame.normal()) {
                *pi += delta * ni;
            }
        }
        Ok(p)
    }
}

/// Stiffness templates `β(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stiffness {
    Constant { beta: f64 },
    /// `γ β_base`.
    Scaled { gamma: f64, base: f64 },
    /// `β_min + (β_max − β_min) σ(a (t − t₀))`.
    Sigmoid { min: f64, max: f64, slope: f64, center: f64 },
}

impl Stiffness {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Stiffness::Constant { beta } => beta > 0.0 && beta.is_finite(),
            Stiffness::Scaled { gamma, base } => {
                gamma > 0.0 && base > 0.0 && (gamma * base).is_finite()
            }
            Stiffness::Sigmoid { min, max, slope, center } => {
                min > 0.0 && max >= min && max.is_finite() && slope.is_finite() && center.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidProtocol(format!("nonpositive or inconsistent stiffness {self:?}")))
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Stiffness::Constant { beta } => beta,
            Stiffness::Scaled { gamma, base } => gamma * base,
            Stiffness::Sigmoid { min, max, slope, center } => {
                let sig = 1.0 / (1.0 + (-slope * (t - center)).exp());
                min + (max - min) * sig
            }
        }
    }
}

/// Quadratic re-timing `s(t) = min(t + α t (1 − t), s_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWarp {
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "one")]
    pub s_max: f64,
}

fn one() -> f64 {
    1.0
}

/// `|α| ≤ 1` keeps `s'(t) = 1 + α(1 − 2t) ≥ 0` on `[0, 1]`.
pub const WARP_ALPHA_MAX: f64 = 1.0;

impl Default for TimeWarp {
    fn default() -> Self {
        Self { alpha: 0.0, s_max: 1.0 }
    }
}

impl TimeWarp {
    pub fn truncated(s_max: f64) -> Self {
        Self { alpha: 0.0, s_max }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.abs() <= WARP_ALPHA_MAX) {
            return Err(Error::InvalidProtocol(format!(
                "warp amplitude {} exceeds {}",
                self.alpha, WARP_ALPHA_MAX
            )));
        }
        if !(0.0..=1.0).contains(&self.s_max) {
            return Err(Error::InvalidProtocol(format!("s_max = {} outside [0, 1]", self.s_max)));
        }
        Ok(())
    }

    pub fn apply(&self, t: f64) -> f64 {
        (t + self.alpha * t * (1.0 - t)).clamp(0.0, 1.0).min(self.s_max)
    }
}

/// Continuous protocol assembled from a corridor frame and templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousProtocol {
    pub frame: CorridorFrame,
    pub centerline: Centerline,
    pub stiffness: Stiffness,
    #[serde(default)]
    pub warp: TimeWarp,
}

impl ContinuousProtocol {
    pub fn new(
        frame: CorridorFrame,
        centerline: Centerline,
        stiffness: Stiffness,
        warp: TimeWarp,
    ) -> Result<Self> {
        let p = Self { frame, centerline, stiffness, warp };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.stiffness.validate()?;
        self.warp.validate()
    }

    /// Centerline evaluated at warped time `s(t)`.
    pub fn center_at(&self, t: f64) -> Result<Vec<f64>> {
        self.centerline.eval(&self.frame, self.warp.apply(t))
    }

    /// Piecewise-constant protocol on `pieces` uniform intervals.
    ///
    /// Stiffness and centers are sampled at interval midpoints; with `anchor_endpoints` the first
    /// and last centers are replaced by the guide at `t = 0` and `t = 1`.
    pub fn discretize(&self, pieces: usize, anchor_endpoints: bool) -> Result<PwcProtocol> {
        self.validate()?;
        if pieces < 1 || (anchor_endpoints && pieces < 2) {
            return Err(Error::InvalidProtocol(format!(
                "{pieces} pieces is too few (anchoring needs at least 2)"
            )));
        }
        let breakpoints = uniform_breakpoints(pieces);
        let mut beta = Vec::with_capacity(pieces);
        let mut nu = Vec::with_capacity(pieces);
        for k in 0..pieces {
            let mid = 0.5 * (breakpoints[k] + breakpoints[k + 1]);
            beta.push(self.stiffness.eval(mid));
            let t = if anchor_endpoints && k == 0 {
                0.0
            } else if anchor_endpoints && k == pieces - 1 {
                1.0
            } else {
                mid
            };
            nu.push(self.center_at(t)?);
        }
        PwcProtocol::new(breakpoints, beta, nu)
    }

    /// Visualization walls `ν_t ± w(t) n` on a time grid.
    pub fn corridor_walls(
        &self,
        width: WidthProfile,
        grid: &[f64],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut left = Vec::with_capacity(grid.len());
        let mut right = Vec::with_capacity(grid.len());
        for &t in grid {
            let w = width.eval(self.stiffness.eval(t));
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidProtocol(format!("corridor width {w} at t = {t}")));
            }
            let c = self.center_at(t)?;
            let n = self.frame.normal();
            left.push(c.iter().zip(n).map(|(ci, ni)| ci + w * ni).collect());
            right.push(c.iter().zip(n).map(|(ci, ni)| ci - w * ni).collect());
        }
        Ok((left, right))
    }
}

impl GuideReference for ContinuousProtocol {
    fn dim(&self) -> usize {
        self.frame.dim()
    }

    fn stiffness(&self, t: f64) -> f64 {
        self.stiffness.eval(t)
    }

    fn center_into(&self, t: f64, out: &mut [f64]) {
        let s = self.warp.apply(t.clamp(0.0, 1.0));
        let delta = self.centerline.offset(s);
        let (x_in, x_out, n) = (self.frame.x_in(), self.frame.x_out(), self.frame.normal());
        for i in 0..out.len() {
            out[i] = (1.0 - s) * x_in[i] + s * x_out[i] + delta * n[i];
        }
    }
}

/// Half-width of the visualization corridor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WidthProfile {
    Constant { width: f64 },
    /// `scale / √β(t)`: the tube narrows where the guide is stiff.
    InverseSqrtStiffness { scale: f64 },
}

impl WidthProfile {
    fn eval(&self, beta: f64) -> f64 {
        match *self {
            WidthProfile::Constant { width } => width,
            WidthProfile::InverseSqrtStiffness { scale } => scale / beta.sqrt(),
        }
    }
}
