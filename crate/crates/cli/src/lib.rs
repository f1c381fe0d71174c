//! Scenario files, case runners and run manifests for the `ghpid` command-line tool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ghpid::diagnostics::{self, guide_cost};
use ghpid::learn::{self, centers_from_params, history_csv, optimize, HistoryRow, TaskObjective};
use ghpid::rng::{stream, Domain};
use ghpid::sampler::{simulate, uniform_snapshot_times};
use ghpid::target::poe_fuse;
use ghpid::{
    Centerline, ConsensusTask, ContinuousProtocol, DesiderataTask, DiagnosticReport, EnsembleRun,
    GaussianMixture, GreensTable, GuideReference, LearnConfig, PwcProtocol, SimConfig, Stiffness,
    TrustWeights,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_RESAMPLES: usize = 200;
pub const MANIFEST_FILE: &str = "manifest.json";

fn default_resamples() -> usize {
    DEFAULT_RESAMPLES
}

fn default_true() -> bool {
    true
}

/// A versioned scenario document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub sim: SimConfig,
    /// Null-distribution size of the terminal fidelity test; `0` skips the test.
    #[serde(default = "default_resamples")]
    pub fidelity_resamples: usize,
    pub case: Case,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    CaseA(CaseA),
    CaseB(CaseB),
    CaseC(CaseC),
    Sample(SampleCase),
    Fuse(FuseCase),
}

impl Case {
    fn kind(&self) -> &'static str {
        match self {
            Case::CaseA(_) => "case_a",
            Case::CaseB(_) => "case_b",
            Case::CaseC(_) => "case_c",
            Case::Sample(_) => "sample",
            Case::Fuse(_) => "fuse",
        }
    }
}

/// One template protocol, optionally swept over geometry, stiffness scale, or warp cutoff.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseA {
    pub target: GaussianMixture,
    pub template: ContinuousProtocol,
    pub pieces: usize,
    #[serde(default = "default_true")]
    pub anchor_endpoints: bool,
    #[serde(default)]
    pub sweep: Sweep,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    #[default]
    None,
    Geometry(Vec<Centerline>),
    /// Scales the template's stiffness (which must be constant) by each factor.
    Stiffness(Vec<f64>),
    /// Replaces the warp cutoff `s_max`.
    Warp(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseB {
    pub target: GaussianMixture,
    pub expert: ContinuousProtocol,
    pub pieces: usize,
    #[serde(default)]
    pub learn: LearnConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseC {
    pub experts: [ContinuousProtocol; 2],
    pub targets: [GaussianMixture; 2],
    pub trusts: Vec<TrustWeights>,
    pub pieces: usize,
    #[serde(default)]
    pub learn: LearnConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCase {
    pub target: GaussianMixture,
    pub protocol: ProtocolSpec,
    /// Number of points in the coefficient trace grid.
    #[serde(default = "default_trace_points")]
    pub trace_points: usize,
}

fn default_trace_points() -> usize {
    201
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolSpec {
    Template {
        template: ContinuousProtocol,
        pieces: usize,
        #[serde(default = "default_true")]
        anchor_endpoints: bool,
    },
    Piecewise(PwcProtocol),
}

impl ProtocolSpec {
    pub fn build(&self) -> Result<PwcProtocol> {
        Ok(match self {
            ProtocolSpec::Template { template, pieces, anchor_endpoints } => {
                template.discretize(*pieces, *anchor_endpoints)?
            }
            ProtocolSpec::Piecewise(p) => p.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseCase {
    pub targets: [GaussianMixture; 2],
    pub trusts: Vec<TrustWeights>,
}

/// Command-line overrides applied on top of a scenario.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub snapshots: Option<usize>,
}

/// Reads a scenario, or the scenario embedded in a run manifest.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_scenario(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(describe_json_error)?;
    let scenario: Scenario = if value.get("manifest_version").is_some() {
        let manifest: Manifest = serde_json::from_str(text).map_err(describe_json_error)?;
        manifest.scenario
    } else {
        serde_json::from_str(text).map_err(describe_json_error)?
    };
    validate(&scenario)?;
    Ok(scenario)
}

fn describe_json_error(e: serde_json::Error) -> anyhow::Error {
    anyhow!("line {}, column {}: {}", e.line(), e.column(), e)
}

/// Semantic checks that the parser cannot express.
pub fn validate(s: &Scenario) -> Result<()> {
    if s.schema_version != SCHEMA_VERSION {
        bail!("schema_version {} is not supported (expected {SCHEMA_VERSION})", s.schema_version);
    }
    s.sim.validate().context("sim")?;
    if s.fidelity_resamples != 0 && s.fidelity_resamples < 20 {
        bail!("fidelity_resamples must be 0 or at least 20");
    }
    match &s.case {
        Case::CaseA(a) => {
            same_dim(a.template.dim(), a.target.dim(), "case_a.template")?;
            a.template.validate().context("case_a.template")?;
            for (label, p) in case_a_protocols(a)? {
                p.discretize(a.pieces, a.anchor_endpoints).with_context(|| format!("case_a sweep entry {label}"))?;
            }
        }
        Case::CaseB(b) => {
            b.learn.validate().context("case_b.learn")?;
            DesiderataTask::new(b.expert.clone(), b.target.clone(), b.pieces).context("case_b")?;
        }
        Case::CaseC(c) => {
            c.learn.validate().context("case_c.learn")?;
            if c.trusts.is_empty() {
                bail!("case_c.trusts is empty");
            }
            same_dim(c.targets[0].dim(), c.targets[1].dim(), "case_c.targets")?;
            for t in &c.trusts {
                ConsensusTask::new(c.experts.clone(), c.targets.clone(), *t, c.pieces).context("case_c")?;
            }
        }
        Case::Sample(smp) => {
            let p = smp.protocol.build().context("sample.protocol")?;
            same_dim(p.dim(), smp.target.dim(), "sample.protocol")?;
            if smp.trace_points < 2 {
                bail!("sample.trace_points must be at least 2");
            }
        }
        Case::Fuse(f) => {
            same_dim(f.targets[0].dim(), f.targets[1].dim(), "fuse.targets")?;
            if f.trusts.is_empty() {
                bail!("fuse.trusts is empty");
            }
        }
    }
    Ok(())
}

fn same_dim(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        bail!("{what}: dimension {a} does not match the target dimension {b}");
    }
    Ok(())
}

impl Scenario {
    pub fn apply(&mut self, o: Overrides) {
        if let Some(seed) = o.seed {
            self.sim.seed = seed;
            match &mut self.case {
                Case::CaseB(b) => b.learn.seed = seed,
                Case::CaseC(c) => c.learn.seed = seed,
                _ => {}
            }
        }
        if let Some(n) = o.snapshots {
            self.sim.snapshot_times = uniform_snapshot_times(n);
        }
    }
}

/// A pass/fail verdict recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Hard checks decide the exit status; soft ones are statistical verdicts.
    pub hard: bool,
    pub detail: String,
}

impl Check {
    fn hard(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, hard: true, detail: detail.into() }
    }

    fn soft(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, hard: false, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub scenario: Scenario,
    pub files: Vec<FileEntry>,
    pub checks: Vec<Check>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn hard_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.hard)
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Files produced by a run, keyed by their path relative to the output directory.
#[derive(Default)]
struct Artifacts {
    files: BTreeMap<String, Vec<u8>>,
    checks: Vec<Check>,
}

impl Artifacts {
    fn put(&mut self, path: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(path.into(), bytes.into());
    }

    fn put_json<T: Serialize>(&mut self, path: impl Into<String>, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.put(path, s);
        Ok(())
    }

    fn merge(&mut self, prefix: &str, other: Artifacts) {
        for (p, b) in other.files {
            self.files.insert(format!("{prefix}/{p}"), b);
        }
        for mut c in other.checks {
            c.name = format!("{prefix}: {}", c.name);
            self.checks.push(c);
        }
    }
}

/// Which subcommand a scenario is run under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CaseA,
    CaseB,
    CaseC,
    Sample,
    Fuse,
    TraceCoefficients,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CaseA => "case-a",
            Command::CaseB => "case-b",
            Command::CaseC => "case-c",
            Command::Sample => "sample",
            Command::Fuse => "fuse",
            Command::TraceCoefficients => "trace-coefficients",
        }
    }

    fn accepts(self, case: &Case) -> bool {
        matches!(
            (self, case),
            (Command::CaseA, Case::CaseA(_))
                | (Command::CaseB, Case::CaseB(_))
                | (Command::CaseC, Case::CaseC(_))
                | (Command::Sample, Case::Sample(_))
                | (Command::Fuse, Case::Fuse(_) | Case::CaseC(_))
                | (Command::TraceCoefficients, Case::CaseA(_) | Case::Sample(_))
        )
    }
}

/// Runs `command` on `scenario`, writes every artifact plus `manifest.json` under `out`.
pub fn run(command: Command, scenario: &Scenario, out: &Path) -> Result<Manifest> {
    if !command.accepts(&scenario.case) {
        bail!("`{}` cannot run a `{}` scenario", command.name(), scenario.case.kind());
    }
    let (artifacts, summary) = match (command, &scenario.case) {
        (Command::CaseA, Case::CaseA(a)) => run_case_a(scenario, a)?,
        (Command::CaseB, Case::CaseB(b)) => run_case_b(scenario, b)?,
        (Command::CaseC, Case::CaseC(c)) => run_case_c(scenario, c)?,
        (Command::Sample, Case::Sample(smp)) => run_sample(scenario, smp)?,
        (Command::Fuse, Case::Fuse(f)) => run_fuse(&f.targets, &f.trusts)?,
        (Command::Fuse, Case::CaseC(c)) => run_fuse(&c.targets, &c.trusts)?,
        (Command::TraceCoefficients, case) => run_trace(case)?,
        _ => unreachable!(),
    };
    write_outputs(command, scenario, out, artifacts, summary)
}

fn write_outputs(
    command: Command,
    scenario: &Scenario,
    out: &Path,
    artifacts: Artifacts,
    summary: serde_json::Value,
) -> Result<Manifest> {
    let mut files = Vec::with_capacity(artifacts.files.len());
    for (rel, bytes) in &artifacts.files {
        let path = out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        files.push(FileEntry { path: rel.clone(), sha256: hex::encode(Sha256::digest(bytes)) });
    }
    let manifest = Manifest {
        manifest_version: 1,
        tool: "ghpid".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.name().into(),
        seed: scenario.sim.seed,
        scenario: scenario.clone(),
        files,
        checks: artifacts.checks,
        summary,
    };
    fs::create_dir_all(out)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Recomputes the digests of the files listed in a manifest; returns the mismatching paths.
pub fn verify_manifest(dir: &Path, manifest: &Manifest) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for f in &manifest.files {
        let bytes = fs::read(dir.join(&f.path)).with_context(|| format!("reading {}", f.path))?;
        if hex::encode(Sha256::digest(&bytes)) != f.sha256 {
            bad.push(f.path.clone());
        }
    }
    Ok(bad)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(describe_json_error)
}

/// Parses the `command` field of a manifest back into a [`Command`].
pub fn command_from_name(name: &str) -> Option<Command> {
    [
        Command::CaseA,
        Command::CaseB,
        Command::CaseC,
        Command::Sample,
        Command::Fuse,
        Command::TraceCoefficients,
    ]
    .into_iter()
    .find(|c| c.name() == name)
}

fn run_label(i: usize, name: &str) -> String {
    format!("{i:02}_{name}")
}

/// Labelled continuous protocols of a Case A sweep.
pub fn case_a_protocols(a: &CaseA) -> Result<Vec<(String, ContinuousProtocol)>> {
    let t = &a.template;
    Ok(match &a.sweep {
        Sweep::None => vec![(run_label(0, centerline_name(&t.centerline)), t.clone())],
        Sweep::Geometry(lines) => lines
            .iter()
            .enumerate()
            .map(|(i, c)| (run_label(i, centerline_name(c)), ContinuousProtocol { centerline: *c, ..t.clone() }))
            .collect(),
        Sweep::Stiffness(gammas) => {
            let base = match t.stiffness {
                Stiffness::Constant { beta } => beta,
                Stiffness::Scaled { gamma, base } => gamma * base,
                Stiffness::Sigmoid { .. } => bail!("a stiffness sweep needs a constant template stiffness"),
            };
            gammas
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let p = ContinuousProtocol { stiffness: Stiffness::Scaled { gamma: *g, base }, ..t.clone() };
                    (run_label(i, &format!("gamma_{g}")), p)
                })
                .collect()
        }
        Sweep::Warp(caps) => caps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut p = t.clone();
                p.warp.s_max = *s;
                (run_label(i, &format!("smax_{s}")), p)
            })
            .collect(),
    })
}

fn centerline_name(c: &Centerline) -> &'static str {
    match c {
        Centerline::Straight => "straight",
        Centerline::VNeck { .. } => "v_neck",
        Centerline::STunnel { .. } => "s_tunnel",
        Centerline::TanhS { .. } => "tanh_s",
    }
}

/// Simulation plus diagnostics of one protocol, with its per-run files.
struct Simulated {
    run: EnsembleRun,
    report: DiagnosticReport,
    artifacts: Artifacts,
}

fn simulate_and_report(
    scenario: &Scenario,
    protocol: &PwcProtocol,
    target: &GaussianMixture,
    reference: &dyn GuideReference,
) -> Result<Simulated> {
    let table = GreensTable::new(protocol)?;
    let run = simulate(&table, target, &scenario.sim)?;
    let fid = if scenario.fidelity_resamples > 0 {
        Some(diagnostics::fidelity(&run, target, scenario.fidelity_resamples, scenario.sim.seed)?)
    } else {
        None
    };
    let report = DiagnosticReport::compute(&run, protocol, reference, target, fid)?;
    let mut art = Artifacts::default();
    write_run_files(&mut art, &run, protocol, &report)?;
    art.checks.extend(run_checks(&run, &report, scenario));
    Ok(Simulated { run, report, artifacts: art })
}

fn write_run_files(art: &mut Artifacts, run: &EnsembleRun, protocol: &PwcProtocol, report: &DiagnosticReport) -> Result<()> {
    for (i, snap) in run.snapshots.iter().enumerate() {
        art.put(format!("snapshots/snapshot_{i:02}.csv"), snapshot_csv(snap.t, &snap.positions, run.dim));
    }
    art.put("snapshots/summary.csv", snapshot_summary_csv(run));
    art.put("center_of_mass.csv", center_of_mass_csv(run));
    art.put("terminal.csv", snapshot_csv(1.0, &run.terminal, run.dim));
    art.put("adherence.csv", report.adherence_csv());
    art.put_json("protocol.json", protocol)?;
    art.put_json("diagnostics.json", report)?;
    Ok(())
}

fn coordinate_header(prefix: &str, dim: usize) -> String {
    (1..=dim).map(|i| format!(",{prefix}{i}")).collect()
}

pub fn snapshot_csv(t: f64, positions: &[f64], dim: usize) -> String {
    let mut out = format!("t,particle{}\n", coordinate_header("x", dim));
    for (i, row) in positions.chunks_exact(dim).enumerate() {
        let _ = write!(out, "{t},{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn snapshot_summary_csv(run: &EnsembleRun) -> String {
    let d = run.dim;
    let mut cov_cols = String::new();
    for i in 1..=d {
        for j in 1..=d {
            let _ = write!(cov_cols, ",cov{i}{j}");
        }
    }
    let mut out = format!("step,t{}{cov_cols}\n", coordinate_header("mean", d));
    for s in &run.snapshots {
        let _ = write!(out, "{},{}", s.step, s.t);
        for v in s.mean.iter().chain(&s.covariance) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn center_of_mass_csv(run: &EnsembleRun) -> String {
    let mut out = format!("step,t{}\n", coordinate_header("x", run.dim));
    for n in 0..=run.steps {
        let _ = write!(out, "{},{}", n, n as f64 * run.dt());
        for v in run.mean_at(n) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn centers_csv(protocol: &PwcProtocol) -> String {
    let mut out = format!("piece,t_start,t_end,beta{}\n", coordinate_header("nu", protocol.dim()));
    let b = protocol.breakpoints();
    for k in 0..protocol.pieces() {
        let _ = write!(out, "{},{},{},{}", k, b[k], b[k + 1], protocol.beta(k));
        for v in protocol.nu(k) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn run_checks(run: &EnsembleRun, report: &DiagnosticReport, scenario: &Scenario) -> Vec<Check> {
    let finite = run.terminal.iter().all(|v| v.is_finite());
    let psd = run.snapshots.iter().all(|s| covariance_is_psd(&s.covariance, run.dim));
    let costs = report.guide_cost >= 0.0
        && report.drift_effort >= 0.0
        && report.adherence_curve.iter().all(|(_, a)| *a >= 0.0);
    let mut checks = vec![
        Check::hard(
            "ensemble shape",
            run.terminal.len() == run.particles * run.dim && run.snapshots.len() == scenario.sim.snapshot_times.len(),
            format!("{} particles, {} snapshots", run.particles, run.snapshots.len()),
        ),
        Check::hard("finite terminal states", finite, ""),
        Check::hard("snapshot covariances positive semidefinite", psd, ""),
        Check::hard("nonnegative path costs", costs, format!("guide cost {}", report.guide_cost)),
    ];
    if let Some(f) = &report.fidelity {
        checks.push(Check::soft(
            "terminal fidelity",
            f.passed,
            format!(
                "energy distance {} vs null threshold {} (p = {}); mode frequencies {:?} vs {:?}",
                f.energy_distance, f.null_threshold, f.p_value, f.mode_frequencies, f.mode_expected
            ),
        ));
    }
    checks
}

/// Sylvester-style test on the leading principal minors, with round-off slack.
fn covariance_is_psd(cov: &[f64], d: usize) -> bool {
    let scale = (0..d).map(|i| cov[i * d + i].abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-9 * scale;
    match d {
        1 => cov[0] >= -tol,
        2 => cov[0] >= -tol && cov[3] >= -tol && cov[0] * cov[3] - cov[1] * cov[2] >= -tol * scale,
        _ => (0..d).all(|i| cov[i * d + i] >= -tol),
    }
}

fn run_case_a(scenario: &Scenario, a: &CaseA) -> Result<(Artifacts, serde_json::Value)> {
    let protocols = case_a_protocols(a)?;
    let results: Vec<(String, Simulated)> = protocols
        .par_iter()
        .map(|(label, cont)| {
            let pwc = cont.discretize(a.pieces, a.anchor_endpoints)?;
            let sim = simulate_and_report(scenario, &pwc, &a.target, &pwc).with_context(|| format!("run {label}"))?;
            Ok((label.clone(), sim))
        })
        .collect::<Result<_>>()?;
    let mut art = Artifacts::default();
    let mut runs = Vec::new();
    let mut summary_csv = String::from("run,guide_cost,mean_sq_deviation,drift_effort,pid_cost,cross_entropy,fidelity_passed");
    for i in 0..a.target.components() {
        let _ = write!(summary_csv, ",mode{i}_frequency");
    }
    summary_csv.push('\n');
    for (label, sim) in results {
        let r = &sim.report;
        let freqs: Vec<f64> = r.mode_counts.iter().map(|c| *c as f64 / sim.run.particles as f64).collect();
        let _ = write!(
            summary_csv,
            "{label},{},{},{},{},{},{}",
            r.guide_cost,
            r.mean_sq_deviation,
            r.drift_effort,
            r.pid_cost,
            r.cross_entropy,
            r.fidelity.as_ref().map_or("".into(), |f| f.passed.to_string())
        );
        for f in &freqs {
            let _ = write!(summary_csv, ",{f}");
        }
        summary_csv.push('\n');
        runs.push(serde_json::json!({
            "run": label,
            "mean_sq_deviation": r.mean_sq_deviation,
            "guide_cost": r.guide_cost,
            "mode_frequencies": freqs,
            "fidelity_passed": r.fidelity.as_ref().map(|f| f.passed),
        }));
        art.merge(&format!("runs/{label}"), sim.artifacts);
    }
    art.put("summary.csv", summary_csv);
    Ok((art, serde_json::json!({ "runs": runs })))
}

/// Fresh noise seed used to compare initial and learned centers on equal terms.
pub fn evaluation_seed(learn_seed: u64) -> u64 {
    use rand::RngCore;
    stream(learn_seed, Domain::LearnMaster, 1).next_u64()
}

fn learn_files(art: &mut Artifacts, history: &[HistoryRow]) {
    art.put("history.csv", history_csv(history));
}

fn run_case_b(scenario: &Scenario, b: &CaseB) -> Result<(Artifacts, serde_json::Value)> {
    let task = DesiderataTask::new(b.expert.clone(), b.target.clone(), b.pieces)?;
    let objective = TaskObjective { task: &task, config: &b.learn };
    let outcome = match optimize(&objective, &b.learn) {
        Ok(o) => o,
        Err(failure) => {
            let mut art = Artifacts::default();
            learn_files(&mut art, &failure.partial.history);
            return Err(anyhow!(failure)).context(partial_note(&art));
        }
    };
    let initial = task.initial_centers();
    let learned = centers_from_params(task.anchor(), &outcome.best);
    let eval_seed = evaluation_seed(b.learn.seed);
    let j0 = learn::objective_case_b(&initial, &task, &b.learn, eval_seed)?;
    let j1 = learn::objective_case_b(&learned, &task, &b.learn, eval_seed)?;

    let protocols = [
        ("baseline", task.baseline()?),
        ("expert", task.protocol(initial)?),
        ("optimized", task.protocol(learned)?),
    ];
    let sims: Vec<Simulated> = protocols
        .par_iter()
        .map(|(_, p)| simulate_and_report(scenario, p, &b.target, &b.expert))
        .collect::<Result<_>>()?;

    let mut art = Artifacts::default();
    learn_files(&mut art, &outcome.history);
    art.put("nu_star.csv", centers_csv(&protocols[2].1));
    let costs: Vec<f64> = sims.iter().map(|s| s.report.guide_cost).collect();
    let ratio = j1.total / j0.total;
    art.checks.push(Check::soft(
        "objective reduction",
        ratio <= 0.4,
        format!("J(initial) = {}, J(learned) = {} at a common seed (ratio {ratio})", j0.total, j1.total),
    ));
    art.checks.push(Check::soft(
        "optimized adherence beats baseline",
        costs[2] < costs[0],
        format!("guide cost vs expert: optimized {}, baseline {}", costs[2], costs[0]),
    ));
    for ((name, _), sim) in protocols.iter().zip(sims) {
        art.merge(&format!("runs/{name}"), sim.artifacts);
    }
    let summary = serde_json::json!({
        "iterations": outcome.history.len(),
        "best_recorded_objective": outcome.best_value,
        "evaluation_seed": eval_seed,
        "objective_initial": j0,
        "objective_learned": j1,
        "objective_ratio": ratio,
        "guide_cost_baseline": costs[0],
        "guide_cost_expert": costs[1],
        "guide_cost_optimized": costs[2],
    });
    Ok((art, summary))
}

fn partial_note(art: &Artifacts) -> String {
    match art.files.get("history.csv") {
        Some(h) => format!("partial history:\n{}", String::from_utf8_lossy(h)),
        None => String::new(),
    }
}

fn trust_label(t: &TrustWeights) -> String {
    format!("trust_{}_{}", t.k1(), t.k2())
}

fn run_case_c(scenario: &Scenario, c: &CaseC) -> Result<(Artifacts, serde_json::Value)> {
    let tasks: Vec<ConsensusTask> = c
        .trusts
        .iter()
        .map(|t| ConsensusTask::new(c.experts.clone(), c.targets.clone(), *t, c.pieces))
        .collect::<ghpid::Result<_>>()?;
    let per_trust: Vec<(Artifacts, serde_json::Value)> = tasks
        .par_iter()
        .map(|task| run_consensus(scenario, c, task).with_context(|| trust_label(&task.trust)))
        .collect::<Result<_>>()?;
    let mut art = Artifacts::default();
    let mut rows = Vec::new();
    for (task, (a, s)) in tasks.iter().zip(per_trust) {
        art.merge(&trust_label(&task.trust), a);
        rows.push(s);
    }
    let projections: Vec<f64> = rows.iter().map(|r| r["terminal_projection"].as_f64().unwrap_or(f64::NAN)).collect();
    Ok((art, serde_json::json!({ "trusts": rows, "terminal_projections": projections })))
}

fn run_consensus(scenario: &Scenario, c: &CaseC, task: &ConsensusTask) -> Result<(Artifacts, serde_json::Value)> {
    let objective = TaskObjective { task, config: &c.learn };
    let outcome = optimize(&objective, &c.learn).map_err(|f| anyhow!(f))?;
    let learned = centers_from_params(task.anchor(), &outcome.best);
    let end = learned.last().cloned().unwrap_or_default();
    let projection = learn::axis_projection(&end, c.experts[0].frame.x_out(), c.experts[1].frame.x_out());
    let protocol = task.protocol(learned)?;
    let sim = simulate_and_report(scenario, &protocol, &task.fused, &protocol)?;
    let expert_costs = [guide_cost(&sim.run, &c.experts[0])?, guide_cost(&sim.run, &c.experts[1])?];

    let mut art = sim.artifacts;
    learn_files(&mut art, &outcome.history);
    art.put_json("fused_gmm.json", &task.fused)?;
    art.put("nu_star.csv", centers_csv(&protocol));
    let summary = serde_json::json!({
        "trust": [task.trust.k1(), task.trust.k2()],
        "iterations": outcome.history.len(),
        "best_recorded_objective": outcome.best_value,
        "terminal_center": end,
        "terminal_projection": projection,
        "guide_cost_expert_1": expert_costs[0],
        "guide_cost_expert_2": expert_costs[1],
        "fidelity_passed": sim.report.fidelity.as_ref().map(|f| f.passed),
    });
    Ok((art, summary))
}

fn run_sample(scenario: &Scenario, smp: &SampleCase) -> Result<(Artifacts, serde_json::Value)> {
    let protocol = smp.protocol.build()?;
    let sim = simulate_and_report(scenario, &protocol, &smp.target, &protocol)?;
    let summary = serde_json::json!({
        "guide_cost": sim.report.guide_cost,
        "fidelity_passed": sim.report.fidelity.as_ref().map(|f| f.passed),
    });
    Ok((sim.artifacts, summary))
}

fn run_fuse(targets: &[GaussianMixture; 2], trusts: &[TrustWeights]) -> Result<(Artifacts, serde_json::Value)> {
    let mut art = Artifacts::default();
    let mut rows = Vec::new();
    for t in trusts {
        let fused = poe_fuse(&targets[0], &targets[1], *t)?;
        art.put_json(format!("{}.json", trust_label(t)), &fused)?;
        rows.push(serde_json::json!({ "trust": [t.k1(), t.k2()], "components": fused.components() }));
    }
    Ok((art, serde_json::json!({ "fused": rows })))
}

/// Evenly spaced times covering the table's valid band.
fn trace_grid(table: &GreensTable, points: usize) -> Vec<f64> {
    let (lo, hi) = table.exclusion();
    let hi = 1.0 - hi;
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

fn run_trace(case: &Case) -> Result<(Artifacts, serde_json::Value)> {
    let (protocols, points): (Vec<(String, PwcProtocol)>, usize) = match case {
        Case::CaseA(a) => (
            case_a_protocols(a)?
                .into_iter()
                .map(|(l, p)| Ok((l, p.discretize(a.pieces, a.anchor_endpoints)?)))
                .collect::<Result<_>>()?,
            default_trace_points(),
        ),
        Case::Sample(smp) => (vec![("protocol".into(), smp.protocol.build()?)], smp.trace_points),
        _ => unreachable!(),
    };
    let mut art = Artifacts::default();
    for (label, p) in &protocols {
        let table = GreensTable::new(p)?;
        art.put(format!("{label}/coefficients.csv"), table.trace_csv(&trace_grid(&table, points))?);
        art.put_json(format!("{label}/protocol.json"), p)?;
    }
    let labels: Vec<&String> = protocols.iter().map(|(l, _)| l).collect();
    Ok((art, serde_json::json!({ "protocols": labels })))
}

/// Resolves the output directory for a run: `--out`, else `runs/<scenario name>`.
pub fn output_dir(out: Option<PathBuf>, scenario: &Scenario) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("runs").join(&scenario.name))
}
