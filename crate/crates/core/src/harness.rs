//! Configuration, persistence and batch drivers behind the command-line tool.
//!
//! Every run reads one [`ExperimentConfig`], writes its artifacts into an
//! output directory and finishes with a `manifest.txt` that lists each file
//! with its SHA-256 checksum.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conductivity::{builtin_model, verify_hypotheses, ConductivityModel, HypothesisConstants, SamplingGrid, C64};
use crate::dnmap::{
    dn_complex_in, dn_linearized_in, dn_real, gateaux_fd_in, read_samples, write_samples, BoundaryDatum, DNSample,
    GateauxTable, DEFAULT_FD_STEPS,
};
use crate::error::{Error, Result};
use crate::geometry::{build_disk_mesh, Mesh, Point};
use crate::pde::{probe_residual, FemSpace, ProbeContext, ProbePoint, QuadratureRule, SolverOptions, Start};
use crate::reconstruct::{probe_family, recover_a, DNProvider, ProbeFamily, ProviderMode, ReconstructionOptions};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub radius: f64,
    pub refinement_level: usize,
    pub quadrature: QuadratureRule,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            radius: 1.0,
            refinement_level: 4,
            quadrature: QuadratureRule::Centroid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: String,
    pub parameters: toml::Table,
    /// Replaces the family's declared constants when present.
    pub constants: Option<HypothesisConstants>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let parameters = "c_base = 2.0\nq0 = [0.3, 0.1]".parse().expect("static table");
        ModelConfig {
            family: "band_analytic".into(),
            parameters,
            constants: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub r0: f64,
    pub magnitudes: Vec<f64>,
    pub angles: usize,
    pub transversality_cutoff: f64,
    /// Values of `s` used by forward, dn-map and linearize runs.
    pub s_values: Vec<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            r0: 0.1,
            magnitudes: vec![0.02, 0.05],
            angles: 4,
            transversality_cutoff: 0.1,
            s_values: vec![0.0],
        }
    }
}

/// A boundary datum described in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatumSpec {
    Constant { value: [f64; 2] },
    /// `q.x` with `q = [[re, im], [re, im]]`.
    Linear { q: [[f64; 2]; 2] },
    /// `(scale p).x` for the probe at hand.
    LinearProbe { scale: f64 },
    /// `amplitude cos(mode phi)`, `phi` the polar angle about the disk centre.
    Fourier { mode: u32, amplitude: f64 },
}

impl DatumSpec {
    pub fn build(&self, mesh: &Mesh, probe: &ProbePoint) -> BoundaryDatum {
        match *self {
            DatumSpec::Constant { value } => BoundaryDatum::constant(mesh, C64::new(value[0], value[1])),
            DatumSpec::Linear { q } => {
                BoundaryDatum::linear(mesh, [C64::new(q[0][0], q[0][1]), C64::new(q[1][0], q[1][1])])
            }
            DatumSpec::LinearProbe { scale } => BoundaryDatum::linear(mesh, [probe.p[0] * scale, probe.p[1] * scale]),
            DatumSpec::Fourier { mode, amplitude } => {
                let c = mesh.center;
                BoundaryDatum::custom(mesh, "fourier", vec![mode as f64, amplitude], move |x| {
                    let phi = (x[1] - c[1]).atan2(x[0] - c[0]);
                    C64::new(amplitude * (mode as f64 * phi).cos(), 0.0)
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardConfig {
    /// Data for the complex perturbation problem.
    pub data: Vec<DatumSpec>,
    /// Real data for the real DN map.
    pub real_data: Vec<DatumSpec>,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            data: vec![
                DatumSpec::Constant { value: [0.01, 0.0] },
                DatumSpec::LinearProbe { scale: 0.1 },
                DatumSpec::Fourier {
                    mode: 2,
                    amplitude: 0.01,
                },
            ],
            real_data: vec![
                DatumSpec::Constant { value: [0.5, 0.0] },
                DatumSpec::Linear {
                    q: [[0.1, 0.0], [0.0, 0.0]],
                },
                DatumSpec::Fourier {
                    mode: 2,
                    amplitude: 0.3,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearizationConfig {
    /// Decreasing steps of the Gateaux table.
    pub steps: Vec<f64>,
    pub datum: DatumSpec,
    /// Accepted deviation of the gap ratio from 1/2.
    pub ratio_band: f64,
    /// Datum amplitudes of the two end-to-end steps.
    pub e2e_amplitudes: Vec<f64>,
}

impl Default for LinearizationConfig {
    fn default() -> Self {
        LinearizationConfig {
            steps: DEFAULT_FD_STEPS.to_vec(),
            datum: DatumSpec::Constant { value: [1.0, 0.0] },
            ratio_band: 0.15,
            e2e_amplitudes: vec![0.002, 0.001],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub mode: ProviderMode,
    pub s_grid: Vec<f64>,
    pub simpson_refinement: usize,
    pub gauss_nodes: usize,
    pub thetas: [f64; 2],
    pub s_refs: Vec<f64>,
    pub c0: [f64; 2],
    pub discretization_tolerance: f64,
    /// Maximum accepted relative error against the configured model.
    pub tolerance: f64,
    /// Sample file for measured mode; defaults to `samples.txt` in the output directory.
    pub samples: Option<String>,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        let o = ReconstructionOptions::default();
        ReconstructionConfig {
            mode: ProviderMode::SyntheticDirect,
            s_grid: o.s_grid,
            simpson_refinement: o.simpson_refinement,
            gauss_nodes: o.gauss_nodes,
            thetas: o.thetas,
            s_refs: o.s_refs,
            c0: o.c0,
            discretization_tolerance: o.discretization_tolerance,
            tolerance: 0.02,
            samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: String,
    /// Any of `table`, `summary`, `fields`.
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: "out".into(),
            formats: vec!["table".into(), "summary".into()],
        }
    }
}

const FORMATS: [&str; 3] = ["table", "summary", "fields"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelismConfig {
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub levels: Vec<usize>,
    /// `s` of the probe used for the flux and residual rows.
    pub s: f64,
    /// Also run a synthetic-direct reconstruction per level.
    pub reconstruct: bool,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            levels: vec![2, 3, 4],
            s: 1.0,
            reconstruct: false,
        }
    }
}

/// Everything one run needs, read from a single TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: DomainConfig,
    pub model: ModelConfig,
    pub probes: ProbeConfig,
    pub solver: SolverOptions,
    pub linearization: LinearizationConfig,
    pub reconstruction: ReconstructionConfig,
    pub output: OutputConfig,
    pub parallelism: ParallelismConfig,
    pub forward: ForwardConfig,
    pub convergence: ConvergenceConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// Checks every field, reporting all offending fields at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut bad = |field: &str, msg: &str| errs.push(format!("{field}: {msg}"));
        let d = &self.domain;
        if !(d.radius > 0.0 && d.radius.is_finite()) {
            bad("domain.radius", "must be positive");
        }
        if d.refinement_level > crate::geometry::DEFAULT_MAX_LEVEL {
            bad("domain.refinement_level", "exceeds the maximum level");
        }
        match self.build_model() {
            Ok(m) => {
                if self.probes.r0 > m.constants.r0 {
                    bad("probes.r0", "exceeds the model's r0");
                }
            }
            Err(e) => bad("model", &e.to_string()),
        }
        let p = &self.probes;
        if !(p.r0 > 0.0) {
            bad("probes.r0", "must be positive");
        }
        if p.magnitudes.is_empty() || p.magnitudes.iter().any(|&m| !(m > 0.0 && m < p.r0 / 2f64.sqrt())) {
            bad("probes.magnitudes", "must be nonempty and lie in (0, r0/sqrt 2)");
        }
        if p.angles == 0 {
            bad("probes.angles", "must be positive");
        }
        if !(0.0..1.0).contains(&p.transversality_cutoff) {
            bad("probes.transversality_cutoff", "must lie in [0, 1)");
        }
        if p.s_values.is_empty() || p.s_values.iter().any(|s| !s.is_finite()) {
            bad("probes.s_values", "must be nonempty and finite");
        }
        if let Err(e) = self.solver.validate() {
            bad("solver", &e.to_string());
        }
        let l = &self.linearization;
        if l.steps.is_empty() || l.steps.iter().any(|&t| !(t > 0.0)) || l.steps.windows(2).any(|w| w[1] >= w[0]) {
            bad("linearization.steps", "must be positive and strictly decreasing");
        }
        if !(l.ratio_band > 0.0 && l.ratio_band < 0.5) {
            bad("linearization.ratio_band", "must lie in (0, 0.5)");
        }
        let e = &l.e2e_amplitudes;
        if e.len() != 2 || !(e[0] > e[1] && e[1] > 0.0) || e[0] > self.solver.complex_budget {
            bad(
                "linearization.e2e_amplitudes",
                "must be two decreasing positive values within solver.complex_budget",
            );
        }
        if let Err(e) = self.reconstruction_options().validate() {
            bad("reconstruction", &e.to_string());
        }
        if !(self.reconstruction.tolerance > 0.0) {
            bad("reconstruction.tolerance", "must be positive");
        }
        if self.output.directory.is_empty() {
            bad("output.directory", "must not be empty");
        }
        for f in &self.output.formats {
            if !FORMATS.contains(&f.as_str()) {
                bad("output.formats", &format!("unknown format `{f}`"));
            }
        }
        if self.convergence.levels.is_empty() || self.convergence.levels.windows(2).any(|w| w[1] <= w[0]) {
            bad("convergence.levels", "must be nonempty and strictly ascending");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs.join("; ")))
        }
    }

    pub fn build_model(&self) -> Result<ConductivityModel> {
        let m = builtin_model(&self.model.family, &self.model.parameters)?;
        match &self.model.constants {
            Some(c) => m.with_constants(c.clone()),
            None => Ok(m),
        }
    }

    pub fn reconstruction_options(&self) -> ReconstructionOptions {
        let r = &self.reconstruction;
        ReconstructionOptions {
            s_grid: r.s_grid.clone(),
            simpson_refinement: r.simpson_refinement,
            gauss_nodes: r.gauss_nodes,
            thetas: r.thetas,
            s_refs: r.s_refs.clone(),
            c0: r.c0,
            transversality_cutoff: self.probes.transversality_cutoff,
            discretization_tolerance: r.discretization_tolerance,
        }
    }

    pub fn build_space(&self, level: usize) -> Result<std::sync::Arc<FemSpace>> {
        let mesh = build_disk_mesh(self.domain.radius, level)?;
        FemSpace::with_rule(std::sync::Arc::new(mesh), self.domain.quadrature)
    }

    pub fn build_probes(&self, nu0: Point) -> Result<ProbeFamily> {
        let p = &self.probes;
        probe_family(p.r0, nu0, &p.magnitudes, p.angles, p.transversality_cutoff)
    }

    pub fn wants(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance and checksums of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub artifact_version: String,
    pub status: Status,
    pub timings: Vec<(String, f64)>,
    pub tolerances: Vec<(String, f64)>,
    /// `(file name relative to the output directory, sha256, bytes)`.
    pub files: Vec<(String, String, u64)>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.txt";

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "artifact = calderon-lab");
        let _ = writeln!(out, "artifact_version = {}", self.artifact_version);
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "status = {}", self.status.as_str());
        for (k, v) in &self.timings {
            let _ = writeln!(out, "timing.{k} = {v}");
        }
        for (k, v) in &self.tolerances {
            let _ = writeln!(out, "tolerance.{k} = {v:e}");
        }
        for (name, sum, bytes) in &self.files {
            let _ = writeln!(out, "file.{name} = {sum} {bytes}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = RunManifest {
            command: String::new(),
            config_hash: String::new(),
            artifact_version: String::new(),
            status: Status::Pass,
            timings: Vec::new(),
            tolerances: Vec::new(),
            files: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::parse(i + 1, "expected `key = value`"))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| Error::parse(i + 1, e.to_string()));
            match k {
                "artifact" => {}
                "artifact_version" => m.artifact_version = v.into(),
                "command" => m.command = v.into(),
                "config_hash" => m.config_hash = v.into(),
                "status" => {
                    m.status = Status::parse(v).ok_or_else(|| Error::parse(i + 1, format!("unknown status `{v}`")))?
                }
                _ if k.starts_with("timing.") => m.timings.push((k[7..].into(), num(v)?)),
                _ if k.starts_with("tolerance.") => m.tolerances.push((k[10..].into(), num(v)?)),
                _ if k.starts_with("file.") => {
                    let (sum, bytes) = v.split_once(' ').ok_or_else(|| Error::parse(i + 1, "expected checksum and size"))?;
                    let bytes = bytes.parse().map_err(|_| Error::parse(i + 1, "bad file size"))?;
                    m.files.push((k[5..].into(), sum.into(), bytes));
                }
                _ => return Err(Error::parse(i + 1, format!("unknown key `{k}`"))),
            }
        }
        Ok(m)
    }

    /// Names of listed files whose content no longer matches the checksum.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (name, sum, _) in &self.files {
            let bytes = fs::read(dir.join(name))?;
            if sha256_hex(&bytes) != *sum {
                bad.push(name.clone());
            }
        }
        Ok(bad)
    }
}

/// Outcome class of a finished run; [`Status::code`] is the process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    ToleranceFailure,
    SolverFailure,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::ToleranceFailure => 1,
            Status::SolverFailure => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::ToleranceFailure => "tolerance_failure",
            Status::SolverFailure => "solver_failure",
        }
    }

    pub fn parse(s: &str) -> Option<Status> {
        [Status::Pass, Status::ToleranceFailure, Status::SolverFailure]
            .into_iter()
            .find(|x| x.as_str() == s)
    }

    fn worst(self, other: Status) -> Status {
        if other.code() > self.code() {
            other
        } else {
            self
        }
    }
}

/// Exit status for an error that aborted a run.
pub fn error_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Parse { .. } | Error::Io(_) | Error::MissingSample(_) => 3,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub status: Status,
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    /// Human-readable lines worth printing.
    pub messages: Vec<String>,
}

/// Collects files, timings and tolerances while a run proceeds.
struct Recorder {
    command: &'static str,
    dir: PathBuf,
    config_hash: String,
    timings: Vec<(String, f64)>,
    tolerances: Vec<(String, f64)>,
    files: Vec<(String, String, u64)>,
    messages: Vec<String>,
    clock: Instant,
}

impl Recorder {
    fn new(command: &'static str, cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut r = Recorder {
            command,
            dir: dir.to_path_buf(),
            config_hash: cfg.hash(),
            timings: Vec::new(),
            tolerances: Vec::new(),
            files: Vec::new(),
            messages: Vec::new(),
            clock: Instant::now(),
        };
        r.write("config.toml", &cfg.to_toml())?;
        Ok(r)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, text)?;
        self.register(name)
    }

    fn register(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.dir.join(name))?;
        self.files.retain(|f| f.0 != name);
        self.files.push((name.into(), sha256_hex(&bytes), bytes.len() as u64));
        Ok(())
    }

    fn lap(&mut self, stage: &str) {
        self.timings.push((stage.into(), self.clock.elapsed().as_secs_f64()));
        self.clock = Instant::now();
    }

    fn tolerance(&mut self, name: &str, v: f64) {
        self.tolerances.push((name.into(), v));
    }

    fn say(&mut self, msg: impl Into<String>) {
        let m = msg.into();
        log::info!("{m}");
        self.messages.push(m);
    }

    fn finish(self, status: Status) -> Result<RunOutcome> {
        let manifest = RunManifest {
            command: self.command.into(),
            config_hash: self.config_hash,
            artifact_version: ARTIFACT_VERSION.into(),
            status,
            timings: self.timings,
            tolerances: self.tolerances,
            files: self.files,
        };
        fs::write(self.dir.join(RunManifest::FILE), manifest.to_text())?;
        Ok(RunOutcome {
            status,
            out_dir: self.dir,
            manifest,
            messages: self.messages,
        })
    }
}

/// Runs `f` on a pool of `workers` threads (0 = every core).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::ResourceLimit(e.to_string()))?;
    Ok(pool.install(f))
}

/// Samples the hypotheses on the default grid; fails if any condition fails.
pub fn run_verify_model(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut rec = Recorder::new("verify-model", cfg, out)?;
    let model = cfg.build_model()?;
    let report = verify_hypotheses(&model, &SamplingGrid::default())?;
    rec.lap("verify");
    rec.write("hypotheses.txt", &report.to_text())?;
    for c in &report.conditions {
        rec.tolerance(&format!("margin.{}", c.name), c.margin);
        if !c.passed {
            rec.say(format!("condition {} failed: {} (margin {:.3e})", c.name, c.description, c.margin));
        }
    }
    let status = if report.passed() {
        Status::Pass
    } else {
        Status::ToleranceFailure
    };
    rec.say(format!("model {}: {}", model.name, status.as_str()));
    rec.finish(status)
}

fn probe_points(cfg: &ExperimentConfig, mesh: &Mesh) -> Result<Vec<ProbePoint>> {
    let fam = cfg.build_probes(mesh.anchor_normal())?;
    Ok(cfg
        .probes
        .s_values
        .iter()
        .flat_map(|&s| fam.probes.iter().map(move |p| p.with_s(C64::new(s, 0.0), mesh.anchor_normal())))
        .collect())
}

fn describe_probe(p: &ProbePoint) -> String {
    format!("s = {}, p = ({}, {})", p.s, p.p[0], p.p[1])
}

/// Complex DN samples for every (s, probe) pair and configured datum.
pub fn run_forward(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut rec = Recorder::new("forward", cfg, out)?;
    let model = cfg.build_model()?;
    let space = cfg.build_space(cfg.domain.refinement_level)?;
    let mesh = space.mesh().clone();
    let probes = probe_points(cfg, &mesh)?;
    rec.lap("setup");
    let fields = cfg.wants("fields");
    type Item = (usize, usize, std::result::Result<(DNSample, Option<String>), String>);
    let results: Vec<Vec<Item>> = with_workers(cfg.parallelism.workers, || {
        probes
            .par_iter()
            .enumerate()
            .map(|(i, probe)| {
                let ctx = match ProbeContext::new(&space, &model, probe, &cfg.solver) {
                    Ok(c) => c,
                    Err(e) => return (0..cfg.forward.data.len()).map(|j| (i, j, Err(e.to_string()))).collect(),
                };
                cfg.forward
                    .data
                    .iter()
                    .enumerate()
                    .map(|(j, spec)| {
                        let h = spec.build(&mesh, probe);
                        let r = dn_complex_in(&ctx, &h, &cfg.solver).and_then(|s| {
                            let field = if fields {
                                Some(ctx.solve_quasilinear(&h.trace, Start::Linearized, &cfg.solver)?.0.to_text())
                            } else {
                                None
                            };
                            Ok((s, field))
                        });
                        (i, j, r.map_err(|e| e.to_string()))
                    })
                    .collect()
            })
            .collect()
    })?;
    rec.lap("solve");
    let mut samples = Vec::new();
    let mut failures = String::new();
    for (i, j, r) in results.into_iter().flatten() {
        match r {
            Ok((s, field)) => {
                if let Some(text) = field {
                    rec.write(&format!("fields/probe{i:03}_datum{j:02}.txt"), &text)?;
                }
                samples.push(s);
            }
            Err(e) => {
                let _ = writeln!(failures, "{} datum {j}: {e}", describe_probe(&probes[i]));
            }
        }
    }
    write_samples(&out.join("samples.txt"), mesh.anchor_normal(), &samples)?;
    rec.register("samples.txt")?;
    let status = if failures.is_empty() {
        Status::Pass
    } else {
        rec.write("failures.txt", &failures)?;
        rec.say(failures.trim_end().to_string());
        Status::SolverFailure
    };
    rec.say(format!("{} samples written", samples.len()));
    rec.finish(status)
}

/// Real DN samples of the configured real data.
pub fn run_dn_map(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut rec = Recorder::new("dn-map", cfg, out)?;
    let model = cfg.build_model()?;
    let space = cfg.build_space(cfg.domain.refinement_level)?;
    let mesh = space.mesh().clone();
    let dummy = ProbePoint::real_s(0.0, [C64::new(0.0, 0.0); 2], mesh.anchor_normal());
    let results: Vec<Result<DNSample>> = with_workers(cfg.parallelism.workers, || {
        cfg.forward
            .real_data
            .par_iter()
            .map(|spec| dn_real(&space, &model, &spec.build(&mesh, &dummy), &cfg.solver))
            .collect()
    })?;
    rec.lap("solve");
    let mut samples = Vec::new();
    let mut failures = String::new();
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => samples.push(s),
            Err(e @ Error::Validation(_)) => return Err(e),
            Err(e) => {
                let _ = writeln!(failures, "datum {j}: {e}");
            }
        }
    }
    write_samples(&out.join("samples.txt"), mesh.anchor_normal(), &samples)?;
    rec.register("samples.txt")?;
    let status = if failures.is_empty() {
        Status::Pass
    } else {
        rec.write("failures.txt", &failures)?;
        Status::SolverFailure
    };
    rec.say(format!("{} real DN samples written", samples.len()));
    rec.finish(status)
}

/// Whether the gap ratios of a Gateaux table sit in `0.5 +- band` above the floor.
pub fn gateaux_ratios_ok(table: &GateauxTable, band: f64, floor: f64) -> bool {
    table
        .rows
        .windows(2)
        .filter(|w| w[1].anchor_gap > floor)
        .all(|w| ((w[1].anchor_gap / w[0].anchor_gap) - 0.5).abs() <= band)
}

/// Gateaux tables (finite differences against the linearized map) per probe.
pub fn run_linearize(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut rec = Recorder::new("linearize", cfg, out)?;
    let model = cfg.build_model()?;
    let space = cfg.build_space(cfg.domain.refinement_level)?;
    let mesh = space.mesh().clone();
    let probes = probe_points(cfg, &mesh)?;
    let steps = &cfg.linearization.steps;
    let results: Vec<Result<(DNSample, DNSample, GateauxTable)>> = with_workers(cfg.parallelism.workers, || {
        probes
            .par_iter()
            .map(|probe| {
                let ctx = ProbeContext::new(&space, &model, probe, &cfg.solver)?;
                let h = cfg.linearization.datum.build(&mesh, probe);
                let lin = dn_linearized_in(&ctx, &h)?;
                let (fd, table) = gateaux_fd_in(&ctx, &h, steps, &cfg.solver)?;
                Ok((lin, fd, table))
            })
            .collect()
    })?;
    rec.lap("solve");
    let mut text = String::new();
    let mut samples = Vec::new();
    let mut status = Status::Pass;
    let mut worst_rich: f64 = 0.0;
    for (probe, r) in probes.iter().zip(results) {
        let _ = writeln!(text, "# {}", describe_probe(probe));
        match r {
            Ok((lin, fd, table)) => {
                text.push_str(&table.to_text());
                let floor = 1e-9 * lin.anchor_value.norm().max(1e-3);
                if !gateaux_ratios_ok(&table, cfg.linearization.ratio_band, floor) {
                    status = status.worst(Status::ToleranceFailure);
                    rec.say(format!("gap ratios out of band at {}", describe_probe(probe)));
                }
                worst_rich = worst_rich.max(table.richardson_gap);
                samples.push(lin);
                samples.push(fd);
            }
            Err(e) => {
                let _ = writeln!(text, "# failed: {e}");
                status = status.worst(Status::SolverFailure);
                rec.say(format!("{}: {e}", describe_probe(probe)));
            }
        }
    }
    rec.tolerance("richardson_gap", worst_rich);
    rec.write("gateaux.txt", &text)?;
    write_samples(&out.join("samples.txt"), mesh.anchor_normal(), &samples)?;
    rec.register("samples.txt")?;
    rec.finish(status)
}

fn samples_path(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    match &cfg.reconstruction.samples {
        Some(p) => PathBuf::from(p),
        None => out.join("samples.txt"),
    }
}

/// Recovers `a` on the configured grid and compares with the configured model.
///
/// In measured mode the model evaluator is disabled for the whole recovery
/// and only re-enabled for the ground-truth comparison afterwards.
pub fn run_reconstruct(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mode = cfg.reconstruction.mode;
    let opts = cfg.reconstruction_options();
    let model = cfg.build_model()?;
    let (provider, probes) = match mode {
        ProviderMode::Measured => {
            let path = samples_path(cfg, out);
            let (nu0, samples) = read_samples(&path)?;
            (DNProvider::measured(nu0, &samples), cfg.build_probes(nu0)?.probes)
        }
        _ => {
            let space = cfg.build_space(cfg.domain.refinement_level)?;
            let nu0 = space.mesh().anchor_normal();
            let prov = if mode == ProviderMode::EndToEnd {
                DNProvider::end_to_end(space, model.clone(), cfg.solver.clone(), cfg.linearization.e2e_amplitudes.clone())?
            } else {
                DNProvider::synthetic_direct(space, model.clone(), cfg.solver.clone())
            };
            (prov.recording(), cfg.build_probes(nu0)?.probes)
        }
    };
    let mut rec = Recorder::new("reconstruct", cfg, out)?;
    rec.lap("setup");
    if mode == ProviderMode::Measured {
        model.disable();
    }
    let result = with_workers(cfg.parallelism.workers, || recover_a(&provider, &probes, &opts));
    model.enable();
    let mut report = result??;
    rec.lap("recover");
    if mode != ProviderMode::Measured {
        write_samples(&out.join("samples.txt"), provider.nu0(), &provider.samples())?;
        rec.register("samples.txt")?;
    }
    report.attach_truth(&model)?;
    let summary = report.summary();
    if cfg.wants("table") {
        rec.write("reconstruction.txt", &report.to_text())?;
    }
    let mut text = report.summary_text();
    let _ = writeln!(text, "tolerance = {:e}", cfg.reconstruction.tolerance);
    let _ = writeln!(text, "a0_independent = {}", report.a0_independent());
    if cfg.wants("summary") {
        rec.write("summary.txt", &text)?;
    }
    let max_err = summary.max_rel_error.unwrap_or(f64::INFINITY);
    rec.tolerance("max_rel_error", max_err);
    rec.tolerance("max_a0_discrepancy", summary.max_a0_discrepancy);
    rec.tolerance("min_a0_margin", summary.min_a0_margin);
    let status = if summary.failed_probes > 0 {
        for p in report.probes.iter().filter_map(|p| p.error.as_ref()) {
            rec.say(p.clone());
        }
        Status::SolverFailure
    } else if max_err > cfg.reconstruction.tolerance || !report.a0_independent() {
        Status::ToleranceFailure
    } else {
        Status::Pass
    };
    rec.say(format!(
        "max relative error {max_err:.4e} (tolerance {:.1e}); a(0,p) independent of s_ref: {}",
        cfg.reconstruction.tolerance,
        report.a0_independent()
    ));
    rec.finish(status)
}

/// One row of the convergence table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub level: usize,
    pub h: f64,
    pub probe_residual: f64,
    pub control_residual: f64,
    pub linearized_error: f64,
    pub flux_error: f64,
    pub gateaux_gap: f64,
    pub reconstruction_error: Option<f64>,
}

/// Least-squares slope of `-log2(e)` against the level; `None` with fewer than two positive values.
pub fn fitted_rate(levels: &[usize], errors: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .zip(errors)
        .filter(|(_, e)| **e > 0.0 && e.is_finite())
        .map(|(&l, &e)| (l as f64, -e.log2()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn convergence_row(cfg: &ExperimentConfig, model: &ConductivityModel, level: usize) -> Result<ConvergenceRow> {
    let space = cfg.build_space(level)?;
    let mesh = space.mesh().clone();
    let nu0 = mesh.anchor_normal();
    let fam = cfg.build_probes(nu0)?;
    let base = fam
        .probes
        .iter()
        .max_by(|a, b| a.magnitude.total_cmp(&b.magnitude))
        .ok_or_else(|| Error::validation("no admissible probes"))?;
    let s = cfg.convergence.s;
    let probe = base.with_s(C64::new(s, 0.0), nu0);
    let m = probe.magnitude / 2f64.sqrt();
    let control = ProbePoint::real_s(s, [C64::new(m, 0.0), C64::new(m, 0.0)], nu0);
    let probe_res = probe_residual(&space, model, &probe)?;
    let control_res = probe_residual(&space, model, &control)?;

    let ctx = ProbeContext::new(&space, model, &probe, &cfg.solver)?;
    let c = C64::new(1.0, 0.0);
    let v = ctx.solve_linear(&BoundaryDatum::constant(&mesh, c).trace)?;
    let mut lin_err = v.max_error_against(|_| c);
    let q = probe.p;
    let v = ctx.solve_linear(&BoundaryDatum::linear(&mesh, q).trace)?;
    lin_err = lin_err.max(v.max_error_against(|x| q[0] * x[0] + q[1] * x[1]));

    let flux = dn_linearized_in(&ctx, &BoundaryDatum::constant(&mesh, c))?.anchor_value;
    let ev = model.evaluate(C64::new(s, 0.0), &q)?;
    let oracle = c * ev.ds * probe.p_dot(nu0);
    let flux_err = (flux - oracle).norm() / oracle.norm().max(f64::MIN_POSITIVE);

    let h = cfg.linearization.datum.build(&mesh, &probe);
    let (_, table) = gateaux_fd_in(&ctx, &h, &cfg.linearization.steps, &cfg.solver)?;
    let gap = table.rows.last().map(|r| r.anchor_gap).unwrap_or(f64::NAN);

    let reconstruction_error = if cfg.convergence.reconstruct {
        let prov = DNProvider::synthetic_direct(space.clone(), model.clone(), cfg.solver.clone());
        let mut rep = recover_a(&prov, &fam.probes, &cfg.reconstruction_options())?;
        rep.attach_truth(model)?;
        rep.summary().max_rel_error
    } else {
        None
    };
    Ok(ConvergenceRow {
        level,
        h: mesh.mesh_size_h,
        probe_residual: probe_res,
        control_residual: control_res,
        linearized_error: lin_err,
        flux_error: flux_err,
        gateaux_gap: gap,
        reconstruction_error,
    })
}

pub fn convergence_table(rows: &[ConvergenceRow]) -> String {
    let mut out = String::from(
        "# level\th\tprobe_residual\tcontrol_residual\tlinearized_error\tflux_error\tgateaux_gap\treconstruction_error\n",
    );
    for r in rows {
        let rec = r.reconstruction_error.map(|e| format!("{e:.6e}")).unwrap_or_else(|| "nan".into());
        let _ = writeln!(
            out,
            "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{rec}",
            r.level, r.h, r.probe_residual, r.control_residual, r.linearized_error, r.flux_error, r.gateaux_gap
        );
    }
    let levels: Vec<usize> = rows.iter().map(|r| r.level).collect();
    let col = |f: fn(&ConvergenceRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let rate = |v: Vec<f64>| fitted_rate(&levels, &v).map(|r| format!("{r:.3}")).unwrap_or_else(|| "nan".into());
    let _ = writeln!(
        out,
        "# rate\t-\t{}\t{}\t{}\t{}\t{}\t{}",
        rate(col(|r| r.probe_residual)),
        rate(col(|r| r.control_residual)),
        rate(col(|r| r.linearized_error)),
        rate(col(|r| r.flux_error)),
        rate(col(|r| r.gateaux_gap)),
        rate(col(|r| r.reconstruction_error.unwrap_or(f64::NAN)))
    );
    out
}

/// Per-level errors with fitted log2 rates.
pub fn run_convergence(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut rec = Recorder::new("convergence", cfg, out)?;
    let model = cfg.build_model()?;
    let mut rows = Vec::new();
    for &level in &cfg.convergence.levels {
        rows.push(with_workers(cfg.parallelism.workers, || convergence_row(cfg, &model, level))??);
        rec.lap(&format!("level{level}"));
    }
    let table = convergence_table(&rows);
    rec.write("convergence.txt", &table)?;
    let levels: Vec<usize> = rows.iter().map(|r| r.level).collect();
    if let Some(r) = fitted_rate(&levels, &rows.iter().map(|r| r.probe_residual).collect::<Vec<_>>()) {
        rec.tolerance("rate.probe_residual", r);
    }
    if let Some(r) = fitted_rate(&levels, &rows.iter().map(|r| r.flux_error).collect::<Vec<_>>()) {
        rec.tolerance("rate.flux_error", r);
    }
    rec.say(table.trim_end().to_string());
    rec.finish(Status::Pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn validation_names_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.domain.radius = -1.0;
        cfg.probes.magnitudes = vec![0.09];
        cfg.linearization.steps = vec![0.01, 0.02];
        let Err(Error::Validation(msg)) = cfg.validate() else {
            panic!("expected validation failure");
        };
        for f in ["domain.radius", "probes.magnitudes", "linearization.steps"] {
            assert!(msg.contains(f), "{msg}");
        }
        assert!(ExperimentConfig::from_toml("[domain]\nradiuss = 1.0").is_err());
        assert!(ExperimentConfig::from_toml("[model]\nfamily = \"nope\"").is_err());
    }

    #[test]
    fn manifest_text_round_trips() {
        let m = RunManifest {
            command: "forward".into(),
            config_hash: "ab".into(),
            artifact_version: ARTIFACT_VERSION.into(),
            status: Status::ToleranceFailure,
            timings: vec![("solve".into(), 0.25)],
            tolerances: vec![("gap".into(), 1.5e-7)],
            files: vec![("samples.txt".into(), "00ff".into(), 12)],
        };
        assert_eq!(RunManifest::from_text(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn rate_fit_oracle() {
        let e: Vec<f64> = (2..6).map(|l| 3.0 * 4f64.powi(-l)).collect();
        assert!((fitted_rate(&[2, 3, 4, 5], &e).unwrap() - 2.0).abs() < 1e-12);
        assert!(fitted_rate(&[2], &[1.0]).is_none());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(error_code(&Error::validation("x")), 3);
        assert_eq!(error_code(&Error::MissingSample("x".into())), 3);
        assert_eq!(error_code(&Error::Solver("x".into())), 2);
        assert_eq!(Status::Pass.code(), 0);
        assert_eq!(Status::ToleranceFailure.code(), 1);
        assert_eq!(Status::Pass.worst(Status::SolverFailure), Status::SolverFailure);
    }
}
