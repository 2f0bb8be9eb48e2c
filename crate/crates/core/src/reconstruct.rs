//! Constructive recovery of `a(s, p)` on the isotropic manifold from anchor
//! values of the linearized DN map.
//!
//! For a probe `p` with `p.p = 0` and `p.nu(0) != 0`:
//!
//! * `d_s a(s, p) = Gamma_l[c](0) / (c p.nu(0))` for a constant datum `c`;
//! * `a~(s, p) = int_0^s d_s a`, by composite Simpson;
//! * `a(0, p) = lim int_theta^1 F(eta) d eta` with
//!   `F(eta) = Gamma_l[eta p.x](0) / (eta p.nu(0)) - a~(s, eta p) - eta d/d eta a~(s, eta p)`,
//!   where the anchor value is taken at the probe `(s, eta p)`;
//! * `a(s, p) = a~(s, p) + a(0, p)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conductivity::{ConductivityModel, CVec, C64};
use crate::dnmap::{
    dn_linearized_in, fd_quotients_in, richardson, BoundaryDatum, DNSample, DatumParams, MapKind, Provenance,
};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::pde::{FemSpace, ProbeContext, ProbePoint, SolverOptions};

/// Admissible probes plus the ones rejected for lack of transversality.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFamily {
    pub probes: Vec<ProbePoint>,
    pub filtered: Vec<ProbePoint>,
}

/// `p = p0 + i p0_perp` with `p0 = m (cos theta_k, sin theta_k)`, `theta_k = 2 pi k / count`.
pub fn probe_family(
    r0: f64,
    nu0: Point,
    magnitudes: &[f64],
    count_angles: usize,
    transversality_cutoff: f64,
) -> Result<ProbeFamily> {
    if count_angles == 0 {
        return Err(Error::validation("probe family needs at least one angle"));
    }
    let mut probes = Vec::new();
    let mut filtered = Vec::new();
    for &m in magnitudes {
        if !(m > 0.0) || m >= r0 / std::f64::consts::SQRT_2 {
            return Err(Error::validation(format!(
                "probe magnitude {m} must lie in (0, r0/sqrt 2) = (0, {:.6})",
                r0 / std::f64::consts::SQRT_2
            )));
        }
        for k in 0..count_angles {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / count_angles as f64;
            let p0 = [m * theta.cos(), m * theta.sin()];
            let perp = [-p0[1], p0[0]];
            let p = [C64::new(p0[0], perp[0]), C64::new(p0[1], perp[1])];
            let probe = ProbePoint::real_s(0.0, p, nu0);
            if probe.transversality < transversality_cutoff * probe.magnitude {
                filtered.push(probe);
            } else {
                probes.push(probe);
            }
        }
    }
    if !filtered.is_empty() {
        log::info!("{} probes filtered for transversality", filtered.len());
    }
    Ok(ProbeFamily { probes, filtered })
}

/// Gauss-Legendre nodes and weights on `[a, b]`, nodes ascending.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = x;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    let (h, m) = (0.5 * (b - a), 0.5 * (b + a));
    (
        nodes.iter().map(|x| m + h * x).collect(),
        weights.iter().map(|w| h * w).collect(),
    )
}

/// Composite Simpson on equally spaced values (even number of intervals).
pub fn simpson(values: &[C64], step: f64) -> C64 {
    let n = values.len() - 1;
    debug_assert!(n % 2 == 0);
    let mut acc = values[0] + values[n];
    for (k, v) in values.iter().enumerate().take(n).skip(1) {
        acc += v * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * (step / 3.0)
}

/// Derivative of tabulated `f` at every node by three-point Lagrange differences
/// (centred inside, one-sided at the ends).
pub fn nonuniform_derivative(x: &[f64], f: &[C64]) -> Vec<C64> {
    let n = x.len();
    assert!(n >= 3 && f.len() == n);
    let stencil = |i0: usize, at: f64| {
        let (a, b, c) = (x[i0], x[i0 + 1], x[i0 + 2]);
        let la = (2.0 * at - b - c) / ((a - b) * (a - c));
        let lb = (2.0 * at - a - c) / ((b - a) * (b - c));
        let lc = (2.0 * at - a - b) / ((c - a) * (c - b));
        f[i0] * la + f[i0 + 1] * lb + f[i0 + 2] * lc
    };
    (0..n).map(|i| stencil(i.clamp(1, n - 2) - 1, x[i])).collect()
}

/// Datum of a provider query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryDatum {
    Constant(C64),
    Linear(CVec),
}

/// One anchor-flux question `(s, p, datum)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub s: f64,
    pub p: CVec,
    pub datum: QueryDatum,
}

/// Bitwise key of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryKey {
    s: u64,
    p: [u64; 4],
    kind: u8,
    datum: [u64; 4],
}

fn cbits(z: C64) -> [u64; 2] {
    [z.re.to_bits(), z.im.to_bits()]
}

fn pbits(p: &CVec) -> [u64; 4] {
    let (a, b) = (cbits(p[0]), cbits(p[1]));
    [a[0], a[1], b[0], b[1]]
}

impl Query {
    pub fn key(&self) -> QueryKey {
        let (kind, datum) = match self.datum {
            QueryDatum::Constant(c) => {
                let b = cbits(c);
                (0, [b[0], b[1], 0, 0])
            }
            QueryDatum::Linear(q) => (1, pbits(&q)),
        };
        QueryKey {
            s: self.s.to_bits(),
            p: pbits(&self.p),
            kind,
            datum,
        }
    }

    fn group(&self) -> (u64, [u64; 4]) {
        (self.s.to_bits(), pbits(&self.p))
    }

    pub fn describe(&self) -> String {
        let d = match self.datum {
            QueryDatum::Constant(c) => format!("constant {c}"),
            QueryDatum::Linear(q) => format!("linear ({}, {})", q[0], q[1]),
        };
        format!("(s = {}, p = ({}, {}), datum {d})", self.s, self.p[0], self.p[1])
    }

    fn from_sample(s: &DNSample) -> Option<Query> {
        if s.probe.s.im != 0.0 {
            return None;
        }
        let datum = match &s.datum_params {
            DatumParams::Constant(c) => QueryDatum::Constant(*c),
            DatumParams::Linear(q) => QueryDatum::Linear(*q),
            DatumParams::Custom(_) => return None,
        };
        Some(Query {
            s: s.probe.s.re,
            p: s.probe.p,
            datum,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    SyntheticDirect,
    EndToEnd,
    Measured,
}

enum Backend {
    Model {
        space: Arc<FemSpace>,
        model: ConductivityModel,
        opts: SolverOptions,
        /// Datum amplitudes of the finite-difference steps (end-to-end only).
        amplitudes: Vec<f64>,
    },
    Samples(HashMap<QueryKey, C64>),
}

/// Answers anchor-flux queries; identical queries return identical values.
pub struct DNProvider {
    mode: ProviderMode,
    nu0: Point,
    backend: Backend,
    cache: RwLock<HashMap<QueryKey, C64>>,
    recorded: Option<Mutex<BTreeMap<QueryKey, DNSample>>>,
}

impl std::fmt::Debug for DNProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DNProvider").field("mode", &self.mode).finish()
    }
}

impl DNProvider {
    /// Anchor values from linearized solves.
    pub fn synthetic_direct(space: Arc<FemSpace>, model: ConductivityModel, opts: SolverOptions) -> Self {
        DNProvider {
            mode: ProviderMode::SyntheticDirect,
            nu0: space.mesh().anchor_normal(),
            backend: Backend::Model {
                space,
                model,
                opts,
                amplitudes: Vec::new(),
            },
            cache: RwLock::new(HashMap::new()),
            recorded: None,
        }
    }

    /// Anchor values from Richardson-extrapolated Gateaux quotients of the
    /// complex quasilinear DN map. The step for datum `h` at amplitude `tau`
    /// is `tau / |h|_inf`.
    pub fn end_to_end(
        space: Arc<FemSpace>,
        model: ConductivityModel,
        opts: SolverOptions,
        amplitudes: Vec<f64>,
    ) -> Result<Self> {
        if amplitudes.len() != 2 || !(amplitudes[0] > amplitudes[1] && amplitudes[1] > 0.0) {
            return Err(Error::validation("end-to-end provider needs two decreasing positive amplitudes"));
        }
        if amplitudes[0] > opts.complex_budget {
            return Err(Error::validation("finite-difference amplitude exceeds the smallness budget"));
        }
        Ok(DNProvider {
            mode: ProviderMode::EndToEnd,
            nu0: space.mesh().anchor_normal(),
            backend: Backend::Model {
                space,
                model,
                opts,
                amplitudes,
            },
            cache: RwLock::new(HashMap::new()),
            recorded: None,
        })
    }

    /// Anchor values read from stored samples only.
    pub fn measured(nu0: Point, samples: &[DNSample]) -> Self {
        let mut index = HashMap::new();
        for s in samples {
            if let Some(q) = Query::from_sample(s) {
                index.insert(q.key(), s.anchor_value);
            }
        }
        DNProvider {
            mode: ProviderMode::Measured,
            nu0,
            backend: Backend::Samples(index),
            cache: RwLock::new(HashMap::new()),
            recorded: None,
        }
    }

    /// Keeps every computed sample for later persistence.
    pub fn recording(mut self) -> Self {
        self.recorded = Some(Mutex::new(BTreeMap::new()));
        self
    }

    pub fn mode(&self) -> ProviderMode {
        self.mode
    }

    pub fn nu0(&self) -> Point {
        self.nu0
    }

    /// Recorded samples in key order.
    pub fn samples(&self) -> Vec<DNSample> {
        self.recorded
            .as_ref()
            .map(|r| r.lock().expect("sample store").values().cloned().collect())
            .unwrap_or_default()
    }

    pub fn anchor_flux(&self, q: &Query) -> Result<C64> {
        let key = q.key();
        if let Some(v) = self.cache.read().expect("cache").get(&key) {
            return Ok(*v);
        }
        self.prefetch(std::slice::from_ref(q))?;
        Ok(self.cache.read().expect("cache")[&key])
    }

    /// Answers all `queries`, sharing one factorization per distinct `(s, p)`.
    pub fn prefetch(&self, queries: &[Query]) -> Result<()> {
        let mut groups: BTreeMap<(u64, [u64; 4]), Vec<Query>> = BTreeMap::new();
        {
            let cache = self.cache.read().expect("cache");
            for q in queries {
                if !cache.contains_key(&q.key()) {
                    let g = groups.entry(q.group()).or_default();
                    if !g.iter().any(|o| o.key() == q.key()) {
                        g.push(*q);
                    }
                }
            }
        }
        if groups.is_empty() {
            return Ok(());
        }
        let groups: Vec<Vec<Query>> = groups.into_values().collect();
        let results: Vec<Result<Vec<(Query, C64, Option<DNSample>)>>> =
            groups.par_iter().map(|g| self.compute_group(g)).collect();
        let mut cache = self.cache.write().expect("cache");
        for r in results {
            for (q, v, sample) in r? {
                cache.insert(q.key(), v);
                if let (Some(rec), Some(sample)) = (&self.recorded, sample) {
                    rec.lock().expect("sample store").insert(q.key(), sample);
                }
            }
        }
        Ok(())
    }

    fn compute_group(&self, group: &[Query]) -> Result<Vec<(Query, C64, Option<DNSample>)>> {
        match &self.backend {
            Backend::Samples(index) => group
                .iter()
                .map(|q| {
                    index
                        .get(&q.key())
                        .map(|v| (*q, *v, None))
                        .ok_or_else(|| Error::MissingSample(q.describe()))
                })
                .collect(),
            Backend::Model {
                space,
                model,
                opts,
                amplitudes,
            } => {
                let mesh = space.mesh();
                let probe = ProbePoint::real_s(group[0].s, group[0].p, mesh.anchor_normal());
                let ctx = ProbeContext::new(space, model, &probe, opts)?;
                group
                    .iter()
                    .map(|q| {
                        let h = match q.datum {
                            QueryDatum::Constant(c) => BoundaryDatum::constant(mesh, c),
                            QueryDatum::Linear(l) => BoundaryDatum::linear(mesh, l),
                        };
                        let sample = if self.mode == ProviderMode::EndToEnd {
                            let norm = h.sup_norm();
                            if norm == 0.0 {
                                return Err(Error::validation("zero datum queried from the end-to-end provider"));
                            }
                            let steps: Vec<f64> = amplitudes.iter().map(|a| a / norm).collect();
                            let quot = fd_quotients_in(&ctx, &h, &steps, opts)?;
                            let trace = richardson(&quot[0], &quot[1], steps[0] / steps[1]);
                            DNSample {
                                probe,
                                datum_id: h.id.clone(),
                                datum_params: h.params.clone(),
                                kind: MapKind::GateauxFd,
                                anchor_value: trace[mesh.anchor_slot()],
                                trace,
                                level: mesh.refinement_level,
                                provenance: Provenance::Richardson(steps[1]),
                            }
                        } else {
                            dn_linearized_in(&ctx, &h)?
                        };
                        Ok((*q, sample.anchor_value, Some(sample)))
                    })
                    .collect()
            }
        }
    }
}

/// Knobs of the reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionOptions {
    pub s_grid: Vec<f64>,
    /// Simpson subintervals per s-grid interval (even).
    pub simpson_refinement: usize,
    pub gauss_nodes: usize,
    pub thetas: [f64; 2],
    pub s_refs: Vec<f64>,
    pub c0: [f64; 2],
    /// Probes with `|p.nu(0)| < cutoff |p|` are rejected.
    pub transversality_cutoff: f64,
    /// Externally estimated discretization error of `a(0, p)`, added to the bar.
    pub discretization_tolerance: f64,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        ReconstructionOptions {
            s_grid: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            simpson_refinement: 4,
            gauss_nodes: 16,
            thetas: [1e-2, 5e-3],
            s_refs: vec![0.0, 0.5],
            c0: [1.0, 0.0],
            transversality_cutoff: 0.1,
            discretization_tolerance: 0.0,
        }
    }
}

impl ReconstructionOptions {
    pub fn c0(&self) -> C64 {
        C64::new(self.c0[0], self.c0[1])
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.s_grid;
        if g.is_empty() || !g.contains(&0.0) {
            return Err(Error::validation("reconstruction.s_grid must contain 0"));
        }
        if g.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("reconstruction.s_grid must be strictly increasing"));
        }
        if self.simpson_refinement == 0 || self.simpson_refinement % 2 == 1 {
            return Err(Error::validation("reconstruction.simpson_refinement must be even and positive"));
        }
        if self.gauss_nodes < 3 {
            return Err(Error::validation("reconstruction.gauss_nodes must be at least 3"));
        }
        let [t1, t2] = self.thetas;
        if !(t1 > 0.0 && t2 > 0.0 && t1 < 1.0 && t2 < 1.0 && t1 != t2) {
            return Err(Error::validation("reconstruction.thetas must be two distinct values in (0, 1)"));
        }
        if self.s_refs.is_empty() {
            return Err(Error::validation("reconstruction.s_refs must not be empty"));
        }
        if self.c0() == C64::new(0.0, 0.0) {
            return Err(Error::validation("reconstruction.c0 must be nonzero"));
        }
        if !(self.transversality_cutoff >= 0.0) || !(self.discretization_tolerance >= 0.0) {
            return Err(Error::validation("reconstruction tolerances must be nonnegative"));
        }
        Ok(())
    }
}

fn check_transversal(p: &ProbePoint, cutoff: f64) -> Result<()> {
    if p.transversality <= cutoff * p.magnitude || p.transversality == 0.0 {
        return Err(Error::Transversality {
            value: p.transversality,
            cutoff: cutoff * p.magnitude,
        });
    }
    Ok(())
}

/// `Gamma_l[c0](0) / (c0 p.nu(0))` at `(s, p)`.
pub fn recover_ds_a(provider: &DNProvider, s: f64, p: &ProbePoint, c0: C64, cutoff: f64) -> Result<C64> {
    check_transversal(p, cutoff)?;
    let flux = provider.anchor_flux(&Query {
        s,
        p: p.p,
        datum: QueryDatum::Constant(c0),
    })?;
    Ok(flux / (c0 * p.p_dot(provider.nu0())))
}

/// Fine node set between consecutive grid values, `refinement` intervals each.
fn fine_nodes(grid: &[f64], refinement: usize) -> Vec<f64> {
    let mut out = vec![grid[0]];
    for w in grid.windows(2) {
        for j in 1..=refinement {
            out.push(w[0] + (w[1] - w[0]) * j as f64 / refinement as f64);
        }
    }
    out
}

/// Nodes of `[0, s]` split into `n` equal intervals.
fn interval_nodes(s: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|j| s * j as f64 / n as f64).collect()
}

/// `a~(s, p)` at every grid value, with the `d_s a` samples on the fine nodes.
pub fn recover_a_tilde(
    provider: &DNProvider,
    s_grid: &[f64],
    p: &ProbePoint,
    c0: C64,
    refinement: usize,
    cutoff: f64,
) -> Result<(Vec<C64>, Vec<(f64, C64)>)> {
    let zero = s_grid
        .iter()
        .position(|&s| s == 0.0)
        .ok_or_else(|| Error::validation("s grid must contain 0"))?;
    let nodes = fine_nodes(s_grid, refinement);
    let queries: Vec<Query> = nodes
        .iter()
        .map(|&s| Query {
            s,
            p: p.p,
            datum: QueryDatum::Constant(c0),
        })
        .collect();
    provider.prefetch(&queries)?;
    let ds = nodes
        .iter()
        .map(|&s| recover_ds_a(provider, s, p, c0, cutoff))
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![C64::new(0.0, 0.0); s_grid.len()];
    // integrate outward from 0 panel by panel
    for k in zero + 1..s_grid.len() {
        let seg = &ds[(k - 1) * refinement..=k * refinement];
        values[k] = values[k - 1] + simpson(seg, (s_grid[k] - s_grid[k - 1]) / refinement as f64);
    }
    for k in (0..zero).rev() {
        let seg = &ds[k * refinement..=(k + 1) * refinement];
        values[k] = values[k + 1] - simpson(seg, (s_grid[k + 1] - s_grid[k]) / refinement as f64);
    }
    Ok((values, nodes.into_iter().zip(ds).collect()))
}

/// `a(0, p)` recovered with one reference value of `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct A0Estimate {
    pub s_ref: f64,
    pub value: C64,
    /// Disagreement between the linear theta-extrapolation and a
    /// rectangle-rule closure of `[0, theta_min]`.
    pub theta_bar: f64,
    /// Richardson estimate of the Simpson error in `a~(s_ref, eta p)`.
    pub simpson_bar: f64,
    /// `(theta, int_theta^1 F)` for each theta.
    pub partial_integrals: Vec<(f64, C64)>,
    pub warning: Option<String>,
}

impl A0Estimate {
    pub fn bar(&self) -> f64 {
        self.theta_bar + self.simpson_bar
    }
}

/// `a~(s, q)` at `s` by composite Simpson with `n` intervals, plus the
/// half-resolution Richardson error estimate.
fn a_tilde_point(provider: &DNProvider, s: f64, q: &ProbePoint, c0: C64, n: usize, cutoff: f64) -> Result<(C64, f64)> {
    if s == 0.0 {
        return Ok((C64::new(0.0, 0.0), 0.0));
    }
    let nodes = interval_nodes(s, n);
    let ds = nodes
        .iter()
        .map(|&x| recover_ds_a(provider, x, q, c0, cutoff))
        .collect::<Result<Vec<_>>>()?;
    let fine = simpson(&ds, s / n as f64);
    let bar = if n % 4 == 0 {
        let coarse: Vec<C64> = ds.iter().step_by(2).copied().collect();
        (fine - simpson(&coarse, 2.0 * s / n as f64)).norm() / 15.0
    } else {
        0.0
    };
    Ok((fine, bar))
}

fn a0_queries(p: &ProbePoint, s_ref: f64, etas: &[f64], c0: C64, n: usize) -> Vec<Query> {
    let mut out = Vec::new();
    for &eta in etas {
        let q = [p.p[0] * eta, p.p[1] * eta];
        if s_ref != 0.0 {
            for x in interval_nodes(s_ref, n) {
                out.push(Query {
                    s: x,
                    p: q,
                    datum: QueryDatum::Constant(c0),
                });
            }
        }
        out.push(Query {
            s: s_ref,
            p: q,
            datum: QueryDatum::Linear(q),
        });
    }
    out
}

/// `a(0, p)` by Gauss-Legendre on `[theta, 1]` for both thetas and linear
/// extrapolation `theta -> 0`.
pub fn recover_a0(
    provider: &DNProvider,
    p: &ProbePoint,
    s_ref: f64,
    opts: &ReconstructionOptions,
) -> Result<A0Estimate> {
    let c0 = opts.c0();
    let cutoff = opts.transversality_cutoff;
    check_transversal(p, cutoff)?;
    let nu0 = provider.nu0();
    let n = opts.simpson_refinement;
    let rules: Vec<(f64, Vec<f64>, Vec<f64>)> = opts
        .thetas
        .iter()
        .map(|&t| {
            let (x, w) = gauss_legendre(opts.gauss_nodes, t, 1.0);
            (t, x, w)
        })
        .collect();
    let all_etas: Vec<f64> = rules.iter().flat_map(|r| r.1.iter().copied()).collect();
    provider.prefetch(&a0_queries(p, s_ref, &all_etas, c0, n))?;

    let mut partial = Vec::new();
    let mut simpson_bar: f64 = 0.0;
    let mut smallest_node = (f64::INFINITY, C64::new(0.0, 0.0));
    for (theta, etas, weights) in &rules {
        let mut tilde = Vec::with_capacity(etas.len());
        for &eta in etas {
            let q = p.scaled(eta, nu0);
            if q.magnitude >= p.magnitude * (1.0 + 1e-12) {
                return Err(Error::validation("ray node leaves the probe ball"));
            }
            let (v, bar) = a_tilde_point(provider, s_ref, &q, c0, n, cutoff)?;
            simpson_bar = simpson_bar.max(bar);
            tilde.push(v);
        }
        let deriv = nonuniform_derivative(etas, &tilde);
        let mut integral = C64::new(0.0, 0.0);
        for (k, &eta) in etas.iter().enumerate() {
            let q = p.scaled(eta, nu0);
            let flux = provider.anchor_flux(&Query {
                s: s_ref,
                p: q.p,
                datum: QueryDatum::Linear(q.p),
            })?;
            let pn = q.p_dot(nu0);
            let f = flux / pn - tilde[k] - deriv[k] * eta;
            integral += f * weights[k];
            if eta < smallest_node.0 {
                smallest_node = (eta, f);
            }
        }
        partial.push((*theta, integral));
    }
    let (t1, i1) = partial[0];
    let (t2, i2) = partial[1];
    let value = (i2 * t1 - i1 * t2) / (t1 - t2);
    let (tmin, imin) = if t1 < t2 { (t1, i1) } else { (t2, i2) };
    let theta_bar = (value - (imin + smallest_node.1 * tmin)).norm();
    let warning = if theta_bar > 1e-3 * value.norm() {
        Some(format!("theta extrapolation disagreement {theta_bar:.3e} for s_ref = {s_ref}"))
    } else {
        None
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(A0Estimate {
        s_ref,
        value,
        theta_bar,
        simpson_bar,
        partial_integrals: partial,
        warning,
    })
}

/// Relative rounding allowance in the `s_ref` comparison of `a(0, p)`.
pub const A0_ROUNDING: f64 = 1e-12;

/// Everything recovered for one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub probe: ProbePoint,
    pub error: Option<String>,
    /// `(s, d_s a)` on the fine Simpson nodes.
    pub ds_a: Vec<(f64, C64)>,
    pub a_tilde: Vec<C64>,
    pub a0: C64,
    pub a0_estimates: Vec<A0Estimate>,
    pub a: Vec<C64>,
    pub truth: Option<Vec<C64>>,
    pub rel_error: Option<Vec<f64>>,
}

impl ProbeResult {
    /// `max |a0(s_ref_i) - a0(s_ref_0)|` over the reference values.
    pub fn a0_discrepancy(&self) -> f64 {
        self.a0_estimates
            .iter()
            .map(|e| (e.value - self.a0).norm())
            .fold(0.0, f64::max)
    }

    /// Quadrature bars of all references, a rounding allowance and the
    /// external discretization tolerance.
    pub fn a0_bar(&self, discretization_tolerance: f64) -> f64 {
        self.a0_estimates.iter().map(|e| e.bar()).sum::<f64>()
            + A0_ROUNDING * self.a0.norm()
            + discretization_tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    pub mode: ProviderMode,
    pub s_grid: Vec<f64>,
    pub options: ReconstructionOptions,
    /// Gauss-Legendre nodes per theta.
    pub eta_grids: Vec<(f64, Vec<f64>)>,
    pub probes: Vec<ProbeResult>,
}

/// Summary numbers of a report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionSummary {
    pub max_rel_error: Option<f64>,
    pub mean_rel_error: Option<f64>,
    pub max_a0_discrepancy: f64,
    pub min_a0_margin: f64,
    pub failed_probes: usize,
}

impl ReconstructionReport {
    /// Compares against a ground-truth model; the model must be enabled.
    pub fn attach_truth(&mut self, model: &ConductivityModel) -> Result<()> {
        for pr in &mut self.probes {
            if pr.error.is_some() {
                continue;
            }
            let truth = self
                .s_grid
                .iter()
                .map(|&s| model.evaluate(C64::new(s, 0.0), &pr.probe.p).map(|e| e.value))
                .collect::<Result<Vec<_>>>()?;
            pr.rel_error = Some(pr.a.iter().zip(&truth).map(|(a, t)| (a - t).norm() / t.norm()).collect());
            pr.truth = Some(truth);
        }
        Ok(())
    }

    pub fn summary(&self) -> ReconstructionSummary {
        let ok: Vec<&ProbeResult> = self.probes.iter().filter(|p| p.error.is_none()).collect();
        let errs: Vec<f64> = ok.iter().filter_map(|p| p.rel_error.as_ref()).flatten().copied().collect();
        let has_truth = !ok.is_empty() && ok.iter().all(|p| p.rel_error.is_some());
        let tol = self.options.discretization_tolerance;
        ReconstructionSummary {
            max_rel_error: has_truth.then(|| errs.iter().copied().fold(0.0, f64::max)),
            mean_rel_error: has_truth.then(|| errs.iter().sum::<f64>() / errs.len().max(1) as f64),
            max_a0_discrepancy: ok.iter().map(|p| p.a0_discrepancy()).fold(0.0, f64::max),
            min_a0_margin: ok
                .iter()
                .map(|p| p.a0_bar(tol) - p.a0_discrepancy())
                .fold(f64::INFINITY, f64::min),
            failed_probes: self.probes.len() - ok.len(),
        }
    }

    /// Whether every probe's `a(0, p)` agrees across `s_ref` within its bar.
    pub fn a0_independent(&self) -> bool {
        self.summary().min_a0_margin >= 0.0
    }

    /// Tab-separated table, one row per (probe, s) pair.
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "# s\tp1_re\tp1_im\tp2_re\tp2_im\tat_re\tat_im\ta0_re\ta0_im\ta_re\ta_im\ttruth_re\ttruth_im\trel_error\n",
        );
        for pr in &self.probes {
            let p = pr.probe.p;
            if let Some(e) = &pr.error {
                let _ = writeln!(
                    out,
                    "# probe ({}, {}) failed: {e}",
                    p[0], p[1]
                );
                continue;
            }
            for (k, &s) in self.s_grid.iter().enumerate() {
                let (t, e) = match (&pr.truth, &pr.rel_error) {
                    (Some(t), Some(e)) => (format!("{}\t{}", t[k].re, t[k].im), format!("{}", e[k])),
                    _ => ("nan\tnan".to_string(), "nan".to_string()),
                };
                let _ = writeln!(
                    out,
                    "{s}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{t}\t{e}",
                    p[0].re, p[0].im, p[1].re, p[1].im, pr.a_tilde[k].re, pr.a_tilde[k].im, pr.a0.re, pr.a0.im,
                    pr.a[k].re, pr.a[k].im
                );
            }
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let s = self.summary();
        let mut out = String::new();
        let _ = writeln!(out, "mode = {:?}", self.mode);
        let _ = writeln!(out, "probes = {}", self.probes.len());
        let _ = writeln!(out, "failed_probes = {}", s.failed_probes);
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(out, "max_rel_error = {}", fmt(s.max_rel_error));
        let _ = writeln!(out, "mean_rel_error = {}", fmt(s.mean_rel_error));
        let _ = writeln!(out, "max_a0_discrepancy = {:.6e}", s.max_a0_discrepancy);
        let _ = writeln!(out, "min_a0_margin = {:.6e}", s.min_a0_margin);
        let _ = writeln!(out, "s_refs = {:?}", self.options.s_refs);
        let _ = writeln!(
            out,
            "quadrature = simpson x{} in s, gauss-legendre {} in eta, thetas {:?}",
            self.options.simpson_refinement, self.options.gauss_nodes, self.options.thetas
        );
        for pr in &self.probes {
            for e in &pr.a0_estimates {
                if let Some(w) = &e.warning {
                    let _ = writeln!(out, "warning = {w}");
                }
            }
        }
        out
    }
}

fn recover_probe(provider: &DNProvider, p: &ProbePoint, opts: &ReconstructionOptions) -> Result<ProbeResult> {
    let c0 = opts.c0();
    let (a_tilde, ds_a) = recover_a_tilde(
        provider,
        &opts.s_grid,
        p,
        c0,
        opts.simpson_refinement,
        opts.transversality_cutoff,
    )?;
    let a0_estimates = opts
        .s_refs
        .iter()
        .map(|&s| recover_a0(provider, p, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let a0 = a0_estimates[0].value;
    let a = a_tilde.iter().map(|t| t + a0).collect();
    Ok(ProbeResult {
        probe: *p,
        error: None,
        ds_a,
        a_tilde,
        a0,
        a0_estimates,
        a,
        truth: None,
        rel_error: None,
    })
}

/// Recovers `a = a~ + a(0, p)` on `s_grid x probes`; probes run concurrently
/// and a failing probe is reported without aborting the others.
pub fn recover_a(
    provider: &DNProvider,
    probes: &[ProbePoint],
    opts: &ReconstructionOptions,
) -> Result<ReconstructionReport> {
    opts.validate()?;
    let results: Vec<ProbeResult> = probes
        .par_iter()
        .map(|p| {
            recover_probe(provider, p, opts).unwrap_or_else(|e| {
                log::error!("probe ({}, {}) failed: {e}", p.p[0], p.p[1]);
                ProbeResult {
                    probe: *p,
                    error: Some(e.to_string()),
                    ds_a: Vec::new(),
                    a_tilde: Vec::new(),
                    a0: C64::new(f64::NAN, f64::NAN),
                    a0_estimates: Vec::new(),
                    a: Vec::new(),
                    truth: None,
                    rel_error: None,
                }
            })
        })
        .collect();
    let eta_grids = opts
        .thetas
        .iter()
        .map(|&t| (t, gauss_legendre(opts.gauss_nodes, t, 1.0).0))
        .collect();
    Ok(ReconstructionReport {
        mode: provider.mode(),
        s_grid: opts.s_grid.clone(),
        options: opts.clone(),
        eta_grids,
        probes: results,
    })
}
