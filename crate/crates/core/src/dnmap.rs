//! Dirichlet-to-Neumann traces of the real, complex and linearized problems,
//! the finite-difference Gateaux quotient linking the last two, and the
//! line-oriented sample file format.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::conductivity::{ConductivityModel, CVec, C64, ZERO};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, Point};
use crate::pde::{
    solve_quasilinear_real, FemSpace, ProbeContext, ProbePoint, QuasilinearProblem, SolverOptions, Start,
};

/// Default Gateaux steps.
pub const DEFAULT_FD_STEPS: [f64; 4] = [0.04, 0.02, 0.01, 0.005];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatumKind {
    Constant,
    LinearProbe,
    Custom,
}

/// Parameters that identify a datum independently of the mesh.
#[derive(Debug, Clone, PartialEq)]
pub enum DatumParams {
    Constant(C64),
    /// Trace of `q . x`.
    Linear(CVec),
    /// Opaque parameters of a custom datum, recorded verbatim.
    Custom(Vec<f64>),
}

impl DatumParams {
    pub fn kind(&self) -> DatumKind {
        match self {
            DatumParams::Constant(_) => DatumKind::Constant,
            DatumParams::Linear(_) => DatumKind::LinearProbe,
            DatumParams::Custom(_) => DatumKind::Custom,
        }
    }

    /// Flat parameter list used in records and cache keys.
    pub fn values(&self) -> Vec<f64> {
        match self {
            DatumParams::Constant(c) => vec![c.re, c.im],
            DatumParams::Linear(q) => vec![q[0].re, q[0].im, q[1].re, q[1].im],
            DatumParams::Custom(v) => v.clone(),
        }
    }
}

/// Dirichlet datum sampled at the boundary vertices (loop order).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryDatum {
    pub id: String,
    pub params: DatumParams,
    pub trace: Vec<C64>,
}

impl BoundaryDatum {
    pub fn constant(mesh: &Mesh, c: C64) -> Self {
        BoundaryDatum {
            id: "const".into(),
            params: DatumParams::Constant(c),
            trace: vec![c; mesh.boundary_loop().len()],
        }
    }

    /// Trace of `q . x` (bilinear product, no conjugation).
    pub fn linear(mesh: &Mesh, q: CVec) -> Self {
        BoundaryDatum {
            id: "linear".into(),
            params: DatumParams::Linear(q),
            trace: mesh
                .boundary_loop()
                .iter()
                .map(|&v| {
                    let x = mesh.vertices[v];
                    q[0] * x[0] + q[1] * x[1]
                })
                .collect(),
        }
    }

    /// Interpolates `f` at the boundary vertices.
    pub fn custom(mesh: &Mesh, id: impl Into<String>, params: Vec<f64>, f: impl Fn(Point) -> C64) -> Self {
        BoundaryDatum {
            id: id.into(),
            params: DatumParams::Custom(params),
            trace: mesh.boundary_loop().iter().map(|&v| f(mesh.vertices[v])).collect(),
        }
    }

    pub fn kind(&self) -> DatumKind {
        self.params.kind()
    }

    pub fn sup_norm(&self) -> f64 {
        self.trace.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn is_real(&self) -> bool {
        self.trace.iter().all(|z| z.im == 0.0)
    }

    pub fn real_trace(&self) -> Result<Vec<f64>> {
        if !self.is_real() {
            return Err(Error::validation(format!("datum `{}` is not real", self.id)));
        }
        Ok(self.trace.iter().map(|z| z.re).collect())
    }

    fn scaled_trace(&self, t: f64) -> Vec<C64> {
        self.trace.iter().map(|z| z * t).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapKind {
    Real,
    Complex,
    Linearized,
    GateauxFd,
}

impl MapKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MapKind::Real => "real",
            MapKind::Complex => "complex",
            MapKind::Linearized => "linearized",
            MapKind::GateauxFd => "gateaux_fd",
        }
    }

    pub fn parse(s: &str) -> Option<MapKind> {
        Some(match s {
            "real" => MapKind::Real,
            "complex" => MapKind::Complex,
            "linearized" => MapKind::Linearized,
            "gateaux_fd" => MapKind::GateauxFd,
            _ => return None,
        })
    }
}

/// How a trace was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    Direct,
    /// Difference quotient with the given step.
    FiniteDifference(f64),
    /// Richardson combination `2 Q(t) - Q(2t)`; records the smaller step.
    Richardson(f64),
}

/// One DN trace with the metadata needed to replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct DNSample {
    pub probe: ProbePoint,
    pub datum_id: String,
    pub datum_params: DatumParams,
    pub kind: MapKind,
    pub trace: Vec<C64>,
    pub anchor_value: C64,
    pub level: usize,
    pub provenance: Provenance,
}

impl DNSample {
    fn new(
        mesh: &Mesh,
        probe: ProbePoint,
        datum: &BoundaryDatum,
        kind: MapKind,
        trace: Vec<C64>,
        provenance: Provenance,
    ) -> Self {
        DNSample {
            probe,
            datum_id: datum.id.clone(),
            datum_params: datum.params.clone(),
            kind,
            anchor_value: trace[mesh.anchor_slot()],
            trace,
            level: mesh.refinement_level,
            provenance,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.trace.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// One whitespace-separated record; floats use shortest round-trip form.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        let s = self.probe.s;
        let p = self.probe.p;
        let _ = write!(
            out,
            "{} {} {} {} {} {} {} {}",
            self.kind.as_str(),
            s.re,
            s.im,
            p[0].re,
            p[0].im,
            p[1].re,
            p[1].im,
            self.datum_id
        );
        let params = self.datum_params.values();
        let kind = match self.datum_params.kind() {
            DatumKind::Constant => "constant",
            DatumKind::LinearProbe => "linear_probe",
            DatumKind::Custom => "custom",
        };
        let _ = write!(out, " {} {}", kind, params.len());
        for v in params {
            let _ = write!(out, " {v}");
        }
        let (prov, step) = match self.provenance {
            Provenance::Direct => ("direct", 0.0),
            Provenance::FiniteDifference(t) => ("fd", t),
            Provenance::Richardson(t) => ("richardson", t),
        };
        let _ = write!(
            out,
            " {} {} {} {} {} {}",
            self.level,
            self.anchor_value.re,
            self.anchor_value.im,
            prov,
            step,
            self.trace.len()
        );
        for z in &self.trace {
            let _ = write!(out, " {} {}", z.re, z.im);
        }
        out
    }

    pub fn from_record(line: &str, line_no: usize, nu0: Point) -> Result<DNSample> {
        let mut it = line.split_whitespace();
        let mut next = |what: &str| it.next().ok_or_else(|| Error::parse(line_no, format!("missing {what}")));
        let kind_s = next("map kind")?;
        let kind = MapKind::parse(kind_s).ok_or_else(|| Error::parse(line_no, format!("unknown map kind `{kind_s}`")))?;
        let f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::parse(line_no, format!("bad number `{s}`: {e}")))
        };
        let n = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|e| Error::parse(line_no, format!("bad count `{s}`: {e}")))
        };
        let s = C64::new(f(next("s")?)?, f(next("s")?)?);
        let p0 = C64::new(f(next("p")?)?, f(next("p")?)?);
        let p1 = C64::new(f(next("p")?)?, f(next("p")?)?);
        let datum_id = next("datum id")?.to_string();
        let dkind = next("datum kind")?.to_string();
        let np = n(next("parameter count")?)?;
        let mut params = Vec::with_capacity(np);
        for _ in 0..np {
            params.push(f(next("parameter")?)?);
        }
        let datum_params = match (dkind.as_str(), params.len()) {
            ("constant", 2) => DatumParams::Constant(C64::new(params[0], params[1])),
            ("linear_probe", 4) => DatumParams::Linear([C64::new(params[0], params[1]), C64::new(params[2], params[3])]),
            ("custom", _) => DatumParams::Custom(params),
            _ => return Err(Error::parse(line_no, format!("bad datum kind `{dkind}` with {np} parameters"))),
        };
        let level = n(next("level")?)?;
        let anchor_value = C64::new(f(next("anchor")?)?, f(next("anchor")?)?);
        let prov = next("provenance")?.to_string();
        let step = f(next("step")?)?;
        let provenance = match prov.as_str() {
            "direct" => Provenance::Direct,
            "fd" => Provenance::FiniteDifference(step),
            "richardson" => Provenance::Richardson(step),
            other => return Err(Error::parse(line_no, format!("unknown provenance `{other}`"))),
        };
        let nt = n(next("trace count")?)?;
        let mut trace = Vec::with_capacity(nt);
        for _ in 0..nt {
            trace.push(C64::new(f(next("trace")?)?, f(next("trace")?)?));
        }
        if it.next().is_some() {
            return Err(Error::parse(line_no, "trailing fields"));
        }
        Ok(DNSample {
            probe: ProbePoint::new(s, [p0, p1], nu0),
            datum_id,
            datum_params,
            kind,
            trace,
            anchor_value,
            level,
            provenance,
        })
    }
}

pub const SAMPLE_HEADER: &str = "# calderon-lab dn samples v1";

/// Header, anchor normal, column legend, then one record per sample.
pub fn samples_to_text(nu0: Point, samples: &[DNSample]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SAMPLE_HEADER}");
    let _ = writeln!(out, "# nu0 {} {}", nu0[0], nu0[1]);
    let _ = writeln!(
        out,
        "# kind s_re s_im p1_re p1_im p2_re p2_im datum_id datum_kind n_params params.. level anchor_re anchor_im provenance step n_trace (re im)*"
    );
    for s in samples {
        out.push_str(&s.to_record());
        out.push('\n');
    }
    out
}

pub fn samples_from_text(text: &str) -> Result<(Point, Vec<DNSample>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == SAMPLE_HEADER => {}
        _ => return Err(Error::parse(1, "missing sample file header")),
    }
    let mut nu0 = None;
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("# nu0") {
            let v: Vec<f64> = rest
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(i + 1, format!("bad normal: {e}")))?;
            if v.len() != 2 {
                return Err(Error::parse(i + 1, "normal needs two components"));
            }
            nu0 = Some([v[0], v[1]]);
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nu = nu0.ok_or_else(|| Error::parse(i + 1, "record before the `# nu0` line"))?;
        out.push(DNSample::from_record(line, i + 1, nu)?);
    }
    let nu = nu0.ok_or_else(|| Error::parse(1, "missing `# nu0` line"))?;
    Ok((nu, out))
}

pub fn write_samples(path: &Path, nu0: Point, samples: &[DNSample]) -> Result<()> {
    std::fs::write(path, samples_to_text(nu0, samples))?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<(Point, Vec<DNSample>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    samples_from_text(&text)
}

fn anchor_probe(mesh: &Mesh, s: C64, p: CVec) -> ProbePoint {
    ProbePoint::new(s, p, mesh.anchor_normal())
}

/// DN trace of the real quasilinear problem with boundary datum `f`.
pub fn dn_real(
    space: &Arc<FemSpace>,
    model: &ConductivityModel,
    f: &BoundaryDatum,
    opts: &SolverOptions,
) -> Result<DNSample> {
    let (u, _) = solve_quasilinear_real(space, model, &f.real_trace()?, opts)?;
    let problem = QuasilinearProblem::new(space, model, ZERO, [ZERO; 2])?;
    let trace = problem.boundary_flux(&u.values)?;
    let mesh = space.mesh();
    Ok(DNSample::new(
        mesh,
        anchor_probe(mesh, ZERO, [ZERO; 2]),
        f,
        MapKind::Real,
        trace,
        Provenance::Direct,
    ))
}

/// Subtracted DN trace of the complex quasilinear problem, reusing `ctx`.
pub fn dn_complex_in(ctx: &ProbeContext, h: &BoundaryDatum, opts: &SolverOptions) -> Result<DNSample> {
    let trace = complex_trace(ctx, &h.trace, opts)?;
    Ok(DNSample::new(
        ctx.space().mesh(),
        ctx.probe,
        h,
        MapKind::Complex,
        trace,
        Provenance::Direct,
    ))
}

fn complex_trace(ctx: &ProbeContext, h: &[C64], opts: &SolverOptions) -> Result<Vec<C64>> {
    let (v, _) = ctx.solve_quasilinear(h, Start::Linearized, opts)?;
    ctx.problem.boundary_flux(&v.values)
}

pub fn dn_complex(
    space: &Arc<FemSpace>,
    model: &ConductivityModel,
    probe: &ProbePoint,
    h: &BoundaryDatum,
    opts: &SolverOptions,
) -> Result<DNSample> {
    dn_complex_in(&ProbeContext::new(space, model, probe, opts)?, h, opts)
}

/// Flux of the linearized solution with Dirichlet trace `h`, reusing `ctx`.
pub fn dn_linearized_in(ctx: &ProbeContext, h: &BoundaryDatum) -> Result<DNSample> {
    let v = ctx.solve_linear(&h.trace)?;
    let trace = ctx.operator.boundary_flux(&v, None);
    Ok(DNSample::new(
        ctx.space().mesh(),
        ctx.probe,
        h,
        MapKind::Linearized,
        trace,
        Provenance::Direct,
    ))
}

pub fn dn_linearized(
    space: &Arc<FemSpace>,
    model: &ConductivityModel,
    probe: &ProbePoint,
    h: &BoundaryDatum,
    opts: &SolverOptions,
) -> Result<DNSample> {
    dn_linearized_in(&ProbeContext::new(space, model, probe, opts)?, h)
}

/// One row of the Gateaux convergence table.
#[derive(Debug, Clone, PartialEq)]
pub struct GateauxRow {
    pub step: f64,
    pub anchor_quotient: C64,
    /// Max boundary deviation from the linearized trace.
    pub gap: f64,
    pub anchor_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateauxTable {
    pub rows: Vec<GateauxRow>,
    /// Richardson combination of the two smallest steps.
    pub richardson: Vec<C64>,
    pub richardson_gap: f64,
    pub linearized_anchor: C64,
}

impl GateauxTable {
    /// `gap(t_{k+1}) / gap(t_k)` for consecutive steps.
    pub fn gap_ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[1].gap / w[0].gap).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# step\tanchor_re\tanchor_im\tgap\tanchor_gap\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:.12e}\t{:.12e}\t{:.6e}\t{:.6e}\n",
                r.step, r.anchor_quotient.re, r.anchor_quotient.im, r.gap, r.anchor_gap
            ));
        }
        out.push_str(&format!("# richardson gap {:.6e}\n", self.richardson_gap));
        out
    }
}

fn check_steps(steps: &[f64], h: &BoundaryDatum, opts: &SolverOptions) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::validation("Gateaux step list is empty"));
    }
    let hn = h.sup_norm();
    for &t in steps {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::validation(format!("Gateaux steps must be positive, got {t}")));
        }
        if t * hn > opts.complex_budget {
            return Err(Error::validation(format!(
                "step {t} scales the datum to {:.4}, beyond the budget {}",
                t * hn,
                opts.complex_budget
            )));
        }
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::validation("Gateaux steps must be strictly decreasing"));
    }
    Ok(())
}

/// Difference quotients `(Gamma[t h] - Gamma[0]) / t` for each step, reusing `ctx`.
///
/// `Gamma[0]` vanishes identically, so only the `t h` solves are performed.
/// Returns the per-step traces in step order.
pub fn fd_quotients_in(
    ctx: &ProbeContext,
    h: &BoundaryDatum,
    steps: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<Vec<C64>>> {
    check_steps(steps, h, opts)?;
    steps
        .iter()
        .map(|&t| {
            let tr = complex_trace(ctx, &h.scaled_trace(t), opts)?;
            Ok(tr.into_iter().map(|z| z / t).collect())
        })
        .collect()
}

/// Richardson combination `2 Q(t_small) - Q(t_large)` for steps in ratio 2.
pub fn richardson(large: &[C64], small: &[C64], ratio: f64) -> Vec<C64> {
    let w = 1.0 / (ratio - 1.0);
    small.iter().zip(large).map(|(s, l)| s + (s - l) * w).collect()
}

fn max_dev(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn gateaux_fd_in(
    ctx: &ProbeContext,
    h: &BoundaryDatum,
    steps: &[f64],
    opts: &SolverOptions,
) -> Result<(DNSample, GateauxTable)> {
    let lin = dn_linearized_in(ctx, h)?;
    let quotients = fd_quotients_in(ctx, h, steps, opts)?;
    let anchor = ctx.space().mesh().anchor_slot();
    let rows = steps
        .iter()
        .zip(&quotients)
        .map(|(&t, q)| GateauxRow {
            step: t,
            anchor_quotient: q[anchor],
            gap: max_dev(q, &lin.trace),
            anchor_gap: (q[anchor] - lin.anchor_value).norm(),
        })
        .collect();
    let k = quotients.len();
    let richardson = if k >= 2 {
        richardson(&quotients[k - 2], &quotients[k - 1], steps[k - 2] / steps[k - 1])
    } else {
        quotients[k - 1].clone()
    };
    let table = GateauxTable {
        rows,
        richardson_gap: max_dev(&richardson, &lin.trace),
        richardson,
        linearized_anchor: lin.anchor_value,
    };
    let sample = DNSample::new(
        ctx.space().mesh(),
        ctx.probe,
        h,
        MapKind::GateauxFd,
        quotients[k - 1].clone(),
        Provenance::FiniteDifference(steps[k - 1]),
    );
    Ok((sample, table))
}

pub fn gateaux_fd(
    space: &Arc<FemSpace>,
    model: &ConductivityModel,
    probe: &ProbePoint,
    h: &BoundaryDatum,
    steps: &[f64],
    opts: &SolverOptions,
) -> Result<(DNSample, GateauxTable)> {
    check_steps(steps, h, opts)?;
    gateaux_fd_in(&ProbeContext::new(space, model, probe, opts)?, h, steps, opts)
}

/// Max boundary deviation between `Gamma_a[s + h]` and the complex map at `(s, 0)` applied to `h`.
pub fn consistency_real_complex(
    space: &Arc<FemSpace>,
    model: &ConductivityModel,
    s: f64,
    h: &BoundaryDatum,
    opts: &SolverOptions,
) -> Result<f64> {
    let real_h = h.real_trace()?;
    let mesh = space.mesh();
    let shifted = BoundaryDatum {
        id: format!("{}+s", h.id),
        params: h.params.clone(),
        trace: real_h.iter().map(|&x| C64::new(s + x, 0.0)).collect(),
    };
    let real = dn_real(space, model, &shifted, opts)?;
    let probe = anchor_probe(mesh, C64::new(s, 0.0), [ZERO; 2]);
    let complex = dn_complex(space, model, &probe, h, opts)?;
    Ok(max_dev(&real.trace, &complex.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::{builtin_model, real_vec};
    use crate::geometry::build_disk_mesh;
    use rand::{Rng, SeedableRng};

    fn space(level: usize) -> Arc<FemSpace> {
        FemSpace::from_mesh(build_disk_mesh(1.0, level).unwrap()).unwrap()
    }

    fn model(name: &str, params: &str) -> ConductivityModel {
        builtin_model(name, &params.parse().unwrap()).unwrap()
    }

    fn band() -> ConductivityModel {
        model("band_analytic", "c_base = 2.0\nq0 = [0.3, 0.1]")
    }

    fn iso(t: f64) -> CVec {
        [C64::new(t, 0.0), C64::new(0.0, t)]
    }

    fn probe(sp: &FemSpace, s: f64, p: CVec) -> ProbePoint {
        ProbePoint::real_s(s, p, sp.mesh().anchor_normal())
    }

    #[test]
    fn datum_invariants() {
        let sp = space(2);
        let c = BoundaryDatum::constant(sp.mesh(), C64::new(0.3, -0.1));
        assert!(c.trace.iter().all(|z| *z == C64::new(0.3, -0.1)));
        let q = iso(0.05);
        let l = BoundaryDatum::linear(sp.mesh(), q);
        for (&v, z) in sp.mesh().boundary_loop().iter().zip(&l.trace) {
            let x = sp.mesh().vertices[v];
            assert_eq!(*z, q[0] * x[0] + q[1] * x[1]);
        }
    }

    #[test]
    fn real_constant_datum_has_zero_flux() {
        let sp = space(3);
        let f = BoundaryDatum::constant(sp.mesh(), C64::new(0.4, 0.0));
        let d = dn_real(&sp, &band(), &f, &SolverOptions::default()).unwrap();
        assert!(d.max_abs() < 1e-12, "{}", d.max_abs());
        assert_eq!(d.kind, MapKind::Real);
    }

    #[test]
    fn real_linear_datum_constant_model_flux() {
        let m = model("constant", "a0 = 2.0");
        let q = [0.3, -0.2];
        let mut anchor_err = Vec::new();
        for level in 2..=4 {
            let sp = space(level);
            let f = BoundaryDatum::linear(sp.mesh(), real_vec(q));
            let d = dn_real(&sp, &m, &f, &SolverOptions::default()).unwrap();
            assert!(d.trace.iter().all(|z| z.im.abs() <= 1e-10));
            let nu = sp.mesh().boundary_normals.clone();
            let worst = d
                .trace
                .iter()
                .zip(&nu)
                .map(|(z, n)| (z.re - 2.0 * (q[0] * n[0] + q[1] * n[1])).abs())
                .fold(0.0, f64::max);
            assert!(worst < 4.0 * sp.mesh().mesh_size_h, "{worst}");
            anchor_err.push((d.anchor_value.re - 2.0 * (-q[0])).abs());
        }
        assert!(anchor_err[2] < anchor_err[1] / 3.0, "{anchor_err:?}");
    }

    #[test]
    fn complex_zero_datum_gives_zero_trace() {
        let sp = space(2);
        let h = BoundaryDatum::constant(sp.mesh(), ZERO);
        let d = dn_complex(&sp, &band(), &probe(&sp, 0.5, iso(0.05)), &h, &SolverOptions::default()).unwrap();
        assert!(d.trace.iter().all(|z| *z == ZERO));
    }

    #[test]
    fn constant_model_complex_equals_linearized() {
        let sp = space(2);
        let m = model("constant", "a0 = 3.0");
        let opts = SolverOptions::default();
        let ctx = ProbeContext::new(&sp, &m, &probe(&sp, 0.0, iso(0.05)), &opts).unwrap();
        let h = BoundaryDatum::constant(sp.mesh(), C64::new(0.02, 0.01));
        let a = dn_complex_in(&ctx, &h, &opts).unwrap();
        let b = dn_linearized_in(&ctx, &h).unwrap();
        assert!(max_dev(&a.trace, &b.trace) < 1e-12);
    }

    #[test]
    fn linearized_constant_datum_anchor_identity() {
        let m = band();
        let p = iso(0.05);
        let s = 1.0;
        let e = m.evaluate(C64::new(s, 0.0), &p).unwrap();
        let expect = e.ds * (-p[0]);
        let mut errs = Vec::new();
        for level in [3, 4] {
            let sp = space(level);
            let h = BoundaryDatum::constant(sp.mesh(), C64::new(1.0, 0.0));
            let d = dn_linearized(&sp, &m, &probe(&sp, s, p), &h, &SolverOptions::default()).unwrap();
            errs.push((d.anchor_value - expect).norm() / expect.norm());
        }
        assert!(errs[1] < 0.01, "{errs:?}");
        assert!(errs[1] < errs[0]);
    }

    #[test]
    fn linearized_linear_datum_anchor_identity() {
        // v = p.x solves the linearized problem; its flux at 0 is (p.nu0)(a + grad_p a . p)
        let m = band();
        let p = [C64::new(0.0, -0.04), C64::new(0.04, 0.0)];
        let s = 0.5;
        let e = m.evaluate(C64::new(s, 0.0), &p).unwrap();
        let expect = (-p[0]) * (e.value + e.dp[0] * p[0] + e.dp[1] * p[1]);
        let sp = space(4);
        let h = BoundaryDatum::linear(sp.mesh(), p);
        let d = dn_linearized(&sp, &m, &probe(&sp, s, p), &h, &SolverOptions::default()).unwrap();
        assert!((d.anchor_value - expect).norm() / expect.norm() < 1e-3);
    }

    #[test]
    fn linearized_map_is_linear() {
        let sp = space(2);
        let opts = SolverOptions::default();
        let ctx = ProbeContext::new(&sp, &band(), &probe(&sp, 0.3, iso(0.05)), &opts).unwrap();
        let h1 = BoundaryDatum::constant(sp.mesh(), C64::new(1.0, 0.0));
        let h2 = BoundaryDatum::custom(sp.mesh(), "x1x2", vec![], |x| C64::new(x[0] * x[1], 0.0));
        let (al, be) = (C64::new(0.3, -1.2), C64::new(-0.7, 0.4));
        let mix = BoundaryDatum {
            id: "mix".into(),
            params: DatumParams::Custom(vec![]),
            trace: h1.trace.iter().zip(&h2.trace).map(|(a, b)| al * a + be * b).collect(),
        };
        let (d1, d2, dm) = (
            dn_linearized_in(&ctx, &h1).unwrap(),
            dn_linearized_in(&ctx, &h2).unwrap(),
            dn_linearized_in(&ctx, &mix).unwrap(),
        );
        let comb: Vec<C64> = d1.trace.iter().zip(&d2.trace).map(|(a, b)| al * a + be * b).collect();
        assert!(max_dev(&comb, &dm.trace) < 1e-10);
    }

    #[test]
    fn gateaux_rejects_bad_steps() {
        let sp = space(1);
        let h = BoundaryDatum::constant(sp.mesh(), C64::new(1.0, 0.0));
        let pr = probe(&sp, 0.0, iso(0.05));
        let o = SolverOptions::default();
        for steps in [vec![0.04, 0.0], vec![0.1], vec![], vec![0.01, 0.02]] {
            assert!(matches!(gateaux_fd(&sp, &band(), &pr, &h, &steps, &o), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn gateaux_gap_halves_for_band_model() {
        let sp = space(3);
        let h = BoundaryDatum::constant(sp.mesh(), C64::new(1.0, 0.0));
        let (_, table) = gateaux_fd(
            &sp,
            &band(),
            &probe(&sp, 1.0, iso(0.05)),
            &h,
            &[0.04, 0.02, 0.01],
            &SolverOptions::default(),
        )
        .unwrap();
        for r in table.gap_ratios() {
            assert!((r - 0.5).abs() < 0.15, "{}", table.to_text());
        }
        assert!(table.richardson_gap < table.rows[2].gap * 0.1);
    }

    #[test]
    fn sample_records_round_trip_bitwise() {
        let sp = space(2);
        let h = BoundaryDatum::linear(sp.mesh(), iso(0.05));
        let d = dn_linearized(&sp, &band(), &probe(&sp, 0.1, iso(0.05)), &h, &SolverOptions::default()).unwrap();
        let text = samples_to_text(sp.mesh().anchor_normal(), &[d.clone()]);
        let (nu, back) = samples_from_text(&text).unwrap();
        assert_eq!(nu, [-1.0, 0.0]);
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], d);
        assert!(samples_from_text("junk").is_err());
        let broken = text.replace("linearized", "bogus");
        assert!(matches!(samples_from_text(&broken), Err(Error::Parse { .. })));
    }

    #[test]
    fn real_complex_consistency_random_suite() {
        let sp = space(2);
        let m = band();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let h = BoundaryDatum::custom(sp.mesh(), "rand", c.to_vec(), |x| {
                C64::new(0.01 * (c[0] * x[0] + c[1] * x[1] + c[2] * x[0] * x[1] + c[3] * (x[1] * 3.0).sin()), 0.0)
            });
            let dev = consistency_real_complex(&sp, &m, 0.7, &h, &SolverOptions::default()).unwrap();
            assert!(dev <= 1e-9, "{dev}");
        }
        let zero = BoundaryDatum::constant(sp.mesh(), ZERO);
        assert_eq!(consistency_real_complex(&sp, &m, 0.7, &zero, &SolverOptions::default()).unwrap(), 0.0);
    }
}
