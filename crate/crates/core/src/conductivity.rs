//! Homogeneous conductivities `a(s, p)` with analytic first derivatives, the
//! built-in model families, and a sampling verifier for the structural and
//! analyticity hypotheses.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CVec = [C64; 2];

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);

/// Bilinear (non-Hermitian) product `p . q`.
#[inline]
pub fn dot(p: &CVec, q: &CVec) -> C64 {
    p[0] * q[0] + p[1] * q[1]
}

#[inline]
pub fn cnorm(p: &CVec) -> f64 {
    (p[0].norm_sqr() + p[1].norm_sqr()).sqrt()
}

pub fn real_vec(v: [f64; 2]) -> CVec {
    [C64::new(v[0], 0.0), C64::new(v[1], 0.0)]
}

/// Value and first derivatives of `a` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: C64,
    pub ds: C64,
    pub dp: CVec,
}

/// Constants of the analyticity band, ellipticity and growth hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisConstants {
    /// Radius of the probe ball `|p| < r0`.
    pub r0: f64,
    /// Half-width of the band `R + i[-R0, R0]`.
    pub big_r0: f64,
    pub lambda_tilde: f64,
    /// Upper bound on `|a| + |grad_p a|`.
    pub lambda_upper: f64,
    pub beta: f64,
    pub a1: f64,
    pub a2: f64,
    pub lambda0_floor: f64,
    pub mu0_cap: f64,
}

impl HypothesisConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = self.r0 > 0.0
            && self.big_r0 > 0.0
            && self.lambda_tilde > 0.0
            && self.lambda_tilde <= self.lambda_upper
            && self.lambda_upper.is_finite()
            && self.beta > 1.0
            && self.a1 >= 0.0
            && self.a2 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!("inconsistent hypothesis constants {self:?}")))
        }
    }
}

pub const DEFAULT_R0: f64 = 0.1;
pub const DEFAULT_BAND: f64 = 0.5;
pub const DEFAULT_LAMBDA_TILDE: f64 = 0.5;

/// Anything that can evaluate `a(s, p)` and its first derivatives.
pub trait Conductivity: Send + Sync + fmt::Debug {
    fn eval(&self, s: C64, p: &CVec) -> Evaluation;
}

/// Analytic scalar profile `f(s)` used by the minimal-surface and profile families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Constant { value: f64 },
    Affine { c0: f64, c1: f64 },
    /// `base + amp * exp(-width * s^2)`
    Gaussian { base: f64, amp: f64, width: f64 },
}

impl Profile {
    pub fn eval(&self, s: C64) -> (C64, C64) {
        match *self {
            Profile::Constant { value } => (value.into(), ZERO),
            Profile::Affine { c0, c1 } => (c0 + c1 * s, c1.into()),
            Profile::Gaussian { base, amp, width } => {
                let g = amp * (-width * s * s).exp();
                (base + g, -2.0 * width * s * g)
            }
        }
    }

    fn min_real(&self) -> f64 {
        match *self {
            Profile::Constant { value } => value,
            Profile::Affine { c1, c0 } => {
                if c1 == 0.0 {
                    c0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Profile::Gaussian { base, amp, .. } => base.min(base + amp),
        }
    }

    /// Bound on `|f|` over the band `|Im s| <= band`, `|Re s| <= 10` for affine profiles.
    fn sup_on_band(&self, band: f64) -> f64 {
        match *self {
            Profile::Constant { value } => value.abs(),
            Profile::Affine { c0, c1 } => c0.abs() + c1.abs() * (10.0 + band),
            Profile::Gaussian { base, amp, width } => base.abs() + amp.abs() * (width * band * band).exp(),
        }
    }
}

/// Built-in conductivity families.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Constant { a0: f64 },
    /// `f(s) / sqrt(1 + p.p)`, principal branch.
    MinimalSurface { f: Profile },
    /// `c_base + exp(-s^2) + p.q0`
    BandAnalytic { c_base: f64, q0: [f64; 2] },
    /// `f(s)`, independent of `p`.
    Profile { f: Profile },
}

impl Conductivity for Family {
    fn eval(&self, s: C64, p: &CVec) -> Evaluation {
        match self {
            Family::Constant { a0 } => Evaluation {
                value: (*a0).into(),
                ds: ZERO,
                dp: [ZERO; 2],
            },
            Family::MinimalSurface { f } => {
                let (fv, fd) = f.eval(s);
                let q = 1.0 + dot(p, p);
                let inv_sqrt = 1.0 / q.sqrt();
                let inv_32 = inv_sqrt / q;
                Evaluation {
                    value: fv * inv_sqrt,
                    ds: fd * inv_sqrt,
                    dp: [-fv * p[0] * inv_32, -fv * p[1] * inv_32],
                }
            }
            Family::BandAnalytic { c_base, q0 } => {
                let g = (-s * s).exp();
                Evaluation {
                    value: *c_base + g + p[0] * q0[0] + p[1] * q0[1],
                    ds: -2.0 * s * g,
                    dp: [q0[0].into(), q0[1].into()],
                }
            }
            Family::Profile { f } => {
                let (fv, fd) = f.eval(s);
                Evaluation {
                    value: fv,
                    ds: fd,
                    dp: [ZERO; 2],
                }
            }
        }
    }
}

/// A conductivity together with its declared constants and an on/off gate.
///
/// Clones share the gate, so disabling one handle disables every clone; this
/// is how boundary-data-only runs prove they never look at the model.
#[derive(Clone, Debug)]
pub struct ConductivityModel {
    pub name: String,
    pub parameters: BTreeMap<String, f64>,
    pub constants: HypothesisConstants,
    evaluator: Arc<dyn Conductivity>,
    enabled: Arc<AtomicBool>,
    warned: Arc<AtomicBool>,
}

impl ConductivityModel {
    pub fn new(
        name: impl Into<String>,
        parameters: BTreeMap<String, f64>,
        evaluator: Arc<dyn Conductivity>,
        constants: HypothesisConstants,
    ) -> Result<Self> {
        constants.validate()?;
        Ok(ConductivityModel {
            name: name.into(),
            parameters,
            constants,
            evaluator,
            enabled: Arc::new(AtomicBool::new(true)),
            warned: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn with_constants(mut self, constants: HypothesisConstants) -> Result<Self> {
        constants.validate()?;
        self.constants = constants;
        Ok(self)
    }

    /// Value, `d_s a` and `grad_p a` at `(s, p)`.
    pub fn evaluate(&self, s: C64, p: &CVec) -> Result<Evaluation> {
        if !self.enabled.load(Ordering::Relaxed) {
            return Err(Error::ModelDisabled);
        }
        if s.im.abs() > self.constants.big_r0 * (1.0 + 1e-9) + 1e-12
            || !s.is_finite()
            || !p[0].is_finite()
            || !p[1].is_finite()
        {
            return Err(Error::Domain {
                s,
                p0: p[0],
                p1: p[1],
            });
        }
        if cnorm(p) > self.constants.r0 * (1.0 + 1e-9) && !self.warned.swap(true, Ordering::Relaxed) {
            log::warn!(
                "model `{}` evaluated at |p| = {:.4} beyond r0 = {}",
                self.name,
                cnorm(p),
                self.constants.r0
            );
        }
        Ok(self.evaluator.eval(s, p))
    }

    pub fn disable(&self) {
        self.enabled.store(false, Ordering::Relaxed);
    }

    pub fn enable(&self) {
        self.enabled.store(true, Ordering::Relaxed);
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::Relaxed)
    }
}

/// Typed parameter set accepted by [`builtin_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Constant { a0: f64 },
    MinimalSurface { f: Profile },
    BandAnalytic { c_base: f64, q0: [f64; 2] },
    Profile { f: Profile },
}

/// Builds a named family from a parameter table, e.g.
/// `builtin_model("band_analytic", {c_base = 2, q0 = [0.3, 0.1]})`.
pub fn builtin_model(name: &str, params: &toml::Table) -> Result<ConductivityModel> {
    let mut table = params.clone();
    table.insert("family".into(), toml::Value::String(name.into()));
    let spec: ModelSpec = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::validation(format!("model `{name}`: {e}")))?;
    from_spec(&spec)
}

fn profile_params(prefix: &str, f: &Profile, out: &mut BTreeMap<String, f64>) {
    match *f {
        Profile::Constant { value } => {
            out.insert(format!("{prefix}.value"), value);
        }
        Profile::Affine { c0, c1 } => {
            out.insert(format!("{prefix}.c0"), c0);
            out.insert(format!("{prefix}.c1"), c1);
        }
        Profile::Gaussian { base, amp, width } => {
            out.insert(format!("{prefix}.base"), base);
            out.insert(format!("{prefix}.amp"), amp);
            out.insert(format!("{prefix}.width"), width);
        }
    }
}

pub fn from_spec(spec: &ModelSpec) -> Result<ConductivityModel> {
    let (r0, band) = (DEFAULT_R0, DEFAULT_BAND);
    let base = HypothesisConstants {
        r0,
        big_r0: band,
        lambda_tilde: DEFAULT_LAMBDA_TILDE,
        lambda_upper: 1.0,
        beta: 2.0,
        a1: 0.0,
        a2: r0,
        lambda0_floor: DEFAULT_LAMBDA_TILDE,
        mu0_cap: 1.0,
    };
    let mut params = BTreeMap::new();
    let (name, family, constants) = match spec {
        ModelSpec::Constant { a0 } => {
            if !(*a0 > 0.0) {
                return Err(Error::validation(format!("constant conductivity must be positive, got {a0}")));
            }
            params.insert("a0".into(), *a0);
            let c = HypothesisConstants {
                lambda_tilde: *a0,
                lambda_upper: *a0,
                lambda0_floor: *a0,
                mu0_cap: *a0,
                ..base
            };
            ("constant", Family::Constant { a0: *a0 }, c)
        }
        ModelSpec::BandAnalytic { c_base, q0 } => {
            // Re exp(-s^2) >= -exp(R0^2) on the band; c_base >= 2 keeps Re a above 1/2
            if !(*c_base >= 2.0) {
                return Err(Error::validation(format!(
                    "band_analytic needs c_base >= 2 for the default band R0 = {band}, got {c_base}"
                )));
            }
            params.insert("c_base".into(), *c_base);
            params.insert("q0.0".into(), q0[0]);
            params.insert("q0.1".into(), q0[1]);
            let qn = (q0[0] * q0[0] + q0[1] * q0[1]).sqrt();
            let upper = c_base + (band * band).exp() + r0 * qn + qn;
            let c = HypothesisConstants {
                lambda_upper: upper,
                mu0_cap: upper,
                ..base
            };
            ("band_analytic", Family::BandAnalytic { c_base: *c_base, q0: *q0 }, c)
        }
        ModelSpec::MinimalSurface { f } => {
            if !(f.min_real() > 0.0) {
                return Err(Error::validation("minimal_surface profile f must be positive on the real line"));
            }
            profile_params("f", f, &mut params);
            let sup = f.sup_on_band(band);
            let upper = sup / (1.0 - r0 * r0).sqrt() + sup * r0 / (1.0 - r0 * r0).powf(1.5);
            let c = HypothesisConstants {
                lambda_upper: upper.max(base.lambda_tilde),
                mu0_cap: upper.max(base.lambda_tilde),
                ..base
            };
            ("minimal_surface", Family::MinimalSurface { f: f.clone() }, c)
        }
        ModelSpec::Profile { f } => {
            profile_params("f", f, &mut params);
            let sup = f.sup_on_band(band).max(base.lambda_tilde);
            let c = HypothesisConstants {
                lambda_upper: sup,
                mu0_cap: sup,
                ..base
            };
            ("profile", Family::Profile { f: f.clone() }, c)
        }
    };
    ConductivityModel::new(name, params, Arc::new(family), constants)
}

/// Grid over which [`verify_hypotheses`] samples the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingGrid {
    pub s_min: f64,
    pub s_max: f64,
    pub n_re: usize,
    pub n_im: usize,
    pub p_radii: usize,
    pub p_directions: usize,
}

impl Default for SamplingGrid {
    fn default() -> Self {
        SamplingGrid {
            s_min: -2.0,
            s_max: 2.0,
            n_re: 41,
            n_im: 21,
            p_radii: 4,
            p_directions: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub s: C64,
    pub p: CVec,
}

impl fmt::Display for SamplePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "s = {:.4}{:+.4}i, p = ({:.4}{:+.4}i, {:.4}{:+.4}i)",
            self.s.re, self.s.im, self.p[0].re, self.p[0].im, self.p[1].re, self.p[1].im
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub name: &'static str,
    pub description: &'static str,
    /// Worst margin; nonnegative when the condition holds on the grid.
    pub margin: f64,
    pub passed: bool,
    pub worst_point: Option<SamplePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub model: String,
    pub conditions: Vec<ConditionResult>,
    pub samples: usize,
}

impl HypothesisReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name == name)
    }

    /// Structured text: one `condition margin status worst-point` row per condition.
    pub fn to_text(&self) -> String {
        let mut out = format!("# hypothesis report for model `{}` ({} samples)\n", self.model, self.samples);
        out.push_str("# condition\tmargin\tstatus\tworst_point\tdescription\n");
        for c in &self.conditions {
            let point = c.worst_point.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{:.6e}\t{}\t{}\t{}\n",
                c.name,
                c.margin,
                if c.passed { "pass" } else { "FAIL" },
                point,
                c.description
            ));
        }
        out.push_str(&format!("overall\t-\t{}\n", if self.passed() { "pass" } else { "FAIL" }));
        out
    }
}

struct Worst {
    margin: f64,
    point: Option<SamplePoint>,
}

impl Worst {
    fn new() -> Self {
        Worst {
            margin: f64::INFINITY,
            point: None,
        }
    }

    fn update(&mut self, margin: f64, point: SamplePoint) {
        if margin < self.margin || self.point.is_none() {
            self.margin = margin;
            self.point = Some(point);
        }
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

/// Complex unit directions in C^2 from a (alpha, phase1, phase2) lattice.
pub fn complex_directions(count: usize) -> Vec<CVec> {
    let per_axis = ((count as f64).cbrt().round() as usize).max(1);
    let mut out = Vec::with_capacity(per_axis.pow(3));
    for ia in 0..per_axis {
        let alpha = (ia as f64 + 0.5) * std::f64::consts::FRAC_PI_2 / per_axis as f64;
        for i1 in 0..per_axis {
            let ph1 = 2.0 * std::f64::consts::PI * i1 as f64 / per_axis as f64;
            for i2 in 0..per_axis {
                let ph2 = 2.0 * std::f64::consts::PI * i2 as f64 / per_axis as f64;
                out.push([C64::from_polar(alpha.cos(), ph1), C64::from_polar(alpha.sin(), ph2)]);
            }
        }
    }
    out
}

/// Minimum eigenvalue of the symmetric part of a real 2x2 matrix.
fn sym_min_eig(m: [[f64; 2]; 2]) -> f64 {
    let (a, d) = (m[0][0], m[1][1]);
    let b = 0.5 * (m[0][1] + m[1][0]);
    0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt()
}

/// Samples (S1)-(S3), realness and the band bounds over `sampling`.
pub fn verify_hypotheses(model: &ConductivityModel, sampling: &SamplingGrid) -> Result<HypothesisReport> {
    let c = &model.constants;
    let re_axis = linspace(sampling.s_min, sampling.s_max, sampling.n_re);
    let im_axis = linspace(-c.big_r0, c.big_r0, sampling.n_im);
    let radii: Vec<f64> = (1..=sampling.p_radii)
        .map(|k| c.r0 * k as f64 / sampling.p_radii as f64)
        .collect();
    let complex_dirs = complex_directions(sampling.p_directions);
    let real_dirs: Vec<[f64; 2]> = (0..sampling.p_directions)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / sampling.p_directions as f64;
            [t.cos(), t.sin()]
        })
        .collect();

    let mut positivity = Worst::new();
    let mut ellipticity = Worst::new();
    let mut growth = Worst::new();
    let mut coercivity = Worst::new();
    let mut realness = Worst::new();
    let mut lower = Worst::new();
    let mut upper = Worst::new();
    let mut samples = 0usize;

    // real samples: (S1), (S2), (S3), realness
    for &x in &re_axis {
        let s = C64::new(x, 0.0);
        let mut ps = vec![[0.0, 0.0]];
        for &r in &radii {
            ps.extend(real_dirs.iter().map(|d| [r * d[0], r * d[1]]));
        }
        for pr in ps {
            let p = real_vec(pr);
            let e = model.evaluate(s, &p)?;
            samples += 1;
            let pt = SamplePoint { s, p };
            let a = e.value.re;
            positivity.update(a, pt);
            let dp = [e.dp[0].re, e.dp[1].re];
            let m = [
                [a + pr[0] * dp[0], pr[0] * dp[1]],
                [pr[1] * dp[0], a + pr[1] * dp[1]],
            ];
            ellipticity.update(sym_min_eig(m) - c.lambda0_floor, pt);
            let pn = (pr[0] * pr[0] + pr[1] * pr[1]).sqrt();
            let dpn = (dp[0] * dp[0] + dp[1] * dp[1]).sqrt();
            growth.update(c.mu0_cap - (pn * dpn + a.abs()), pt);
            let lhs = a * pn * pn;
            let rhs = pn.powf(c.beta) - (c.a1 * x).abs().powf(c.beta) - c.a2.powf(c.beta);
            coercivity.update(lhs - rhs, pt);
            let imag = e.value.im.abs().max(e.ds.im.abs()).max(e.dp[0].im.abs()).max(e.dp[1].im.abs());
            realness.update(1e-13 - imag, pt);
        }
    }

    // complex band x complex ball: (H3)
    for &x in &re_axis {
        for &y in &im_axis {
            let s = C64::new(x, y);
            let mut ps = vec![[C64::new(0.0, 0.0); 2]];
            for &r in &radii {
                ps.extend(complex_dirs.iter().map(|d| [d[0] * r, d[1] * r]));
            }
            for p in ps {
                let e = model.evaluate(s, &p)?;
                samples += 1;
                let pt = SamplePoint { s, p };
                lower.update(e.value.re - c.lambda_tilde, pt);
                upper.update(c.lambda_upper - (e.value.norm() + cnorm(&e.dp)), pt);
            }
        }
    }

    let tol = 1e-12;
    let mk = |name, description, w: Worst, strict: bool| {
        let passed = if strict { w.margin > 0.0 } else { w.margin >= -tol };
        ConditionResult {
            name,
            description,
            margin: w.margin,
            passed,
            worst_point: w.point,
        }
    };
    Ok(HypothesisReport {
        model: model.name.clone(),
        samples,
        conditions: vec![
            mk("S1", "a > 0 on real arguments", positivity, true),
            mk("S2", "symmetric part of d(a p)/dp >= lambda0_floor on real arguments", ellipticity, false),
            mk("S3.growth", "|p||grad_p a| + |a| <= mu0_cap on real arguments", growth, false),
            mk("S3.coercivity", "p.(a p) >= |p|^beta - |a1 s|^beta - a2^beta on real arguments", coercivity, false),
            mk("H2", "a, d_s a, grad_p a real for real arguments", realness, false),
            mk("H3.lower", "Re a >= lambda_tilde on the band", lower, false),
            mk("H3.upper", "|a| + |grad_p a| <= Lambda on the band", upper, false),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(s: &str) -> toml::Table {
        s.parse().unwrap()
    }

    fn band() -> ConductivityModel {
        builtin_model("band_analytic", &table("c_base = 2.0\nq0 = [0.3, 0.1]")).unwrap()
    }

    fn minimal() -> ConductivityModel {
        builtin_model(
            "minimal_surface",
            &table("f = { kind = \"gaussian\", base = 2.0, amp = 1.0, width = 1.0 }"),
        )
        .unwrap()
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn constant_model_values() {
        let m = builtin_model("constant", &table("a0 = 3.0")).unwrap();
        let e = m.evaluate(c(0.4, 0.1), &[c(0.01, 0.02), c(-0.03, 0.0)]).unwrap();
        assert_eq!(e.value, c(3.0, 0.0));
        assert_eq!(e.ds, ZERO);
        assert_eq!(e.dp, [ZERO; 2]);
        assert_eq!(m.constants.lambda_tilde, 3.0);
    }

    #[test]
    fn minimal_surface_formula() {
        let sqrt2 = builtin_model("minimal_surface", &table("f = { kind = \"constant\", value = 2.0 }")).unwrap();
        let e = sqrt2.evaluate(c(0.3, 0.0), &real_vec([0.6, 0.8])).unwrap();
        assert!((e.value.re - std::f64::consts::SQRT_2).abs() < 1e-12);
        let m = minimal();
        let t = 0.05;
        let s = c(0.7, 0.0);
        let e = m.evaluate(s, &[c(t, 0.0), c(0.0, t)]).unwrap();
        let (f, _) = Profile::Gaussian { base: 2.0, amp: 1.0, width: 1.0 }.eval(s);
        assert!((e.value - f).norm() < 1e-15);
    }

    #[test]
    fn minimal_surface_gradient_symbolic() {
        let m = minimal();
        let s = c(0.2, 0.1);
        let p = [c(0.03, 0.01), c(-0.02, 0.04)];
        let e = m.evaluate(s, &p).unwrap();
        let f = 2.0 + (-s * s).exp();
        let q = 1.0 + dot(&p, &p);
        for k in 0..2 {
            let expect = -f * p[k] * q.powf(-1.5);
            assert!((e.dp[k] - expect).norm() < 1e-14);
        }
    }

    #[test]
    fn band_analytic_values() {
        let m = band();
        let e = m.evaluate(c(0.0, 0.0), &[ZERO; 2]).unwrap();
        assert!((e.value - c(3.0, 0.0)).norm() < 1e-15);
        for p in [[ZERO; 2], [c(0.05, 0.0), c(0.0, 0.05)], [c(-0.02, 0.01), c(0.03, -0.04)]] {
            let e = m.evaluate(c(1.0, 0.0), &p).unwrap();
            assert!((e.ds - c(-2.0 * (-1.0f64).exp(), 0.0)).norm() < 1e-14);
            assert!((e.ds.re + 0.735759).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(builtin_model("nope", &toml::Table::new()), Err(Error::Validation(_))));
        assert!(matches!(
            builtin_model("band_analytic", &table("c_base = 1.5\nq0 = [0.3, 0.1]")),
            Err(Error::Validation(_))
        ));
        assert!(matches!(builtin_model("constant", &table("a0 = -1.0")), Err(Error::Validation(_))));
        assert!(builtin_model("band_analytic", &table("c_base = 2.0")).is_err());
    }

    #[test]
    fn domain_error_outside_band() {
        let m = band();
        let err = m.evaluate(c(0.0, 0.6), &[ZERO; 2]).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn disabled_gate_is_shared_by_clones() {
        let m = band();
        let other = m.clone();
        m.disable();
        assert!(matches!(other.evaluate(ZERO, &[ZERO; 2]), Err(Error::ModelDisabled)));
        m.enable();
        assert!(other.evaluate(ZERO, &[ZERO; 2]).is_ok());
    }

    #[test]
    fn hypotheses_constant_model() {
        let m = builtin_model("constant", &table("a0 = 3.0")).unwrap();
        let report = verify_hypotheses(&m, &SamplingGrid::default()).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        let h3 = report.condition("H3.lower").unwrap();
        assert!((h3.margin - (3.0 - m.constants.lambda_tilde)).abs() < 1e-15);
    }

    #[test]
    fn hypotheses_affine_model_fails_positivity() {
        let m = builtin_model("profile", &table("f = { kind = \"affine\", c0 = 1.0, c1 = 1.0 }")).unwrap();
        let report = verify_hypotheses(&m, &SamplingGrid::default()).unwrap();
        assert!(!report.passed());
        let s1 = report.condition("S1").unwrap();
        assert!(!s1.passed);
        assert!(s1.worst_point.unwrap().s.re <= -1.0);
        assert!(!report.condition("H3.lower").unwrap().passed);
    }

    #[test]
    fn hypotheses_band_analytic_against_dense_oracle() {
        let m = band();
        let report = verify_hypotheses(&m, &SamplingGrid::default()).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        // independent dense oracle: Re a = c_base + exp(y^2 - x^2) cos(2xy) + Re(p.q0)
        let mut min_re = f64::INFINITY;
        for i in 0..=400 {
            let x = -2.0 + 4.0 * i as f64 / 400.0;
            for j in 0..=50 {
                let y = -0.5 + j as f64 / 50.0;
                let g = (y * y - x * x).exp() * (2.0 * x * y).cos();
                let worst_pq = -0.1 * (0.3f64.hypot(0.1));
                min_re = min_re.min(2.0 + g + worst_pq);
            }
        }
        assert!(min_re >= 2.0 - 0.25f64.exp() - 0.1 * 0.3f64.hypot(0.1));
        assert!(min_re >= 0.67);
        let h3 = report.condition("H3.lower").unwrap();
        assert!(h3.margin + 0.5 >= min_re - 1e-3);
        assert!(h3.margin >= 0.17);
        let mm = verify_hypotheses(&minimal(), &SamplingGrid::default()).unwrap();
        assert!(mm.passed(), "{}", mm.to_text());
    }

    fn central_ds(m: &ConductivityModel, s: C64, p: &CVec, h: f64) -> C64 {
        (m.evaluate(s + h, p).unwrap().value - m.evaluate(s - h, p).unwrap().value) / (2.0 * h)
    }

    fn central_dp(m: &ConductivityModel, s: C64, p: &CVec, k: usize, h: f64) -> C64 {
        let mut pp = *p;
        let mut pm = *p;
        pp[k] += h;
        pm[k] -= h;
        (m.evaluate(s, &pp).unwrap().value - m.evaluate(s, &pm).unwrap().value) / (2.0 * h)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn derivatives_match_central_differences(
            x in -2.0f64..2.0, y in -0.4f64..0.4,
            p0r in -0.05f64..0.05, p0i in -0.05f64..0.05,
            p1r in -0.05f64..0.05, p1i in -0.05f64..0.05,
        ) {
            let s = c(x, y);
            let p = [c(p0r, p0i), c(p1r, p1i)];
            for m in [band(), minimal()] {
                let e = m.evaluate(s, &p).unwrap();
                let (h1, h2) = (1e-2, 5e-3);
                let err1 = (central_ds(&m, s, &p, h1) - e.ds).norm();
                let err2 = (central_ds(&m, s, &p, h2) - e.ds).norm();
                prop_assert!(err1 < 5.0 * h1 * h1);
                prop_assert!(err2 <= err1 * 0.3 + 1e-11);
                for k in 0..2 {
                    let d1 = (central_dp(&m, s, &p, k, h1) - e.dp[k]).norm();
                    prop_assert!(d1 < 20.0 * h1 * h1);
                }
            }
        }

        #[test]
        fn real_inputs_give_real_outputs(x in -3.0f64..3.0, a in -0.07f64..0.07, b in -0.07f64..0.07) {
            for m in [band(), minimal()] {
                let e = m.evaluate(c(x, 0.0), &real_vec([a, b])).unwrap();
                prop_assert!(e.value.im.abs() <= 1e-13);
                prop_assert!(e.ds.im.abs() <= 1e-13);
                prop_assert!(e.dp[0].im.abs() <= 1e-13 && e.dp[1].im.abs() <= 1e-13);
            }
        }

        #[test]
        fn minimal_surface_reduces_to_profile_on_manifold(x in -2.0f64..2.0, y in -0.4f64..0.4, t in 0.0f64..0.07, phase in 0.0f64..6.28) {
            let m = minimal();
            let lam = C64::from_polar(t, phase);
            let p = [lam, lam * C64::i()];
            prop_assert!(dot(&p, &p).norm() <= 1e-14);
            let s = c(x, y);
            let f = 2.0 + (-s * s).exp();
            prop_assert!((m.evaluate(s, &p).unwrap().value - f).norm() <= 1e-12);
        }
    }
}
