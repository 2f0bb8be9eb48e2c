//! P1 finite elements for the real quasilinear problem, the complex
//! quasilinear problem around a probe solution `u_sp = s + x.p`, and its
//! linearization.
//!
//! Every problem is written as a perturbation `w` of the background
//! `(s, p)`: the total field is `u_sp + w` and the flux is
//! `a(u_sp + w, p + grad w)(p + grad w) - a(u_sp, p) p`. The real problem is
//! the background `(0, 0)` with `w = u`. The Newton Jacobian at `w = 0` is
//! exactly the linearized operator, so one factorization serves both the
//! linear solve and the nonlinear iteration.

use std::fmt;
use std::sync::Arc;

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use serde::{Deserialize, Serialize};

use crate::conductivity::{cnorm, dot, ConductivityModel, CVec, C64, ZERO};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, Point};

const CENTROID: [[f64; 3]; 1] = [[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
const THREE_POINT: [[f64; 3]; 3] = [
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
];
const NONE: usize = usize::MAX;

/// Fraction of `lambda_tilde` the linearized coefficient must keep.
pub const COERCIVITY_FRACTION: f64 = 0.9;
/// Fraction of `lambda_tilde` below which a Newton Jacobian counts as degenerate.
pub const ITERATE_COERCIVITY_FRACTION: f64 = 0.5;

type Mat2 = [[C64; 2]; 2];

/// Triangle quadrature used for every coefficient integral (equal weights).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    /// One point at the centroid: exact for linears, second-order accurate.
    #[default]
    Centroid,
    /// Interior points `(2/3, 1/6, 1/6)`: exact for quadratics.
    ThreePoint,
}

impl QuadratureRule {
    pub fn barycentric(&self) -> &'static [[f64; 3]] {
        match self {
            QuadratureRule::Centroid => &CENTROID,
            QuadratureRule::ThreePoint => &THREE_POINT,
        }
    }
}

/// Mesh plus everything about P1 elements that does not depend on the coefficient.
pub struct FemSpace {
    mesh: Arc<Mesh>,
    grads: Vec<[Point; 3]>,
    areas: Vec<f64>,
    rule: QuadratureRule,
    bary: &'static [[f64; 3]],
    nq: usize,
    qpoints: Vec<Point>,
    interior: Vec<usize>,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    elem_map: Vec<[usize; 9]>,
    /// `None` above the direct-solve size limit.
    symbolic: Option<SymbolicLu<usize>>,
    lumped: Vec<f64>,
}

/// Interior sizes above this use preconditioned BiCGSTAB instead of sparse LU.
pub const DIRECT_SOLVE_LIMIT: usize = 50_000;

impl fmt::Debug for FemSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FemSpace")
            .field("vertices", &self.mesh.vertex_count())
            .field("interior", &self.interior.len())
            .field("nnz", &self.rowidx.len())
            .finish()
    }
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>) -> Result<Arc<FemSpace>> {
        FemSpace::with_rule(mesh, QuadratureRule::default())
    }

    pub fn with_rule(mesh: Arc<Mesh>, rule: QuadratureRule) -> Result<Arc<FemSpace>> {
        FemSpace::with_solver_limit(mesh, rule, DIRECT_SOLVE_LIMIT)
    }

    /// Like [`FemSpace::with_rule`], switching to the iterative solver once the
    /// interior block has more than `direct_limit` unknowns.
    pub fn with_solver_limit(mesh: Arc<Mesh>, rule: QuadratureRule, direct_limit: usize) -> Result<Arc<FemSpace>> {
        let bary = rule.barycentric();
        let nq = bary.len();
        let n = mesh.vertex_count();
        let mut dof = vec![NONE; n];
        let mut interior = Vec::new();
        for v in 0..n {
            if !mesh.is_boundary(v) {
                dof[v] = interior.len();
                interior.push(v);
            }
        }
        let mut grads = Vec::with_capacity(mesh.triangles.len());
        let mut areas = Vec::with_capacity(mesh.triangles.len());
        let mut qpoints = Vec::with_capacity(mesh.triangles.len() * nq);
        let mut lumped = vec![0.0; n];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let [a, b, c] = tri.map(|i| mesh.vertices[i]);
            let area = mesh.triangle_area(t);
            if !(area > 0.0) {
                return Err(Error::validation(format!("triangle {t} is degenerate or clockwise")));
            }
            let inv = 1.0 / (2.0 * area);
            // grad of the hat at vertex k is the rotated opposite edge over 2|T|
            let g = [
                [(b[1] - c[1]) * inv, (c[0] - b[0]) * inv],
                [(c[1] - a[1]) * inv, (a[0] - c[0]) * inv],
                [(a[1] - b[1]) * inv, (b[0] - a[0]) * inv],
            ];
            for l in bary {
                qpoints.push([
                    l[0] * a[0] + l[1] * b[0] + l[2] * c[0],
                    l[0] * a[1] + l[1] * b[1] + l[2] * c[1],
                ]);
            }
            for &v in tri {
                lumped[v] += area / 3.0;
            }
            grads.push(g);
            areas.push(area);
        }

        let ni = interior.len();
        let mut columns: Vec<Vec<usize>> = vec![Vec::new(); ni];
        for tri in &mesh.triangles {
            for &vj in tri {
                let j = dof[vj];
                if j == NONE {
                    continue;
                }
                for &vi in tri {
                    if dof[vi] != NONE {
                        columns[j].push(dof[vi]);
                    }
                }
            }
        }
        let mut colptr = Vec::with_capacity(ni + 1);
        let mut rowidx = Vec::new();
        colptr.push(0);
        for col in &mut columns {
            col.sort_unstable();
            col.dedup();
            rowidx.extend_from_slice(col);
            colptr.push(rowidx.len());
        }
        let elem_map = mesh
            .triangles
            .iter()
            .map(|tri| {
                let mut m = [NONE; 9];
                for (li, &vi) in tri.iter().enumerate() {
                    for (lj, &vj) in tri.iter().enumerate() {
                        let (i, j) = (dof[vi], dof[vj]);
                        if i != NONE && j != NONE {
                            let col = &rowidx[colptr[j]..colptr[j + 1]];
                            m[3 * li + lj] = colptr[j] + col.binary_search(&i).expect("pattern entry");
                        }
                    }
                }
                m
            })
            .collect();

        if ni == 0 {
            return Err(Error::validation("mesh has no interior vertices"));
        }
        let sym = SymbolicSparseColMatRef::new_checked(ni, ni, &colptr, None, &rowidx);
        let symbolic = if ni <= direct_limit {
            Some(SymbolicLu::try_new(sym).map_err(|e| Error::Solver(format!("symbolic factorization failed: {e:?}")))?)
        } else {
            None
        };
        Ok(Arc::new(FemSpace {
            mesh,
            grads,
            areas,
            rule,
            bary,
            nq,
            qpoints,
            interior,
            colptr,
            rowidx,
            elem_map,
            symbolic,
            lumped,
        }))
    }

    pub fn from_mesh(mesh: Mesh) -> Result<Arc<FemSpace>> {
        FemSpace::new(Arc::new(mesh))
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn interior_count(&self) -> usize {
        self.interior.len()
    }

    /// Row-sum (lumped) mass of the hat function at `v`.
    pub fn lumped_mass(&self, v: usize) -> f64 {
        self.lumped[v]
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule
    }

    /// Quadrature points of every triangle, triangle-major.
    pub fn quadrature_points(&self) -> impl Iterator<Item = Point> + '_ {
        self.qpoints.iter().copied()
    }

    fn weight(&self, t: usize) -> f64 {
        self.areas[t] / self.nq as f64
    }

    /// Full vertex vector with `trace` on the boundary loop and zero inside.
    pub fn lift(&self, trace: &[C64]) -> Result<Vec<C64>> {
        let lp = self.mesh.boundary_loop();
        if trace.len() != lp.len() {
            return Err(Error::validation(format!(
                "boundary datum has {} values, mesh boundary has {}",
                trace.len(),
                lp.len()
            )));
        }
        let mut w = vec![ZERO; self.vertex_count()];
        for (&v, &h) in lp.iter().zip(trace) {
            w[v] = h;
        }
        Ok(w)
    }

    /// `int g phi_i` for a P1 field `g`, evaluated with the element quadrature.
    pub fn load_vector(&self, g: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; self.vertex_count()];
        for (t, tri) in self.mesh.triangles.iter().enumerate() {
            let wq = self.weight(t);
            for l in self.bary {
                let gq = l[0] * g[tri[0]] + l[1] * g[tri[1]] + l[2] * g[tri[2]];
                for k in 0..3 {
                    out[tri[k]] += gq * (wq * l[k]);
                }
            }
        }
        out
    }

    fn interior_norm(&self, r: &[C64]) -> f64 {
        self.interior.iter().map(|&v| r[v].norm_sqr()).sum::<f64>().sqrt()
    }

    /// Whether operators on this space are solved iteratively.
    pub fn is_iterative(&self) -> bool {
        self.symbolic.is_none()
    }

    fn factorize(&self, elements: &[[C64; 9]]) -> Result<InteriorSolver> {
        let mut vals = vec![ZERO; self.rowidx.len()];
        for (map, e) in self.elem_map.iter().zip(elements) {
            for k in 0..9 {
                if map[k] != NONE {
                    vals[map[k]] += e[k];
                }
            }
        }
        let ni = self.interior.len();
        let sym = SymbolicSparseColMatRef::new_checked(ni, ni, &self.colptr, None, &self.rowidx);
        let max_diag = (0..ni)
            .filter_map(|j| {
                let col = &self.rowidx[self.colptr[j]..self.colptr[j + 1]];
                col.binary_search(&j).ok().map(|k| vals[self.colptr[j] + k].norm())
            })
            .fold(0.0f64, f64::max);
        let Some(symbolic) = &self.symbolic else {
            let mut inv_diag = Vec::with_capacity(ni);
            for j in 0..ni {
                let col = &self.rowidx[self.colptr[j]..self.colptr[j + 1]];
                let d = col.binary_search(&j).ok().map(|k| vals[self.colptr[j] + k]).unwrap_or(ZERO);
                if d.norm() <= 1e-14 * max_diag {
                    return Err(Error::Solver(format!("zero diagonal in row {j} of the {ni}x{ni} reduced system")));
                }
                inv_diag.push(d.inv());
            }
            return Ok(InteriorSolver::Jacobi { vals, inv_diag });
        };
        Lu::try_new_with_symbolic(symbolic.clone(), SparseColMatRef::new(sym, &vals))
            .map(InteriorSolver::Direct)
            .map_err(|e| {
                Error::Solver(format!(
                    "sparse LU of the {ni}x{ni} reduced system failed ({e:?}); largest diagonal magnitude {max_diag:.3e}"
                ))
            })
    }

    /// `y = K x` for the assembled interior block stored column-wise.
    fn interior_product(&self, vals: &[C64], x: &[C64], y: &mut [C64]) {
        y.fill(ZERO);
        for (j, xj) in x.iter().enumerate() {
            for k in self.colptr[j]..self.colptr[j + 1] {
                y[self.rowidx[k]] += vals[k] * xj;
            }
        }
    }
}

enum InteriorSolver {
    Direct(Lu<usize, C64>),
    Jacobi { vals: Vec<C64>, inv_diag: Vec<C64> },
}

fn cdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm2(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Right-preconditioned BiCGSTAB for `K x = b`, `M = diag(K)`.
fn bicgstab(space: &FemSpace, vals: &[C64], inv_diag: &[C64], b: &[C64], tol: f64) -> Result<Vec<C64>> {
    let n = b.len();
    let bn = norm2(b);
    let mut x = vec![ZERO; n];
    if bn == 0.0 {
        return Ok(x);
    }
    let precond = |v: &[C64]| -> Vec<C64> { v.iter().zip(inv_diag).map(|(a, d)| a * d).collect() };
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (C64::new(1.0, 0.0), C64::new(1.0, 0.0), C64::new(1.0, 0.0));
    let mut v = vec![ZERO; n];
    let mut p = vec![ZERO; n];
    let mut t = vec![ZERO; n];
    let max_iter = 20 * n.max(100);
    for it in 0..max_iter {
        let rho_new = cdot(&r_hat, &r);
        if rho_new.norm() <= f64::MIN_POSITIVE {
            return Err(Error::Solver(format!("BiCGSTAB breakdown after {it} iterations")));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = precond(&p);
        space.interior_product(vals, &ph, &mut v);
        alpha = rho / cdot(&r_hat, &v);
        for i in 0..n {
            x[i] += alpha * ph[i];
            r[i] -= alpha * v[i];
        }
        if norm2(&r) <= tol * bn {
            return Ok(x);
        }
        let sh = precond(&r);
        space.interior_product(vals, &sh, &mut t);
        let tt = cdot(&t, &t).re;
        omega = if tt > 0.0 { cdot(&t, &r) / tt } else { ZERO };
        for i in 0..n {
            x[i] += omega * sh[i];
            r[i] -= omega * t[i];
        }
        let rn = norm2(&r);
        if rn <= tol * bn {
            return Ok(x);
        }
        if omega == ZERO || !rn.is_finite() {
            return Err(Error::Solver(format!("BiCGSTAB stagnated after {it} iterations (residual {:.3e})", rn / bn)));
        }
    }
    Err(Error::Solver(format!("BiCGSTAB did not converge in {max_iter} iterations")))
}

/// Complex-valued P1 field on a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub mesh: Arc<Mesh>,
    pub values: Vec<C64>,
}

impl ComplexField {
    pub fn new(mesh: Arc<Mesh>, values: Vec<C64>) -> Result<Self> {
        if values.len() != mesh.vertex_count() {
            return Err(Error::validation(format!(
                "field has {} values for {} vertices",
                values.len(),
                mesh.vertex_count()
            )));
        }
        Ok(ComplexField { mesh, values })
    }

    /// Values on the boundary loop, in loop order.
    pub fn boundary_trace(&self) -> Vec<C64> {
        self.mesh.boundary_loop().iter().map(|&v| self.values[v]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_boundary_abs(&self) -> f64 {
        self.mesh.boundary_loop().iter().map(|&v| self.values[v].norm()).fold(0.0, f64::max)
    }

    pub fn max_interior_abs(&self) -> f64 {
        (0..self.values.len())
            .filter(|&v| !self.mesh.is_boundary(v))
            .map(|v| self.values[v].norm())
            .fold(0.0, f64::max)
    }

    pub fn max_imag(&self) -> f64 {
        self.values.iter().map(|z| z.im.abs()).fold(0.0, f64::max)
    }

    /// Largest |f(x_v) - value_v| over vertices.
    pub fn max_error_against(&self, f: impl Fn(Point) -> C64) -> f64 {
        self.mesh
            .vertices
            .iter()
            .zip(&self.values)
            .map(|(&x, &z)| (z - f(x)).norm())
            .fold(0.0, f64::max)
    }

    /// Vertex table `x y re im`, one line per vertex.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# x\ty\tre\tim\n");
        for (x, z) in self.mesh.vertices.iter().zip(&self.values) {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", x[0], x[1], z.re, z.im));
        }
        out
    }
}

/// Background `(s, p)` together with its admissibility diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    pub s: C64,
    pub p: CVec,
    /// `|p . p|`
    pub isotropy_defect: f64,
    /// `|p . nu(0)|`
    pub transversality: f64,
    pub magnitude: f64,
}

impl ProbePoint {
    pub fn new(s: C64, p: CVec, nu0: Point) -> Self {
        ProbePoint {
            s,
            p,
            isotropy_defect: dot(&p, &p).norm(),
            transversality: (p[0] * nu0[0] + p[1] * nu0[1]).norm(),
            magnitude: cnorm(&p),
        }
    }

    pub fn real_s(s: f64, p: CVec, nu0: Point) -> Self {
        ProbePoint::new(C64::new(s, 0.0), p, nu0)
    }

    pub fn is_isotropic(&self) -> bool {
        self.isotropy_defect <= 1e-14 * self.magnitude.powi(2).max(1.0)
    }

    pub fn p_dot(&self, nu: Point) -> C64 {
        self.p[0] * nu[0] + self.p[1] * nu[1]
    }

    /// The probe `(s, eta p)`, diagnostics recomputed against `nu0`.
    pub fn scaled(&self, eta: f64, nu0: Point) -> Self {
        ProbePoint::new(self.s, [self.p[0] * eta, self.p[1] * eta], nu0)
    }

    pub fn with_s(&self, s: C64, nu0: Point) -> Self {
        ProbePoint::new(s, self.p, nu0)
    }

    /// Isotropy (unless relaxed) and `|p| < r0`.
    pub fn validate(&self, model: &ConductivityModel, allow_non_isotropic: bool) -> Result<()> {
        if !allow_non_isotropic && !self.is_isotropic() {
            return Err(Error::validation(format!(
                "probe is not isotropic: |p.p| = {:.3e}",
                self.isotropy_defect
            )));
        }
        if self.magnitude >= model.constants.r0 {
            return Err(Error::validation(format!(
                "probe magnitude {:.4} is not below r0 = {}",
                self.magnitude, model.constants.r0
            )));
        }
        if self.s.im.abs() > model.constants.big_r0 {
            return Err(Error::validation(format!("probe s = {} leaves the band", self.s)));
        }
        Ok(())
    }
}

/// Solver knobs for the Newton iteration and the smallness budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Newton stops once the residual falls below this fraction of the
    /// residual of the starting lift (zero inside, or the trace mean inside
    /// when there is no background gradient).
    pub tolerance: f64,
    pub max_newton: usize,
    pub damping_limit: usize,
    /// Bound on `|h|_inf` for the complex perturbation problem.
    pub complex_budget: f64,
    /// Bound on `|f|_inf` for the real problem.
    pub real_budget: f64,
    /// Refactor the exact Jacobian when the residual contracts by less than this.
    pub jacobian_refresh: f64,
    pub allow_non_isotropic: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-10,
            max_newton: 25,
            damping_limit: 6,
            complex_budget: 0.05,
            real_budget: 2.0,
            jacobian_refresh: 0.1,
            allow_non_isotropic: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::validation("solver.tolerance must lie in (0, 1)"));
        }
        if self.max_newton == 0 {
            return Err(Error::validation("solver.max_newton must be positive"));
        }
        if !(self.complex_budget > 0.0) || !(self.real_budget > 0.0) {
            return Err(Error::validation("solver budgets must be positive"));
        }
        if !(self.jacobian_refresh > 0.0 && self.jacobian_refresh < 1.0) {
            return Err(Error::validation("solver.jacobian_refresh must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Coefficients of the linearized operator at every quadrature point (triangle-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedCoefficients {
    pub a_tilde: Vec<Mat2>,
    pub b_tilde: Vec<CVec>,
    /// Minimum of `Re(conj(xi).A xi) / |xi|^2` over points and sampled directions.
    pub coercivity: f64,
    /// Required lower bound, `0.9 lambda_tilde`.
    pub coercivity_floor: f64,
    pub worst_point: Point,
    /// `max |b| / |p|` (zero when `p = 0`).
    pub b_ratio: f64,
}

/// Sixteen unit directions `(cos a, e^{i phi} sin a)` in C^2.
fn coercivity_directions() -> [CVec; 16] {
    let mut out = [[ZERO; 2]; 16];
    for ia in 0..4 {
        let alpha = (2 * ia + 1) as f64 * std::f64::consts::PI / 8.0;
        for ip in 0..4 {
            let phi = ip as f64 * std::f64::consts::FRAC_PI_2;
            out[4 * ia + ip] = [C64::new(alpha.cos(), 0.0), C64::from_polar(alpha.sin(), phi)];
        }
    }
    out
}

/// Minimum of `Re(conj(xi).M xi)` over the sampled unit directions.
pub fn sampled_coercivity(m: &Mat2) -> f64 {
    coercivity_directions()
        .iter()
        .map(|xi| {
            let mx = [m[0][0] * xi[0] + m[0][1] * xi[1], m[1][0] * xi[0] + m[1][1] * xi[1]];
            (xi[0].conj() * mx[0] + xi[1].conj() * mx[1]).re
        })
        .fold(f64::INFINITY, f64::min)
}

/// Sparse operator with its factorized interior block and element matrices.
pub struct DiscreteOperator {
    space: Arc<FemSpace>,
    elements: Vec<[C64; 9]>,
    lu: InteriorSolver,
    pub boundary_vertices: Vec<usize>,
}

impl fmt::Debug for DiscreteOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteOperator")
            .field("space", &self.space)
            .field("boundary_vertices", &self.boundary_vertices.len())
            .finish()
    }
}

/// Diagnostics of one constrained linear solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSolveReport {
    pub relative_residual: f64,
    /// `|v|_inf / (|h|_inf + |g|_inf)`
    pub apriori_ratio: f64,
}

impl DiscreteOperator {
    fn from_elements(space: &Arc<FemSpace>, elements: Vec<[C64; 9]>) -> Result<Self> {
        let lu = space.factorize(&elements)?;
        Ok(DiscreteOperator {
            space: space.clone(),
            elements,
            lu,
            boundary_vertices: space.mesh.boundary_loop().to_vec(),
        })
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn dimension(&self) -> usize {
        self.space.vertex_count()
    }

    /// Product with the full (unconstrained) matrix.
    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; v.len()];
        for (tri, e) in self.space.mesh.triangles.iter().zip(&self.elements) {
            for i in 0..3 {
                let mut acc = ZERO;
                for j in 0..3 {
                    acc += e[3 * i + j] * v[tri[j]];
                }
                out[tri[i]] += acc;
            }
        }
        out
    }

    /// Solves the interior block in place on a full-length vector; boundary entries are ignored.
    fn solve_interior(&self, rhs: &[C64]) -> Result<Vec<C64>> {
        let ni = self.space.interior.len();
        let x: Vec<C64> = match &self.lu {
            InteriorSolver::Direct(lu) => {
                let mut b = Mat::<C64>::from_fn(ni, 1, |i, _| rhs[self.space.interior[i]]);
                lu.solve_in_place(b.as_mut());
                (0..ni).map(|i| b[(i, 0)]).collect()
            }
            InteriorSolver::Jacobi { vals, inv_diag } => {
                let b: Vec<C64> = self.space.interior.iter().map(|&v| rhs[v]).collect();
                bicgstab(&self.space, vals, inv_diag, &b, 1e-13)?
            }
        };
        let mut out = vec![ZERO; rhs.len()];
        for (i, &v) in self.space.interior.iter().enumerate() {
            out[v] = x[i];
        }
        Ok(out)
    }

    /// Solves `div(A grad v + b v) = g` with `v = trace` on the boundary.
    pub fn solve(&self, g: Option<&[C64]>, trace: &[C64]) -> Result<ComplexField> {
        self.solve_with_report(g, trace).map(|(v, _)| v)
    }

    pub fn solve_with_report(&self, g: Option<&[C64]>, trace: &[C64]) -> Result<(ComplexField, LinearSolveReport)> {
        let n = self.dimension();
        if let Some(g) = g {
            if g.len() != n {
                return Err(Error::validation("source field length differs from the vertex count"));
            }
        }
        let load = g.map(|g| self.space.load_vector(g));
        let mut v = self.space.lift(trace)?;
        let residual = |v: &[C64]| {
            let mut r = self.apply(v);
            if let Some(l) = &load {
                for (ri, li) in r.iter_mut().zip(l) {
                    *ri += li;
                }
            }
            r
        };
        let r0 = residual(&v);
        let n0 = self.space.interior_norm(&r0);
        let delta = self.solve_interior(&r0)?;
        for (vi, di) in v.iter_mut().zip(&delta) {
            *vi -= di;
        }
        let mut rel = if n0 > 0.0 {
            self.space.interior_norm(&residual(&v)) / n0
        } else {
            0.0
        };
        if rel > 1e-12 {
            // one round of iterative refinement
            let r = residual(&v);
            let d = self.solve_interior(&r)?;
            for (vi, di) in v.iter_mut().zip(&d) {
                *vi -= di;
            }
            rel = self.space.interior_norm(&residual(&v)) / n0;
        }
        if !(rel <= 1e-10) {
            return Err(Error::Solver(format!(
                "constrained linear solve left relative residual {rel:.3e}"
            )));
        }
        let field = ComplexField::new(self.space.mesh.clone(), v)?;
        let hmax = trace.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let gmax = g.map(|g| g.iter().map(|z| z.norm()).fold(0.0, f64::max)).unwrap_or(0.0);
        let apriori_ratio = if hmax + gmax > 0.0 {
            field.max_abs() / (hmax + gmax)
        } else {
            0.0
        };
        log::debug!("linear solve: relative residual {rel:.2e}, |v|/(|h|+|g|) = {apriori_ratio:.3}");
        Ok((
            field,
            LinearSolveReport {
                relative_residual: rel,
                apriori_ratio,
            },
        ))
    }

    /// Conormal flux `(A grad v + b v) . nu` at every boundary vertex by
    /// variational recovery: the weak residual paired with each boundary hat,
    /// divided by the hat's boundary mass.
    pub fn boundary_flux(&self, v: &ComplexField, g: Option<&[C64]>) -> Vec<C64> {
        let mut r = self.apply(&v.values);
        if let Some(g) = g {
            for (ri, li) in r.iter_mut().zip(self.space.load_vector(g)) {
                *ri += li;
            }
        }
        recovered_flux(&self.space.mesh, &r)
    }
}

/// Divides the boundary entries of a weak residual by the boundary hat masses.
pub(crate) fn recovered_flux(mesh: &Mesh, residual: &[C64]) -> Vec<C64> {
    mesh.boundary_loop()
        .iter()
        .enumerate()
        .map(|(slot, &v)| residual[v] / mesh.boundary_hat_mass(slot))
        .collect()
}

/// The nonlinear weak form around a background `(s, p)`.
#[derive(Debug, Clone)]
pub struct QuasilinearProblem {
    space: Arc<FemSpace>,
    model: ConductivityModel,
    pub s: C64,
    pub p: CVec,
    base_u: Vec<C64>,
    base_flux: Vec<CVec>,
}

impl QuasilinearProblem {
    pub fn new(space: &Arc<FemSpace>, model: &ConductivityModel, s: C64, p: CVec) -> Result<Self> {
        let mut base_u = Vec::with_capacity(space.qpoints.len());
        let mut base_flux = Vec::with_capacity(space.qpoints.len());
        for x in space.quadrature_points() {
            let u = s + p[0] * x[0] + p[1] * x[1];
            let a = model.evaluate(u, &p)?.value;
            base_u.push(u);
            base_flux.push([a * p[0], a * p[1]]);
        }
        Ok(QuasilinearProblem {
            space: space.clone(),
            model: model.clone(),
            s,
            p,
            base_u,
            base_flux,
        })
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    fn local(&self, t: usize, w: &[C64]) -> ([C64; 3], CVec) {
        let tri = self.space.mesh.triangles[t];
        let wl = tri.map(|v| w[v]);
        let g = &self.space.grads[t];
        // hat gradients sum to zero; differencing keeps constants exactly flat
        let (d1, d2) = (wl[1] - wl[0], wl[2] - wl[0]);
        let grad = [
            self.p[0] + d1 * g[1][0] + d2 * g[2][0],
            self.p[1] + d1 * g[1][1] + d2 * g[2][1],
        ];
        (wl, grad)
    }

    /// Weak residual `int F(w) . grad phi_i` at every vertex, plus a rounding
    /// scale (the same sum taken in absolute values).
    pub fn residual(&self, w: &[C64]) -> Result<(Vec<C64>, f64)> {
        let mut r = vec![ZERO; w.len()];
        let mut scale = vec![0.0f64; w.len()];
        for (t, tri) in self.space.mesh.triangles.iter().enumerate() {
            let (wl, grad) = self.local(t, w);
            let g = &self.space.grads[t];
            let wq = self.space.weight(t);
            let mut flux = [ZERO; 2];
            let mut mag = 0.0;
            for (q, l) in self.space.bary.iter().enumerate() {
                let idx = self.space.nq * t + q;
                let u = self.base_u[idx] + l[0] * wl[0] + l[1] * wl[1] + l[2] * wl[2];
                let a = self.model.evaluate(u, &grad)?.value;
                let f0 = self.base_flux[idx];
                flux[0] += a * grad[0] - f0[0];
                flux[1] += a * grad[1] - f0[1];
                mag += a.norm() * cnorm(&grad) + cnorm(&f0);
            }
            for k in 0..3 {
                r[tri[k]] += (flux[0] * g[k][0] + flux[1] * g[k][1]) * wq;
                scale[tri[k]] += mag * wq * (g[k][0].hypot(g[k][1]));
            }
        }
        let scale = scale.iter().map(|s| s * s).sum::<f64>().sqrt();
        Ok((r, scale))
    }

    /// `M = a I + P grad_p a^T` and `b = d_s a P` at every quadrature point.
    pub fn coefficients(&self, w: &[C64]) -> Result<(Vec<Mat2>, Vec<CVec>)> {
        let mut ms = Vec::with_capacity(self.base_u.len());
        let mut bs = Vec::with_capacity(self.base_u.len());
        for t in 0..self.space.mesh.triangles.len() {
            let (wl, grad) = self.local(t, w);
            for (q, l) in self.space.bary.iter().enumerate() {
                let u = self.base_u[self.space.nq * t + q] + l[0] * wl[0] + l[1] * wl[1] + l[2] * wl[2];
                let e = self.model.evaluate(u, &grad)?;
                ms.push([
                    [e.value + grad[0] * e.dp[0], grad[0] * e.dp[1]],
                    [grad[1] * e.dp[0], e.value + grad[1] * e.dp[1]],
                ]);
                bs.push([e.ds * grad[0], e.ds * grad[1]]);
            }
        }
        Ok((ms, bs))
    }

    fn elements(&self, ms: &[Mat2], bs: &[CVec]) -> Vec<[C64; 9]> {
        (0..self.space.mesh.triangles.len())
            .map(|t| {
                let g = &self.space.grads[t];
                let wq = self.space.weight(t);
                let mut e = [ZERO; 9];
                for (q, l) in self.space.bary.iter().enumerate() {
                    let m = &ms[self.space.nq * t + q];
                    let b = &bs[self.space.nq * t + q];
                    for j in 0..3 {
                        let mg = [
                            m[0][0] * g[j][0] + m[0][1] * g[j][1],
                            m[1][0] * g[j][0] + m[1][1] * g[j][1],
                        ];
                        let col = [mg[0] + b[0] * l[j], mg[1] + b[1] * l[j]];
                        for i in 0..3 {
                            e[3 * i + j] += (col[0] * g[i][0] + col[1] * g[i][1]) * wq;
                        }
                    }
                }
                e
            })
            .collect()
    }

    fn worst_coercivity(&self, ms: &[Mat2]) -> (f64, Point, usize) {
        let mut worst = (f64::INFINITY, [0.0, 0.0], 0);
        for (k, (m, x)) in ms.iter().zip(self.space.quadrature_points()).enumerate() {
            let c = sampled_coercivity(m);
            if c < worst.0 {
                worst = (c, x, k);
            }
        }
        worst
    }

    /// Factorized Jacobian at `w`, with the degeneracy check of the iterate.
    pub fn jacobian(&self, w: &[C64]) -> Result<DiscreteOperator> {
        let (ms, bs) = self.coefficients(w)?;
        let (c, x, idx) = self.worst_coercivity(&ms);
        let floor = ITERATE_COERCIVITY_FRACTION * self.model.constants.lambda_tilde;
        if c < floor {
            return Err(Error::Ellipticity {
                point: idx,
                x: x[0],
                y: x[1],
                margin: c,
                floor,
            });
        }
        DiscreteOperator::from_elements(&self.space, self.elements(&ms, &bs))
    }

    /// Unfactorized Jacobian-vector product at `w`, for derivative checks.
    pub fn jacobian_apply(&self, w: &[C64], d: &[C64]) -> Result<Vec<C64>> {
        let (ms, bs) = self.coefficients(w)?;
        let elements = self.elements(&ms, &bs);
        let mut out = vec![ZERO; d.len()];
        for (tri, e) in self.space.mesh.triangles.iter().zip(&elements) {
            for i in 0..3 {
                for j in 0..3 {
                    out[tri[i]] += e[3 * i + j] * d[tri[j]];
                }
            }
        }
        Ok(out)
    }

    /// Linearized coefficients at `w = 0` and the factorized operator.
    pub fn linearize(&self) -> Result<(LinearizedCoefficients, DiscreteOperator)> {
        let zero = vec![ZERO; self.space.vertex_count()];
        let (ms, bs) = self.coefficients(&zero)?;
        let (c, x, idx) = self.worst_coercivity(&ms);
        let floor = COERCIVITY_FRACTION * self.model.constants.lambda_tilde;
        if c < floor {
            return Err(Error::Ellipticity {
                point: idx,
                x: x[0],
                y: x[1],
                margin: c,
                floor,
            });
        }
        let pn = cnorm(&self.p);
        let b_ratio = if pn > 0.0 {
            bs.iter().map(cnorm).fold(0.0, f64::max) / pn
        } else {
            0.0
        };
        let op = DiscreteOperator::from_elements(&self.space, self.elements(&ms, &bs))?;
        Ok((
            LinearizedCoefficients {
                a_tilde: ms,
                b_tilde: bs,
                coercivity: c,
                coercivity_floor: floor,
                worst_point: x,
                b_ratio,
            },
            op,
        ))
    }

    /// Conormal flux of `F(w)` at the boundary vertices.
    pub fn boundary_flux(&self, w: &[C64]) -> Result<Vec<C64>> {
        let (r, _) = self.residual(w)?;
        Ok(recovered_flux(&self.space.mesh, &r))
    }
}

/// Initial Newton iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    /// Solution of the linearized problem with the same boundary datum.
    Linearized,
    /// The datum on the boundary and zero inside.
    Lift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    pub factorizations: usize,
    pub residual_history: Vec<f64>,
    /// Largest elementwise |grad w|, a proxy for the C^2 smallness of the perturbation.
    pub gradient_norm: f64,
}

/// Damped Newton on `problem` with boundary values `trace`.
///
/// `base` is the factorized Jacobian at `w = 0`; it is reused as long as
/// the residual contracts by at least `jacobian_refresh` per step, after
/// which the exact Jacobian at the current iterate is factorized.
pub fn newton(
    problem: &QuasilinearProblem,
    base: &DiscreteOperator,
    trace: &[C64],
    start: Start,
    opts: &SolverOptions,
) -> Result<(ComplexField, NewtonReport)> {
    let space = problem.space();
    let mut w = space.lift(trace)?;
    if problem.p == [ZERO; 2] && !trace.is_empty() {
        // without a background gradient every constant is an exact solution, so
        // start from the trace mean inside; the reference residual then measures
        // only the non-constant part of the datum
        let fill = if trace.iter().all(|z| *z == trace[0]) {
            trace[0]
        } else {
            trace.iter().sum::<C64>() / trace.len() as f64
        };
        for (v, z) in w.iter_mut().enumerate() {
            if !space.mesh.is_boundary(v) {
                *z = fill;
            }
        }
    }
    let (mut r, scale) = problem.residual(&w)?;
    let r0 = space.interior_norm(&r);
    let floor = 64.0 * f64::EPSILON * scale;
    let mut history = vec![r0];
    let mut iterations = 0;
    let mut factorizations = 0;
    let target = (opts.tolerance * r0).max(floor);
    let mut exact: Option<DiscreteOperator> = None;
    let mut norm = r0;

    if r0 > target && start == Start::Linearized {
        // the linear residual of the lift, not the nonlinear one
        let d = base.solve_interior(&base.apply(&w))?;
        for (wi, di) in w.iter_mut().zip(&d) {
            *wi -= di;
        }
        r = problem.residual(&w)?.0;
        norm = space.interior_norm(&r);
        history.push(norm);
        iterations += 1;
    }

    let mut fresh = false;
    while norm > target {
        if iterations >= opts.max_newton {
            return Err(Error::NonConvergence {
                iterations,
                history,
            });
        }
        let op = exact.as_ref().unwrap_or(base);
        let d = op.solve_interior(&r)?;
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.damping_limit {
            let trial: Vec<C64> = w.iter().zip(&d).map(|(wi, di)| wi - di * lambda).collect();
            let (rt, _) = problem.residual(&trial)?;
            let nt = space.interior_norm(&rt);
            if nt < norm {
                accepted = Some((trial, rt, nt));
                break;
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((trial, rt, nt)) => {
                let contraction = nt / norm;
                w = trial;
                r = rt;
                norm = nt;
                history.push(norm);
                iterations += 1;
                fresh = false;
                if contraction > opts.jacobian_refresh && norm > target {
                    exact = Some(problem.jacobian(&w)?);
                    factorizations += 1;
                    fresh = true;
                }
            }
            None if !fresh => {
                exact = Some(problem.jacobian(&w)?);
                factorizations += 1;
                fresh = true;
            }
            None if norm <= 1e3 * floor => break,
            None => {
                return Err(Error::NonConvergence {
                    iterations,
                    history,
                })
            }
        }
    }
    log::debug!(
        "newton: {iterations} iterations, {factorizations} refactorizations, residual {:.2e} -> {:.2e}",
        r0,
        norm
    );
    let gradient_norm = (0..space.mesh.triangles.len())
        .map(|t| {
            let (_, g) = problem.local(t, &w);
            cnorm(&[g[0] - problem.p[0], g[1] - problem.p[1]])
        })
        .fold(0.0, f64::max);
    Ok((
        ComplexField::new(space.mesh.clone(), w)?,
        NewtonReport {
            iterations,
            factorizations,
            residual_history: history,
            gradient_norm,
        },
    ))
}

/// Probe problem with its linearized operator factorized once.
#[derive(Debug)]
pub struct ProbeContext {
    pub probe: ProbePoint,
    pub problem: QuasilinearProblem,
    pub coefficients: LinearizedCoefficients,
    pub operator: DiscreteOperator,
}

impl ProbeContext {
    pub fn new(
        space: &Arc<FemSpace>,
        model: &ConductivityModel,
        probe: &ProbePoint,
        opts: &SolverOptions,
    ) -> Result<Self> {
        probe.validate(model, opts.allow_non_isotropic)?;
        let problem = QuasilinearProblem::new(space, model, probe.s, probe.p)?;
        let (coefficients, operator) = problem.linearize()?;
        Ok(ProbeContext {
            probe: *probe,
            problem,
            coefficients,
            operator,
        })
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        self.problem.space()
    }

    pub fn solve_linear(&self, h: &[C64]) -> Result<ComplexField> {
        self.operator.solve(None, h)
    }

    pub fn solve_quasilinear(&self, h: &[C64], start: Start, opts: &SolverOptions) -> Result<(ComplexField, NewtonReport)> {
        let hmax = h.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if hmax > opts.complex_budget {
            return Err(Error::validation(format!(
                "datum norm {hmax:.4} exceeds the smallness budget {}",
                opts.complex_budget
            )));
        }
        newton(&self.problem, &self.operator, h, start, opts)
    }
}

/// Assembles the linearized operator `div(A grad v + b v)` at `probe`.
pub fn assemble_linearized(
    space: &Arc<FemSpace>,
    model: &ConductivityModel,
    probe: &ProbePoint,
    opts: &SolverOptions,
) -> Result<(LinearizedCoefficients, DiscreteOperator)> {
    probe.validate(model, opts.allow_non_isotropic)?;
    QuasilinearProblem::new(space, model, probe.s, probe.p)?.linearize()
}

/// Solves the linearized problem with source `g` and Dirichlet datum `h`.
pub fn solve_linear_complex(operator: &DiscreteOperator, g: Option<&[C64]>, h: &[C64]) -> Result<ComplexField> {
    operator.solve(g, h)
}

/// Solves `div(a(u, grad u) grad u) = 0` with `u = f` on the boundary.
pub fn solve_quasilinear_real(
    space: &Arc<FemSpace>,
    model: &ConductivityModel,
    f: &[f64],
    opts: &SolverOptions,
) -> Result<(ComplexField, NewtonReport)> {
    let fmax = f.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if fmax > opts.real_budget {
        return Err(Error::validation(format!(
            "real datum norm {fmax:.4} exceeds the budget {}",
            opts.real_budget
        )));
    }
    let trace: Vec<C64> = f.iter().map(|&x| C64::new(x, 0.0)).collect();
    let problem = QuasilinearProblem::new(space, model, ZERO, [ZERO; 2])?;
    let base = problem.jacobian(&vec![ZERO; space.vertex_count()])?;
    let (mut u, report) = newton(&problem, &base, &trace, Start::Linearized, opts)?;
    for z in &mut u.values {
        z.im = 0.0;
    }
    Ok((u, report))
}

/// Solves the complex perturbation problem for `v` with `v = h` on the boundary.
pub fn solve_quasilinear_complex(
    space: &Arc<FemSpace>,
    model: &ConductivityModel,
    probe: &ProbePoint,
    h: &[C64],
    opts: &SolverOptions,
) -> Result<(ComplexField, NewtonReport)> {
    let ctx = ProbeContext::new(space, model, probe, opts)?;
    let out = ctx.solve_quasilinear(h, Start::Linearized, opts)?;
    log::info!("complex quasilinear solve converged in {} Newton steps", out.1.iterations);
    Ok(out)
}

/// Weak residual of `u_sp` itself, measured as the discrete L2 norm of its
/// lumped-mass representative: `sqrt(sum_i |R_i|^2 / m_i)` over interior vertices.
pub fn probe_residual(space: &Arc<FemSpace>, model: &ConductivityModel, probe: &ProbePoint) -> Result<f64> {
    let problem = QuasilinearProblem::new(space, model, probe.s, probe.p)?;
    let mut r = vec![ZERO; space.vertex_count()];
    for (t, tri) in space.mesh.triangles.iter().enumerate() {
        let g = &space.grads[t];
        let wq = space.weight(t);
        let mut flux = [ZERO; 2];
        for q in 0..space.nq {
            let f0 = problem.base_flux[space.nq * t + q];
            flux[0] += f0[0];
            flux[1] += f0[1];
        }
        for k in 0..3 {
            r[tri[k]] += (flux[0] * g[k][0] + flux[1] * g[k][1]) * wq;
        }
    }
    Ok(space
        .interior
        .iter()
        .map(|&v| r[v].norm_sqr() / space.lumped[v])
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::{builtin_model, real_vec};
    use crate::geometry::build_disk_mesh;

    const NU0: Point = [-1.0, 0.0];

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

    fn trace_of(space: &FemSpace, f: impl Fn(Point) -> C64) -> Vec<C64> {
        space.mesh().boundary_loop().iter().map(|&v| f(space.mesh().vertices[v])).collect()
    }

    #[test]
    fn iterative_fallback_matches_direct() {
        let mesh = Arc::new(build_disk_mesh(1.0, 3).unwrap());
        let direct = FemSpace::new(mesh.clone()).unwrap();
        let iter = FemSpace::with_solver_limit(mesh, QuadratureRule::default(), 0).unwrap();
        assert!(iter.is_iterative() && !direct.is_iterative());
        let probe = ProbePoint::real_s(1.0, [C64::new(0.0, 0.05), C64::new(0.05, 0.0)], NU0);
        let opts = SolverOptions::default();
        let h = trace_of(&direct, |x| C64::new((2.0 * x[1]).sin(), x[0] * x[0]));
        let g: Vec<C64> = direct.mesh().vertices.iter().map(|x| C64::new(x[0], -x[1])).collect();
        let (_, a) = assemble_linearized(&direct, &band(), &probe, &opts).unwrap();
        let (_, b) = assemble_linearized(&iter, &band(), &probe, &opts).unwrap();
        let (va, vb) = (a.solve(Some(&g), &h).unwrap(), b.solve(Some(&g), &h).unwrap());
        let dev = va.values.iter().zip(&vb.values).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(dev < 1e-9 * va.max_abs(), "{dev:e}");

        let small: Vec<C64> = h.iter().map(|z| z * 0.01).collect();
        let solve = |sp: &Arc<FemSpace>| {
            let problem = QuasilinearProblem::new(sp, &band(), probe.s, probe.p).unwrap();
            let (_, base) = problem.linearize().unwrap();
            newton(&problem, &base, &small, Start::Linearized, &opts).unwrap().0
        };
        let (ua, ub) = (solve(&direct), solve(&iter));
        let dev = ua.values.iter().zip(&ub.values).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(dev < 1e-9 * ua.max_abs().max(1e-300), "{dev:e}");
    }

    #[test]
    fn constant_model_coefficients() {
        let sp = space(1);
        let m = model("constant", "a0 = 3.0");
        let probe = ProbePoint::real_s(0.2, iso(0.05), NU0);
        let (c, _) = assemble_linearized(&sp, &m, &probe, &SolverOptions::default()).unwrap();
        for (a, b) in c.a_tilde.iter().zip(&c.b_tilde) {
            assert_eq!(*a, [[C64::new(3.0, 0.0), ZERO], [ZERO, C64::new(3.0, 0.0)]]);
            assert_eq!(*b, [ZERO; 2]);
        }
    }

    #[test]
    fn minimal_surface_coefficients_on_manifold() {
        let sp = space(1);
        let m = model("minimal_surface", "f = { kind = \"gaussian\", base = 2.0, amp = 1.0, width = 1.0 }");
        let p = iso(0.05);
        let s = 0.3;
        let probe = ProbePoint::real_s(s, p, NU0);
        let (c, _) = assemble_linearized(&sp, &m, &probe, &SolverOptions::default()).unwrap();
        for ((a, b), x) in c.a_tilde.iter().zip(&c.b_tilde).zip(sp.quadrature_points()) {
            let u = s + p[0] * x[0] + p[1] * x[1];
            let f = 2.0 + (-u * u).exp();
            let fd = -2.0 * u * (-u * u).exp();
            for i in 0..2 {
                for j in 0..2 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    assert!((a[i][j] - f * (id - p[i] * p[j])).norm() < 1e-13);
                }
                assert!((b[i] - fd * p[i]).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn band_coercivity_margin() {
        let sp = space(2);
        let probe = ProbePoint::real_s(1.0, [C64::new(0.0, 0.05), C64::new(0.05, 0.0)], NU0);
        let (c, _) = assemble_linearized(&sp, &band(), &probe, &SolverOptions::default()).unwrap();
        assert!(c.coercivity >= 0.9 * 0.5, "{}", c.coercivity);
        assert!(c.b_ratio <= 2.0);
    }

    #[test]
    fn non_isotropic_probe_rejected_unless_allowed() {
        let sp = space(1);
        let probe = ProbePoint::real_s(0.0, real_vec([0.05, 0.05]), NU0);
        assert!(matches!(
            assemble_linearized(&sp, &band(), &probe, &SolverOptions::default()),
            Err(Error::Validation(_))
        ));
        let relaxed = SolverOptions {
            allow_non_isotropic: true,
            ..Default::default()
        };
        assert!(assemble_linearized(&sp, &band(), &probe, &relaxed).is_ok());
    }

    #[test]
    fn linear_solve_reproduces_harmonic_polynomial() {
        let m = model("constant", "a0 = 3.0");
        let probe = ProbePoint::real_s(0.0, iso(0.05), NU0);
        let f = |x: Point| C64::new(x[0] * x[0] - x[1] * x[1], 0.0);
        let mut errs = Vec::new();
        for level in 2..=4 {
            let sp = space(level);
            let (_, op) = assemble_linearized(&sp, &m, &probe, &SolverOptions::default()).unwrap();
            let (v, rep) = op.solve_with_report(None, &trace_of(&sp, f)).unwrap();
            assert!(rep.relative_residual <= 1e-10);
            errs.push(v.max_error_against(f));
        }
        for w in errs.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!(rate > 1.6, "{errs:?}");
        }
    }

    #[test]
    fn source_term_matches_manufactured_solution() {
        // constant model: div(3 grad v) = g with v = x1^2 + x2^2 gives g = 12
        let sp = space(3);
        let m = model("constant", "a0 = 3.0");
        let probe = ProbePoint::real_s(0.0, iso(0.02), NU0);
        let (_, op) = assemble_linearized(&sp, &m, &probe, &SolverOptions::default()).unwrap();
        let exact = |x: Point| C64::new(x[0] * x[0] + x[1] * x[1], 0.0);
        let g = vec![C64::new(12.0, 0.0); sp.vertex_count()];
        let v = op.solve(Some(&g), &trace_of(&sp, exact)).unwrap();
        assert!(v.max_error_against(exact) < 5e-3);
    }

    #[test]
    fn quasilinear_zero_datum_is_exact_zero() {
        let sp = space(2);
        let probe = ProbePoint::real_s(0.3, iso(0.05), NU0);
        let h = vec![ZERO; sp.mesh().boundary_loop().len()];
        let (v, rep) = solve_quasilinear_complex(&sp, &band(), &probe, &h, &SolverOptions::default()).unwrap();
        assert!(v.values.iter().all(|z| *z == ZERO));
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn constant_model_quasilinear_equals_linear() {
        let sp = space(2);
        let m = model("constant", "a0 = 2.5");
        let probe = ProbePoint::real_s(0.1, iso(0.04), NU0);
        let opts = SolverOptions::default();
        let h = trace_of(&sp, |x| C64::new(0.01 * x[1], 0.005 * x[0] * x[0]));
        let ctx = ProbeContext::new(&sp, &m, &probe, &opts).unwrap();
        let lin = ctx.solve_linear(&h).unwrap();
        let (q, _) = ctx.solve_quasilinear(&h, Start::Linearized, &opts).unwrap();
        let dev = lin.values.iter().zip(&q.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(dev < 1e-13, "{dev}");
    }

    #[test]
    fn newton_starts_agree() {
        let sp = space(3);
        let probe = ProbePoint::real_s(0.0, iso(0.05), NU0);
        let opts = SolverOptions::default();
        let ctx = ProbeContext::new(&sp, &band(), &probe, &opts).unwrap();
        let h = trace_of(&sp, |x| C64::new(0.01 * x[0], 0.0));
        let (a, ra) = ctx.solve_quasilinear(&h, Start::Linearized, &opts).unwrap();
        let (b, _) = ctx.solve_quasilinear(&h, Start::Lift, &opts).unwrap();
        let dev = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(dev <= 1e-8, "{dev}");
        assert!(ra.iterations <= 10);
    }

    #[test]
    fn budget_violation_rejected() {
        let sp = space(1);
        let probe = ProbePoint::real_s(0.0, iso(0.05), NU0);
        let h = vec![C64::new(0.2, 0.0); sp.mesh().boundary_loop().len()];
        assert!(matches!(
            solve_quasilinear_complex(&sp, &band(), &probe, &h, &SolverOptions::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn jacobian_matches_directional_differences() {
        use rand::{Rng, SeedableRng};
        let sp = space(2);
        let problem = QuasilinearProblem::new(&sp, &band(), C64::new(0.4, 0.0), iso(0.05)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = sp.vertex_count();
        let w: Vec<C64> = (0..n)
            .map(|_| C64::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)))
            .collect();
        for _ in 0..20 {
            let d: Vec<C64> = (0..n)
                .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let jd = problem.jacobian_apply(&w, &d).unwrap();
            let gap = |eps: f64| {
                let wp: Vec<C64> = w.iter().zip(&d).map(|(a, b)| a + b * eps).collect();
                let wm: Vec<C64> = w.iter().zip(&d).map(|(a, b)| a - b * eps).collect();
                let (rp, _) = problem.residual(&wp).unwrap();
                let (rm, _) = problem.residual(&wm).unwrap();
                rp.iter()
                    .zip(&rm)
                    .zip(&jd)
                    .map(|((p, m), j)| ((p - m) / (2.0 * eps) - j).norm())
                    .fold(0.0, f64::max)
            };
            let (g1, g2) = (gap(1e-3), gap(5e-4));
            assert!(g2 < 0.3 * g1 || g2 < 1e-11, "{g1} {g2}");
        }
    }

    #[test]
    fn real_constant_datum_in_one_step() {
        let sp = space(2);
        let f = vec![0.7; sp.mesh().boundary_loop().len()];
        let (u, rep) = solve_quasilinear_real(&sp, &band(), &f, &SolverOptions::default()).unwrap();
        assert!(rep.iterations <= 1, "{rep:?}");
        assert!(u.values.iter().all(|z| (z.re - 0.7).abs() < 1e-13 && z.im == 0.0));
    }

    #[test]
    fn real_problem_self_convergence() {
        let f = |x: Point| 0.1 * x[0];
        let solve = |level: usize| {
            let sp = space(level);
            let tr: Vec<f64> = sp.mesh().boundary_loop().iter().map(|&v| f(sp.mesh().vertices[v])).collect();
            let (u, rep) = solve_quasilinear_real(&sp, &band(), &tr, &SolverOptions::default()).unwrap();
            assert!(rep.iterations <= 10);
            u
        };
        let fine = solve(5);
        // coarse vertices keep their indices under refinement
        let dev = |u: &ComplexField| {
            u.values.iter().zip(&fine.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
        };
        let (e2, e3) = (dev(&solve(2)), dev(&solve(3)));
        assert!(e3 < 0.5 * e2, "{e2} {e3}");
    }

    #[test]
    fn probe_residual_constant_model_is_rounding() {
        let sp = space(3);
        let m = model("constant", "a0 = 3.0");
        for p in [iso(0.05), real_vec([0.05, 0.05])] {
            let r = probe_residual(&sp, &m, &ProbePoint::real_s(0.0, p, NU0)).unwrap();
            assert!(r <= 1e-12, "{r}");
        }
    }

    #[test]
    fn coercivity_monotone_in_probe_size() {
        let sp = space(1);
        let mut last = f64::NEG_INFINITY;
        for t in [0.06, 0.04, 0.02, 0.01] {
            let probe = ProbePoint::real_s(0.5, iso(t), NU0);
            let (c, _) = assemble_linearized(&sp, &band(), &probe, &SolverOptions::default()).unwrap();
            assert!(c.coercivity >= last - 1e-12);
            last = c.coercivity;
        }
    }
}
