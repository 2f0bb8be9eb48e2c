//! Triangulated disk whose boundary passes through the origin.
//!
//! The disk of radius `R` is centred at `(R, 0)`, so the origin is a boundary
//! point (the *anchor*) with outward normal `(-1, 0)`. Level 0 is a ring mesh
//! (ring `k` carries `6k` vertices); every refinement splits each triangle into
//! four and projects new boundary midpoints back onto the circle, which keeps
//! the anchor vertex untouched.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Largest refinement level accepted by [`build_disk_mesh`].
pub const DEFAULT_MAX_LEVEL: usize = 8;

/// Number of vertex rings in the level-0 mesh.
pub const DEFAULT_COARSE_RINGS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    /// Counterclockwise loop; edge `k` joins `boundary_loop[k]` and `boundary_loop[k + 1]`.
    pub boundary_edges: Vec<[usize; 2]>,
    pub anchor_vertex: usize,
    /// Unit outward normal per entry of [`Mesh::boundary_loop`].
    pub boundary_normals: Vec<Point>,
    pub refinement_level: usize,
    pub mesh_size_h: f64,
    pub radius: f64,
    pub center: Point,
    boundary_loop: Vec<usize>,
    boundary_slot: Vec<Option<usize>>,
}

/// Builds the disk mesh of the given radius at the given refinement level.
pub fn build_disk_mesh(radius: f64, refinement_level: usize) -> Result<Mesh> {
    build_disk_mesh_with(radius, refinement_level, DEFAULT_COARSE_RINGS, DEFAULT_MAX_LEVEL)
}

pub fn build_disk_mesh_with(
    radius: f64,
    refinement_level: usize,
    coarse_rings: usize,
    max_level: usize,
) -> Result<Mesh> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::validation(format!("disk radius must be positive, got {radius}")));
    }
    if coarse_rings == 0 {
        return Err(Error::validation("coarse mesh needs at least one ring"));
    }
    if refinement_level > max_level {
        return Err(Error::ResourceLimit(format!(
            "refinement level {refinement_level} exceeds the configured maximum {max_level}"
        )));
    }
    let mut mesh = coarse_ring_mesh(radius, coarse_rings);
    for _ in 0..refinement_level {
        mesh = mesh.refine();
    }
    Ok(mesh)
}

fn coarse_ring_mesh(radius: f64, rings: usize) -> Mesh {
    let center = [radius, 0.0];
    let mut vertices = vec![center];
    // ring_start[k] = index of the first vertex of ring k (ring 0 is the centre)
    let mut ring_start = vec![0usize];
    for k in 1..=rings {
        ring_start.push(vertices.len());
        let r = radius * k as f64 / rings as f64;
        let n = 6 * k;
        for j in 0..n {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            vertices.push([center[0] + r * phi.cos(), center[1] + r * phi.sin()]);
        }
    }
    let ring = |k: usize, j: usize| -> usize {
        if k == 0 {
            0
        } else {
            ring_start[k] + j % (6 * k)
        }
    };

    let mut triangles = Vec::new();
    for k in 1..=rings {
        let n_out = 6 * k;
        let n_in = 6 * (k - 1);
        if k == 1 {
            for j in 0..n_out {
                triangles.push([0, ring(1, j), ring(1, j + 1)]);
            }
            continue;
        }
        // zipper walk: close each step with the shorter of the two candidate diagonals
        let (mut i, mut j) = (0usize, 0usize);
        while i < n_in || j < n_out {
            let advance_outer = i == n_in
                || (j < n_out
                    && dist(vertices[ring(k - 1, i)], vertices[ring(k, j + 1)])
                        <= dist(vertices[ring(k - 1, i + 1)], vertices[ring(k, j)]));
            if advance_outer {
                triangles.push([ring(k - 1, i), ring(k, j), ring(k, j + 1)]);
                j += 1;
            } else {
                triangles.push([ring(k - 1, i), ring(k, j), ring(k - 1, i + 1)]);
                i += 1;
            }
        }
    }
    for t in triangles.iter_mut() {
        if signed_area(&vertices, *t) < 0.0 {
            t.swap(1, 2);
        }
    }

    let anchor = ring(rings, 3 * rings);
    vertices[anchor] = [0.0, 0.0];
    let boundary_loop: Vec<usize> = (0..6 * rings).map(|j| ring(rings, j)).collect();
    Mesh::assemble(vertices, triangles, boundary_loop, anchor, 0, radius, center)
}

pub(crate) fn signed_area(vertices: &[Point], t: [usize; 3]) -> f64 {
    let [a, b, c] = t.map(|i| vertices[i]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Mesh {
    fn assemble(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary_loop: Vec<usize>,
        anchor_vertex: usize,
        refinement_level: usize,
        radius: f64,
        center: Point,
    ) -> Mesh {
        let nb = boundary_loop.len();
        let boundary_edges = (0..nb)
            .map(|k| [boundary_loop[k], boundary_loop[(k + 1) % nb]])
            .collect();
        let mut boundary_slot = vec![None; vertices.len()];
        for (k, &v) in boundary_loop.iter().enumerate() {
            boundary_slot[v] = Some(k);
        }
        let boundary_normals = boundary_loop
            .iter()
            .map(|&v| {
                if v == anchor_vertex {
                    return [-1.0, 0.0];
                }
                let d = [vertices[v][0] - center[0], vertices[v][1] - center[1]];
                let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
                [d[0] / n, d[1] / n]
            })
            .collect();
        let mesh_size_h = triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| vertices[i]);
                dist(a, b).max(dist(b, c)).max(dist(c, a))
            })
            .fold(0.0, f64::max);
        Mesh {
            vertices,
            triangles,
            boundary_edges,
            anchor_vertex,
            boundary_normals,
            refinement_level,
            mesh_size_h,
            radius,
            center,
            boundary_loop,
            boundary_slot,
        }
    }

    /// Uniform red refinement with boundary midpoints projected onto the circle.
    pub fn refine(&self) -> Mesh {
        let mut vertices = self.vertices.clone();
        let mut boundary_pairs = HashMap::new();
        for e in &self.boundary_edges {
            boundary_pairs.insert(edge_key(e[0], e[1]), ());
        }
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point>| -> usize {
            *midpoint.entry(edge_key(a, b)).or_insert_with(|| {
                let (pa, pb) = (vertices[a], vertices[b]);
                let mut m = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
                if boundary_pairs.contains_key(&edge_key(a, b)) {
                    let d = [m[0] - self.center[0], m[1] - self.center[1]];
                    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
                    m = [
                        self.center[0] + self.radius * d[0] / n,
                        self.center[1] + self.radius * d[1] / n,
                    ];
                }
                vertices.push(m);
                vertices.len() - 1
            })
        };

        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for &[a, b, c] in &self.triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            triangles.push([a, ab, ca]);
            triangles.push([ab, b, bc]);
            triangles.push([ca, bc, c]);
            triangles.push([ab, bc, ca]);
        }
        let mut boundary_loop = Vec::with_capacity(2 * self.boundary_loop.len());
        for e in &self.boundary_edges {
            boundary_loop.push(e[0]);
            boundary_loop.push(mid(e[0], e[1], &mut vertices));
        }
        Mesh::assemble(
            vertices,
            triangles,
            boundary_loop,
            self.anchor_vertex,
            self.refinement_level + 1,
            self.radius,
            self.center,
        )
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Boundary vertices in counterclockwise order, starting from the first coarse vertex.
    pub fn boundary_loop(&self) -> &[usize] {
        &self.boundary_loop
    }

    /// Position of `vertex` in the boundary loop, `None` for interior vertices.
    pub fn boundary_slot(&self, vertex: usize) -> Option<usize> {
        self.boundary_slot.get(vertex).copied().flatten()
    }

    pub fn is_boundary(&self, vertex: usize) -> bool {
        self.boundary_slot(vertex).is_some()
    }

    pub fn anchor_slot(&self) -> usize {
        self.boundary_slot[self.anchor_vertex].expect("anchor lies on the boundary")
    }

    pub fn anchor_normal(&self) -> Point {
        self.boundary_normals[self.anchor_slot()]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        signed_area(&self.vertices, self.triangles[t])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Length of the two boundary edges adjacent to the loop entry `slot`, halved.
    pub fn boundary_hat_mass(&self, slot: usize) -> f64 {
        let nb = self.boundary_loop.len();
        let prev = self.boundary_loop[(slot + nb - 1) % nb];
        let next = self.boundary_loop[(slot + 1) % nb];
        let here = self.vertices[self.boundary_loop[slot]];
        0.5 * (dist(self.vertices[prev], here) + dist(here, self.vertices[next]))
    }

    /// Largest interior angle over all triangles, in radians.
    pub fn max_angle(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in &self.triangles {
            let p = t.map(|i| self.vertices[i]);
            for k in 0..3 {
                let (o, a, b) = (p[k], p[(k + 1) % 3], p[(k + 2) % 3]);
                let u = [a[0] - o[0], a[1] - o[1]];
                let w = [b[0] - o[0], b[1] - o[1]];
                let cos = (u[0] * w[0] + u[1] * w[1]) / (dist(a, o) * dist(b, o));
                worst = worst.max(cos.clamp(-1.0, 1.0).acos());
            }
        }
        worst
    }

    /// Writes the mesh as line-oriented text: header keys, then the vertex
    /// table `x y`, the triangle table `a b c` and the boundary loop, one
    /// vertex index per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# calderon-lab mesh v1");
        let _ = writeln!(out, "radius {}", self.radius);
        let _ = writeln!(out, "level {}", self.refinement_level);
        let _ = writeln!(out, "anchor {}", self.anchor_vertex);
        let _ = writeln!(out, "vertices {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{} {}", v[0], v[1]);
        }
        let _ = writeln!(out, "triangles {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(out, "boundary {}", self.boundary_loop.len());
        for v in &self.boundary_loop {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Mesh> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
            let (n, l) = lines
                .next()
                .ok_or_else(|| Error::parse(0, format!("unexpected end of file, expected {what}")))?;
            Ok((n, l.split_whitespace().collect()))
        };
        fn header<T: std::str::FromStr>(item: (usize, Vec<&str>), key: &str) -> Result<T> {
            let (n, f) = item;
            if f.len() != 2 || f[0] != key {
                return Err(Error::parse(n, format!("expected `{key} <value>`")));
            }
            f[1].parse().map_err(|_| Error::parse(n, format!("bad value for {key}")))
        }
        fn num<T: std::str::FromStr>(n: usize, s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::parse(n, format!("cannot parse `{s}`")))
        }

        let radius: f64 = header(next("radius")?, "radius")?;
        let level: usize = header(next("level")?, "level")?;
        let anchor: usize = header(next("anchor")?, "anchor")?;
        let nv: usize = header(next("vertices")?, "vertices")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (n, f) = next("vertex")?;
            if f.len() != 2 {
                return Err(Error::parse(n, "vertex line needs two coordinates"));
            }
            vertices.push([num(n, f[0])?, num(n, f[1])?]);
        }
        let nt: usize = header(next("triangles")?, "triangles")?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (n, f) = next("triangle")?;
            if f.len() != 3 {
                return Err(Error::parse(n, "triangle line needs three indices"));
            }
            let t = [num(n, f[0])?, num(n, f[1])?, num(n, f[2])?];
            if t.iter().any(|&i: &usize| i >= nv) {
                return Err(Error::parse(n, "triangle index out of range"));
            }
            triangles.push(t);
        }
        let nb: usize = header(next("boundary")?, "boundary")?;
        let mut boundary_loop = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (n, f) = next("boundary vertex")?;
            let v: usize = num(n, f.first().copied().unwrap_or(""))?;
            if v >= nv {
                return Err(Error::parse(n, "boundary index out of range"));
            }
            boundary_loop.push(v);
        }
        if !boundary_loop.contains(&anchor) {
            return Err(Error::validation("anchor vertex is not on the boundary loop"));
        }
        Ok(Mesh::assemble(
            vertices,
            triangles,
            boundary_loop,
            anchor,
            level,
            radius,
            [radius, 0.0],
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Mesh> {
        Mesh::from_text(&std::fs::read_to_string(path)?)
    }
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Outward unit normal at a boundary vertex, taken from the circle.
pub fn outward_normal(mesh: &Mesh, boundary_vertex: usize) -> Result<Point> {
    match mesh.boundary_slot(boundary_vertex) {
        Some(slot) => Ok(mesh.boundary_normals[slot]),
        None => Err(Error::validation(format!(
            "vertex {boundary_vertex} is not on the boundary"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meshes_are_non_obtuse() {
        for level in 0..=5 {
            let m = build_disk_mesh(1.0, level).unwrap();
            // law of cosines per corner, independent of max_angle
            let mut worst: f64 = 0.0;
            for t in &m.triangles {
                let p = t.map(|v| m.vertices[v]);
                let len = |a: Point, b: Point| (a[0] - b[0]).hypot(a[1] - b[1]);
                let (a, b, c) = (len(p[1], p[2]), len(p[0], p[2]), len(p[0], p[1]));
                for (x, y, z) in [(a, b, c), (b, c, a), (c, a, b)] {
                    worst = worst.max(((y * y + z * z - x * x) / (2.0 * y * z)).clamp(-1.0, 1.0).acos());
                }
            }
            assert!(worst.to_degrees() <= 90.0 + 1e-9, "level {level}: {}", worst.to_degrees());
            assert!((m.max_angle() - worst).abs() < 1e-9);
        }
    }

    #[test]
    fn coarse_mesh_anchor_and_orientation() {
        let m = build_disk_mesh(1.0, 0).unwrap();
        assert_eq!(m.vertices[m.anchor_vertex], [0.0, 0.0]);
        assert_eq!(m.anchor_normal(), [-1.0, 0.0]);
        assert!((0..m.triangles.len()).all(|t| m.triangle_area(t) > 0.0));
        assert_eq!(m.boundary_edges.len(), 12);
        assert_eq!(m.vertex_count(), 19);
    }

    #[test]
    fn refinement_doubles_boundary_and_keeps_anchor() {
        let mut m = build_disk_mesh(1.0, 0).unwrap();
        for level in 1..=4 {
            let r = m.refine();
            assert_eq!(r.refinement_level, level);
            assert_eq!(r.boundary_edges.len(), 2 * m.boundary_edges.len());
            assert!(r.mesh_size_h <= 0.75 * m.mesh_size_h);
            let ratio = m.mesh_size_h / r.mesh_size_h;
            assert!(ratio > 2.0 / 1.5 && ratio < 2.0 * 1.5);
            let a = r.vertices[r.anchor_vertex];
            assert!(a[0].abs() < 1e-12 && a[1].abs() < 1e-12);
            assert!(r.is_boundary(r.anchor_vertex));
            m = r;
        }
    }

    #[test]
    fn normals_are_unit_and_radial() {
        let m = build_disk_mesh(1.0, 3).unwrap();
        for (slot, &v) in m.boundary_loop().iter().enumerate() {
            let n = m.boundary_normals[slot];
            assert!(((n[0] * n[0] + n[1] * n[1]).sqrt() - 1.0).abs() < 1e-12);
            let x = m.vertices[v];
            let radial = [(x[0] - 1.0), x[1]];
            assert!(n[0] * radial[0] + n[1] * radial[1] > 1.0 - 1e-12);
        }
        let far = m
            .boundary_loop()
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = dist(m.vertices[a], [2.0, 0.0]);
                let db = dist(m.vertices[b], [2.0, 0.0]);
                da.total_cmp(&db)
            })
            .unwrap();
        let n = outward_normal(&m, far).unwrap();
        assert!((n[0] - 1.0).abs() < m.mesh_size_h.powi(2) && n[1].abs() < m.mesh_size_h);
    }

    #[test]
    fn interior_vertex_has_no_normal() {
        let m = build_disk_mesh(1.0, 1).unwrap();
        let interior = (0..m.vertex_count()).find(|&v| !m.is_boundary(v)).unwrap();
        assert!(matches!(outward_normal(&m, interior), Err(Error::Validation(_))));
    }

    #[test]
    fn boundary_loop_is_a_single_cycle() {
        let m = build_disk_mesh(1.0, 3).unwrap();
        let loop_ = m.boundary_loop();
        let mut seen = std::collections::HashSet::new();
        assert!(loop_.iter().all(|v| seen.insert(*v)));
        for (k, e) in m.boundary_edges.iter().enumerate() {
            assert_eq!(e[1], m.boundary_edges[(k + 1) % loop_.len()][0]);
        }
        // every boundary edge belongs to exactly one triangle
        let mut count = HashMap::new();
        for t in &m.triangles {
            for k in 0..3 {
                *count.entry(edge_key(t[k], t[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        for e in &m.boundary_edges {
            assert_eq!(count[&edge_key(e[0], e[1])], 1);
        }
        let boundary_like = count.values().filter(|&&c| c == 1).count();
        assert_eq!(boundary_like, loop_.len());
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(build_disk_mesh(0.0, 1), Err(Error::Validation(_))));
        assert!(matches!(build_disk_mesh(-1.0, 1), Err(Error::Validation(_))));
        assert!(matches!(build_disk_mesh(1.0, 9), Err(Error::ResourceLimit(_))));
    }

    #[test]
    fn text_round_trip() {
        let m = build_disk_mesh(1.0, 2).unwrap();
        let back = Mesh::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn area_converges_at_second_order() {
        // oracle: polygon area error against pi, rate fitted over levels 2..5
        let errors: Vec<(f64, f64)> = (2..=5)
            .map(|l| {
                let m = build_disk_mesh(1.0, l).unwrap();
                (m.mesh_size_h, (m.total_area() - std::f64::consts::PI).abs())
            })
            .collect();
        for w in errors.windows(2) {
            let rate = (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln();
            assert!((rate - 2.0).abs() < 0.3, "rate {rate}");
        }
    }
}
