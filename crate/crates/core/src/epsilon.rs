//! Fine-scale simulation of the ε-problem on a truncated disk and the
//! convergence study of its eigenvalues towards the limit defect modes.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beta::{find_gaps, BetaEvaluator, BetaOptions, DirectBeta};
use crate::defect::{assemble_mode_field, find_radial_modes, LocalizedMode, ModeField, RadialParams, RadialSearch};
use crate::error::{Error, Result};
use crate::fem::{
    assemble_on, count_below, eig_with_factor, meshers, tags, BoundaryMarker, Coefficient, CsrPattern, DofMap,
    EigOptions, EigenPair, FormKind, SimplicialMesh, SymbolicFactor, SymmetricForm,
};
use crate::geometry::{
    classify_point, copy_relation, lattice_coordinates, BoundaryInclusionPolicy, CellGeometry, CopyRelation,
    DefectShape, DefectSpec, InclusionShape, PhaseLabel,
};
use crate::inclusion::{fem_spectrum, inclusion_mesh, K_MAX, MEAN_TOL};

/// Everything that defines the fine-scale problem except ε.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSetup {
    pub geometry: CellGeometry,
    pub defect: DefectSpec,
    pub policy: BoundaryInclusionPolicy,
    /// Radius of the truncated disk, with a Dirichlet condition on its boundary.
    pub r_max: f64,
    /// Elements across the diameter of every inclusion copy.
    pub cells_per_inclusion: usize,
    /// Element size in the defect and on the outer circle.
    pub macro_h: f64,
}

impl EpsilonSetup {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.defect.validate()?;
        self.policy.validate()?;
        if self.geometry.dimension != 2 {
            return Err(Error::geometry(
                "geometry.dimension",
                "fine-scale validation runs in 2D",
            ));
        }
        if !(self.r_max > self.defect.outer_radius()) {
            return Err(Error::InvalidArgument("r_max must exceed the defect radius".into()));
        }
        if self.cells_per_inclusion < 2 {
            return Err(Error::InvalidArgument("cells_per_inclusion must be at least 2".into()));
        }
        if !(self.macro_h > 0.0) {
            return Err(Error::InvalidArgument("macro_h must be positive".into()));
        }
        Ok(())
    }

    /// Same problem with every mesh size halved.
    pub fn refined(&self) -> Self {
        EpsilonSetup {
            cells_per_inclusion: 2 * self.cells_per_inclusion,
            macro_h: 0.5 * self.macro_h,
            ..self.clone()
        }
    }

    /// Element size across the inclusion, in cell units.
    fn template_h(&self) -> f64 {
        2.0 * self.geometry.bounding_ball().1 / self.cells_per_inclusion as f64
    }

    /// Reference mesh of one inclusion in cell coordinates; every interior
    /// copy of a ball inclusion in the fine-scale mesh is a scaled translate of it.
    pub fn template(&self) -> Result<SimplicialMesh> {
        inclusion_mesh(&self.geometry, self.template_h())
    }
}

/// Assembled fine-scale problem at one ε.
pub struct EpsilonProblem {
    pub eps: f64,
    pub mesh: SimplicialMesh,
    /// a(x, ε) per element.
    pub coefficients: Vec<f64>,
    pub map: Arc<DofMap>,
    pub stiffness: SymmetricForm,
    pub mass: SymmetricForm,
    /// Copies touching the outer circle, replaced by matrix.
    pub dropped_copies: usize,
}

impl EpsilonProblem {
    pub fn n_dofs(&self) -> usize {
        self.map.n_dofs()
    }

    /// Sorted distinct element coefficients.
    pub fn coefficient_values(&self) -> Vec<f64> {
        let mut v = self.coefficients.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Area of the elements of one phase.
    pub fn phase_area(&self, phase: PhaseLabel) -> f64 {
        self.mesh.measure_where(|t| t == phase.tag())
    }
}

/// Checks that ε = 1/k for a positive integer k.
fn check_eps(eps: f64) -> Result<()> {
    let k = (1.0 / eps).round();
    if !(eps > 0.0) || k < 1.0 || ((1.0 / eps) - k).abs() > 1e-9 * k {
        return Err(Error::InvalidArgument(format!(
            "eps = {eps} is not the reciprocal of an integer"
        )));
    }
    Ok(())
}

/// Cell indices whose inclusion copy lies within the disk of radius r.
fn copy_cells(geom: &CellGeometry, eps: f64, r: f64) -> Vec<[i64; 2]> {
    let (c, rb) = geom.bounding_ball();
    let kmax = (r / eps).ceil() as i64 + 1;
    let mut out = Vec::new();
    for i in -kmax..=kmax {
        for j in -kmax..=kmax {
            let x = eps * (i as f64 + c[0]);
            let y = eps * (j as f64 + c[1]);
            if (x * x + y * y).sqrt() - eps * rb < r {
                out.push([i, j]);
            }
        }
    }
    out
}

/// Point of a ball-inclusion copy, in the same arithmetic used for template vertices.
fn to_global(eps: f64, cell: [i64; 2], y: &[f64]) -> [f64; 2] {
    [eps * (cell[0] as f64 + y[0]), eps * (cell[1] as f64 + y[1])]
}

fn key(p: [f64; 2]) -> (u64, u64) {
    (p[0].to_bits(), p[1].to_bits())
}

/// Signed distance from the inclusion boundary in cell units, negative inside.
fn inclusion_distance(geom: &CellGeometry, y: &[f64]) -> f64 {
    match &geom.inclusion {
        InclusionShape::Ball { center, radius } => (y[0] - center[0]).hypot(y[1] - center[1]) - radius,
        InclusionShape::Polygon { vertices } => {
            let d = polygon_distance(vertices, [y[0], y[1]]);
            if geom.in_inclusion(y) {
                -d
            } else {
                d
            }
        }
    }
}

/// Unsigned distance from the defect boundary.
fn defect_distance(defect: &DefectSpec, x: [f64; 2]) -> f64 {
    match &defect.shape {
        DefectShape::Ball { radius } => (x[0].hypot(x[1]) - radius).abs(),
        DefectShape::Polygon { vertices } => polygon_distance(vertices, x),
        DefectShape::None => f64::INFINITY,
    }
}

fn polygon_distance(vertices: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Points on a closed polygon with edges subdivided to length at most h.
fn subdivide_loop(vertices: &[[f64; 2]], h: f64, map: impl Fn([f64; 2]) -> [f64; 2]) -> Vec<[f64; 2]> {
    let n = vertices.len();
    let mut pts = Vec::new();
    for i in 0..n {
        let (a, b) = (map(vertices[i]), map(vertices[(i + 1) % n]));
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let m = ((len / h).ceil() as usize).max(1);
        for s in 0..m {
            let t = s as f64 / m as f64;
            pts.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    pts
}

/// Meshes the truncated disk at scale ε with fitted inclusion and defect
/// interfaces and assembles the stiffness and mass forms.
///
/// The mesh is a constrained Delaunay triangulation of seeded points: a
/// square lattice of spacing h_inc in every cell outside the inclusion, a
/// triangular lattice of spacing `macro_h` in the defect, and the constraint
/// loops. Copies of a ball inclusion away from the defect are then stitched
/// in as translates of [`EpsilonSetup::template`], so the discrete
/// inclusion operator is the same in every cell. Copies cut by a ball defect
/// have the arc outside the defect fitted. Copies reaching the outer circle
/// are replaced by matrix, which keeps the Dirichlet circle from creating
/// inclusion states inside the gap.
pub fn build_epsilon_problem(setup: &EpsilonSetup, eps: f64) -> Result<EpsilonProblem> {
    setup.validate()?;
    check_eps(eps)?;
    let geom = &setup.geometry;
    let defect = &setup.defect;
    let (bc, rb) = geom.bounding_ball();
    let s_cell = setup.template_h();
    let h_inc = eps * s_cell;
    let h_macro = setup.macro_h;
    let h_loop = h_macro.min(h_inc);
    let keep_out = 0.6;

    let mut dom = meshers::PlanarDomain::default();
    dom.add_loop(&meshers::circle_points([0.0, 0.0], setup.r_max, h_inc, 8, 0.0));

    let template = match geom.inclusion {
        InclusionShape::Ball { .. } => Some(setup.template()?),
        InclusionShape::Polygon { .. } => None,
    };
    let on_ring = template
        .as_ref()
        .map(|t| t.marked_vertices(BoundaryMarker::Outer))
        .unwrap_or_default();
    // template boundary ring in angular order
    let ring: Vec<usize> = template
        .as_ref()
        .map(|t| {
            let mut ring: Vec<usize> = (0..t.n_vertices()).filter(|&v| on_ring[v]).collect();
            let angle = |v: usize| {
                let p = t.vertex(v);
                (p[1] - bc[1]).atan2(p[0] - bc[0]).rem_euclid(2.0 * PI)
            };
            ring.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)));
            ring
        })
        .unwrap_or_default();

    // matrix seeds of one cell, in cell units
    let n_lat = (1.0 / s_cell).ceil() as usize;
    let lattice: Vec<[f64; 2]> = (0..n_lat)
        .flat_map(|i| (0..n_lat).map(move |j| [(i as f64 + 0.5) / n_lat as f64, (j as f64 + 0.5) / n_lat as f64]))
        .collect();

    let margin = h_macro.max(h_inc);
    let outer_limit = setup.r_max - keep_out * h_inc;
    let seed_ok = |p: [f64; 2]| p[0].hypot(p[1]) < outer_limit && defect_distance(defect, p) > keep_out * h_loop;
    let mut stitched: Vec<[i64; 2]> = Vec::new();
    let mut dropped: HashSet<[i64; 2]> = HashSet::new();
    let mut cut_arcs: Vec<([f64; 2], f64, f64)> = Vec::new();
    for cell in copy_cells(geom, eps, setup.r_max) {
        let centre = to_global(eps, cell, &bc);
        let dist = centre[0].hypot(centre[1]);
        let drop = dist + eps * rb > setup.r_max - margin;
        for y in &lattice {
            let p = to_global(eps, cell, y);
            if (drop || inclusion_distance(geom, y) > keep_out * s_cell) && seed_ok(p) && !defect.contains_closed(&p) {
                dom.add_point(p);
            }
        }
        if drop {
            dropped.insert(cell);
            continue;
        }
        match copy_relation(geom, defect, eps, &cell) {
            CopyRelation::Inside => {}
            CopyRelation::Outside => match (&geom.inclusion, &template) {
                (InclusionShape::Ball { .. }, Some(t)) => {
                    let pts: Vec<[f64; 2]> = ring.iter().map(|&v| to_global(eps, cell, t.vertex(v))).collect();
                    dom.add_loop(&pts);
                    stitched.push(cell);
                }
                (InclusionShape::Polygon { vertices }, _) => {
                    dom.add_loop(&subdivide_loop(vertices, h_inc, |y| to_global(eps, cell, &y)));
                    for y in &lattice {
                        if inclusion_distance(geom, y) < -keep_out * s_cell {
                            dom.add_point(to_global(eps, cell, y));
                        }
                    }
                }
                _ => unreachable!("ball inclusions always have a template"),
            },
            CopyRelation::Cut => {
                if let (InclusionShape::Ball { radius, .. }, DefectShape::Ball { radius: big }, Some(t)) =
                    (&geom.inclusion, &defect.shape, &template)
                {
                    let r = eps * radius;
                    let a = (dist * dist + big * big - r * r) / (2.0 * dist);
                    let half = (big * big - a * a).max(0.0).sqrt();
                    // near-tangent copies are left unfitted
                    if half >= 0.5 * h_inc {
                        cut_arcs.push((centre, r, half));
                        for v in 0..t.n_vertices() {
                            let p = to_global(eps, cell, t.vertex(v));
                            if !on_ring[v] && seed_ok(p) && !defect.contains_closed(&p) {
                                dom.add_point(p);
                            }
                        }
                    }
                }
            }
        }
    }

    // defect seeds and boundary, with the crossing points of fitted cut copies inserted
    let mut crossing_index: Vec<[usize; 2]> = Vec::new();
    let (lo, hi) = match &defect.shape {
        DefectShape::Ball { radius } => ([-radius, -radius], [*radius, *radius]),
        DefectShape::Polygon { vertices } => vertices
            .iter()
            .fold(([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]), |(lo, hi), v| {
                ([lo[0].min(v[0]), lo[1].min(v[1])], [hi[0].max(v[0]), hi[1].max(v[1])])
            }),
        DefectShape::None => ([0.0; 2], [-1.0; 2]),
    };
    let row = h_macro * 3f64.sqrt() / 2.0;
    let rows = ((hi[1] - lo[1]) / row).ceil() as i64;
    let cols = ((hi[0] - lo[0]) / h_macro).ceil() as i64 + 1;
    for j in 0..=rows {
        for i in 0..=cols {
            let p = [
                lo[0] + (i as f64 + 0.5 * (j % 2) as f64) * h_macro,
                lo[1] + j as f64 * row,
            ];
            if defect.contains_open(&p) && seed_ok(p) {
                dom.add_point(p);
            }
        }
    }
    match &defect.shape {
        DefectShape::Ball { radius: big } => {
            let base = meshers::circle_points([0.0, 0.0], *big, h_loop, 8, 0.0);
            let mut pts: Vec<(f64, [f64; 2], Option<(usize, usize)>)> = Vec::new();
            for (i, &(c, r, half)) in cut_arcs.iter().enumerate() {
                let d = c[0].hypot(c[1]);
                let u = [c[0] / d, c[1] / d];
                let a = (d * d + big * big - r * r) / (2.0 * d);
                for (s, sign) in [(0usize, -1.0), (1, 1.0)] {
                    let p = [a * u[0] - sign * half * u[1], a * u[1] + sign * half * u[0]];
                    pts.push((p[1].atan2(p[0]).rem_euclid(2.0 * PI), p, Some((i, s))));
                }
            }
            let crossing_angles: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let min_gap = 0.4 * h_loop / big;
            for p in base {
                let t = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
                let close = crossing_angles.iter().any(|&c| {
                    let d = (t - c).rem_euclid(2.0 * PI);
                    d.min(2.0 * PI - d) < min_gap
                });
                if !close {
                    pts.push((t, p, None));
                }
            }
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let loop_pts: Vec<[f64; 2]> = pts.iter().map(|p| p.1).collect();
            let idx = dom.add_loop(&loop_pts);
            crossing_index = vec![[usize::MAX; 2]; cut_arcs.len()];
            for (k, p) in pts.iter().enumerate() {
                if let Some((i, s)) = p.2 {
                    crossing_index[i][s] = idx[k];
                }
            }
        }
        DefectShape::Polygon { vertices } => {
            dom.add_loop(&subdivide_loop(vertices, h_loop, |x| x));
        }
        DefectShape::None => {}
    }

    // arcs of the cut copies outside the defect
    for (i, &(c, r, _)) in cut_arcs.iter().enumerate() {
        let [i0, i1] = crossing_index[i];
        let p0 = dom.points[i0];
        let p1 = dom.points[i1];
        let a0 = (p0[1] - c[1]).atan2(p0[0] - c[0]);
        let a1 = (p1[1] - c[1]).atan2(p1[0] - c[0]);
        let outward = c[1].atan2(c[0]);
        let mut sweep = (a1 - a0).rem_euclid(2.0 * PI);
        let (start, from, to) = if (outward - a0).rem_euclid(2.0 * PI) < sweep {
            (a0, i0, i1)
        } else {
            sweep = 2.0 * PI - sweep;
            (a1, i1, i0)
        };
        let n = ((r * sweep / h_inc).ceil() as usize).max(2);
        let mut prev = from;
        for k in 1..n {
            let t = start + sweep * k as f64 / n as f64;
            dom.points.push([c[0] + r * t.cos(), c[1] + r * t.sin()]);
            let cur = dom.points.len() - 1;
            dom.edges.push([prev, cur]);
            prev = cur;
        }
        dom.edges.push([prev, to]);
    }

    // CDT of everything but the stitched copies
    let stitched_set: HashSet<[i64; 2]> = stitched.iter().copied().collect();
    let n_ring = ring.len().max(3);
    let sector = 2.0 * PI / n_ring as f64;
    let inradius = rb * (0.5 * sector).cos();
    let classify = |p: [f64; 2]| -> Option<u8> {
        let (cell, y) = lattice_coordinates(eps, &p);
        let cell = [cell[0], cell[1]];
        if stitched_set.contains(&cell) {
            let (dx, dy) = (y[0] - bc[0], y[1] - bc[1]);
            let t = dy.atan2(dx).rem_euclid(2.0 * PI);
            let mid = ((t / sector).floor() + 0.5) * sector;
            if dx.hypot(dy) * (t - mid).cos() < inradius {
                return None;
            }
        }
        if dropped.contains(&cell) && !defect.contains_closed(&p) {
            return Some(tags::MATRIX);
        }
        Some(classify_point(geom, defect, eps, &p).tag())
    };
    let outer = meshers::cdt_mesh(&dom, classify).map_err(|e| match e {
        Error::Mesh(msg) => Error::Mesh(format!("fine-scale mesh at eps = {eps}: {msg}")),
        other => other,
    })?;

    // merge the template copies through their shared boundary vertices
    let mut coords = outer.coords().to_vec();
    let mut elements = outer.elements().to_vec();
    let mut elem_tags = outer.tags().to_vec();
    if let Some(t) = &template {
        let lookup: HashMap<(u64, u64), usize> = (0..outer.n_vertices())
            .map(|v| (key([outer.vertex(v)[0], outer.vertex(v)[1]]), v))
            .collect();
        for &cell in &stitched {
            let mut index = vec![0usize; t.n_vertices()];
            for v in 0..t.n_vertices() {
                let p = to_global(eps, cell, t.vertex(v));
                index[v] = if on_ring[v] {
                    *lookup.get(&key(p)).ok_or_else(|| {
                        Error::Mesh(format!(
                            "inclusion copy {cell:?} at eps = {eps} lost boundary vertex {p:?}"
                        ))
                    })?
                } else {
                    coords.extend_from_slice(&p);
                    coords.len() / 2 - 1
                };
            }
            for e in 0..t.n_elements() {
                elements.extend(t.element(e).iter().map(|&v| index[v]));
                elem_tags.push(tags::INCLUSION);
            }
        }
    }
    let mesh = SimplicialMesh::new(2, coords, elements, elem_tags)?;

    let coefficients: Vec<f64> = mesh
        .tags()
        .iter()
        .map(|&t| {
            PhaseLabel::from_tag(t)
                .expect("fine-scale meshes carry phase tags only")
                .coefficient(geom, defect, &setup.policy, eps)
        })
        .collect();
    let ones = vec![1.0; mesh.n_elements()];
    let pattern = Arc::new(CsrPattern::from_mesh(&mesh));
    let k = assemble_on(&mesh, &pattern, Coefficient::Scalar(&coefficients), FormKind::Stiffness)?;
    let m = assemble_on(&mesh, &pattern, Coefficient::Scalar(&ones), FormKind::Mass)?;
    let map = Arc::new(DofMap::dirichlet(&mesh.marked_vertices(BoundaryMarker::Outer)));
    let mut forms = SymmetricForm::restrict_many(&[&k, &m], &map)?;
    let mass = forms.pop().unwrap();
    let stiffness = forms.pop().unwrap();
    Ok(EpsilonProblem {
        eps,
        mesh,
        coefficients,
        map,
        stiffness,
        mass,
        dropped_copies: dropped.len(),
    })
}

/// Eigenpairs of the fine-scale problem in a window around λ₀.
#[derive(Clone, Debug)]
pub struct NearSpectrum {
    /// Ascending eigenvalues in the window with M-orthonormal eigenvectors
    /// on the free dofs.
    pub pairs: Vec<EigenPair>,
    /// The window holds more than the requested number of eigenvalues.
    pub clipped: bool,
}

impl NearSpectrum {
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.value).collect()
    }
}

/// Eigenpairs with |λ − λ₀| < c. The window count comes from the inertia of
/// K − (λ₀ ± c)M; at most `k_max` pairs nearest λ₀ are then computed by
/// shift-invert at σ = λ₀.
pub fn solve_near(
    problem: &EpsilonProblem,
    lambda0: f64,
    c: f64,
    k_max: usize,
    opts: &EigOptions,
) -> Result<NearSpectrum> {
    let symbolic = SymbolicFactor::analyze(problem.stiffness.pattern())?;
    let below = |s: f64| count_below(&symbolic, &problem.stiffness, &problem.mass, s);
    let count = below(lambda0 + c)? - below(lambda0 - c)?;
    let wanted = count.min(k_max);
    if wanted == 0 {
        return Ok(NearSpectrum {
            pairs: Vec::new(),
            clipped: count > 0,
        });
    }
    let shifted = problem.stiffness.lin_comb(1.0, &problem.mass, -lambda0)?;
    let factor = symbolic.factor(&shifted, lambda0)?;
    drop(shifted);
    let mut pairs = eig_with_factor(&factor, &problem.stiffness, &problem.mass, lambda0, wanted, opts)?;
    pairs.retain(|p| (p.value - lambda0).abs() < c);
    pairs.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(NearSpectrum {
        pairs,
        clipped: count > k_max,
    })
}

/// Nodal interpolant of the two-scale approximation
/// u₀(x) + u₀(x)V(x/ε) on inclusion nodes, u₀(x) elsewhere.
#[derive(Clone, Debug)]
pub struct Approximation {
    /// Nodal values on every vertex.
    pub values: Vec<f64>,
    /// Free-dof restriction with unit L² norm.
    pub normalized: Vec<f64>,
}

pub fn build_approximation(field: &ModeField, problem: &EpsilonProblem) -> Result<Approximation> {
    let mesh = &problem.mesh;
    let mut in_inclusion = vec![false; mesh.n_vertices()];
    let mut touches_other = vec![false; mesh.n_vertices()];
    for e in 0..mesh.n_elements() {
        for &v in mesh.element(e) {
            if mesh.tag(e) == tags::INCLUSION {
                in_inclusion[v] = true;
            } else {
                touches_other[v] = true;
            }
        }
    }
    let values: Vec<f64> = (0..mesh.n_vertices())
        .into_par_iter()
        .map(|v| {
            let x = mesh.vertex(v);
            let u0 = field.u0(x);
            if in_inclusion[v] && !touches_other[v] {
                let (_, y) = lattice_coordinates(problem.eps, x);
                u0 * (1.0 + field.v_cell(&y))
            } else {
                u0
            }
        })
        .collect();
    let mut normalized = problem.map.gather(&values);
    let norm = problem.mass.bilinear(&normalized, &normalized).sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidArgument(
            "approximation vanishes on the fine-scale mesh".into(),
        ));
    }
    normalized.iter_mut().for_each(|v| *v /= norm);
    Ok(Approximation { values, normalized })
}

/// L² distance from the normalized approximation to the span of the window
/// eigenvectors, by orthogonal projection.
pub fn projection_distance(problem: &EpsilonProblem, approx: &Approximation, spectrum: &NearSpectrum) -> f64 {
    let m = &problem.mass;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for p in &spectrum.pairs {
        let mut q = p.vector.clone();
        for b in &basis {
            let c = m.bilinear(b, &q);
            q.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = m.bilinear(&q, &q).sqrt();
        if n > 1e-12 {
            q.iter_mut().for_each(|x| *x /= n);
            basis.push(q);
        }
    }
    let mut r = approx.normalized.clone();
    for b in &basis {
        let c = m.bilinear(b, &approx.normalized);
        r.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
    m.bilinear(&r, &r).max(0.0).sqrt()
}

/// Discretely consistent limit problem: β from the template inclusion mesh
/// and the mode of order m nearest a target eigenvalue.
pub struct LimitSolution {
    pub beta: BetaEvaluator,
    pub mode: LocalizedMode,
    pub a_hom: f64,
}

impl LimitSolution {
    pub fn direct(&self) -> &DirectBeta {
        match &self.beta {
            BetaEvaluator::Direct(d) => d,
            _ => unreachable!("limit solutions use the direct evaluator"),
        }
    }

    pub fn field<'a>(&'a self, defect: &'a DefectSpec) -> Result<ModeField<'a>> {
        assemble_mode_field(&self.mode, self.direct(), defect)
    }
}

/// Limit mode computed with β from the same inclusion template the
/// fine-scale mesh uses, so that the fine-scale eigenvalues converge to it
/// as ε → 0 at fixed resolution per inclusion.
pub fn discrete_limit(setup: &EpsilonSetup, a_hom: f64, m: f64, target: f64) -> Result<LimitSolution> {
    setup.validate()?;
    let template = setup.template()?;
    let spectrum = fem_spectrum(&template, setup.geometry.a0, K_MAX, MEAN_TOL, &EigOptions::default())?.spectrum;
    let poles: Vec<f64> = spectrum.poles().iter().map(|p| p.0).collect();
    let direct = DirectBeta::on_mesh(&template, setup.geometry.a0, poles, BetaOptions::default())?;
    let beta = BetaEvaluator::Direct(direct);
    let table = find_gaps(&beta, 2.0 * target)?;
    let gap = *table
        .find(target)
        .ok_or_else(|| Error::InvalidArgument(format!("target {target} is not in a gap of the discrete limit")))?;
    let radius = setup
        .defect
        .radius()
        .ok_or_else(|| Error::InvalidArgument("the discrete limit needs a ball defect".into()))?;
    let params = RadialParams {
        n: 2,
        a2: setup.defect.a2,
        a_hom,
        radius,
        beta: &beta,
    };
    let modes = find_radial_modes(&params, &gap, &[m], RadialSearch::default())?;
    let mode = modes
        .into_iter()
        .min_by(|a, b| (a.lambda0 - target).abs().total_cmp(&(b.lambda0 - target).abs()))
        .ok_or_else(|| Error::InvalidArgument(format!("no mode of order {m} in the gap {gap:?}")))?;
    Ok(LimitSolution { beta, mode, a_hom })
}

/// One row of the convergence study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub eps: f64,
    pub eigs: Vec<f64>,
    /// Distance from λ₀ to the nearest window eigenvalue; `None` for an empty window.
    pub err: Option<f64>,
    pub d: Option<f64>,
    #[serde(rename = "J_count")]
    pub j_count: usize,
    pub clipped: bool,
    pub n_dofs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub m: Option<f64>,
    pub multiplicity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    /// Least-squares log–log slope over all cases.
    pub eig: Option<f64>,
    #[serde(rename = "fn")]
    pub func: Option<f64>,
    /// Slope between the two smallest ε.
    pub eig_two_point: Option<f64>,
    pub fn_two_point: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub lambda0: f64,
    pub mode: ModeSummary,
    pub window: f64,
    /// C in the J_ε window Cε^{1/2}.
    pub j_constant: f64,
    pub cases: Vec<CaseRecord>,
    pub slopes: Slopes,
}

impl ConvergenceReport {
    pub fn errors_decrease(&self) -> bool {
        let e: Option<Vec<f64>> = self.cases.iter().map(|c| c.err).collect();
        e.is_some_and(|e| e.windows(2).all(|w| w[1] < w[0]))
    }

    pub fn distances_nonincreasing(&self) -> bool {
        let d: Option<Vec<f64>> = self.cases.iter().map(|c| c.d).collect();
        d.is_some_and(|d| d.windows(2).all(|w| w[1] <= w[0]))
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "eps,err,d,J_count,n_dofs,eigs")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for c in &self.cases {
            let eigs: Vec<String> = c.eigs.iter().map(|e| format!("{e:e}")).collect();
            writeln!(
                w,
                "{:e},{},{},{},{},{}",
                c.eps,
                opt(c.err),
                opt(c.d),
                c.j_count,
                c.n_dofs,
                eigs.join(" ")
            )?;
        }
        Ok(())
    }
}

/// Least-squares slope of log(y) against log(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.0 > 0.0 && p.1 > 0.0)
        .map(|p| (p.0.ln(), p.1.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (den > 0.0).then(|| num / den)
}

/// Controls of the study.
#[derive(Clone, Debug)]
pub struct StudyOptions {
    /// Half-width c of the eigenvalue window.
    pub window: f64,
    /// Eigenpairs computed around λ₀ per case.
    pub k_max: usize,
    pub eig: EigOptions,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            window: 1.0,
            k_max: 6,
            eig: EigOptions::default(),
        }
    }
}

/// Runs one ε: mesh, window eigenpairs, approximation distance.
///
/// `j_window` is the half-width Cε^{1/2} of the shrinking window that defines
/// J_ε. The distance d is measured against the span of the J_ε eigenvectors,
/// or against the eigenvector nearest λ₀ when J_ε is empty.
pub fn study_case(
    field: &ModeField,
    setup: &EpsilonSetup,
    eps: f64,
    j_window: f64,
    opts: &StudyOptions,
) -> Result<CaseRecord> {
    let lambda0 = field.mode.lambda0;
    let problem = build_epsilon_problem(setup, eps)?;
    let spectrum = solve_near(&problem, lambda0, opts.window, opts.k_max, &opts.eig)?;
    let eigs = spectrum.eigenvalues();
    let err = eigs.iter().map(|e| (e - lambda0).abs()).min_by(f64::total_cmp);
    let j_count = eigs.iter().filter(|e| (*e - lambda0).abs() < j_window).count();
    let d = match err {
        None => None,
        Some(nearest) => {
            let keep = |p: &EigenPair| {
                let dist = (p.value - lambda0).abs();
                if j_count > 0 {
                    dist < j_window
                } else {
                    dist == nearest
                }
            };
            let span = NearSpectrum {
                pairs: spectrum.pairs.iter().filter(|p| keep(p)).cloned().collect(),
                clipped: false,
            };
            let approx = build_approximation(field, &problem)?;
            Some(projection_distance(&problem, &approx, &span))
        }
    };
    Ok(CaseRecord {
        eps,
        eigs,
        err,
        d,
        j_count,
        clipped: spectrum.clipped,
        n_dofs: problem.n_dofs(),
    })
}

/// Convergence of the fine-scale eigenvalues and eigenfunctions to the
/// limit mode along a strictly decreasing list of ε. The J_ε window is
/// Cε^{1/2} with C chosen so that it equals the search window at the first ε.
pub fn convergence_study(
    field: &ModeField,
    setup: &EpsilonSetup,
    eps_list: &[f64],
    opts: &StudyOptions,
) -> Result<ConvergenceReport> {
    if eps_list.is_empty() || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(
            "eps list must be nonempty and strictly decreasing".into(),
        ));
    }
    let c = opts.window / eps_list[0].sqrt();
    let cases = eps_list
        .par_iter()
        .map(|&eps| study_case(field, setup, eps, c * eps.sqrt(), opts))
        .collect::<Result<Vec<_>>>()?;
    let eig_pts: Vec<(f64, f64)> = cases.iter().filter_map(|c| c.err.map(|e| (c.eps, e))).collect();
    let fn_pts: Vec<(f64, f64)> = cases.iter().filter_map(|c| c.d.map(|d| (c.eps, d))).collect();
    let last_two = |p: &[(f64, f64)]| {
        if p.len() >= 2 {
            loglog_slope(&p[p.len() - 2..])
        } else {
            None
        }
    };
    Ok(ConvergenceReport {
        lambda0: field.mode.lambda0,
        mode: ModeSummary {
            m: field.mode.m,
            multiplicity: field.mode.multiplicity,
        },
        window: opts.window,
        j_constant: c,
        slopes: Slopes {
            eig: loglog_slope(&eig_pts),
            func: loglog_slope(&fn_pts),
            eig_two_point: last_two(&eig_pts),
            fn_two_point: last_two(&fn_pts),
        },
        cases,
    })
}

/// Window eigenvalue counts of the medium without a defect.
pub fn no_defect_probe(
    setup: &EpsilonSetup,
    eps_list: &[f64],
    lambda0: f64,
    opts: &StudyOptions,
) -> Result<Vec<(f64, usize)>> {
    let plain = EpsilonSetup {
        defect: DefectSpec::none(),
        ..setup.clone()
    };
    eps_list
        .iter()
        .map(|&eps| {
            let problem = build_epsilon_problem(&plain, eps)?;
            let s = solve_near(&problem, lambda0, opts.window, opts.k_max, &opts.eig)?;
            Ok((eps, s.pairs.len()))
        })
        .collect()
}

/// Effect of one uniform refinement on the homogenization error at fixed ε.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subordination {
    pub eps: f64,
    /// |λ(ε) − λ₀| on the base and the refined mesh, each against its own discrete limit.
    pub err_coarse: f64,
    pub err_fine: f64,
    /// |err_fine − err_coarse| / err_coarse.
    pub ratio: f64,
}

/// Compares the homogenization error before and after one refinement, each
/// measured against the discrete limit of its own resolution.
pub fn subordination_check(
    setup: &EpsilonSetup,
    a_hom: [f64; 2],
    m: f64,
    target: f64,
    eps: f64,
    opts: &StudyOptions,
) -> Result<Subordination> {
    let err = |s: &EpsilonSetup, a: f64| -> Result<f64> {
        let limit = discrete_limit(s, a, m, target)?;
        let problem = build_epsilon_problem(s, eps)?;
        let near = solve_near(&problem, limit.mode.lambda0, opts.window, opts.k_max, &opts.eig)?;
        near.eigenvalues()
            .iter()
            .map(|e| (e - limit.mode.lambda0).abs())
            .min_by(f64::total_cmp)
            .ok_or_else(|| Error::Stagnation(format!("empty eigenvalue window at eps = {eps}")))
    };
    let err_coarse = err(setup, a_hom[0])?;
    let err_fine = err(&setup.refined(), a_hom[1])?;
    Ok(Subordination {
        eps,
        err_coarse,
        err_fine,
        ratio: (err_fine - err_coarse).abs() / err_coarse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(defect_radius: f64) -> EpsilonSetup {
        EpsilonSetup {
            geometry: CellGeometry::centered_ball(2, 0.3, 1.0, 1.0).unwrap(),
            defect: DefectSpec::ball(defect_radius, 1.0).unwrap(),
            policy: BoundaryInclusionPolicy::PowerLaw {
                a0_hat: 1.0,
                theta: 1.0,
            },
            r_max: 0.8,
            cells_per_inclusion: 8,
            macro_h: 0.02,
        }
    }

    #[test]
    fn coefficients_take_the_phase_values() {
        let s = setup(0.41);
        let p = build_epsilon_problem(&s, 1.0 / 8.0).unwrap();
        let mut expected = vec![1.0 / 64.0, 1.0, 1.0 / 8.0];
        expected.sort_by(f64::total_cmp);
        let got = p.coefficient_values();
        assert!(got.len() <= 4);
        assert_eq!(got.len(), expected.len(), "{got:?}");
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(p.stiffness.is_symmetric() && p.mass.is_symmetric());
        assert!(p.phase_area(PhaseLabel::BoundaryInclusion) > 0.0);
        p.mesh.check_conforming().unwrap();
    }

    #[test]
    fn order_one_policy_with_matrix_value_gives_matrix_coefficient() {
        let mut s = setup(0.41);
        s.policy = BoundaryInclusionPolicy::OrderOne { a0: s.geometry.a1 };
        let p = build_epsilon_problem(&s, 1.0 / 8.0).unwrap();
        for e in 0..p.mesh.n_elements() {
            if p.mesh.tag(e) == tags::BOUNDARY_INCLUSION {
                assert_eq!(p.coefficients[e], s.geometry.a1);
            }
        }
    }

    #[test]
    fn inclusion_area_matches_monte_carlo() {
        use rand::{Rng, SeedableRng};
        let s = setup(0.41);
        let eps = 1.0 / 16.0;
        let p = build_epsilon_problem(&s, eps).unwrap();
        let area = p.phase_area(PhaseLabel::Inclusion);
        // sample the kept copies: inclusion points whose copy clears the outer circle
        let margin = s.macro_h.max(eps * s.template_h());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 400_000;
        let mut hits = 0;
        for _ in 0..n {
            let x = [rng.random_range(-s.r_max..s.r_max), rng.random_range(-s.r_max..s.r_max)];
            if x[0].hypot(x[1]) >= s.r_max {
                continue;
            }
            if classify_point(&s.geometry, &s.defect, eps, &x) != PhaseLabel::Inclusion {
                continue;
            }
            let (cell, _) = lattice_coordinates(eps, &x);
            let c = [eps * (cell[0] as f64 + 0.5), eps * (cell[1] as f64 + 0.5)];
            if c[0].hypot(c[1]) + eps * 0.3 <= s.r_max - margin {
                hits += 1;
            }
        }
        let mc = 4.0 * s.r_max * s.r_max * hits as f64 / n as f64;
        assert!((area - mc).abs() / mc < 0.02, "{area} vs {mc}");
    }

    #[test]
    fn stitched_copies_share_the_template() {
        let s = setup(0.41);
        let eps = 1.0 / 8.0;
        let p = build_epsilon_problem(&s, eps).unwrap();
        let t = s.template().unwrap();
        let inc_elems = p.mesh.tags().iter().filter(|&&t| t == tags::INCLUSION).count();
        assert_eq!(inc_elems % t.n_elements(), 0);
        let copies = inc_elems / t.n_elements();
        let area = p.phase_area(PhaseLabel::Inclusion);
        assert!((area - copies as f64 * eps * eps * t.total_measure()).abs() < 1e-12);
    }

    #[test]
    fn loglog_slope_recovers_power() {
        let pts: Vec<(f64, f64)> = [0.125, 0.0625, 0.03125]
            .iter()
            .map(|&e: &f64| (e, 3.0 * e.powf(0.7)))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 0.7).abs() < 1e-12);
        assert!(loglog_slope(&pts[..1]).is_none());
    }

    #[test]
    fn rejects_non_reciprocal_eps() {
        assert!(build_epsilon_problem(&setup(0.41), 0.3).is_err());
    }
}
