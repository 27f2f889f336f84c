//! Corrector problems on the perforated cell and the homogenized tensor.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{self, assemble, meshers, tags, BoundaryMarker, DofMap, Factor, FormKind, SimplicialMesh};
use crate::geometry::{CellGeometry, InclusionShape};

/// Mesh of the unit cell with inclusion elements tagged, plus the matrix-phase submesh.
#[derive(Clone, Debug)]
pub struct CellMesh {
    pub full: SimplicialMesh,
    /// Q₁ = elements tagged matrix.
    pub matrix: SimplicialMesh,
    /// Parent vertex in `full` of each vertex of `matrix`.
    pub matrix_parent: Vec<usize>,
    /// Nominal element size.
    pub h: f64,
}

impl CellMesh {
    pub fn from_full(full: SimplicialMesh, h: f64) -> Result<Self> {
        let (matrix, matrix_parent) = full.submesh(|t| t == tags::MATRIX)?;
        Ok(CellMesh {
            full,
            matrix,
            matrix_parent,
            h,
        })
    }

    /// Cell mesh of the given geometry at element size about `h`.
    ///
    /// 2D centred disks use the D4-symmetric structured mesher, other 2D
    /// inclusions a constrained Delaunay mesh with matching boundary points,
    /// and 3D balls a Kuhn-subdivided cube grid whose vertices near the sphere
    /// are projected onto it.
    pub fn build(geom: &CellGeometry, h: f64) -> Result<Self> {
        geom.validate()?;
        let full = match (&geom.inclusion, geom.dimension) {
            (InclusionShape::Ball { center, radius }, 2) if center.iter().all(|&c| c == 0.5) => {
                meshers::periodic_disk_cell(*radius, meshers::CellResolution::from_h(*radius, h))?
            }
            (_, 2) => cdt_cell(geom, h)?,
            (InclusionShape::Ball { center, radius }, 3) => kuhn_ball_cell(center, *radius, h)?,
            _ => return Err(Error::InvalidArgument("unsupported cell geometry".into())),
        };
        Self::from_full(full, h)
    }

    /// Cell without inclusion.
    pub fn empty(dimension: usize, h: f64) -> Result<Self> {
        let full = match dimension {
            2 => meshers::periodic_disk_cell(0.0, meshers::CellResolution::from_h(0.0, h))?,
            _ => kuhn_grid(((1.0 / h).ceil() as usize).max(2), |_| tags::MATRIX)?,
        };
        Self::from_full(full, h)
    }

    /// |Q₁| of the discrete matrix phase.
    pub fn matrix_volume(&self) -> f64 {
        self.matrix.total_measure()
    }
}

fn cdt_cell(geom: &CellGeometry, h: f64) -> Result<SimplicialMesh> {
    let n = (1.0 / h).ceil() as usize;
    let mut dom = meshers::PlanarDomain {
        max_area: h * h * 3f64.sqrt() / 4.0,
        min_angle_deg: 25.0,
        ..Default::default()
    };
    let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let mut square = Vec::new();
    for s in 0..4 {
        let (a, b) = (corners[s], corners[(s + 1) % 4]);
        for k in 0..n {
            let t = k as f64 / n as f64;
            square.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    dom.add_loop(&square);
    let boundary: Vec<[f64; 2]> = match &geom.inclusion {
        InclusionShape::Ball { center, radius } => meshers::circle_points([center[0], center[1]], *radius, h, 8, 0.0),
        InclusionShape::Polygon { vertices } => {
            let mut pts = Vec::new();
            let m = vertices.len();
            for i in 0..m {
                let (a, b) = (vertices[i], vertices[(i + 1) % m]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                let k = ((len / h).ceil() as usize).max(1);
                for s in 0..k {
                    let t = s as f64 / k as f64;
                    pts.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                }
            }
            pts
        }
    };
    dom.add_loop(&boundary);
    let poly = boundary.clone();
    let inside = move |p: [f64; 2]| {
        let mut c = false;
        let n = poly.len();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]) {
                c = !c;
            }
        }
        c
    };
    meshers::cdt_mesh(&dom, |p| Some(if inside(p) { tags::INCLUSION } else { tags::MATRIX }))
}

/// Freudenthal–Kuhn tetrahedra: the six paths from corner 000 to 111.
const KUHN: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn kuhn_grid(n: usize, tag: impl Fn([f64; 3]) -> u8) -> Result<SimplicialMesh> {
    let idx = |i: usize, j: usize, k: usize| (k * (n + 1) + j) * (n + 1) + i;
    let mut coords = Vec::with_capacity(3 * (n + 1).pow(3));
    for k in 0..=n {
        for j in 0..=n {
            for i in 0..=n {
                coords.extend_from_slice(&[i as f64 / n as f64, j as f64 / n as f64, k as f64 / n as f64]);
            }
        }
    }
    let mut elements = Vec::with_capacity(24 * n * n * n);
    let mut elem_tags = Vec::with_capacity(6 * n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                for path in KUHN {
                    let mut p = [i, j, k];
                    let mut verts = [idx(i, j, k); 4];
                    for (s, &axis) in path.iter().enumerate() {
                        p[axis] += 1;
                        verts[s + 1] = idx(p[0], p[1], p[2]);
                    }
                    let mut c = [0.0; 3];
                    for &v in &verts {
                        for d in 0..3 {
                            c[d] += 0.25 * coords[3 * v + d];
                        }
                    }
                    elements.extend_from_slice(&verts);
                    elem_tags.push(tag(c));
                }
            }
        }
    }
    SimplicialMesh::new(3, coords, elements, elem_tags)
}

fn kuhn_ball_cell(center: &[f64], rho: f64, h: f64) -> Result<SimplicialMesh> {
    let n = ((1.0 / h) - 1e-9).ceil().max(2.0) as usize;
    let grid = kuhn_grid(n, |_| tags::MATRIX)?;
    let hh = 1.0 / n as f64;
    let mut coords = grid.coords().to_vec();
    for v in 0..grid.n_vertices() {
        let x = &mut coords[3 * v..3 * v + 3];
        let d: Vec<f64> = (0..3).map(|k| x[k] - center[k]).collect();
        let r = d.iter().map(|t| t * t).sum::<f64>().sqrt();
        if r > 0.0 && (r - rho).abs() < 0.3 * hh {
            for k in 0..3 {
                x[k] = center[k] + d[k] * rho / r;
            }
        }
    }
    let elements = grid.elements().to_vec();
    let tag_of = |coords: &[f64], e: usize| {
        let c: f64 = (0..3)
            .map(|k| {
                (elements[4 * e..4 * e + 4]
                    .iter()
                    .map(|&v| coords[3 * v + k])
                    .sum::<f64>()
                    / 4.0
                    - center[k])
                    .powi(2)
            })
            .sum::<f64>();
        if c < rho * rho {
            tags::INCLUSION
        } else {
            tags::MATRIX
        }
    };
    let elem_tags: Vec<u8> = (0..grid.n_elements()).map(|e| tag_of(&coords, e)).collect();
    match SimplicialMesh::new(3, coords, elements.clone(), elem_tags) {
        Ok(m) => Ok(m),
        // projection produced a degenerate element: keep the staircase interface
        Err(Error::DegenerateElement { .. }) => {
            let coords = grid.coords().to_vec();
            let elem_tags: Vec<u8> = (0..grid.n_elements()).map(|e| tag_of(&coords, e)).collect();
            SimplicialMesh::new(3, coords, elements, elem_tags)
        }
        Err(e) => Err(e),
    }
}

/// Homogenized tensor with the correctors it was computed from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomogenizedTensor {
    /// Symmetrized A^hom.
    pub a: Vec<Vec<f64>>,
    pub q1_volume: f64,
    pub mesh_h: f64,
    /// max |A_ij − A_ji| before symmetrization.
    pub asymmetry: f64,
    /// Corrector N_j on the vertices of the full cell mesh, harmonically
    /// extended into Q₀ and normalized to zero mean over the cell.
    #[serde(skip)]
    pub correctors: Vec<Vec<f64>>,
}

impl HomogenizedTensor {
    /// Mean of the diagonal entries.
    pub fn scalar(&self) -> f64 {
        let n = self.a.len();
        (0..n).map(|i| self.a[i][i]).sum::<f64>() / n as f64
    }

    /// max_ij |A_ij − a δ_ij| with a the diagonal mean.
    pub fn anisotropy(&self) -> f64 {
        let s = self.scalar();
        let n = self.a.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { s } else { 0.0 };
                worst = worst.max((self.a[i][j] - target).abs());
            }
        }
        worst
    }

    /// ξ·A ξ
    pub fn quadratic(&self, xi: &[f64]) -> f64 {
        let n = self.a.len();
        (0..n)
            .map(|i| (0..n).map(|j| xi[i] * self.a[i][j] * xi[j]).sum::<f64>())
            .sum()
    }
}

/// Periodic stiffness system on Q₁ shared by the corrector solves.
struct CorrectorSystem {
    map: Arc<DofMap>,
    factor: Factor,
    pinned: usize,
}

fn connected(mesh: &SimplicialMesh, map: &DofMap) -> bool {
    let n = map.n_dofs();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in 0..mesh.n_elements() {
        let vs = mesh.element(e);
        let d0 = map.dof(vs[0]).unwrap();
        for &v in &vs[1..] {
            let (a, b) = (find(&mut parent, d0), find(&mut parent, map.dof(v).unwrap()));
            if a != b {
                parent[a] = b;
            }
        }
    }
    let root = find(&mut parent, 0);
    (0..n).all(|i| find(&mut parent, i) == root)
}

impl CorrectorSystem {
    fn new(cell: &CellMesh, a1: f64) -> Result<Self> {
        let mesh = &cell.matrix;
        let map = Arc::new(DofMap::periodic(mesh)?);
        if !connected(mesh, &map) {
            return Err(Error::Homogenization("matrix phase is disconnected".into()));
        }
        let coef = vec![a1; mesh.n_elements()];
        let stiffness = assemble(mesh, &coef, FormKind::Stiffness)?.restrict(&map)?;
        // pin the constant nullspace at dof 0: zero its row and column, unit diagonal
        let pinned = 0;
        let mut pinned_form = stiffness;
        let pattern = Arc::clone(pinned_form.pattern());
        let values = pinned_form.values_mut();
        for i in 0..pattern.n() {
            let row = pattern.row(i);
            let start = pattern.row_ptr()[i];
            for (k, &j) in row.iter().enumerate() {
                if i == pinned || j == pinned {
                    values[start + k] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        let factor = Factor::new(&pinned_form).map_err(|e| Error::Homogenization(format!("corrector system: {e}")))?;
        Ok(CorrectorSystem { map, factor, pinned })
    }

    /// Periodic right-hand side −∫ a₁ e_j·∇φ_i.
    fn rhs(&self, cell: &CellMesh, a1: f64, j: usize) -> Vec<f64> {
        let coef = vec![a1; cell.matrix.n_elements()];
        let f = fem::gradient_load(&cell.matrix, &coef, j);
        self.map.restrict_vector(&f).into_iter().map(|v| -v).collect()
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut b = rhs.to_vec();
        b[self.pinned] = 0.0;
        self.factor.solve(&b)
    }
}

/// Corrector N_j on the vertices of the matrix submesh, with the pinned
/// normalization (value zero at the first dof).
pub fn solve_corrector(cell: &CellMesh, a1: f64, j: usize) -> Result<Vec<f64>> {
    let sys = CorrectorSystem::new(cell, a1)?;
    let n = sys.solve(&sys.rhs(cell, a1, j));
    Ok(sys.map.expand(&n))
}

/// Harmonic extension into Q₀ of a field given on the matrix vertices;
/// returns values on all vertices of the full cell mesh.
pub fn harmonic_extension(cell: &CellMesh, matrix_values: &[f64]) -> Result<Vec<f64>> {
    let mut full = vec![0.0; cell.full.n_vertices()];
    for (v, &p) in cell.matrix_parent.iter().enumerate() {
        full[p] = matrix_values[v];
    }
    if !cell.full.tags().iter().any(|&t| t != tags::MATRIX) {
        return Ok(full);
    }
    let (inc, parent) = cell.full.submesh(|t| t != tags::MATRIX)?;
    let fixed = inc.marked_vertices(BoundaryMarker::InclusionInterface);
    let map = Arc::new(DofMap::dirichlet(&fixed));
    if map.n_dofs() == 0 {
        return Ok(full);
    }
    let k = assemble(&inc, &vec![1.0; inc.n_elements()], FormKind::Stiffness)?;
    let boundary: Vec<f64> = parent
        .iter()
        .zip(&fixed)
        .map(|(&p, &f)| if f { full[p] } else { 0.0 })
        .collect();
    let rhs: Vec<f64> = map
        .restrict_vector(&k.apply(&boundary))
        .into_iter()
        .map(|v| -v)
        .collect();
    let u = Factor::new(&k.restrict(&map)?)?.solve(&rhs);
    let interior = map.expand(&u);
    for (v, &p) in parent.iter().enumerate() {
        if !fixed[v] {
            full[p] = interior[v];
        }
    }
    Ok(full)
}

/// Homogenized tensor A_ij = ∫_{Q₁} a₁(δ_ij + ∂_i N_j), correctors solved in parallel.
pub fn homogenized_tensor(cell: &CellMesh, a1: f64) -> Result<HomogenizedTensor> {
    let n = cell.full.dim();
    let sys = CorrectorSystem::new(cell, a1)?;
    let correctors: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| sys.map.expand(&sys.solve(&sys.rhs(cell, a1, j))))
        .collect();
    let mesh = &cell.matrix;
    let mut a = vec![vec![0.0; n]; n];
    for e in 0..mesh.n_elements() {
        let geo = mesh.geometry(e);
        let verts = mesh.element(e);
        for j in 0..n {
            for i in 0..n {
                let grad: f64 = verts
                    .iter()
                    .enumerate()
                    .map(|(s, &v)| correctors[j][v] * geo.gradients[s][i])
                    .sum();
                a[i][j] += geo.measure * a1 * (if i == j { 1.0 } else { 0.0 } + grad);
            }
        }
    }
    let mut asymmetry = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asymmetry = asymmetry.max((a[i][j] - a[j][i]).abs());
            let s = 0.5 * (a[i][j] + a[j][i]);
            a[i][j] = s;
            a[j][i] = s;
        }
    }
    // zero mean over the whole cell, using the harmonic extension inside Q₀
    let total = cell.full.total_measure();
    let extended = correctors
        .iter()
        .map(|nj| {
            let mut full = harmonic_extension(cell, nj)?;
            let mean = fem::integrate(&cell.full, &full, |_| true) / total;
            full.iter_mut().for_each(|v| *v -= mean);
            Ok(full)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HomogenizedTensor {
        a,
        q1_volume: cell.matrix_volume(),
        mesh_h: cell.h,
        asymmetry,
        correctors: extended,
    })
}

/// Energy ∫_{Q₁} a₁|ξ + ∇w|² of a periodic field `w` on the matrix vertices.
pub fn cell_energy(cell: &CellMesh, a1: f64, xi: &[f64], w: &[f64]) -> f64 {
    let mesh = &cell.matrix;
    let n = mesh.dim();
    (0..mesh.n_elements())
        .map(|e| {
            let geo = mesh.geometry(e);
            let verts = mesh.element(e);
            let g2: f64 = (0..n)
                .map(|i| {
                    let g: f64 = xi[i]
                        + verts
                            .iter()
                            .enumerate()
                            .map(|(s, &v)| w[v] * geo.gradients[s][i])
                            .sum::<f64>();
                    g * g
                })
                .sum();
            a1 * geo.measure * g2
        })
        .sum()
}

/// Scalar homogenized coefficients over nested refinements with Richardson extrapolation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RichardsonStudy {
    pub h: Vec<f64>,
    pub values: Vec<f64>,
    /// Extrapolations (4a_fine − a_coarse)/3 for each consecutive pair.
    pub extrapolated: Vec<f64>,
    /// log₂ of successive difference ratios.
    pub rates: Vec<f64>,
}

/// Runs the disk cell (2D, centred) at h, h/2, … (`levels` meshes) with nested refinement.
pub fn richardson_study(geom: &CellGeometry, h: f64, levels: usize) -> Result<RichardsonStudy> {
    let rho = geom
        .ball_radius()
        .filter(|_| geom.dimension == 2)
        .ok_or_else(|| Error::InvalidArgument("Richardson study needs a 2D disk cell".into()))?;
    let mut res = meshers::CellResolution::from_h(rho, h);
    let mut hs = Vec::new();
    let mut values = Vec::new();
    for l in 0..levels {
        let hl = h / (1 << l) as f64;
        let cell = CellMesh::from_full(meshers::periodic_disk_cell(rho, res)?, hl)?;
        values.push(homogenized_tensor(&cell, geom.a1)?.scalar());
        hs.push(hl);
        res = res.refined();
    }
    let extrapolated = values.windows(2).map(|w| (4.0 * w[1] - w[0]) / 3.0).collect();
    let rates = values
        .windows(3)
        .map(|w| ((w[0] - w[1]) / (w[1] - w[2])).abs().log2())
        .collect();
    Ok(RichardsonStudy {
        h: hs,
        values,
        extrapolated,
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disk(rho: f64) -> CellGeometry {
        CellGeometry::centered_ball(2, rho, 1.0, 1.0).unwrap()
    }

    #[test]
    fn empty_cell_gives_identity() {
        for d in [2, 3] {
            let cell = CellMesh::empty(d, 1.0 / 8.0).unwrap();
            let t = homogenized_tensor(&cell, 1.0).unwrap();
            for i in 0..d {
                for j in 0..d {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((t.a[i][j] - expected).abs() < 1e-12);
                }
            }
            assert!(t.correctors.iter().all(|c| c.iter().all(|v| v.abs() < 1e-12)));
        }
    }

    #[test]
    fn rhs_is_compatible() {
        let cell = CellMesh::build(&disk(0.3), 1.0 / 32.0).unwrap();
        let sys = CorrectorSystem::new(&cell, 1.0).unwrap();
        for j in 0..2 {
            let s: f64 = sys.rhs(&cell, 1.0, j).iter().sum();
            assert!(s.abs() < 1e-12, "sum {s}");
        }
    }

    #[test]
    fn corrector_reflection_symmetry() {
        let cell = CellMesh::build(&disk(0.3), 1.0 / 32.0).unwrap();
        let t = homogenized_tensor(&cell, 1.0).unwrap();
        let n1 = &t.correctors[0];
        let mesh = &cell.full;
        let key = |x: f64, y: f64| ((x * 1e9).round() as i64, (y * 1e9).round() as i64);
        let index: std::collections::HashMap<_, _> = (0..mesh.n_vertices())
            .map(|v| (key(mesh.vertex(v)[0], mesh.vertex(v)[1]), v))
            .collect();
        let scale = n1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut checked = 0;
        for v in 0..mesh.n_vertices() {
            let p = mesh.vertex(v);
            if let Some(&w) = index.get(&key(1.0 - p[0], p[1])) {
                assert!((n1[v] + n1[w]).abs() < 1e-9 * scale);
                checked += 1;
            }
            if let Some(&w) = index.get(&key(p[0], 1.0 - p[1])) {
                assert!((n1[v] - n1[w]).abs() < 1e-9 * scale);
            }
        }
        assert!(checked > mesh.n_vertices() / 2);
    }

    #[test]
    fn disk_tensor_properties() {
        let geom = disk(0.3);
        let cell = CellMesh::build(&geom, 1.0 / 64.0).unwrap();
        let t = homogenized_tensor(&cell, 1.0).unwrap();
        assert!(t.asymmetry < 1e-10);
        assert!(t.anisotropy() < 1e-10);
        let a = t.scalar();
        assert!(a > 0.0 && a < geom.matrix_volume());
        assert!((a - 0.5587).abs() < 2e-3, "a_hom {a}");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let xi = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            assert!(t.quadratic(&xi) <= t.q1_volume * (xi[0] * xi[0] + xi[1] * xi[1]) * (1.0 + 1e-12));
        }
        // the tensor equals the minimal cell energy on the same space
        let sys = CorrectorSystem::new(&cell, 1.0).unwrap();
        let xi = [0.6, -0.8];
        let rhs: Vec<f64> = sys
            .rhs(&cell, 1.0, 0)
            .iter()
            .zip(sys.rhs(&cell, 1.0, 1))
            .map(|(a, b)| xi[0] * a + xi[1] * b)
            .collect();
        let w = sys.map.expand(&sys.solve(&rhs));
        let energy = cell_energy(&cell, 1.0, &xi, &w);
        assert!((energy - t.quadratic(&xi)).abs() < 1e-10);
        // and perturbing the minimizer raises the energy
        let bumped: Vec<f64> = w.iter().enumerate().map(|(i, v)| v + 1e-3 * ((i % 7) as f64)).collect();
        assert!(cell_energy(&cell, 1.0, &xi, &bumped) > energy);
    }

    #[test]
    fn monotone_in_radius() {
        let a2 = homogenized_tensor(&CellMesh::build(&disk(0.2), 1.0 / 32.0).unwrap(), 1.0)
            .unwrap()
            .scalar();
        let a3 = homogenized_tensor(&CellMesh::build(&disk(0.3), 1.0 / 32.0).unwrap(), 1.0)
            .unwrap()
            .scalar();
        assert!(a2 > a3);
    }

    #[test]
    fn second_order_convergence() {
        let study = richardson_study(&disk(0.3), 1.0 / 16.0, 3).unwrap();
        assert!(study.rates[0] >= 1.7, "rate {:?}", study.rates);
    }

    #[test]
    fn polygon_and_three_d_cells() {
        let square = CellGeometry {
            dimension: 2,
            inclusion: InclusionShape::Polygon {
                vertices: vec![[0.3, 0.3], [0.7, 0.3], [0.7, 0.7], [0.3, 0.7]],
            },
            a0: 1.0,
            a1: 1.0,
        };
        let t = homogenized_tensor(&CellMesh::build(&square, 1.0 / 24.0).unwrap(), 1.0).unwrap();
        assert!(t.scalar() < 0.84 && t.scalar() > 0.5);
        assert!((t.a[0][0] - t.a[1][1]).abs() < 2e-2);
        let ball = CellGeometry::centered_ball(3, 0.3, 1.0, 1.0).unwrap();
        let cell = CellMesh::build(&ball, 1.0 / 12.0).unwrap();
        let t = homogenized_tensor(&cell, 1.0).unwrap();
        assert!(t.asymmetry < 1e-10);
        assert!(t.scalar() < t.q1_volume && t.scalar() > 0.7);
    }
}
