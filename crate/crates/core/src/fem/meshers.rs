//! Mesh generators: structured grids, polar ring meshes, a D4-symmetric
//! periodic cell around a disk, and constrained Delaunay meshes of planar
//! domains with fitted polygonal interfaces.

use std::collections::HashMap;
use std::f64::consts::PI;

use spade::{AngleLimit, ConstrainedDelaunayTriangulation, Point2, RefinementParameters, Triangulation};

use crate::error::{Error, Result};
use crate::fem::mesh::{tags, SimplicialMesh};

/// Uniform 1D mesh of [a, b] with `n` elements.
pub fn interval(a: f64, b: f64, n: usize) -> SimplicialMesh {
    let coords: Vec<f64> = (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect();
    let elements: Vec<usize> = (0..n).flat_map(|i| [i, i + 1]).collect();
    SimplicialMesh::new(1, coords, elements, vec![tags::MATRIX; n]).expect("valid interval mesh")
}

/// Triangulated `nx × ny` grid of the unit square.
pub fn unit_square_grid(nx: usize, ny: usize) -> SimplicialMesh {
    rectangle_grid([0.0, 1.0], [0.0, 1.0], nx, ny)
}

/// Triangulated grid of a rectangle; each cell is split along its diagonal.
pub fn rectangle_grid(xr: [f64; 2], yr: [f64; 2], nx: usize, ny: usize) -> SimplicialMesh {
    let mut coords = Vec::with_capacity(2 * (nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            coords.push(if i == nx {
                xr[1]
            } else {
                xr[0] + (xr[1] - xr[0]) * i as f64 / nx as f64
            });
            coords.push(if j == ny {
                yr[1]
            } else {
                yr[0] + (yr[1] - yr[0]) * j as f64 / ny as f64
            });
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut elements = Vec::with_capacity(6 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            elements.extend_from_slice(&[id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            elements.extend_from_slice(&[id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    let ne = elements.len() / 3;
    SimplicialMesh::new(2, coords, elements, vec![tags::MATRIX; ne]).expect("valid grid mesh")
}

/// Triangulates the strip between two polylines that span the same angular
/// range. Positions along each polyline are given as integer fractions
/// `index / count` of the range, compared exactly, so the stitching pattern is
/// reproduced in every rotated or reflected copy.
fn stitch(inner: &[usize], outer: &[usize], closed: bool, out: &mut Vec<usize>) {
    let (ni, no) = if closed {
        (inner.len(), outer.len())
    } else {
        (inner.len() - 1, outer.len() - 1)
    };
    let at = |v: &[usize], k: usize| v[k % v.len()];
    let (mut i, mut j) = (0usize, 0usize);
    while i < ni || j < no {
        // next angles are (i+1)/ni and (j+1)/no; advance the smaller one
        let advance_outer = i == ni || (j < no && (j + 1) * ni <= (i + 1) * no);
        if advance_outer {
            out.extend_from_slice(&[at(inner, i), at(outer, j), at(outer, j + 1)]);
            j += 1;
        } else {
            out.extend_from_slice(&[at(inner, i), at(outer, j), at(inner, i + 1)]);
            i += 1;
        }
    }
}

/// Ring layout of a polar mesh: radii of the rings (ascending, positive) and
/// the tag of the annulus ending at each ring.
#[derive(Clone, Debug)]
pub struct RingLayout {
    pub radii: Vec<f64>,
    pub tags: Vec<u8>,
}

impl RingLayout {
    /// Rings for nested disks: `interfaces` lists (radius, tag of the annulus
    /// inside that radius). Each annulus gets uniformly spaced rings no
    /// further apart than `h`.
    pub fn from_interfaces(interfaces: &[(f64, u8)], h: f64) -> Self {
        let mut radii = Vec::new();
        let mut ring_tags = Vec::new();
        let mut inner = 0.0;
        for &(r, tag) in interfaces {
            let n = ((r - inner) / h - 1e-9).ceil().max(1.0) as usize;
            for k in 1..=n {
                radii.push(if k == n {
                    r
                } else {
                    inner + (r - inner) * k as f64 / n as f64
                });
                ring_tags.push(tag);
            }
            inner = r;
        }
        RingLayout { radii, tags: ring_tags }
    }

    /// Appends rings at spacing exactly `h` beyond the last ring until
    /// `r_max` is reached or exceeded; returns the actual outer radius.
    pub fn extend_uniform(&mut self, r_max: f64, h: f64, tag: u8) -> f64 {
        let base = *self.radii.last().unwrap_or(&0.0);
        let n = ((r_max - base) / h - 1e-9).ceil().max(0.0) as usize;
        for k in 1..=n {
            self.radii.push(base + h * k as f64);
            self.tags.push(tag);
        }
        *self.radii.last().unwrap_or(&0.0)
    }
}

/// Polar ring mesh of a disk. Ring k carries a multiple of `symmetry` points,
/// at least the count needed for arc spacing `h_arc`, so the mesh is exactly
/// invariant under rotation by 2π/`symmetry`.
pub fn polar_disk(layout: &RingLayout, h_arc: f64, symmetry: usize) -> Result<SimplicialMesh> {
    if layout.radii.is_empty() || layout.radii.len() != layout.tags.len() {
        return Err(Error::Mesh("empty or inconsistent ring layout".into()));
    }
    let symmetry = symmetry.max(3);
    let mut coords = vec![0.0, 0.0];
    let mut elements = Vec::new();
    let mut elem_tags = Vec::new();
    let mut prev: Vec<usize> = vec![0];
    let mut prev_count = 1usize;
    for (k, (&r, &tag)) in layout.radii.iter().zip(&layout.tags).enumerate() {
        let needed = (2.0 * PI * r / h_arc / symmetry as f64).ceil().max(1.0) as usize * symmetry;
        let count = needed.max(prev_count);
        let start = coords.len() / 2;
        for i in 0..count {
            let t = 2.0 * PI * i as f64 / count as f64;
            coords.push(r * t.cos());
            coords.push(r * t.sin());
        }
        let ring: Vec<usize> = (start..start + count).collect();
        let before = elements.len();
        if k == 0 {
            for i in 0..count {
                elements.extend_from_slice(&[0, ring[i], ring[(i + 1) % count]]);
            }
        } else {
            stitch(&prev, &ring, true, &mut elements);
        }
        elem_tags.extend(std::iter::repeat_n(tag, (elements.len() - before) / 3));
        prev = ring;
        prev_count = count;
    }
    SimplicialMesh::new(2, coords, elements, elem_tags)
}

/// Resolution of the D4-symmetric periodic cell mesh around a centred disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellResolution {
    /// Segments of the inclusion boundary per eighth of the circle.
    pub arc: usize,
    /// Radial layers between the inclusion and the cell boundary.
    pub matrix_layers: usize,
    /// Rings inside the inclusion.
    pub inclusion_rings: usize,
}

impl CellResolution {
    /// Counts giving element size about `h` for inclusion radius `rho`.
    pub fn from_h(rho: f64, h: f64) -> Self {
        let ceil = |x: f64| (x - 1e-9).ceil().max(1.0) as usize;
        CellResolution {
            arc: ceil(rho * PI / 4.0 / h),
            matrix_layers: ceil((0.5 / (PI / 8.0).cos() - rho) / h),
            inclusion_rings: ceil(rho / h),
        }
    }

    /// Every count doubled, so the vertex set of the coarse mesh is kept.
    pub fn refined(self) -> Self {
        CellResolution {
            arc: 2 * self.arc,
            matrix_layers: 2 * self.matrix_layers,
            inclusion_rings: 2 * self.inclusion_rings,
        }
    }
}

/// Exact key for merging reflected copies of a vertex.
fn key2(x: f64, y: f64) -> (u64, u64) {
    let norm = |v: f64| if v == 0.0 { 0.0f64.to_bits() } else { v.to_bits() };
    (norm(x), norm(y))
}

/// Periodic unit-cell mesh with a disk inclusion of radius `rho` centred at
/// (0.5, 0.5). One eighth of the cell is meshed (a structured mapped wedge
/// outside the disk and a ring sector inside) and reflected through the
/// symmetry group of the square, so the mesh has the full D4 symmetry and
/// matching vertices on opposite faces. `rho = 0` gives a cell without
/// inclusion.
pub fn periodic_disk_cell(rho: f64, res: CellResolution) -> Result<SimplicialMesh> {
    if !(0.0..0.5).contains(&rho) {
        return Err(Error::Mesh(format!("inclusion radius {rho} does not fit the cell")));
    }
    let (na, ns, nr) = (res.arc, res.matrix_layers, res.inclusion_rings);
    let quarter = PI / 4.0;
    // wedge-local vertex list in centred coordinates
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let mut tris: Vec<(usize, usize, usize, u8)> = Vec::new();
    let point = |r: f64, j: usize, n: usize| -> (f64, f64) {
        if j == 0 {
            (r, 0.0)
        } else if j == n {
            let c = r * quarter.cos();
            (c, c)
        } else {
            let t = quarter * j as f64 / n as f64;
            (r * t.cos(), r * t.sin())
        }
    };
    // structured matrix wedge: s ∈ [0,1] radial, j angular
    let wedge_start = pts.len();
    for i in 0..=ns {
        for j in 0..=na {
            let t = quarter * j as f64 / na as f64;
            let outer = 0.5 / t.cos();
            let s = i as f64 / ns as f64;
            let (x, y) = if rho == 0.0 && i == 0 {
                (0.0, 0.0)
            } else if i == ns {
                (0.5, if j == na { 0.5 } else { 0.5 * t.tan() })
            } else {
                let r = rho + s * (outer - rho);
                point(r, j, na)
            };
            pts.push((x, y));
        }
    }
    let wid = |i: usize, j: usize| wedge_start + i * (na + 1) + j;
    for i in 0..ns {
        for j in 0..na {
            if rho == 0.0 && i == 0 {
                tris.push((wid(0, 0), wid(1, j), wid(1, j + 1), tags::MATRIX));
                continue;
            }
            tris.push((wid(i, j), wid(i + 1, j), wid(i + 1, j + 1), tags::MATRIX));
            tris.push((wid(i, j), wid(i + 1, j + 1), wid(i, j + 1), tags::MATRIX));
        }
    }
    if rho > 0.0 {
        // inclusion sector: centre plus rings sharing the wedge's inner arc
        let centre = pts.len();
        pts.push((0.0, 0.0));
        let mut prev = vec![centre];
        for k in 1..=nr {
            let ring: Vec<usize> = if k == nr {
                (0..=na).map(|j| wid(0, j)).collect()
            } else {
                let m = ((na * k) as f64 / nr as f64).ceil().max(1.0) as usize;
                let r = rho * k as f64 / nr as f64;
                let start = pts.len();
                for j in 0..=m {
                    pts.push(point(r, j, m));
                }
                (start..=start + m).collect()
            };
            let mut flat = Vec::new();
            if prev.len() == 1 {
                for j in 0..ring.len() - 1 {
                    flat.extend_from_slice(&[prev[0], ring[j], ring[j + 1]]);
                }
            } else {
                stitch(&prev, &ring, false, &mut flat);
            }
            for t in flat.chunks(3) {
                tris.push((t[0], t[1], t[2], tags::INCLUSION));
            }
            prev = ring;
        }
    }
    // reflect through D4 and merge exactly coincident vertices
    let maps: [fn(f64, f64) -> (f64, f64); 8] = [
        |x, y| (x, y),
        |x, y| (y, x),
        |x, y| (-x, y),
        |x, y| (-y, x),
        |x, y| (x, -y),
        |x, y| (y, -x),
        |x, y| (-x, -y),
        |x, y| (-y, -x),
    ];
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut elements = Vec::new();
    let mut elem_tags = Vec::new();
    for map in maps {
        let local: Vec<usize> = pts
            .iter()
            .map(|&(x, y)| {
                let (u, v) = map(x, y);
                *index.entry(key2(u, v)).or_insert_with(|| {
                    coords.push(0.5 + u);
                    coords.push(0.5 + v);
                    coords.len() / 2 - 1
                })
            })
            .collect();
        for &(a, b, c, tag) in &tris {
            elements.extend_from_slice(&[local[a], local[b], local[c]]);
            elem_tags.push(tag);
        }
    }
    SimplicialMesh::new(2, coords, elements, elem_tags)
}

/// Planar domain for constrained Delaunay meshing.
#[derive(Clone, Debug, Default)]
pub struct PlanarDomain {
    /// Constraint polylines; each is closed if its last point repeats the first index.
    pub points: Vec<[f64; 2]>,
    pub edges: Vec<[usize; 2]>,
    /// Maximum triangle area for refinement.
    pub max_area: f64,
    /// Minimum angle targeted by refinement, in degrees.
    pub min_angle_deg: f64,
}

impl PlanarDomain {
    /// Adds a closed polygon as a constraint loop; returns its vertex indices.
    pub fn add_loop(&mut self, vertices: &[[f64; 2]]) -> Vec<usize> {
        let start = self.points.len();
        self.points.extend_from_slice(vertices);
        let n = vertices.len();
        for k in 0..n {
            self.edges.push([start + k, start + (k + 1) % n]);
        }
        (start..start + n).collect()
    }

    /// Adds an open polyline as constraint edges.
    pub fn add_polyline(&mut self, vertices: &[[f64; 2]]) -> Vec<usize> {
        let start = self.points.len();
        self.points.extend_from_slice(vertices);
        for k in 0..vertices.len().saturating_sub(1) {
            self.edges.push([start + k, start + k + 1]);
        }
        (start..start + vertices.len()).collect()
    }

    /// Adds an unconstrained seed vertex.
    pub fn add_point(&mut self, p: [f64; 2]) {
        self.points.push(p);
    }
}

/// Regular polygon approximating a circle, vertices counter-clockwise from
/// angle `phase`, with side at most `h` and a vertex count that is a
/// multiple of `multiple`.
pub fn circle_points(center: [f64; 2], radius: f64, h: f64, multiple: usize, phase: f64) -> Vec<[f64; 2]> {
    let multiple = multiple.max(1);
    let n = ((2.0 * PI * radius / h / multiple as f64).ceil().max(1.0) as usize * multiple).max(6);
    (0..n)
        .map(|k| {
            let t = phase + 2.0 * PI * k as f64 / n as f64;
            [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
        })
        .collect()
}

/// Constrained Delaunay mesh of a planar domain. Constraint edges are kept
/// intact; refinement inserts interior vertices until the area and angle
/// targets hold. Each triangle is tagged by `classify` applied to its
/// centroid; triangles classified `None` are dropped.
pub fn cdt_mesh(domain: &PlanarDomain, classify: impl Fn([f64; 2]) -> Option<u8>) -> Result<SimplicialMesh> {
    let vertices: Vec<Point2<f64>> = domain.points.iter().map(|p| Point2::new(p[0], p[1])).collect();
    let mut conflict = None;
    let mut cdt =
        ConstrainedDelaunayTriangulation::<Point2<f64>>::try_bulk_load_cdt(vertices, domain.edges.clone(), |e| {
            conflict.get_or_insert(e);
        })
        .map_err(|e| Error::Mesh(format!("triangulation failed: {e:?}")))?;
    if let Some(e) = conflict {
        let [a, b] = e;
        return Err(Error::Mesh(format!(
            "constraint edge {:?}-{:?} intersects another constraint",
            domain.points[a], domain.points[b]
        )));
    }
    if domain.max_area > 0.0 {
        let params = RefinementParameters::<f64>::new()
            .with_max_allowed_area(domain.max_area)
            .with_angle_limit(AngleLimit::from_deg(domain.min_angle_deg))
            .keep_constraint_edges()
            .with_max_additional_vertices(50_000_000);
        let result = cdt.refine(params);
        if !result.refinement_complete {
            return Err(Error::Mesh("refinement did not complete".into()));
        }
    }
    let mut coords = Vec::with_capacity(2 * cdt.num_vertices());
    for v in cdt.vertices() {
        let p = v.position();
        coords.push(p.x);
        coords.push(p.y);
    }
    let mut elements = Vec::with_capacity(3 * cdt.num_inner_faces());
    let mut elem_tags = Vec::with_capacity(cdt.num_inner_faces());
    for f in cdt.inner_faces() {
        let vs = f.vertices();
        let c = f.center();
        if let Some(tag) = classify([c.x, c.y]) {
            for v in vs {
                elements.push(v.fix().index());
            }
            elem_tags.push(tag);
        }
    }
    drop(cdt);
    compact(coords, elements, elem_tags)
}

/// Drops unreferenced vertices.
fn compact(coords: Vec<f64>, elements: Vec<usize>, elem_tags: Vec<u8>) -> Result<SimplicialMesh> {
    let nv = coords.len() / 2;
    let mut new_index = vec![usize::MAX; nv];
    let mut out_coords = Vec::with_capacity(coords.len());
    let mut next = 0;
    let elements: Vec<usize> = elements
        .into_iter()
        .map(|v| {
            if new_index[v] == usize::MAX {
                new_index[v] = next;
                next += 1;
                out_coords.push(coords[2 * v]);
                out_coords.push(coords[2 * v + 1]);
            }
            new_index[v]
        })
        .collect();
    SimplicialMesh::new(2, out_coords, elements, elem_tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{BoundaryMarker, DofMap};

    #[test]
    fn polar_disk_area_and_symmetry() {
        let layout = RingLayout::from_interfaces(&[(0.3, tags::INCLUSION)], 0.3 / 20.0);
        let mesh = polar_disk(&layout, 0.3 / 20.0, 8).unwrap();
        let n = 8 * ((2.0 * PI * 0.3 / (0.3 / 20.0) / 8.0).ceil() as usize);
        let polygon = 0.5 * n as f64 * 0.09 * (2.0 * PI / n as f64).sin();
        assert!((mesh.total_measure() - polygon).abs() < 1e-12);
        mesh.check_conforming().unwrap();
        let outer = mesh
            .marked_vertices(BoundaryMarker::Outer)
            .iter()
            .filter(|&&b| b)
            .count();
        assert_eq!(outer, n);
    }

    #[test]
    fn ring_layout_extends_by_exact_spacing() {
        let mut layout = RingLayout::from_interfaces(&[(0.5, tags::DEFECT)], 0.1);
        let r = layout.extend_uniform(1.02, 0.1, tags::MATRIX);
        assert!((r - 1.1).abs() < 1e-12);
        assert_eq!(layout.radii.len(), 11);
    }

    #[test]
    fn periodic_cell_is_conforming_and_matches_faces() {
        let rho = 0.3;
        let mesh = periodic_disk_cell(rho, CellResolution::from_h(rho, 1.0 / 16.0)).unwrap();
        mesh.check_conforming().unwrap();
        assert!((mesh.total_measure() - 1.0).abs() < 1e-12);
        let inc = mesh.measure_where(|t| t == tags::INCLUSION);
        assert!((inc - PI * rho * rho).abs() < 0.02);
        let map = DofMap::periodic(&mesh).unwrap();
        let boundary = mesh
            .marked_vertices(BoundaryMarker::Outer)
            .iter()
            .filter(|&&b| b)
            .count();
        assert_eq!(mesh.n_vertices() - map.n_dofs(), boundary / 2 + 1);
    }

    #[test]
    fn refined_cell_contains_coarse_vertices() {
        let rho = 0.25;
        let res = CellResolution::from_h(rho, 0.1);
        let coarse = periodic_disk_cell(rho, res).unwrap();
        let fine = periodic_disk_cell(rho, res.refined()).unwrap();
        let keys: std::collections::HashSet<(u64, u64)> = (0..fine.n_vertices())
            .map(|v| key2(fine.vertex(v)[0], fine.vertex(v)[1]))
            .collect();
        let missing = (0..coarse.n_vertices())
            .filter(|&v| !keys.contains(&key2(coarse.vertex(v)[0], coarse.vertex(v)[1])))
            .count();
        // ring sectors need not nest; the matrix wedge and interface do
        assert!(missing < coarse.n_vertices() / 4, "{missing} missing");
    }

    #[test]
    fn cdt_square_with_hole() {
        let mut d = PlanarDomain {
            max_area: 0.002,
            min_angle_deg: 25.0,
            ..Default::default()
        };
        d.add_loop(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        d.add_loop(&circle_points([0.5, 0.5], 0.2, 0.03, 4, 0.0));
        let mesh = cdt_mesh(&d, |p| {
            let r = ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt();
            Some(if r < 0.2 { tags::INCLUSION } else { tags::MATRIX })
        })
        .unwrap();
        assert!((mesh.total_measure() - 1.0).abs() < 1e-12);
        let interface = mesh
            .marked_vertices(BoundaryMarker::InclusionInterface)
            .iter()
            .filter(|&&b| b)
            .count();
        assert!(interface >= 40);
    }
}
