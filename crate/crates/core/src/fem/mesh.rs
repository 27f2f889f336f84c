use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Phase codes stored per element.
pub mod tags {
    pub const MATRIX: u8 = 0;
    pub const INCLUSION: u8 = 1;
    pub const DEFECT: u8 = 2;
    pub const BOUNDARY_INCLUSION: u8 = 3;
}

/// Marker carried by every boundary or interface facet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryMarker {
    Outer,
    InclusionInterface,
    DefectInterface,
}

impl BoundaryMarker {
    fn code(self) -> u8 {
        match self {
            BoundaryMarker::Outer => 0,
            BoundaryMarker::InclusionInterface => 1,
            BoundaryMarker::DefectInterface => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BoundaryMarker::Outer),
            1 => Some(BoundaryMarker::InclusionInterface),
            2 => Some(BoundaryMarker::DefectInterface),
            _ => None,
        }
    }
}

type FaceKey = [usize; 3];

fn facet_of(conn: &[usize], skip: usize) -> FaceKey {
    let mut verts = [0usize; 3];
    let mut n = 0;
    for (k, &v) in conn.iter().enumerate() {
        if k != skip {
            verts[n] = v;
            n += 1;
        }
    }
    face_key(&verts[..n])
}

fn face_key(vertices: &[usize]) -> FaceKey {
    let mut key = [usize::MAX; 3];
    key[..vertices.len()].copy_from_slice(vertices);
    key[..vertices.len()].sort_unstable();
    key
}

/// Conforming simplicial mesh in one, two or three dimensions.
///
/// Elements are stored positively oriented. Facets on the outer boundary and
/// on interfaces between differently tagged elements carry a [`BoundaryMarker`].
#[derive(Clone, Debug)]
pub struct SimplicialMesh {
    dim: usize,
    coords: Vec<f64>,
    elements: Vec<usize>,
    tags: Vec<u8>,
    faces: Vec<usize>,
    face_markers: Vec<BoundaryMarker>,
}

/// Measure of a simplex and the gradients of its barycentric coordinates.
#[derive(Clone, Copy, Debug)]
pub struct ElementGeometry {
    pub measure: f64,
    /// Signed measure before reorientation.
    pub signed_measure: f64,
    pub gradients: [[f64; 3]; 4],
}

fn simplex_geometry(dim: usize, p: &[[f64; 3]; 4]) -> ElementGeometry {
    let mut g = [[0.0; 3]; 4];
    let signed = match dim {
        1 => {
            let l = p[1][0] - p[0][0];
            g[1][0] = 1.0 / l;
            g[0][0] = -1.0 / l;
            l
        }
        2 => {
            let (ax, ay) = (p[1][0] - p[0][0], p[1][1] - p[0][1]);
            let (bx, by) = (p[2][0] - p[0][0], p[2][1] - p[0][1]);
            let det = ax * by - ay * bx;
            g[1] = [by / det, -bx / det, 0.0];
            g[2] = [-ay / det, ax / det, 0.0];
            g[0] = [-g[1][0] - g[2][0], -g[1][1] - g[2][1], 0.0];
            0.5 * det
        }
        3 => {
            let e = |i: usize| [p[i][0] - p[0][0], p[i][1] - p[0][1], p[i][2] - p[0][2]];
            let (a, b, c) = (e(1), e(2), e(3));
            let cross = |u: [f64; 3], v: [f64; 3]| {
                [
                    u[1] * v[2] - u[2] * v[1],
                    u[2] * v[0] - u[0] * v[2],
                    u[0] * v[1] - u[1] * v[0],
                ]
            };
            let bc = cross(b, c);
            let ca = cross(c, a);
            let ab = cross(a, b);
            let det = a[0] * bc[0] + a[1] * bc[1] + a[2] * bc[2];
            for k in 0..3 {
                g[1][k] = bc[k] / det;
                g[2][k] = ca[k] / det;
                g[3][k] = ab[k] / det;
                g[0][k] = -(g[1][k] + g[2][k] + g[3][k]);
            }
            det / 6.0
        }
        _ => unreachable!("dimension checked at construction"),
    };
    ElementGeometry {
        measure: signed.abs(),
        signed_measure: signed,
        gradients: g,
    }
}

impl SimplicialMesh {
    /// Builds a mesh, reorienting negatively oriented elements and deriving
    /// boundary and interface markers from the element tags.
    pub fn new(dim: usize, coords: Vec<f64>, elements: Vec<usize>, tags: Vec<u8>) -> Result<Self> {
        let mut mesh = Self::new_unmarked(dim, coords, elements, tags)?;
        mesh.derive_faces(None);
        Ok(mesh)
    }

    fn new_unmarked(dim: usize, coords: Vec<f64>, mut elements: Vec<usize>, tags: Vec<u8>) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Mesh(format!("unsupported dimension {dim}")));
        }
        if !coords.len().is_multiple_of(dim) || !elements.len().is_multiple_of(dim + 1) {
            return Err(Error::Mesh("coordinate or connectivity length mismatch".into()));
        }
        let nv = coords.len() / dim;
        let ne = elements.len() / (dim + 1);
        if tags.len() != ne {
            return Err(Error::Mesh(format!("{} tags for {} elements", tags.len(), ne)));
        }
        if let Some(&bad) = elements.iter().find(|&&v| v >= nv) {
            return Err(Error::Mesh(format!("element references vertex {bad} of {nv}")));
        }
        let mut mesh = SimplicialMesh {
            dim,
            coords,
            elements: Vec::new(),
            tags,
            faces: Vec::new(),
            face_markers: Vec::new(),
        };
        let scale = mesh.bounding_diameter().max(f64::MIN_POSITIVE);
        let tol = 1e-13 * scale.powi(dim as i32);
        for e in 0..ne {
            let conn = &mut elements[e * (dim + 1)..(e + 1) * (dim + 1)];
            let geo = simplex_geometry(dim, &mesh.points_of(conn));
            if !(geo.measure > tol) {
                return Err(Error::DegenerateElement {
                    element: e,
                    measure: geo.measure,
                });
            }
            if geo.signed_measure < 0.0 {
                conn.swap(0, 1);
            }
        }
        mesh.elements = elements;
        Ok(mesh)
    }

    fn points_of(&self, conn: &[usize]) -> [[f64; 3]; 4] {
        let mut p = [[0.0; 3]; 4];
        for (k, &v) in conn.iter().enumerate() {
            p[k][..self.dim].copy_from_slice(self.vertex(v));
        }
        p
    }

    fn bounding_diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in self.coords.chunks(self.dim) {
            for k in 0..self.dim {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (0..self.dim).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
    }

    /// Recomputes facet markers. Facets with one adjacent element are outer
    /// boundary unless `inherited` already marks them as an interface.
    fn derive_faces(&mut self, inherited: Option<&HashMap<FaceKey, BoundaryMarker>>) {
        let d = self.dim;
        let mut seen: HashMap<FaceKey, (usize, Option<usize>)> = HashMap::with_capacity(self.n_elements() * 2);
        let mut order: Vec<FaceKey> = Vec::new();
        for e in 0..self.n_elements() {
            let conn = self.element(e);
            for skip in 0..=d {
                let key = facet_of(conn, skip);
                match seen.get_mut(&key) {
                    Some(entry) => entry.1 = Some(e),
                    None => {
                        seen.insert(key, (e, None));
                        order.push(key);
                    }
                }
            }
        }
        self.faces.clear();
        self.face_markers.clear();
        for key in order {
            let (a, b) = seen[&key];
            let marker = match b {
                None => Some(
                    inherited
                        .and_then(|m| m.get(&key).copied())
                        .unwrap_or(BoundaryMarker::Outer),
                ),
                Some(b) => {
                    let (ta, tb) = (self.tags[a], self.tags[b]);
                    if ta == tb {
                        None
                    } else if ta == tags::DEFECT || tb == tags::DEFECT {
                        Some(BoundaryMarker::DefectInterface)
                    } else {
                        Some(BoundaryMarker::InclusionInterface)
                    }
                }
            };
            if let Some(marker) = marker {
                self.faces.extend_from_slice(&key[..d]);
                self.face_markers.push(marker);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn n_elements(&self) -> usize {
        self.tags.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn vertex(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn element(&self, e: usize) -> &[usize] {
        &self.elements[e * (self.dim + 1)..(e + 1) * (self.dim + 1)]
    }

    pub fn elements(&self) -> &[usize] {
        &self.elements
    }

    pub fn tag(&self, e: usize) -> u8 {
        self.tags[e]
    }

    pub fn tags(&self) -> &[u8] {
        &self.tags
    }

    /// Replaces element tags and recomputes interface markers.
    pub fn retag(&mut self, tags: Vec<u8>) -> Result<()> {
        if tags.len() != self.n_elements() {
            return Err(Error::Mesh("tag count mismatch".into()));
        }
        self.tags = tags;
        self.derive_faces(None);
        Ok(())
    }

    pub fn n_faces(&self) -> usize {
        self.face_markers.len()
    }

    pub fn face(&self, f: usize) -> (&[usize], BoundaryMarker) {
        (&self.faces[f * self.dim..(f + 1) * self.dim], self.face_markers[f])
    }

    pub fn geometry(&self, e: usize) -> ElementGeometry {
        simplex_geometry(self.dim, &self.points_of(self.element(e)))
    }

    pub fn centroid(&self, e: usize) -> [f64; 3] {
        let mut c = [0.0; 3];
        for &v in self.element(e) {
            for (k, x) in self.vertex(v).iter().enumerate() {
                c[k] += x;
            }
        }
        c.map(|x| x / (self.dim + 1) as f64)
    }

    /// Total measure of the elements whose tag satisfies `pred`.
    pub fn measure_where(&self, pred: impl Fn(u8) -> bool) -> f64 {
        (0..self.n_elements())
            .filter(|&e| pred(self.tags[e]))
            .map(|e| self.geometry(e).measure)
            .sum()
    }

    pub fn total_measure(&self) -> f64 {
        self.measure_where(|_| true)
    }

    /// Longest element edge.
    pub fn h_max(&self) -> f64 {
        let mut h: f64 = 0.0;
        for e in 0..self.n_elements() {
            let conn = self.element(e);
            for a in 0..conn.len() {
                for b in a + 1..conn.len() {
                    let d2: f64 = self
                        .vertex(conn[a])
                        .iter()
                        .zip(self.vertex(conn[b]))
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    h = h.max(d2.sqrt());
                }
            }
        }
        h
    }

    /// Vertices lying on a facet with the given marker.
    pub fn marked_vertices(&self, marker: BoundaryMarker) -> Vec<bool> {
        let mut flags = vec![false; self.n_vertices()];
        for f in 0..self.n_faces() {
            let (verts, m) = self.face(f);
            if m == marker {
                for &v in verts {
                    flags[v] = true;
                }
            }
        }
        flags
    }

    /// Extracts the elements whose tag satisfies `keep`. Returns the submesh
    /// and, for each of its vertices, the index of the parent vertex.
    pub fn submesh(&self, keep: impl Fn(u8) -> bool) -> Result<(SimplicialMesh, Vec<usize>)> {
        let d = self.dim;
        let mut new_index = vec![usize::MAX; self.n_vertices()];
        let mut parent = Vec::new();
        let mut elements = Vec::new();
        let mut tags_out = Vec::new();
        for e in 0..self.n_elements() {
            if !keep(self.tags[e]) {
                continue;
            }
            for &v in self.element(e) {
                if new_index[v] == usize::MAX {
                    new_index[v] = parent.len();
                    parent.push(v);
                }
                elements.push(new_index[v]);
            }
            tags_out.push(self.tags[e]);
        }
        if tags_out.is_empty() {
            return Err(Error::Mesh("submesh selection is empty".into()));
        }
        let coords: Vec<f64> = parent.iter().flat_map(|&v| self.vertex(v).iter().copied()).collect();
        let mut inherited = HashMap::new();
        for f in 0..self.n_faces() {
            let (verts, marker) = self.face(f);
            if verts.iter().all(|&v| new_index[v] != usize::MAX) {
                let mapped: Vec<usize> = verts.iter().map(|&v| new_index[v]).collect();
                inherited.insert(face_key(&mapped), marker);
            }
        }
        let mut sub = SimplicialMesh {
            dim: d,
            coords,
            elements,
            tags: tags_out,
            faces: Vec::new(),
            face_markers: Vec::new(),
        };
        sub.derive_faces(Some(&inherited));
        Ok((sub, parent))
    }

    /// Checks that every facet is shared by at most two elements.
    pub fn check_conforming(&self) -> Result<()> {
        let d = self.dim;
        let mut count: HashMap<FaceKey, u8> = HashMap::new();
        for e in 0..self.n_elements() {
            let conn = self.element(e);
            for skip in 0..=d {
                let key = facet_of(conn, skip);
                let c = count.entry(key).or_insert(0);
                *c += 1;
                if *c > 2 {
                    let verts = &key[..d];
                    return Err(Error::Mesh(format!("facet {verts:?} shared by more than two elements")));
                }
            }
        }
        Ok(())
    }

    /// Writes the mesh in a plain text format: a header line
    /// `dim n_vertices n_elements n_faces`, then one line per vertex,
    /// element (`tag v0 v1 ...`) and marked facet (`marker v0 ...`).
    pub fn write_ascii(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "{} {} {} {}",
            self.dim,
            self.n_vertices(),
            self.n_elements(),
            self.n_faces()
        )?;
        for v in self.coords.chunks(self.dim) {
            let line: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        for e in 0..self.n_elements() {
            let conn: Vec<String> = self.element(e).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{} {}", self.tags[e], conn.join(" "))?;
        }
        for f in 0..self.n_faces() {
            let (verts, marker) = self.face(f);
            let conn: Vec<String> = verts.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{} {}", marker.code(), conn.join(" "))?;
        }
        Ok(())
    }

    /// Reads the format produced by [`SimplicialMesh::write_ascii`].
    pub fn read_ascii(r: impl BufRead) -> Result<Self> {
        let bad = |what: &str| Error::Mesh(format!("malformed mesh file: {what}"));
        let mut lines = r.lines();
        let mut next_numbers = |what: &str| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| bad(what))??;
            line.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(what)))
                .collect()
        };
        let header = next_numbers("header")?;
        if header.len() != 4 {
            return Err(bad("header"));
        }
        let (dim, nv, ne, nf) = (
            header[0] as usize,
            header[1] as usize,
            header[2] as usize,
            header[3] as usize,
        );
        let mut coords = Vec::with_capacity(nv * dim);
        for _ in 0..nv {
            let v = next_numbers("vertex")?;
            if v.len() != dim {
                return Err(bad("vertex"));
            }
            coords.extend(v);
        }
        let mut elements = Vec::with_capacity(ne * (dim + 1));
        let mut tags_in = Vec::with_capacity(ne);
        for _ in 0..ne {
            let v = next_numbers("element")?;
            if v.len() != dim + 2 {
                return Err(bad("element"));
            }
            tags_in.push(v[0] as u8);
            elements.extend(v[1..].iter().map(|&x| x as usize));
        }
        let mut inherited = HashMap::new();
        for _ in 0..nf {
            let v = next_numbers("facet")?;
            if v.len() != dim + 1 {
                return Err(bad("facet"));
            }
            let marker = BoundaryMarker::from_code(v[0] as u8).ok_or_else(|| bad("marker"))?;
            let verts: Vec<usize> = v[1..].iter().map(|&x| x as usize).collect();
            inherited.insert(face_key(&verts), marker);
        }
        let mut mesh = Self::new_unmarked(dim, coords, elements, tags_in)?;
        mesh.derive_faces(Some(&inherited));
        Ok(mesh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangles() -> SimplicialMesh {
        let coords = vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        SimplicialMesh::new(2, coords, vec![0, 1, 2, 0, 3, 2], vec![0, 1]).unwrap()
    }

    #[test]
    fn elements_are_reoriented_positively() {
        let mesh = two_triangles();
        for e in 0..mesh.n_elements() {
            assert!(mesh.geometry(e).signed_measure > 0.0);
        }
        assert!((mesh.total_measure() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn faces_are_marked_once() {
        let mesh = two_triangles();
        let outer = (0..mesh.n_faces())
            .filter(|&f| mesh.face(f).1 == BoundaryMarker::Outer)
            .count();
        let interface = (0..mesh.n_faces())
            .filter(|&f| mesh.face(f).1 == BoundaryMarker::InclusionInterface)
            .count();
        assert_eq!((outer, interface), (4, 1));
    }

    #[test]
    fn degenerate_element_is_named() {
        let coords = vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0];
        match SimplicialMesh::new(2, coords, vec![0, 1, 2], vec![0]) {
            Err(Error::DegenerateElement { element, .. }) => assert_eq!(element, 0),
            other => panic!("expected degenerate element error, got {other:?}"),
        }
    }

    #[test]
    fn submesh_inherits_interface_marker() {
        let mesh = two_triangles();
        let (sub, parent) = mesh.submesh(|t| t == 1).unwrap();
        assert_eq!(sub.n_elements(), 1);
        assert_eq!(parent.len(), 3);
        let markers: Vec<_> = (0..sub.n_faces()).map(|f| sub.face(f).1).collect();
        assert_eq!(
            markers
                .iter()
                .filter(|&&m| m == BoundaryMarker::InclusionInterface)
                .count(),
            1
        );
        assert_eq!(markers.iter().filter(|&&m| m == BoundaryMarker::Outer).count(), 2);
    }

    #[test]
    fn ascii_round_trip() {
        let mesh = two_triangles();
        let mut buf = Vec::new();
        mesh.write_ascii(&mut buf).unwrap();
        let back = SimplicialMesh::read_ascii(buf.as_slice()).unwrap();
        assert_eq!(back.elements(), mesh.elements());
        assert_eq!(back.tags(), mesh.tags());
        assert_eq!(back.coords(), mesh.coords());
        assert_eq!(back.n_faces(), mesh.n_faces());
    }

    #[test]
    fn tetrahedron_gradients_sum_to_zero() {
        let coords = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mesh = SimplicialMesh::new(3, coords, vec![0, 2, 1, 3], vec![0]).unwrap();
        let g = mesh.geometry(0);
        assert!((g.measure - 1.0 / 6.0).abs() < 1e-15);
        for k in 0..3 {
            let s: f64 = (0..4).map(|a| g.gradients[a][k]).sum();
            assert!(s.abs() < 1e-14);
        }
    }
}
