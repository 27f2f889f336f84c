use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::mesh::SimplicialMesh;

/// Sparsity pattern in compressed row layout with sorted column indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsrPattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl CsrPattern {
    /// Vertex adjacency of a mesh, diagonal included.
    pub fn from_mesh(mesh: &SimplicialMesh) -> Self {
        let n = mesh.n_vertices();
        let k = mesh.dim() + 1;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in 0..mesh.n_elements() {
            let conn = mesh.element(e);
            for &a in conn {
                rows[a].extend_from_slice(conn);
            }
        }
        let _ = k;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (i, row) in rows.iter_mut().enumerate() {
            row.push(i);
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
            *row = Vec::new();
        }
        CsrPattern { n, row_ptr, col_idx }
    }

    /// Builds a pattern from (row, column) pairs sorted by row then column.
    fn from_sorted(n: usize, entries: &[(usize, usize)]) -> Self {
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        for &(i, j) in entries {
            row_ptr[i + 1] += 1;
            col_idx.push(j);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrPattern { n, row_ptr, col_idx }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Storage position of entry (i, j), if present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        self.row(i).binary_search(&j).ok().map(|k| start + k)
    }
}

/// Identification of mesh vertices with degrees of freedom.
///
/// Vertices either map to a DOF (possibly shared with periodic images) or are
/// eliminated by a homogeneous Dirichlet condition.
#[derive(Clone, Debug, PartialEq)]
pub struct DofMap {
    vertex_dof: Vec<Option<usize>>,
    n_dofs: usize,
}

impl DofMap {
    pub fn identity(n_vertices: usize) -> Self {
        DofMap {
            vertex_dof: (0..n_vertices).map(Some).collect(),
            n_dofs: n_vertices,
        }
    }

    /// Eliminates the flagged vertices.
    pub fn dirichlet(fixed: &[bool]) -> Self {
        let mut next = 0;
        let vertex_dof = fixed
            .iter()
            .map(|&f| {
                if f {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect();
        DofMap {
            vertex_dof,
            n_dofs: next,
        }
    }

    /// Identifies vertices on opposite faces of the mesh bounding box, which
    /// must be a translate of the unit cell or any other axis-aligned box.
    /// Matching uses an absolute tolerance of 1e-10.
    pub fn periodic(mesh: &SimplicialMesh) -> Result<Self> {
        const TOL: f64 = 1e-10;
        let d = mesh.dim();
        let nv = mesh.n_vertices();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in 0..nv {
            for (k, &x) in mesh.vertex(v).iter().enumerate() {
                lo[k] = lo[k].min(x);
                hi[k] = hi[k].max(x);
            }
        }
        let period: Vec<f64> = (0..d).map(|k| hi[k] - lo[k]).collect();
        let quantize = |x: f64| (x * 1e8).round() as i64;
        let mut groups: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut on_faces = vec![0u32; nv];
        for v in 0..nv {
            let x = mesh.vertex(v);
            let mut canonical = [0i64; 3];
            let mut count = 0;
            for k in 0..d {
                let mut c = x[k];
                if (c - lo[k]).abs() <= TOL {
                    count += 1;
                } else if (c - hi[k]).abs() <= TOL {
                    c -= period[k];
                    count += 1;
                }
                canonical[k] = quantize(c);
            }
            on_faces[v] = count;
            if count > 0 {
                groups.entry(canonical).or_default().push(v);
            }
        }
        let mut master: Vec<usize> = (0..nv).collect();
        let mut unmatched = Vec::new();
        let mut keys: Vec<&[i64; 3]> = groups.keys().collect();
        keys.sort();
        for key in keys {
            let members = &groups[key];
            let expected = 1usize << on_faces[members[0]];
            let consistent = members.len() == expected && members.iter().all(|&v| on_faces[v] == on_faces[members[0]]);
            if !consistent {
                unmatched.extend(members.iter().map(|&v| mesh.vertex(v).to_vec()));
                continue;
            }
            let m = *members.iter().min().unwrap();
            for &v in members {
                master[v] = m;
            }
        }
        if !unmatched.is_empty() {
            unmatched.sort_by(|a, b| a.partial_cmp(b).unwrap());
            return Err(Error::UnmatchedPeriodic { coords: unmatched });
        }
        let mut vertex_dof = vec![None; nv];
        let mut next = 0;
        for v in 0..nv {
            if master[v] == v {
                vertex_dof[v] = Some(next);
                next += 1;
            }
        }
        for v in 0..nv {
            vertex_dof[v] = vertex_dof[master[v]];
        }
        Ok(DofMap {
            vertex_dof,
            n_dofs: next,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn n_vertices(&self) -> usize {
        self.vertex_dof.len()
    }

    pub fn dof(&self, vertex: usize) -> Option<usize> {
        self.vertex_dof[vertex]
    }

    /// Vertex values from DOF values (eliminated vertices get zero).
    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        self.vertex_dof.iter().map(|d| d.map_or(0.0, |i| reduced[i])).collect()
    }

    /// DOF values from vertex values, taking the value at the first vertex
    /// mapped to each DOF.
    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        let mut out = vec![f64::NAN; self.n_dofs];
        for (v, d) in self.vertex_dof.iter().enumerate() {
            if let Some(i) = *d {
                if out[i].is_nan() {
                    out[i] = full[v];
                }
            }
        }
        out
    }

    /// Transpose of [`DofMap::expand`]: sums vertex contributions into DOFs.
    pub fn restrict_vector(&self, full: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_dofs];
        for (v, d) in self.vertex_dof.iter().enumerate() {
            if let Some(i) = *d {
                out[i] += full[v];
            }
        }
        out
    }
}

/// Sparse symmetric matrix stored in full compressed row layout.
///
/// The pattern is shared so that forms assembled on the same mesh can be
/// combined entrywise. `constraints` records the DOF map of the space the
/// form lives on, if it was restricted.
#[derive(Clone, Debug)]
pub struct SymmetricForm {
    pattern: Arc<CsrPattern>,
    values: Vec<f64>,
    constraints: Option<Arc<DofMap>>,
}

impl SymmetricForm {
    pub fn from_parts(pattern: Arc<CsrPattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::InvalidArgument("value count does not match pattern".into()));
        }
        Ok(SymmetricForm {
            pattern,
            values,
            constraints: None,
        })
    }

    /// Diagonal matrix, mostly useful in tests.
    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let entries: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        SymmetricForm {
            pattern: Arc::new(CsrPattern::from_sorted(n, &entries)),
            values: diag.to_vec(),
            constraints: None,
        }
    }

    /// Builds a form from (row, column, value) triplets; duplicates are summed.
    /// Both (i, j) and (j, i) must be supplied for off-diagonal entries.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        if let Some(t) = sorted.iter().find(|t| t.0 >= n || t.1 >= n) {
            return Err(Error::InvalidArgument(format!(
                "triplet ({}, {}) out of range",
                t.0, t.1
            )));
        }
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut entries = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        for (i, j, v) in sorted {
            if entries.last() == Some(&(i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                entries.push((i, j));
                values.push(v);
            }
        }
        let form = SymmetricForm {
            pattern: Arc::new(CsrPattern::from_sorted(n, &entries)),
            values,
            constraints: None,
        };
        if !form.is_symmetric() {
            return Err(Error::InvalidArgument(
                "triplets do not describe a symmetric matrix".into(),
            ));
        }
        Ok(form)
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn constraints(&self) -> Option<&Arc<DofMap>> {
        self.constraints.as_ref()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.get(i, i)).collect()
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let p = &*self.pattern;
        for i in 0..p.n {
            let mut s = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                s += self.values[k] * x[p.col_idx[k]];
            }
            y[i] = s;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n()];
        self.matvec(x, &mut y);
        y
    }

    /// xᵀ A y
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let p = &*self.pattern;
        let mut total = 0.0;
        for i in 0..p.n {
            let mut s = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                s += self.values[k] * y[p.col_idx[k]];
            }
            total += x[i] * s;
        }
        total
    }

    pub fn sum_entries(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Exact (bitwise) symmetry of stored values and pattern.
    pub fn is_symmetric(&self) -> bool {
        let p = &*self.pattern;
        (0..p.n).all(|i| {
            (p.row_ptr[i]..p.row_ptr[i + 1]).all(|k| {
                let j = p.col_idx[k];
                p.position(j, i)
                    .is_some_and(|q| self.values[q].to_bits() == self.values[k].to_bits())
            })
        })
    }

    fn same_pattern(&self, other: &SymmetricForm) -> bool {
        Arc::ptr_eq(&self.pattern, &other.pattern) || *self.pattern == *other.pattern
    }

    /// a·self + b·other; both forms must share a pattern.
    pub fn lin_comb(&self, a: f64, other: &SymmetricForm, b: f64) -> Result<SymmetricForm> {
        let mut out = self.clone();
        out.lin_comb_into(a, other, b, self)?;
        Ok(out)
    }

    /// Overwrites self with a·x + b·y without reallocating.
    pub fn lin_comb_into(&mut self, a: f64, y: &SymmetricForm, b: f64, x: &SymmetricForm) -> Result<()> {
        if !self.same_pattern(x) || !self.same_pattern(y) {
            return Err(Error::InvalidArgument("forms have different sparsity patterns".into()));
        }
        for ((o, &xv), &yv) in self.values.iter_mut().zip(&x.values).zip(&y.values) {
            *o = a * xv + b * yv;
        }
        Ok(())
    }

    /// Restricts the form to the space described by `map` (Pᵀ A P).
    pub fn restrict(&self, map: &Arc<DofMap>) -> Result<SymmetricForm> {
        let mut out = SymmetricForm::restrict_many(&[self], map)?;
        Ok(out.remove(0))
    }

    /// Restricts several forms sharing a pattern, producing forms that again
    /// share one reduced pattern. Reduction order is fixed, so mirrored
    /// entries are bitwise equal.
    pub fn restrict_many(forms: &[&SymmetricForm], map: &Arc<DofMap>) -> Result<Vec<SymmetricForm>> {
        let first = forms
            .first()
            .ok_or_else(|| Error::InvalidArgument("no forms to restrict".into()))?;
        if map.n_vertices() != first.n() {
            return Err(Error::InvalidArgument(format!(
                "DOF map has {} vertices but form has {} rows",
                map.n_vertices(),
                first.n()
            )));
        }
        if forms.iter().any(|f| !first.same_pattern(f)) {
            return Err(Error::InvalidArgument("forms have different sparsity patterns".into()));
        }
        let p = &*first.pattern;
        let mut items: Vec<(usize, usize, usize)> = Vec::with_capacity(p.nnz());
        for a in 0..p.n {
            let Some(i) = map.dof(a) else { continue };
            for k in p.row_ptr[a]..p.row_ptr[a + 1] {
                if let Some(j) = map.dof(p.col_idx[k]) {
                    if i <= j {
                        items.push((i, j, k));
                    }
                }
            }
        }
        items.sort_by_key(|&(i, j, _)| (i, j));
        let mut upper: Vec<(usize, usize)> = Vec::new();
        let mut starts: Vec<usize> = Vec::new();
        for (idx, &(i, j, _)) in items.iter().enumerate() {
            if upper.last() != Some(&(i, j)) {
                upper.push((i, j));
                starts.push(idx);
            }
        }
        starts.push(items.len());
        let mut entries: Vec<(usize, usize, usize)> = Vec::with_capacity(2 * upper.len());
        for (u, &(i, j)) in upper.iter().enumerate() {
            entries.push((i, j, u));
            if i != j {
                entries.push((j, i, u));
            }
        }
        entries.sort_by_key(|&(i, j, _)| (i, j));
        let pairs: Vec<(usize, usize)> = entries.iter().map(|&(i, j, _)| (i, j)).collect();
        let pattern = Arc::new(CsrPattern::from_sorted(map.n_dofs(), &pairs));
        let map = Arc::clone(map);
        Ok(forms
            .iter()
            .map(|f| {
                let sums: Vec<f64> = (0..upper.len())
                    .map(|u| {
                        items[starts[u]..starts[u + 1]]
                            .iter()
                            .map(|&(_, _, k)| f.values[k])
                            .sum()
                    })
                    .collect();
                SymmetricForm {
                    pattern: Arc::clone(&pattern),
                    values: entries.iter().map(|&(_, _, u)| sums[u]).collect(),
                    constraints: Some(Arc::clone(&map)),
                }
            })
            .collect())
    }

    /// Writes `row col value` lines (zero-based) for debugging.
    pub fn write_triplets(&self, mut w: impl Write) -> Result<()> {
        let p = &*self.pattern;
        writeln!(w, "{} {} {}", p.n, p.n, p.nnz())?;
        for i in 0..p.n {
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                writeln!(w, "{} {} {:e}", i, p.col_idx[k], self.values[k])?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let f = SymmetricForm::from_triplets(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (0, 0, 3.0)]).unwrap();
        assert_eq!(f.get(0, 0), 4.0);
        assert_eq!(f.get(1, 0), 2.0);
        assert_eq!(f.get(1, 1), 0.0);
        assert!(f.is_symmetric());
    }

    #[test]
    fn asymmetric_triplets_rejected() {
        assert!(SymmetricForm::from_triplets(2, &[(0, 1, 1.0)]).is_err());
    }

    #[test]
    fn dirichlet_map_expands_with_zeros() {
        let map = DofMap::dirichlet(&[true, false, false, true]);
        assert_eq!(map.n_dofs(), 2);
        assert_eq!(map.expand(&[5.0, 6.0]), vec![0.0, 5.0, 6.0, 0.0]);
        assert_eq!(map.restrict_vector(&[1.0, 2.0, 3.0, 4.0]), vec![2.0, 3.0]);
    }

    #[test]
    fn restriction_sums_identified_rows() {
        let f = SymmetricForm::from_triplets(3, &[(0, 0, 1.0), (1, 1, 2.0), (2, 2, 3.0), (0, 2, 0.5), (2, 0, 0.5)])
            .unwrap();
        let map = Arc::new(DofMap {
            vertex_dof: vec![Some(0), Some(1), Some(0)],
            n_dofs: 2,
        });
        let r = f.restrict(&map).unwrap();
        assert_eq!(r.get(0, 0), 1.0 + 3.0 + 0.5 + 0.5);
        assert_eq!(r.get(1, 1), 2.0);
        assert!(r.is_symmetric());
    }
}
