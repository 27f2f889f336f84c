use crate::fem::mesh::SimplicialMesh;

/// Bucket grid over the mesh bounding box for point location and P1
/// interpolation. It does not borrow the mesh; queries take the mesh it was built from.
#[derive(Clone, Debug)]
pub struct PointLocator {
    lo: [f64; 3],
    cell: [f64; 3],
    dims: [usize; 3],
    buckets: Vec<Vec<usize>>,
}

impl PointLocator {
    pub fn new(mesh: &SimplicialMesh) -> Self {
        let d = mesh.dim();
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..d {
            lo[k] = f64::INFINITY;
            hi[k] = f64::NEG_INFINITY;
        }
        for v in 0..mesh.n_vertices() {
            for (k, &x) in mesh.vertex(v).iter().enumerate() {
                lo[k] = lo[k].min(x);
                hi[k] = hi[k].max(x);
            }
        }
        let per_axis = ((mesh.n_elements() as f64).powf(1.0 / d as f64).ceil() as usize).max(1);
        let mut dims = [1; 3];
        let mut cell = [1.0; 3];
        for k in 0..d {
            dims[k] = per_axis;
            cell[k] = ((hi[k] - lo[k]) / per_axis as f64).max(f64::MIN_POSITIVE);
        }
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let mut locator = PointLocator {
            lo,
            cell,
            dims,
            buckets: Vec::new(),
        };
        for e in 0..mesh.n_elements() {
            let mut blo = [0usize; 3];
            let mut bhi = [0usize; 3];
            for k in 0..d {
                let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
                for &v in mesh.element(e) {
                    a = a.min(mesh.vertex(v)[k]);
                    b = b.max(mesh.vertex(v)[k]);
                }
                blo[k] = locator.axis_index(k, a);
                bhi[k] = locator.axis_index(k, b);
            }
            for i in blo[0]..=bhi[0] {
                for j in blo[1]..=bhi[1] {
                    for l in blo[2]..=bhi[2] {
                        buckets[(l * dims[1] + j) * dims[0] + i].push(e);
                    }
                }
            }
        }
        locator.buckets = buckets;
        locator
    }

    fn axis_index(&self, k: usize, x: f64) -> usize {
        (((x - self.lo[k]) / self.cell[k]).floor().max(0.0) as usize).min(self.dims[k] - 1)
    }

    /// Element containing `x` and its barycentric coordinates.
    pub fn locate(&self, mesh: &SimplicialMesh, x: &[f64]) -> Option<(usize, [f64; 4])> {
        let d = mesh.dim();
        let mut idx = [0usize; 3];
        for k in 0..d {
            let t = (x[k] - self.lo[k]) / self.cell[k];
            if t < -1e-9 || t > self.dims[k] as f64 + 1e-9 {
                return None;
            }
            idx[k] = self.axis_index(k, x[k]);
        }
        let bucket = &self.buckets[(idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]];
        let mut best: Option<(usize, [f64; 4], f64)> = None;
        for &e in bucket {
            let bary = barycentric(mesh, e, x);
            let worst = bary[..=d].iter().cloned().fold(f64::INFINITY, f64::min);
            if worst >= 0.0 {
                return Some((e, bary));
            }
            if best.as_ref().is_none_or(|b| worst > b.2) {
                best = Some((e, bary, worst));
            }
        }
        // points on element boundaries may miss by rounding
        best.filter(|b| b.2 > -1e-10).map(|b| (b.0, b.1))
    }

    /// P1 interpolation of the nodal field `u` at `x`; `None` outside the mesh.
    pub fn interpolate(&self, mesh: &SimplicialMesh, u: &[f64], x: &[f64]) -> Option<f64> {
        let (e, bary) = self.locate(mesh, x)?;
        Some(mesh.element(e).iter().zip(bary).map(|(&v, b)| b * u[v]).sum())
    }
}

fn barycentric(mesh: &SimplicialMesh, e: usize, x: &[f64]) -> [f64; 4] {
    let d = mesh.dim();
    let geo = mesh.geometry(e);
    let verts = mesh.element(e);
    let x0 = mesh.vertex(verts[0]);
    let mut bary = [0.0; 4];
    let mut rest = 1.0;
    for a in 1..=d {
        let v: f64 = (0..d).map(|k| geo.gradients[a][k] * (x[k] - x0[k])).sum();
        bary[a] = v;
        rest -= v;
    }
    bary[0] = rest;
    bary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::meshers;

    #[test]
    fn interpolates_linear_functions_exactly() {
        let mesh = meshers::rectangle_grid([-1.0, 2.0], [0.0, 1.0], 17, 9);
        let u: Vec<f64> = (0..mesh.n_vertices())
            .map(|v| 2.0 * mesh.vertex(v)[0] - 3.0 * mesh.vertex(v)[1] + 0.5)
            .collect();
        let loc = PointLocator::new(&mesh);
        for &(x, y) in &[(0.3, 0.7), (-1.0, 0.0), (2.0, 1.0), (1.234, 0.5)] {
            let v = loc.interpolate(&mesh, &u, &[x, y]).unwrap();
            assert!((v - (2.0 * x - 3.0 * y + 0.5)).abs() < 1e-12);
        }
        assert!(loc.interpolate(&mesh, &u, &[3.0, 0.5]).is_none());
    }
}
