use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::mesh::SimplicialMesh;
use crate::fem::sparse::{CsrPattern, SymmetricForm};

/// Bilinear form to assemble with linear elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormKind {
    /// ∫ c ∇u·∇v
    Stiffness,
    /// ∫ c u v
    Mass,
    /// Row-sum lumped version of [`FormKind::Mass`].
    LumpedMass,
}

/// Piecewise-constant coefficient, one value (or tensor) per element.
#[derive(Clone, Copy, Debug)]
pub enum Coefficient<'a> {
    Scalar(&'a [f64]),
    /// Symmetric positive definite tensor per element (only the leading
    /// `dim × dim` block is read). Stiffness forms only.
    Tensor(&'a [[[f64; 3]; 3]]),
}

impl Coefficient<'_> {
    fn len(&self) -> usize {
        match self {
            Coefficient::Scalar(c) => c.len(),
            Coefficient::Tensor(t) => t.len(),
        }
    }
}

const CHUNK: usize = 1 << 15;

/// Assembles a form on a fresh vertex-adjacency pattern.
pub fn assemble(mesh: &SimplicialMesh, coefficient: &[f64], kind: FormKind) -> Result<SymmetricForm> {
    let pattern = Arc::new(CsrPattern::from_mesh(mesh));
    assemble_on(mesh, &pattern, Coefficient::Scalar(coefficient), kind)
}

/// Assembles a form on a given pattern, which must contain the mesh adjacency.
///
/// Element matrices are computed in parallel and scattered in element order,
/// so the result is identical across runs and thread counts.
pub fn assemble_on(
    mesh: &SimplicialMesh,
    pattern: &Arc<CsrPattern>,
    coefficient: Coefficient<'_>,
    kind: FormKind,
) -> Result<SymmetricForm> {
    assemble_subset(mesh, pattern, coefficient, kind, |_| true)
}

/// Like [`assemble_on`], but only elements selected by `keep` contribute,
/// so forms of different subdomains share one pattern.
pub fn assemble_subset(
    mesh: &SimplicialMesh,
    pattern: &Arc<CsrPattern>,
    coefficient: Coefficient<'_>,
    kind: FormKind,
    keep: impl Fn(usize) -> bool,
) -> Result<SymmetricForm> {
    let ne = mesh.n_elements();
    if coefficient.len() != ne {
        return Err(Error::InvalidArgument(format!(
            "{} coefficient values for {} elements",
            coefficient.len(),
            ne
        )));
    }
    if let Coefficient::Scalar(c) = coefficient {
        if let Some(e) = c.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "coefficient {} on element {e} is not positive",
                c[e]
            )));
        }
    } else if kind != FormKind::Stiffness {
        return Err(Error::InvalidArgument(
            "tensor coefficients apply to stiffness forms only".into(),
        ));
    }
    let d = mesh.dim();
    let k = d + 1;
    let tol = 1e-14 * mesh_scale(mesh).powi(d as i32);
    let mut values = vec![0.0; pattern.nnz()];
    let mut local = vec![0.0; CHUNK.min(ne.max(1)) * k * k];
    for start in (0..ne).step_by(CHUNK) {
        let end = (start + CHUNK).min(ne);
        let block = &mut local[..(end - start) * k * k];
        block
            .par_chunks_mut(k * k)
            .enumerate()
            .try_for_each(|(off, out)| element_matrix(mesh, start + off, coefficient, kind, tol, out))?;
        for e in start..end {
            if !keep(e) {
                continue;
            }
            let conn = mesh.element(e);
            let m = &block[(e - start) * k * k..(e - start + 1) * k * k];
            for a in 0..k {
                for b in 0..k {
                    let pos = pattern.position(conn[a], conn[b]).ok_or_else(|| {
                        Error::InvalidArgument(format!("pattern lacks entry ({}, {})", conn[a], conn[b]))
                    })?;
                    values[pos] += m[a * k + b];
                }
            }
        }
    }
    SymmetricForm::from_parts(Arc::clone(pattern), values)
}

fn mesh_scale(mesh: &SimplicialMesh) -> f64 {
    let c = mesh.coords();
    let (lo, hi) = c
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    (hi - lo).max(f64::MIN_POSITIVE)
}

fn element_matrix(
    mesh: &SimplicialMesh,
    e: usize,
    coefficient: Coefficient<'_>,
    kind: FormKind,
    tol: f64,
    out: &mut [f64],
) -> Result<()> {
    let d = mesh.dim();
    let k = d + 1;
    let geo = mesh.geometry(e);
    if !(geo.measure > tol) {
        return Err(Error::DegenerateElement {
            element: e,
            measure: geo.measure,
        });
    }
    let g = &geo.gradients;
    match kind {
        FormKind::Stiffness => {
            for a in 0..k {
                for b in 0..k {
                    let s = match coefficient {
                        Coefficient::Scalar(c) => c[e] * (0..d).map(|i| g[a][i] * g[b][i]).sum::<f64>(),
                        Coefficient::Tensor(t) => {
                            let t = &t[e];
                            let mut s = 0.0;
                            for i in 0..d {
                                for j in 0..d {
                                    // symmetrised so that out[a][b] == out[b][a] bitwise
                                    s += 0.5 * (t[i][j] + t[j][i]) * 0.5 * (g[a][i] * g[b][j] + g[b][i] * g[a][j]);
                                }
                            }
                            s
                        }
                    };
                    out[a * k + b] = geo.measure * s;
                }
            }
        }
        FormKind::Mass => {
            let Coefficient::Scalar(c) = coefficient else {
                unreachable!()
            };
            let base = c[e] * geo.measure / ((k * (k + 1)) as f64);
            for a in 0..k {
                for b in 0..k {
                    out[a * k + b] = if a == b { 2.0 * base } else { base };
                }
            }
        }
        FormKind::LumpedMass => {
            let Coefficient::Scalar(c) = coefficient else {
                unreachable!()
            };
            out.iter_mut().for_each(|x| *x = 0.0);
            for a in 0..k {
                out[a * k + a] = c[e] * geo.measure / k as f64;
            }
        }
    }
    Ok(())
}

/// Load vector ∫ c φ_i with per-element coefficient `c`.
pub fn unit_load(mesh: &SimplicialMesh, coefficient: &[f64]) -> Vec<f64> {
    let k = mesh.dim() + 1;
    let mut f = vec![0.0; mesh.n_vertices()];
    for e in 0..mesh.n_elements() {
        let share = coefficient[e] * mesh.geometry(e).measure / k as f64;
        for &v in mesh.element(e) {
            f[v] += share;
        }
    }
    f
}

/// Load vector ∫ c e_dir·∇φ_i with per-element coefficient `c`.
pub fn gradient_load(mesh: &SimplicialMesh, coefficient: &[f64], dir: usize) -> Vec<f64> {
    let mut f = vec![0.0; mesh.n_vertices()];
    for e in 0..mesh.n_elements() {
        let geo = mesh.geometry(e);
        for (a, &v) in mesh.element(e).iter().enumerate() {
            f[v] += coefficient[e] * geo.measure * geo.gradients[a][dir];
        }
    }
    f
}

/// ∫ u over the elements selected by `keep`, for a nodal field `u`.
pub fn integrate(mesh: &SimplicialMesh, u: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    let k = mesh.dim() + 1;
    (0..mesh.n_elements())
        .filter(|&e| keep(e))
        .map(|e| {
            let s: f64 = mesh.element(e).iter().map(|&v| u[v]).sum();
            mesh.geometry(e).measure * s / k as f64
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::meshers;

    #[test]
    fn right_triangle_stiffness() {
        let mesh = SimplicialMesh::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0, 1, 2], vec![0]).unwrap();
        let k = assemble(&mesh, &[1.0], FormKind::Stiffness).unwrap();
        let expected = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k.get(i, j) - expected[i][j]).abs() < 1e-15, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn mass_sums_to_volume_and_stiffness_kills_constants() {
        let mesh = meshers::unit_square_grid(7, 5);
        let ones = vec![1.0; mesh.n_elements()];
        let m = assemble(&mesh, &ones, FormKind::Mass).unwrap();
        assert!((m.sum_entries() - 1.0).abs() < 1e-13);
        let l = assemble(&mesh, &ones, FormKind::LumpedMass).unwrap();
        assert!((l.sum_entries() - 1.0).abs() < 1e-13);
        let k = assemble(&mesh, &ones, FormKind::Stiffness).unwrap();
        let r = k.apply(&vec![1.0; mesh.n_vertices()]);
        assert!(r.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn assembled_forms_are_bitwise_symmetric() {
        let mesh = meshers::unit_square_grid(6, 6);
        let c: Vec<f64> = (0..mesh.n_elements()).map(|e| 1.0 + 0.37 * e as f64).collect();
        for kind in [FormKind::Stiffness, FormKind::Mass] {
            assert!(assemble(&mesh, &c, kind).unwrap().is_symmetric());
        }
        let t: Vec<[[f64; 3]; 3]> = (0..mesh.n_elements())
            .map(|e| {
                [
                    [2.0, 0.1 * e as f64 / 100.0, 0.0],
                    [0.1 * e as f64 / 100.0, 1.0, 0.0],
                    [0.0; 3],
                ]
            })
            .collect();
        let p = Arc::new(CsrPattern::from_mesh(&mesh));
        assert!(assemble_on(&mesh, &p, Coefficient::Tensor(&t), FormKind::Stiffness)
            .unwrap()
            .is_symmetric());
    }

    #[test]
    fn nonpositive_coefficient_rejected() {
        let mesh = meshers::unit_square_grid(2, 2);
        let mut c = vec![1.0; mesh.n_elements()];
        c[3] = 0.0;
        let err = assemble(&mesh, &c, FormKind::Stiffness).unwrap_err();
        assert!(err.to_string().contains("element 3"));
    }

    #[test]
    fn tetrahedral_mass_and_stiffness() {
        let coords = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mesh = SimplicialMesh::new(3, coords, vec![0, 1, 2, 3], vec![0]).unwrap();
        let m = assemble(&mesh, &[1.0], FormKind::Mass).unwrap();
        assert!((m.sum_entries() - 1.0 / 6.0).abs() < 1e-15);
        let k = assemble(&mesh, &[1.0], FormKind::Stiffness).unwrap();
        assert!(k.apply(&[1.0; 4]).iter().all(|x| x.abs() < 1e-15));
    }
}
