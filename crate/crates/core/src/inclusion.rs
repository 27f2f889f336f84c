//! Dirichlet spectrum of −a₀Δ on the inclusion and the cell means of its eigenfunctions.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bessel;
use crate::error::{Error, Result};
use crate::fem::{
    self, assemble, eig_shift_invert, BoundaryMarker, DofMap, EigOptions, FormKind, SimplicialMesh, SymmetricForm,
};
use crate::geometry::{CellGeometry, InclusionShape};

/// Default threshold below which a mean counts as zero.
pub const MEAN_TOL: f64 = 1e-8;
/// Default number of eigenpairs kept.
pub const K_MAX: usize = 20;
/// Relative eigenvalue spacing below which two eigenvalues are grouped.
pub const MULTIPLICITY_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub eigenvalue: f64,
    /// Mean over the unit cell of the zero-extended, L²(Q₀)-normalized eigenfunction.
    pub mean: f64,
    /// Dimension of the eigenspace this entry belongs to.
    pub multiplicity: usize,
    pub zero_mean: bool,
}

/// Ascending Dirichlet eigenvalues of −a₀Δ on Q₀ with eigenfunction means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionSpectrum {
    pub entries: Vec<SpectrumEntry>,
    pub a0: f64,
    pub k_max: usize,
    pub mean_tol: f64,
}

impl InclusionSpectrum {
    /// Builds a spectrum from (λ, ⟨φ⟩) pairs, sorting, grouping and flagging.
    pub fn from_pairs(mut pairs: Vec<(f64, f64)>, a0: f64, k_max: usize, mean_tol: f64) -> Result<Self> {
        if pairs
            .iter()
            .any(|&(l, m)| !(l > 0.0) || !l.is_finite() || !m.is_finite())
        {
            return Err(Error::InvalidArgument(
                "inclusion eigenvalues must be positive and finite".into(),
            ));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut entries: Vec<SpectrumEntry> = pairs
            .iter()
            .map(|&(eigenvalue, mean)| SpectrumEntry {
                eigenvalue,
                mean,
                multiplicity: 1,
                zero_mean: mean.abs() < mean_tol,
            })
            .collect();
        for group in clusters(
            &entries.iter().map(|e| e.eigenvalue).collect::<Vec<_>>(),
            MULTIPLICITY_TOL,
        ) {
            for &i in &group {
                entries[i].multiplicity = group.len();
            }
        }
        Ok(InclusionSpectrum {
            entries,
            a0,
            k_max,
            mean_tol,
        })
    }

    /// All entries in ascending order, zero-mean ones included.
    pub fn all_modes(&self) -> &[SpectrumEntry] {
        &self.entries
    }

    /// Entries contributing to β: nonzero mean, ascending.
    pub fn nonzero_mean(&self) -> impl Iterator<Item = &SpectrumEntry> {
        self.entries.iter().filter(|e| !e.zero_mean)
    }

    /// Distinct eigenvalues carrying nonzero mean with the summed weight
    /// Σ⟨φ⟩² over their eigenspace. These are the poles of β and their residues (up to λ²).
    pub fn poles(&self) -> Vec<(f64, f64)> {
        let values: Vec<f64> = self.entries.iter().map(|e| e.eigenvalue).collect();
        let mut out = Vec::new();
        for group in clusters(&values, MULTIPLICITY_TOL) {
            let weight: f64 = group
                .iter()
                .filter(|&&i| !self.entries[i].zero_mean)
                .map(|&i| self.entries[i].mean.powi(2))
                .sum();
            if weight > 0.0 {
                let lambda = group.iter().map(|&i| self.entries[i].eigenvalue).sum::<f64>() / group.len() as f64;
                out.push((lambda, weight));
            }
        }
        out
    }

    /// Σ⟨φ_j⟩² over the stored entries.
    pub fn mean_square_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.mean * e.mean).sum()
    }

    /// CSV with columns index, eigenvalue, mean, multiplicity, zero_mean_flag.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "index,eigenvalue,mean,multiplicity,zero_mean_flag")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(
                w,
                "{},{:e},{:e},{},{}",
                i + 1,
                e.eigenvalue,
                e.mean,
                e.multiplicity,
                e.zero_mean
            )?;
        }
        Ok(())
    }
}

/// Index groups of consecutive sorted values within relative distance `tol`.
pub(crate) fn clusters(sorted: &[f64], tol: f64) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        match out.last_mut() {
            Some(g) if (v - sorted[*g.last().unwrap()]).abs() <= tol * v.abs().max(1e-300) => g.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

/// Radial (nonzero-mean) Dirichlet spectrum of a ball inclusion in closed form.
///
/// In 3D λ_j = a₀(jπ/ρ)² with φ_j = sin(jπr/ρ)/(r√(2πρ)), so ⟨φ_j⟩² = 8ρ³/(πj²).
/// In 2D λ_j = a₀(z_j/ρ)² with z_j the zeros of J₀, and ⟨φ_j⟩² = 4πρ²/z_j².
pub fn ball_spectrum(rho: f64, a0: f64, n: usize, k_max: usize) -> Result<InclusionSpectrum> {
    CellGeometry::centered_ball(n, rho, a0, 1.0)?;
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let pairs: Vec<(f64, f64)> = match n {
        3 => (1..=k_max)
            .map(|j| {
                let jf = j as f64;
                let mean = (8.0 * rho.powi(3) / PI).sqrt() / jf * if j % 2 == 1 { 1.0 } else { -1.0 };
                (a0 * (jf * PI / rho).powi(2), mean)
            })
            .collect(),
        _ => bessel::bessel_j_zeros(0.0, k_max)
            .into_iter()
            .enumerate()
            .map(|(j, z)| {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                (a0 * (z / rho).powi(2), sign * 2.0 * PI.sqrt() * rho / z)
            })
            .collect(),
    };
    InclusionSpectrum::from_pairs(pairs, a0, k_max, MEAN_TOL)
}

/// Eigenvectors of a finite-element inclusion spectrum, as nodal values on the mesh.
#[derive(Clone, Debug)]
pub struct FemSpectrum {
    pub spectrum: InclusionSpectrum,
    /// One nodal field per entry, L²(Q₀)-normalized, zero on ∂Q₀.
    pub modes: Vec<Vec<f64>>,
}

/// First `k_max` Dirichlet eigenpairs of −a₀Δ on a mesh of Q₀ whose outer
/// boundary is ∂Q₀; means are the consistent-mass integrals of each mode.
pub fn fem_spectrum(
    mesh: &SimplicialMesh,
    a0: f64,
    k_max: usize,
    mean_tol: f64,
    opts: &EigOptions,
) -> Result<FemSpectrum> {
    let (k, m, map) = dirichlet_forms(mesh, a0)?;
    let count = k_max.min(k.n());
    let pairs = eig_shift_invert(&k, &m, 0.0, count, opts)?;
    let ones = vec![1.0; mesh.n_elements()];
    let load = fem::unit_load(mesh, &ones);
    let mut values = Vec::with_capacity(count);
    let mut modes = Vec::with_capacity(count);
    for p in &pairs {
        let mut full = map.expand(&p.vector);
        // fix the sign so the largest-magnitude value is positive
        let peak = full
            .iter()
            .cloned()
            .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if peak < 0.0 {
            full.iter_mut().for_each(|v| *v = -*v);
        }
        let mean: f64 = full.iter().zip(&load).map(|(u, w)| u * w).sum();
        values.push((p.value, mean));
        modes.push(full);
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| values[a].0.total_cmp(&values[b].0));
    let sorted_pairs = order.iter().map(|&i| values[i]).collect();
    let modes = order.into_iter().map(|i| std::mem::take(&mut modes[i])).collect();
    Ok(FemSpectrum {
        spectrum: InclusionSpectrum::from_pairs(sorted_pairs, a0, k_max, mean_tol)?,
        modes,
    })
}

fn dirichlet_forms(mesh: &SimplicialMesh, a0: f64) -> Result<(SymmetricForm, SymmetricForm, Arc<DofMap>)> {
    let coef = vec![a0; mesh.n_elements()];
    let ones = vec![1.0; mesh.n_elements()];
    let fixed = mesh.marked_vertices(BoundaryMarker::Outer);
    let map = Arc::new(DofMap::dirichlet(&fixed));
    let k = assemble(mesh, &coef, FormKind::Stiffness)?;
    let m = assemble(mesh, &ones, FormKind::Mass)?;
    let mut forms = SymmetricForm::restrict_many(&[&k, &m], &map)?;
    let m = forms.pop().unwrap();
    Ok((forms.pop().unwrap(), m, map))
}

/// Mesh of the inclusion alone (2D, cell coordinates), with ∂Q₀ as its outer boundary.
pub fn inclusion_mesh(geom: &CellGeometry, h: f64) -> Result<SimplicialMesh> {
    if geom.dimension != 2 {
        return Err(Error::InvalidArgument(
            "inclusion meshes are generated in 2D only".into(),
        ));
    }
    match &geom.inclusion {
        InclusionShape::Ball { center, radius } => {
            let layout = fem::meshers::RingLayout::from_interfaces(&[(*radius, fem::tags::INCLUSION)], h);
            let disk = fem::meshers::polar_disk(&layout, h, 8)?;
            let coords = disk
                .coords()
                .chunks(2)
                .flat_map(|p| [p[0] + center[0], p[1] + center[1]])
                .collect();
            SimplicialMesh::new(2, coords, disk.elements().to_vec(), disk.tags().to_vec())
        }
        InclusionShape::Polygon { vertices } => {
            let mut dom = fem::meshers::PlanarDomain {
                max_area: h * h * 3f64.sqrt() / 4.0,
                min_angle_deg: 25.0,
                ..Default::default()
            };
            let n = vertices.len();
            let mut boundary = Vec::new();
            for i in 0..n {
                let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                let m = ((len / h).ceil() as usize).max(1);
                for k in 0..m {
                    let t = k as f64 / m as f64;
                    boundary.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                }
            }
            dom.add_loop(&boundary);
            fem::meshers::cdt_mesh(&dom, |p| geom.in_inclusion(&p).then_some(fem::tags::INCLUSION))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ball_spectrum_three_d() {
        let s = ball_spectrum(0.3, 1.0, 3, 20).unwrap();
        assert_relative_eq!(s.entries[0].eigenvalue, 109.662_271_123_215_5, max_relative = 1e-12);
        let twice = ball_spectrum(0.3, 2.0, 3, 20).unwrap();
        for (a, b) in s.entries.iter().zip(&twice.entries) {
            assert_relative_eq!(2.0 * a.eigenvalue, b.eigenvalue, max_relative = 1e-14);
        }
    }

    #[test]
    fn ball_spectrum_two_d_uses_bessel_zero() {
        let s = ball_spectrum(0.3, 1.0, 2, 5).unwrap();
        let z = bessel::bisect(|x| bessel::bessel_j(0.0, x), 2.0, 3.0, bessel::bessel_j(0.0, 2.0));
        assert_relative_eq!(s.entries[0].eigenvalue, (z / 0.3).powi(2), max_relative = 1e-12);
        assert!((z - 2.404_825_557_695_773).abs() < 1e-12);
    }

    #[test]
    fn ball_means_match_quadrature() {
        // 3D: ⟨φ_j⟩ = ∫ φ_j over the ball, by midpoint quadrature in r
        let rho = 0.3;
        let s = ball_spectrum(rho, 1.0, 3, 4).unwrap();
        for (j, e) in s.entries.iter().enumerate() {
            let k = (j + 1) as f64 * PI / rho;
            let norm = 1.0 / (2.0 * PI * rho).sqrt();
            let n = 20000;
            let dr = rho / n as f64;
            let integral: f64 = (0..n)
                .map(|i| {
                    let r = (i as f64 + 0.5) * dr;
                    4.0 * PI * r * r * norm * (k * r).sin() / r * dr
                })
                .sum();
            assert_relative_eq!(e.mean, integral, max_relative = 1e-6);
        }
        // 2D: φ_j = J₀(z r/ρ)/(√π ρ |J₁(z)|)
        let s = ball_spectrum(rho, 1.0, 2, 3).unwrap();
        for (j, e) in s.entries.iter().enumerate() {
            let z = (e.eigenvalue.sqrt()) * rho;
            let norm = 1.0 / (PI.sqrt() * rho * bessel::bessel_j(1.0, z).abs());
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let n = 20000;
            let dr = rho / n as f64;
            let integral: f64 = (0..n)
                .map(|i| {
                    let r = (i as f64 + 0.5) * dr;
                    2.0 * PI * r * norm * bessel::bessel_j(0.0, z * r / rho) * dr
                })
                .sum();
            assert_relative_eq!(e.mean, sign * integral.abs(), max_relative = 1e-6);
        }
    }

    #[test]
    fn bessel_inequality_for_means() {
        for n in [2, 3] {
            let vol = crate::geometry::ball_volume(n, 0.3);
            let mut prev = 0.0;
            for k in [1, 5, 20, 80] {
                let s = ball_spectrum(0.3, 1.0, n, k).unwrap();
                let sum = s.mean_square_sum();
                assert!(sum <= vol && sum >= prev);
                prev = sum;
            }
        }
    }

    #[test]
    fn domain_monotonicity() {
        let small = ball_spectrum(0.2, 1.0, 2, 5).unwrap();
        let big = ball_spectrum(0.3, 1.0, 2, 5).unwrap();
        for (s, b) in small.entries.iter().zip(&big.entries) {
            assert!(s.eigenvalue > b.eigenvalue);
        }
    }

    #[test]
    fn fem_disk_spectrum() {
        let rho = 0.3;
        let geom = CellGeometry::centered_ball(2, rho, 1.0, 1.0).unwrap();
        let mesh = inclusion_mesh(&geom, rho / 40.0).unwrap();
        let fs = fem_spectrum(&mesh, 1.0, 6, MEAN_TOL, &EigOptions::default()).unwrap();
        let exact = ball_spectrum(rho, 1.0, 2, 2).unwrap();
        let e = &fs.spectrum.entries;
        assert!((e[0].eigenvalue - exact.entries[0].eigenvalue).abs() / exact.entries[0].eigenvalue < 5e-3);
        // ground state is sign-definite
        let (lo, hi) = fs.modes[0]
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo >= -1e-12 && hi > 0.0);
        // second eigenvalue is a double angular mode with zero means
        assert_eq!(e[1].multiplicity, 2);
        assert!(e[1].zero_mean && e[2].zero_mean);
        assert!((e[0].mean - exact.entries[0].mean).abs() / exact.entries[0].mean < 5e-3);
        // β only sees Σ⟨φ⟩² per eigenspace
        let poles = fs.spectrum.poles();
        assert_relative_eq!(poles[0].1, e[0].mean.powi(2), max_relative = 1e-12);
    }

    #[test]
    fn fem_rate_is_about_two() {
        let rho = 0.3;
        let geom = CellGeometry::centered_ball(2, rho, 1.0, 1.0).unwrap();
        let exact = ball_spectrum(rho, 1.0, 2, 1).unwrap().entries[0].eigenvalue;
        let errs: Vec<f64> = [10.0, 20.0, 40.0]
            .iter()
            .map(|&d| {
                let mesh = inclusion_mesh(&geom, rho / d).unwrap();
                let fs = fem_spectrum(&mesh, 1.0, 1, MEAN_TOL, &EigOptions::default()).unwrap();
                (fs.spectrum.entries[0].eigenvalue - exact).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!(rate > 1.7 && rate < 2.3, "rate {rate}");
        }
    }

    #[test]
    fn csv_layout() {
        let s = ball_spectrum(0.3, 1.0, 3, 2).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,eigenvalue,mean,multiplicity,zero_mean_flag");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
    }
}
