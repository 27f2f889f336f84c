use std::sync::Arc;

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::factor::{Factor, SymbolicFactor};
use crate::fem::sparse::SymmetricForm;

/// Eigenpair of K v = λ M v with vᵀ M v = 1.
#[derive(Clone, Debug)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
    /// ‖K v − λ M v‖ / (max(1, |λ|) ‖M v‖)
    pub residual: f64,
}

/// Controls for [`eig_shift_invert`].
#[derive(Clone, Debug)]
pub struct EigOptions {
    /// Relative residual tolerance, see [`EigenPair::residual`].
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Block size; defaults to max(2k, k + 6).
    pub block: Option<usize>,
}

impl Default for EigOptions {
    fn default() -> Self {
        EigOptions {
            tol: 1e-8,
            max_iter: 1000,
            seed: 0x5eed,
            block: None,
        }
    }
}

/// The `count` eigenpairs of K v = λ M v nearest `sigma`, ordered by |λ − σ|.
pub fn eig_shift_invert(
    k: &SymmetricForm,
    m: &SymmetricForm,
    sigma: f64,
    count: usize,
    opts: &EigOptions,
) -> Result<Vec<EigenPair>> {
    let symbolic = SymbolicFactor::analyze(k.pattern())?;
    let shifted = k.lin_comb(1.0, m, -sigma)?;
    let factor = symbolic.factor(&shifted, sigma)?;
    drop(shifted);
    eig_with_factor(&factor, k, m, sigma, count, opts)
}

/// Same as [`eig_shift_invert`] with a precomputed factorization of K − σM.
pub fn eig_with_factor(
    factor: &Factor,
    k: &SymmetricForm,
    m: &SymmetricForm,
    sigma: f64,
    count: usize,
    opts: &EigOptions,
) -> Result<Vec<EigenPair>> {
    let n = k.n();
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "requested {count} eigenpairs of a size-{n} problem"
        )));
    }
    let p = opts.block.unwrap_or((2 * count).max(count + 6)).clamp(count, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = Mat::<f64>::from_fn(n, p, |_, _| rng.random::<f64>() - 0.5);
    let mut worst = f64::INFINITY;
    for _ in 0..opts.max_iter {
        // z = (K − σM)⁻¹ M x
        let mut z = apply_columns(m, &x);
        factor.solve_block(z.as_mut());
        let z = m_orthonormalize(m, z, &mut rng);
        let kz = apply_columns(k, &z);
        let h = z.transpose() * &kz;
        let h = Mat::<f64>::from_fn(p, p, |i, j| 0.5 * (h[(i, j)] + h[(j, i)]));
        let evd = h
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::InvalidArgument(format!("Rayleigh-Ritz eigensolve failed: {e:?}")))?;
        let theta: Vec<f64> = (0..p).map(|i| evd.S()[i]).collect();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| (theta[a] - sigma).abs().total_cmp(&(theta[b] - sigma).abs()));
        let s = Mat::<f64>::from_fn(p, p, |i, j| evd.U()[(i, order[j])]);
        x = &z * &s;
        let values: Vec<f64> = order.iter().map(|&i| theta[i]).collect();
        let residuals: Vec<f64> = (0..count).map(|j| residual(k, m, &x, j, values[j])).collect();
        worst = residuals.iter().cloned().fold(0.0, f64::max);
        if worst <= opts.tol {
            return Ok((0..count)
                .map(|j| EigenPair {
                    value: values[j],
                    vector: x.col(j).iter().copied().collect(),
                    residual: residuals[j],
                })
                .collect());
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: worst,
    })
}

fn apply_columns(a: &SymmetricForm, x: &Mat<f64>) -> Mat<f64> {
    let mut y = Mat::<f64>::zeros(x.nrows(), x.ncols());
    for j in 0..x.ncols() {
        let xj: Vec<f64> = x.col(j).iter().copied().collect();
        let mut yj = vec![0.0; x.nrows()];
        a.matvec(&xj, &mut yj);
        for (i, v) in yj.into_iter().enumerate() {
            y[(i, j)] = v;
        }
    }
    y
}

fn residual(k: &SymmetricForm, m: &SymmetricForm, x: &Mat<f64>, j: usize, lambda: f64) -> f64 {
    let v: Vec<f64> = x.col(j).iter().copied().collect();
    let kv = k.apply(&v);
    let mv = m.apply(&v);
    let r: f64 = kv
        .iter()
        .zip(&mv)
        .map(|(a, b)| (a - lambda * b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = mv.iter().map(|b| b * b).sum::<f64>().sqrt();
    r / (lambda.abs().max(1.0) * norm)
}

/// M-orthonormalizes the columns by two passes of the eigenvalue-based
/// Gram projection, replacing numerically dependent columns with random ones.
fn m_orthonormalize(m: &SymmetricForm, mut z: Mat<f64>, rng: &mut ChaCha8Rng) -> Mat<f64> {
    let p = z.ncols();
    for _ in 0..2 {
        for _attempt in 0..4 {
            let mz = apply_columns(m, &z);
            let g = z.transpose() * &mz;
            let g = Mat::<f64>::from_fn(p, p, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]));
            let evd = match g.self_adjoint_eigen(Side::Lower) {
                Ok(e) => e,
                Err(_) => break,
            };
            let d: Vec<f64> = (0..p).map(|i| evd.S()[i]).collect();
            let dmax = d.iter().cloned().fold(0.0, f64::max);
            let keep: Vec<usize> = (0..p).filter(|&i| d[i] > 1e-13 * dmax).collect();
            let w = Mat::<f64>::from_fn(p, keep.len(), |i, j| evd.U()[(i, keep[j])] / d[keep[j]].sqrt());
            let q = &z * &w;
            if keep.len() == p {
                z = q;
                break;
            }
            let mut fresh = Mat::<f64>::from_fn(z.nrows(), p, |_, _| rng.random::<f64>() - 0.5);
            for j in 0..keep.len() {
                for i in 0..z.nrows() {
                    fresh[(i, j)] = q[(i, j)];
                }
            }
            z = fresh;
        }
    }
    z
}

/// Number of eigenvalues of K v = λ M v strictly below `s`, from the inertia of
/// K − sM. If `s` is numerically an eigenvalue it is nudged by a relative 1e-9.
pub fn count_below(symbolic: &Arc<SymbolicFactor>, k: &SymmetricForm, m: &SymmetricForm, s: f64) -> Result<usize> {
    let mut shift = s;
    for _ in 0..3 {
        let a = k.lin_comb(1.0, m, -shift)?;
        match symbolic.factor(&a, shift) {
            Ok(f) => return Ok(f.inertia().negative),
            Err(Error::Factorization { .. }) => shift += 1e-9 * s.abs().max(1.0),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Factorization {
        shift: s,
        reason: "shift remains singular after perturbation".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::meshers;
    use crate::fem::sparse::DofMap;
    use crate::fem::{assemble, FormKind};
    use std::f64::consts::PI;

    fn dirichlet_square(n: usize) -> (SymmetricForm, SymmetricForm) {
        let mesh = meshers::unit_square_grid(n, n);
        let ones = vec![1.0; mesh.n_elements()];
        let fixed = mesh.marked_vertices(crate::fem::BoundaryMarker::Outer);
        let map = Arc::new(DofMap::dirichlet(&fixed));
        let k = assemble(&mesh, &ones, FormKind::Stiffness).unwrap();
        let m = assemble(&mesh, &ones, FormKind::Mass).unwrap();
        let mut forms = SymmetricForm::restrict_many(&[&k, &m], &map).unwrap();
        let m = forms.pop().unwrap();
        (forms.pop().unwrap(), m)
    }

    #[test]
    fn one_dimensional_laplacian_near_nine() {
        let n = 512;
        let mesh = meshers::interval(0.0, 1.0, n);
        let ones = vec![1.0; mesh.n_elements()];
        let mut fixed = vec![false; n + 1];
        fixed[0] = true;
        fixed[n] = true;
        let map = Arc::new(DofMap::dirichlet(&fixed));
        let k = assemble(&mesh, &ones, FormKind::Stiffness)
            .unwrap()
            .restrict(&map)
            .unwrap();
        let m = assemble(&mesh, &ones, FormKind::Mass).unwrap().restrict(&map).unwrap();
        let pairs = eig_shift_invert(&k, &m, 9.0, 1, &EigOptions::default()).unwrap();
        assert!((pairs[0].value - PI * PI).abs() / (PI * PI) < 1e-3);
        assert!(pairs[0].residual <= 1e-8);
    }

    #[test]
    fn diagonal_problem() {
        let k = SymmetricForm::diagonal(&[1.0, 2.0, 3.0]);
        let m = SymmetricForm::diagonal(&[1.0, 1.0, 1.0]);
        let pairs = eig_shift_invert(&k, &m, 2.1, 1, &EigOptions::default()).unwrap();
        assert!((pairs[0].value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn smallest_three_in_ascending_order_and_m_orthonormal() {
        let (k, m) = dirichlet_square(24);
        let pairs = eig_shift_invert(&k, &m, -1.0, 3, &EigOptions::default()).unwrap();
        assert!(pairs[0].value < pairs[1].value && pairs[1].value <= pairs[2].value);
        assert!((pairs[0].value - 2.0 * PI * PI).abs() / (2.0 * PI * PI) < 0.02);
        // the next two approximate the double eigenvalue 5π²
        for p in &pairs[1..] {
            assert!((p.value - 5.0 * PI * PI).abs() / (5.0 * PI * PI) < 0.05);
        }
        for i in 0..3 {
            for j in 0..3 {
                let ip = m.bilinear(&pairs[i].vector, &pairs[j].vector);
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((ip - expected).abs() <= 1e-6, "({i},{j}) -> {ip}");
            }
        }
    }

    #[test]
    fn galerkin_rate_on_unit_square() {
        let errs: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&n| {
                let (k, m) = dirichlet_square(n);
                let l = eig_shift_invert(&k, &m, 0.0, 1, &EigOptions::default()).unwrap()[0].value;
                (l - 2.0 * PI * PI).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!(rate > 1.8 && rate < 2.2, "rate {rate}");
        }
    }

    #[test]
    fn inertia_count_matches_eigenvalues() {
        let (k, m) = dirichlet_square(16);
        let sym = SymbolicFactor::analyze(k.pattern()).unwrap();
        let pairs = eig_shift_invert(&k, &m, 0.0, 6, &EigOptions::default()).unwrap();
        let mut vals: Vec<f64> = pairs.iter().map(|p| p.value).collect();
        vals.sort_by(f64::total_cmp);
        let s = 0.5 * (vals[3] + vals[4]);
        if (vals[4] - vals[3]) > 1e-6 * vals[3] {
            assert_eq!(count_below(&sym, &k, &m, s).unwrap(), 4);
        }
        assert_eq!(count_below(&sym, &k, &m, 0.5 * vals[0]).unwrap(), 0);
    }
}
