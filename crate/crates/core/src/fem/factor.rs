use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, supernodal, LdltRef, SymbolicCholesky, SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::{Conj, MatMut, Par, Side};

use crate::error::{Error, Result};
use crate::fem::sparse::{CsrPattern, SymmetricForm};

/// Counts of negative, zero and positive pivots of an LDLᵀ factorization.
/// By Sylvester's law of inertia these are the eigenvalue sign counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Inertia {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

/// Fill-reducing symbolic analysis of a pattern, reusable across values.
pub struct SymbolicFactor {
    pattern: Arc<CsrPattern>,
    lower: SymbolicSparseColMat<usize>,
    /// Position in the CSR value array of each stored lower-triangle entry.
    source: Vec<usize>,
    symbolic: SymbolicCholesky<usize>,
}

impl SymbolicFactor {
    pub fn analyze(pattern: &Arc<CsrPattern>) -> Result<Arc<Self>> {
        let n = pattern.n();
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::with_capacity(pattern.nnz() / 2 + n);
        let mut source = Vec::with_capacity(pattern.nnz() / 2 + n);
        col_ptr.push(0);
        // column j of the lower triangle is row j restricted to indices >= j
        for j in 0..n {
            let start = pattern.row_ptr()[j];
            for (k, &i) in pattern.row(j).iter().enumerate() {
                if i >= j {
                    row_idx.push(i);
                    source.push(start + k);
                }
            }
            col_ptr.push(row_idx.len());
        }
        let lower = SymbolicSparseColMat::new_checked(n, n, col_ptr, None, row_idx);
        let symbolic =
            factorize_symbolic_cholesky(lower.as_ref(), Side::Lower, SymmetricOrdering::Amd, Default::default())
                .map_err(|e| Error::Factorization {
                    shift: f64::NAN,
                    reason: format!("symbolic analysis failed: {e:?}"),
                })?;
        Ok(Arc::new(SymbolicFactor {
            pattern: Arc::clone(pattern),
            lower,
            source,
            symbolic,
        }))
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.pattern
    }

    /// Numeric LDLᵀ factorization of a form on the analysed pattern.
    /// `shift` is only used to label errors.
    pub fn factor(self: &Arc<Self>, form: &SymmetricForm, shift: f64) -> Result<Factor> {
        if !Arc::ptr_eq(form.pattern(), &self.pattern) && **form.pattern() != *self.pattern {
            return Err(Error::InvalidArgument(
                "form pattern differs from analysed pattern".into(),
            ));
        }
        let values = form.values();
        let lower_vals: Vec<f64> = self.source.iter().map(|&p| values[p]).collect();
        let a = SparseColMatRef::new(self.lower.as_ref(), &lower_vals);
        let mut vals = vec![0.0f64; self.symbolic.len_val()];
        let req = self
            .symbolic
            .factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Default::default());
        let mut mem = MemBuffer::new(req);
        self.symbolic
            .factorize_numeric_ldlt(
                &mut vals,
                a,
                Side::Lower,
                Default::default(),
                Par::Seq,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|e| Error::Factorization {
                shift,
                reason: format!("{e:?}"),
            })?;
        drop(lower_vals);
        let diag = self.pivots(&vals);
        let scale = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if diag.iter().any(|d| !d.is_finite()) || scale == 0.0 {
            return Err(Error::Factorization {
                shift,
                reason: "non-finite pivot".into(),
            });
        }
        let tiny = 1e-14 * scale;
        let mut inertia = Inertia {
            negative: 0,
            zero: 0,
            positive: 0,
        };
        for d in &diag {
            if d.abs() <= tiny {
                inertia.zero += 1;
            } else if *d < 0.0 {
                inertia.negative += 1;
            } else {
                inertia.positive += 1;
            }
        }
        if inertia.zero > 0 {
            return Err(Error::Factorization {
                shift,
                reason: format!("{} numerically zero pivots", inertia.zero),
            });
        }
        Ok(Factor {
            symbolic: Arc::clone(self),
            vals,
            inertia,
        })
    }

    fn pivots(&self, vals: &[f64]) -> Vec<f64> {
        let mut diag = Vec::with_capacity(self.pattern.n());
        match self.symbolic.raw() {
            SymbolicCholeskyRaw::Simplicial(s) => {
                let f = s.factor();
                let (cp, ri) = (f.col_ptr(), f.row_idx());
                for j in 0..self.pattern.n() {
                    for p in cp[j]..cp[j + 1] {
                        if ri[p] == j {
                            diag.push(vals[p]);
                        }
                    }
                }
            }
            SymbolicCholeskyRaw::Supernodal(s) => {
                let r = supernodal::SupernodalLdltRef::new(s, vals);
                for k in 0..s.n_supernodes() {
                    let v = r.supernode(k).val();
                    for i in 0..v.ncols() {
                        diag.push(v[(i, i)]);
                    }
                }
            }
        }
        diag
    }
}

/// Numeric LDLᵀ factorization with its inertia.
pub struct Factor {
    symbolic: Arc<SymbolicFactor>,
    vals: Vec<f64>,
    inertia: Inertia,
}

impl Factor {
    /// Analyses and factors a form in one step.
    pub fn new(form: &SymmetricForm) -> Result<Self> {
        SymbolicFactor::analyze(form.pattern())?.factor(form, 0.0)
    }

    pub fn inertia(&self) -> Inertia {
        self.inertia
    }

    pub fn n(&self) -> usize {
        self.symbolic.pattern.n()
    }

    /// Solves A X = B in place for the columns of `rhs`.
    pub fn solve_block(&self, rhs: MatMut<'_, f64>) {
        let ldlt = LdltRef::new(&self.symbolic.symbolic, &self.vals);
        let req = self
            .symbolic
            .symbolic
            .solve_in_place_scratch::<f64>(rhs.ncols(), Par::Seq);
        let mut mem = MemBuffer::new(req);
        ldlt.solve_in_place_with_conj(Conj::No, rhs, Par::Seq, MemStack::new(&mut mem));
    }

    /// Solves A x = b in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = b.len();
        self.solve_block(MatMut::from_column_major_slice_mut(b, n, 1));
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
