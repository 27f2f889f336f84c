//! Localized modes of the limit defect problem: Bessel matching for ball
//! defects and a finite-element pencil for general planar defects.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bessel::{bessel_j, bessel_j_deriv, bessel_k_deriv_scaled, bessel_k_scaled};
use crate::beta::{BetaEvaluator, DirectBeta, Gap, VField};
use crate::error::{Error, Result};
use crate::fem::{
    self, assemble_on, assemble_subset, meshers, tags, BoundaryMarker, Coefficient, CsrPattern, DofMap, EigOptions,
    FormKind, PointLocator, SimplicialMesh, SymbolicFactor, SymmetricForm,
};
use crate::geometry::{DefectShape, DefectSpec};

/// Ball defect of radius `radius` with isotropic homogenized tensor a_hom·I.
#[derive(Clone, Copy)]
pub struct RadialParams<'a> {
    pub n: usize,
    pub a2: f64,
    pub a_hom: f64,
    pub radius: f64,
    pub beta: &'a BetaEvaluator,
}

impl RadialParams<'_> {
    fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.n) {
            return Err(Error::InvalidArgument(format!("dimension {} is not 2 or 3", self.n)));
        }
        for (name, v) in [("a2", self.a2), ("a_hom", self.a_hom), ("radius", self.radius)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// (n − 2)/2, the power of the radial prefactor r^{−(n−2)/2}.
    fn p(&self) -> f64 {
        (self.n as f64 - 2.0) / 2.0
    }
}

/// Checks that m is an admissible angular order: an integer in 2D, a
/// half-integer in 3D.
pub fn validate_order(n: usize, m: f64) -> Result<()> {
    let ok = match n {
        2 => m >= 0.0 && m.fract() == 0.0,
        3 => m > 0.0 && (m - 0.5).fract() == 0.0,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "angular order {m} is not admissible in dimension {n}"
        )))
    }
}

/// The first `count` angular orders: 0, 1, 2, … in 2D and 1/2, 3/2, … in 3D.
pub fn angular_orders(n: usize, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| if n == 3 { k as f64 + 0.5 } else { k as f64 })
        .collect()
}

/// Dimension of the angular eigenspace of order m.
pub fn angular_multiplicity(n: usize, m: f64) -> usize {
    match n {
        2 if m == 0.0 => 1,
        2 => 2,
        _ => (2.0 * m).round() as usize,
    }
}

/// Matching system in (interior coefficient, exterior coefficient): row one
/// is continuity at r = R, row two the flux condition. The exterior column
/// uses e^{κR}K_m so it stays finite; this rescales the determinant by a
/// positive factor only. Also returns k = (λ/a₂)^{1/2}, κ and β(λ).
pub fn dispersion_matrix(lambda: f64, m: f64, params: &RadialParams) -> Result<([[f64; 2]; 2], f64, f64, f64)> {
    params.validate()?;
    validate_order(params.n, m)?;
    let beta = params.beta.eval(lambda)?.beta;
    if !(beta < 0.0) {
        return Err(Error::OutOfGap { lambda, beta });
    }
    let k = (lambda / params.a2).sqrt();
    let kappa = (-beta / params.a_hom).sqrt();
    let (r, p) = (params.radius, params.p());
    let (x, y) = (k * r, kappa * r);
    let j = bessel_j(m, x);
    let jd = bessel_j_deriv(m, x);
    let ks = bessel_k_scaled(m, y);
    let kd = bessel_k_deriv_scaled(m, y);
    let rows = [
        [j, -ks],
        [
            params.a2 * (k * jd - p / r * j),
            -params.a_hom * (kappa * kd - p / r * ks),
        ],
    ];
    Ok((rows, k, kappa, beta))
}

/// Determinant of the row-scaled matching system; its zeros in a gap are the
/// eigenvalues with angular order m.
pub fn radial_dispersion(lambda: f64, m: f64, params: &RadialParams) -> Result<f64> {
    let (a, ..) = dispersion_matrix(lambda, m, params)?;
    let s0 = a[0][0].abs().max(a[0][1].abs());
    let s1 = a[1][0].abs().max(a[1][1].abs());
    Ok(a[0][0] / s0 * (a[1][1] / s1) - a[0][1] / s0 * (a[1][0] / s1))
}

/// Trigonometric form of the radially symmetric 3D condition:
/// cot(kR) + (a_hom − a₂)/((λa₂)^{1/2}R) + (a_hom|β|/(λa₂))^{1/2}, k = (λ/a₂)^{1/2}.
pub fn radsymm(lambda: f64, params: &RadialParams) -> Result<f64> {
    params.validate()?;
    let beta = params.beta.eval(lambda)?.beta;
    if !(beta < 0.0) {
        return Err(Error::OutOfGap { lambda, beta });
    }
    let (a2, ah, r) = (params.a2, params.a_hom, params.radius);
    let s = (lambda * a2).sqrt();
    Ok(1.0 / ((lambda / a2).sqrt() * r).tan() + (ah - a2) / (s * r) + (ah * beta.abs() / (lambda * a2)).sqrt())
}

/// Interface conditions of a mode, relative to the size of the matched terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResiduals {
    pub continuity: f64,
    pub flux: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSource {
    Radial,
    Fem,
}

/// Closed-form radial profile: r^{−p}J_m(kr) inside, α r^{−p}K_m(κr) outside.
#[derive(Clone, Debug)]
pub struct RadialProfile {
    pub n: usize,
    pub m: f64,
    pub k: f64,
    pub kappa: f64,
    pub radius: f64,
    pub a2: f64,
    pub a_hom: f64,
    /// J_m(kR) / e^{κR}K_m(κR)
    alpha_scaled: f64,
}

impl RadialProfile {
    fn p(&self) -> f64 {
        (self.n as f64 - 2.0) / 2.0
    }

    /// Exterior coefficient α with the interior J_m coefficient set to one.
    pub fn alpha(&self) -> f64 {
        self.alpha_scaled * (self.kappa * self.radius).exp()
    }

    /// Radial factor of u₀.
    pub fn value(&self, r: f64) -> f64 {
        let p = self.p();
        if r < self.radius {
            if r < 1e-12 {
                return if (self.m - p).abs() < 1e-12 {
                    (0.5 * self.k).powf(self.m) / gamma_half(self.m + 1.0)
                } else {
                    0.0
                };
            }
            r.powf(-p) * bessel_j(self.m, self.k * r)
        } else {
            let y = self.kappa * r;
            r.powf(-p) * self.alpha_scaled * bessel_k_scaled(self.m, y) * (-self.kappa * (r - self.radius)).exp()
        }
    }

    /// Radial derivative from inside (`inner`) or outside at r.
    pub fn derivative(&self, r: f64, inner: bool) -> f64 {
        let p = self.p();
        if inner {
            r.powf(-p) * (self.k * bessel_j_deriv(self.m, self.k * r) - p / r * bessel_j(self.m, self.k * r))
        } else {
            let y = self.kappa * r;
            let decay = (-self.kappa * (r - self.radius)).exp();
            r.powf(-p)
                * self.alpha_scaled
                * decay
                * (self.kappa * bessel_k_deriv_scaled(self.m, y) - p / r * bessel_k_scaled(self.m, y))
        }
    }

    /// Interface residuals of continuity and of the flux condition a₂∂ᵣu⁻ = a_hom∂ᵣu⁺.
    pub fn residuals(&self) -> ModeResiduals {
        let r = self.radius;
        let inner = r.powf(-self.p()) * bessel_j(self.m, self.k * r);
        let outer = r.powf(-self.p()) * self.alpha_scaled * bessel_k_scaled(self.m, self.kappa * r);
        let fi = self.a2 * self.derivative(r, true);
        let fo = self.a_hom * self.derivative(r, false);
        let flux_scale = fi.abs().max(fo.abs()).max(self.a_hom * self.kappa * outer.abs());
        ModeResiduals {
            continuity: (inner - outer).abs() / inner.abs().max(outer.abs()),
            flux: (fi - fo).abs() / flux_scale,
        }
    }

    /// u₀(x) with the angular factor cos(mθ) in 2D or P_l(cos θ), l = m − 1/2, in 3D.
    pub fn u0(&self, x: &[f64]) -> f64 {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let angular = if self.n == 2 {
            (self.m * x[1].atan2(x[0])).cos()
        } else {
            let c = if r > 0.0 { x[2] / r } else { 1.0 };
            legendre((self.m - 0.5).round() as usize, c)
        };
        self.value(r) * angular
    }
}

fn gamma_half(x: f64) -> f64 {
    // Γ at positive integers and half-integers
    let mut g = if x.fract() == 0.0 { 1.0 } else { PI.sqrt() };
    let mut t = if x.fract() == 0.0 { 1.0 } else { 0.5 };
    while t < x - 1e-9 {
        g *= t;
        t += 1.0;
    }
    g
}

fn legendre(l: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if l == 0 {
        return p0;
    }
    for k in 1..l {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Nodal fields of a finite-element mode on the truncated defect mesh.
#[derive(Debug)]
pub struct FemModeField {
    pub mesh: Arc<SimplicialMesh>,
    /// One M-orthonormal field per member of the eigenspace.
    pub fields: Vec<Vec<f64>>,
    locator: PointLocator,
}

impl FemModeField {
    /// Interpolated value of member `index` at x (zero beyond the truncation radius).
    pub fn value(&self, index: usize, x: &[f64]) -> f64 {
        self.locator
            .interpolate(&self.mesh, &self.fields[index], x)
            .unwrap_or(0.0)
    }
}

#[derive(Clone, Debug)]
pub enum ModeProfile {
    Radial(RadialProfile),
    Fem(Arc<FemModeField>),
}

/// Eigenvalue λ₀ of the limit defect problem with its macroscopic profile.
#[derive(Clone, Debug, Serialize)]
pub struct LocalizedMode {
    pub lambda0: f64,
    /// Angular order; estimated from the field for finite-element modes.
    pub m: Option<f64>,
    pub multiplicity: usize,
    pub alpha: Option<f64>,
    /// Exterior decay rate |β(λ₀)/a_hom|^{1/2}.
    pub kappa: f64,
    pub beta: f64,
    pub residuals: ModeResiduals,
    pub source: ModeSource,
    #[serde(skip)]
    pub profile: ModeProfile,
}

impl LocalizedMode {
    /// u₀ at x; for finite-element modes the first member of the eigenspace.
    pub fn u0(&self, x: &[f64]) -> f64 {
        match &self.profile {
            ModeProfile::Radial(p) => p.u0(x),
            ModeProfile::Fem(f) => f.value(0, x),
        }
    }
}

/// Controls for [`find_radial_modes`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadialSearch {
    pub grid_points: usize,
    /// Absolute bisection tolerance in λ; zero bisects down to adjacent
    /// floating-point numbers.
    pub tol: f64,
}

impl Default for RadialSearch {
    fn default() -> Self {
        RadialSearch {
            grid_points: 400,
            tol: 0.0,
        }
    }
}

/// Radial profile of a mode at an exact root λ of the dispersion relation.
pub fn radial_mode(lambda: f64, m: f64, params: &RadialParams) -> Result<LocalizedMode> {
    let (a, k, kappa, beta) = dispersion_matrix(lambda, m, params)?;
    let profile = RadialProfile {
        n: params.n,
        m,
        k,
        kappa,
        radius: params.radius,
        a2: params.a2,
        a_hom: params.a_hom,
        alpha_scaled: a[0][0] / -a[0][1],
    };
    Ok(LocalizedMode {
        lambda0: lambda,
        m: Some(m),
        multiplicity: angular_multiplicity(params.n, m),
        alpha: Some(profile.alpha()),
        kappa,
        beta,
        residuals: profile.residuals(),
        source: ModeSource::Radial,
        profile: ModeProfile::Radial(profile),
    })
}

/// Halvings of the first grid step used to sample toward each gap edge.
const EDGE_REFINEMENT: i32 = 30;

/// Roots of the dispersion relation in a gap for each angular order, in
/// ascending λ per order. Grid points outside the gap (β ≥ 0) are skipped.
pub fn find_radial_modes(
    params: &RadialParams,
    gap: &Gap,
    m_list: &[f64],
    search: RadialSearch,
) -> Result<Vec<LocalizedMode>> {
    params.validate()?;
    for &m in m_list {
        validate_order(params.n, m)?;
    }
    let per_order: Vec<Result<Vec<LocalizedMode>>> = m_list
        .par_iter()
        .map(|&m| {
            let n = search.grid_points.max(2);
            let width = gap.upper - gap.lower;
            let step = width / (n + 1) as f64;
            // uniform grid plus geometric refinement toward both gap edges,
            // where the dispersion function varies fastest
            let mut grid: Vec<f64> = (1..=n).map(|i| gap.lower + step * i as f64).collect();
            for j in 1..=EDGE_REFINEMENT {
                let d = step * 0.5f64.powi(j);
                grid.push(gap.lower + d);
                grid.push(gap.upper - d);
            }
            grid.sort_by(f64::total_cmp);
            grid.dedup();
            let samples: Vec<(f64, Option<f64>)> = grid
                .into_iter()
                .filter(|&l| l > gap.lower && l < gap.upper)
                .map(|l| match radial_dispersion(l, m, params) {
                    Ok(v) => Ok((l, Some(v))),
                    Err(Error::OutOfGap { .. } | Error::PoleProximity { .. }) => Ok((l, None)),
                    Err(e) => Err(e),
                })
                .collect::<Result<_>>()?;
            let mut modes = Vec::new();
            for w in samples.windows(2) {
                let ((la, Some(fa)), (lb, Some(fb))) = (w[0], w[1]) else {
                    continue;
                };
                if fa == 0.0 {
                    modes.push(radial_mode(la, m, params)?);
                    continue;
                }
                if (fa < 0.0) == (fb < 0.0) {
                    continue;
                }
                let (mut a, mut b) = (la, lb);
                while b - a > search.tol {
                    let mid = 0.5 * (a + b);
                    if mid <= a || mid >= b {
                        break;
                    }
                    let fm = radial_dispersion(mid, m, params)?;
                    if (fm < 0.0) == (fa < 0.0) {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                // keep whichever bracket end has the smaller residual
                let (da, db) = (radial_dispersion(a, m, params)?, radial_dispersion(b, m, params)?);
                let root = if da.abs() <= db.abs() { a } else { b };
                modes.push(radial_mode(root, m, params)?);
            }
            Ok(modes)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_order {
        out.extend(r?);
    }
    Ok(out)
}

/// Radius R_max = R + c/κ for truncating the exterior, κ evaluated at λ.
pub fn truncation_radius(
    defect_radius: f64,
    a_hom: f64,
    beta: &BetaEvaluator,
    lambda: f64,
    decay_lengths: f64,
) -> Result<f64> {
    let b = beta.eval(lambda)?.beta;
    if !(b < 0.0) {
        return Err(Error::OutOfGap { lambda, beta: b });
    }
    Ok(defect_radius + decay_lengths / (-b / a_hom).sqrt())
}

/// Mesh of the disk |x| < r_max with the defect elements tagged, fitted to
/// the defect boundary. Ball defects use a polar ring mesh with `symmetry`-fold
/// rotational invariance; polygonal defects a constrained Delaunay mesh.
pub fn defect_disk_mesh(defect: &DefectSpec, r_max: f64, h: f64, symmetry: usize) -> Result<SimplicialMesh> {
    match &defect.shape {
        DefectShape::Ball { radius } => {
            if r_max <= *radius {
                return Err(Error::InvalidArgument(
                    "truncation radius must exceed the defect radius".into(),
                ));
            }
            let mut layout = meshers::RingLayout::from_interfaces(&[(*radius, tags::DEFECT)], h);
            layout.extend_uniform(r_max, h, tags::MATRIX);
            meshers::polar_disk(&layout, h, symmetry)
        }
        DefectShape::Polygon { vertices } => {
            let mut dom = meshers::PlanarDomain {
                max_area: h * h * 3f64.sqrt() / 4.0,
                min_angle_deg: 25.0,
                ..Default::default()
            };
            dom.add_loop(&meshers::circle_points([0.0, 0.0], r_max, h, symmetry, 0.0));
            let n = vertices.len();
            let mut boundary = Vec::new();
            for i in 0..n {
                let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                let k = ((len / h).ceil() as usize).max(1);
                for s in 0..k {
                    let t = s as f64 / k as f64;
                    boundary.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                }
            }
            dom.add_loop(&boundary);
            let d = defect.clone();
            meshers::cdt_mesh(&dom, move |p| {
                Some(if d.contains_open(&p) {
                    tags::DEFECT
                } else {
                    tags::MATRIX
                })
            })
        }
        DefectShape::None => Err(Error::InvalidArgument("no defect to mesh".into())),
    }
}

/// The symmetric pencil P(λ) = K − λM_in − β(λ)M_out on a truncated defect
/// mesh with homogeneous Dirichlet condition on the outer circle.
pub struct DefectPencil {
    mesh: Arc<SimplicialMesh>,
    map: Arc<DofMap>,
    stiffness: SymmetricForm,
    mass_in: SymmetricForm,
    mass_out: SymmetricForm,
    mass: SymmetricForm,
    symbolic: Arc<SymbolicFactor>,
}

impl DefectPencil {
    /// `a_hom` is the homogenized tensor (leading 2×2 block used).
    pub fn new(mesh: &SimplicialMesh, a_hom: &[Vec<f64>], a2: f64) -> Result<Self> {
        if mesh.dim() != 2 {
            return Err(Error::InvalidArgument("the defect pencil is implemented in 2D".into()));
        }
        let mut outer = [[0.0; 3]; 3];
        for i in 0..2 {
            for j in 0..2 {
                outer[i][j] = a_hom[i][j];
            }
        }
        let inner = [[a2, 0.0, 0.0], [0.0, a2, 0.0], [0.0, 0.0, a2]];
        let tensors: Vec<[[f64; 3]; 3]> = mesh
            .tags()
            .iter()
            .map(|&t| if t == tags::DEFECT { inner } else { outer })
            .collect();
        let ones = vec![1.0; mesh.n_elements()];
        let pattern = Arc::new(CsrPattern::from_mesh(mesh));
        let k = assemble_on(mesh, &pattern, Coefficient::Tensor(&tensors), FormKind::Stiffness)?;
        let is_in = |e: usize| mesh.tag(e) == tags::DEFECT;
        let m_in = assemble_subset(mesh, &pattern, Coefficient::Scalar(&ones), FormKind::Mass, is_in)?;
        let m_out = assemble_subset(mesh, &pattern, Coefficient::Scalar(&ones), FormKind::Mass, |e| {
            !is_in(e)
        })?;
        let m = assemble_on(mesh, &pattern, Coefficient::Scalar(&ones), FormKind::Mass)?;
        let map = Arc::new(DofMap::dirichlet(&mesh.marked_vertices(BoundaryMarker::Outer)));
        let mut forms = SymmetricForm::restrict_many(&[&k, &m_in, &m_out, &m], &map)?;
        let mass = forms.pop().unwrap();
        let mass_out = forms.pop().unwrap();
        let mass_in = forms.pop().unwrap();
        let stiffness = forms.pop().unwrap();
        let symbolic = SymbolicFactor::analyze(stiffness.pattern())?;
        Ok(DefectPencil {
            mesh: Arc::new(mesh.clone()),
            map,
            stiffness,
            mass_in,
            mass_out,
            mass,
            symbolic,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.map.n_dofs()
    }

    /// P(λ) for a given β(λ).
    pub fn matrix(&self, lambda: f64, beta: f64) -> Result<SymmetricForm> {
        let mut p = self.stiffness.clone();
        let parts = self.mass_in.values().iter().zip(self.mass_out.values());
        for (o, (mi, mo)) in p.values_mut().iter_mut().zip(parts) {
            *o -= lambda * mi + beta * mo;
        }
        Ok(p)
    }

    /// Number of negative eigenvalues of P(λ).
    pub fn negative_count(&self, lambda: f64, beta: f64) -> Result<usize> {
        let p = self.matrix(lambda, beta)?;
        Ok(self.symbolic.factor(&p, lambda)?.inertia().negative)
    }
}

/// Controls for [`general_defect_modes`].
#[derive(Clone, Debug)]
pub struct PencilOptions {
    /// Coarse λ samples across the gap.
    pub scan_points: usize,
    /// Relative λ tolerance of the crossing bisection.
    pub tol: f64,
    /// Largest number of modes reported.
    pub k_window: usize,
    pub eig: EigOptions,
}

impl Default for PencilOptions {
    fn default() -> Self {
        PencilOptions {
            scan_points: 40,
            tol: 1e-10,
            k_window: 8,
            eig: EigOptions::default(),
        }
    }
}

/// Eigenvalues λ in the gap at which an eigenvalue of P(λ) crosses zero.
///
/// Along the gap P(λ) decreases monotonically (β is increasing there), so
/// the count of negative eigenvalues, read off the LDLᵀ inertia, is a
/// nondecreasing step function whose jumps are the crossings. Jumps found on
/// a coarse scan are bracketed and bisected; the jump size at convergence is
/// the multiplicity.
pub fn general_defect_modes(
    mesh: &SimplicialMesh,
    a_hom: &[Vec<f64>],
    a2: f64,
    beta: &BetaEvaluator,
    gap: &Gap,
    opts: &PencilOptions,
) -> Result<Vec<LocalizedMode>> {
    let pencil = DefectPencil::new(mesh, a_hom, a2)?;
    let a_scalar = 0.5 * (a_hom[0][0] + a_hom[1][1]);
    let width = gap.upper - gap.lower;
    let count_at = |l: f64| -> Result<Option<usize>> {
        match beta.eval(l) {
            Ok(b) if b.beta < 0.0 => match pencil.negative_count(l, b.beta) {
                Ok(c) => Ok(Some(c)),
                Err(Error::Factorization { .. }) => {
                    let l2 = l * (1.0 + 1e-12);
                    let b2 = beta.eval(l2)?.beta;
                    Ok(Some(pencil.negative_count(l2, b2)?))
                }
                Err(e) => Err(e),
            },
            Ok(_) | Err(Error::PoleProximity { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let n = opts.scan_points.max(2);
    let mut scan = Vec::new();
    for i in 0..=n {
        let l = gap.lower + width * (1e-6 + (1.0 - 2e-6) * i as f64 / n as f64);
        if let Some(c) = count_at(l)? {
            scan.push((l, c));
        }
    }
    let mut crossings: Vec<(f64, usize)> = Vec::new();
    let mut trace: Vec<(f64, usize)> = Vec::new();
    for w in scan.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if cb > ca {
            split(&count_at, a, ca, b, cb, opts.tol, 0, &mut crossings, &mut trace)?;
        } else if cb < ca {
            return Err(Error::Stagnation(format!(
                "negative count decreased from {ca} at {a} to {cb} at {b}; pencil is not monotone"
            )));
        }
        if crossings.iter().map(|c| c.1).sum::<usize>() >= opts.k_window {
            break;
        }
    }
    let mesh_arc = Arc::clone(&pencil.mesh);
    let mut modes = Vec::new();
    for (lambda, mult) in crossings.into_iter().take(opts.k_window) {
        let b = beta.eval(lambda)?.beta;
        let p = pencil.matrix(lambda, b)?;
        let pairs = match fem::eig_shift_invert(&p, &pencil.mass, 0.0, mult, &opts.eig) {
            Err(Error::Factorization { .. }) => {
                fem::eig_shift_invert(&p, &pencil.mass, -1e-8 * lambda, mult, &opts.eig)?
            }
            r => r?,
        };
        let mut fields = Vec::with_capacity(mult);
        let mut flux: f64 = 0.0;
        for pair in &pairs {
            let pv = p.apply(&pair.vector);
            let kv = pencil.stiffness.apply(&pair.vector);
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            flux = flux.max(norm(&pv) / norm(&kv));
            let mut full = pencil.map.expand(&pair.vector);
            let peak = full
                .iter()
                .cloned()
                .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if peak < 0.0 {
                full.iter_mut().for_each(|v| *v = -*v);
            }
            fields.push(full);
        }
        let field = FemModeField {
            mesh: Arc::clone(&mesh_arc),
            locator: PointLocator::new(&mesh_arc),
            fields,
        };
        let m = estimate_angular_order(&field, mesh_radius(&mesh_arc, tags::DEFECT) * 0.6);
        modes.push(LocalizedMode {
            lambda0: lambda,
            m,
            multiplicity: mult,
            alpha: None,
            kappa: (-b / a_scalar).sqrt(),
            beta: b,
            residuals: ModeResiduals { continuity: 0.0, flux },
            source: ModeSource::Fem,
            profile: ModeProfile::Fem(Arc::new(field)),
        });
    }
    Ok(modes)
}

#[allow(clippy::too_many_arguments)]
fn split(
    count_at: &impl Fn(f64) -> Result<Option<usize>>,
    a: f64,
    ca: usize,
    b: f64,
    cb: usize,
    tol: f64,
    depth: usize,
    out: &mut Vec<(f64, usize)>,
    trace: &mut Vec<(f64, usize)>,
) -> Result<()> {
    if b - a <= tol * b.abs().max(1.0) {
        out.push((0.5 * (a + b), cb - ca));
        return Ok(());
    }
    if depth > 200 {
        return Err(Error::Stagnation(format!(
            "crossing bisection did not converge; trace {trace:?}"
        )));
    }
    let mid = 0.5 * (a + b);
    let cm =
        count_at(mid)?.ok_or_else(|| Error::Stagnation(format!("lost gap membership at {mid}; trace {trace:?}")))?;
    trace.push((mid, cm));
    if cm < ca || cm > cb {
        return Err(Error::Stagnation(format!(
            "non-monotone count {cm} at {mid}; trace {trace:?}"
        )));
    }
    if cm > ca {
        split(count_at, a, ca, mid, cm, tol, depth + 1, out, trace)?;
    }
    if cb > cm {
        split(count_at, mid, cm, b, cb, tol, depth + 1, out, trace)?;
    }
    Ok(())
}

/// Largest |x| over vertices of elements with the given tag.
fn mesh_radius(mesh: &SimplicialMesh, tag: u8) -> f64 {
    let mut r: f64 = 0.0;
    for e in 0..mesh.n_elements() {
        if mesh.tag(e) == tag {
            for &v in mesh.element(e) {
                r = r.max(mesh.vertex(v).iter().map(|x| x * x).sum::<f64>().sqrt());
            }
        }
    }
    r
}

/// Dominant Fourier order of the eigenspace sampled on the circle |x| = r.
fn estimate_angular_order(field: &FemModeField, r: f64) -> Option<f64> {
    if r <= 0.0 {
        return None;
    }
    let samples = 256;
    let mut power = [0.0f64; 9];
    for f in 0..field.fields.len() {
        let values: Vec<f64> = (0..samples)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / samples as f64;
                field.value(f, &[r * t.cos(), r * t.sin()])
            })
            .collect();
        for (m, p) in power.iter_mut().enumerate() {
            let (mut c, mut s) = (0.0, 0.0);
            for (i, v) in values.iter().enumerate() {
                let t = 2.0 * PI * i as f64 / samples as f64;
                c += v * (m as f64 * t).cos();
                s += v * (m as f64 * t).sin();
            }
            *p += c * c + s * s;
        }
    }
    let best = (0..power.len()).max_by(|&a, &b| power[a].total_cmp(&power[b]))?;
    Some(best as f64)
}

/// Composite limit eigenfunction (u₀(x), u₀(x)V(y)).
pub struct ModeField<'a> {
    pub mode: &'a LocalizedMode,
    pub v: VField,
    direct: &'a DirectBeta,
    defect: &'a DefectSpec,
}

/// Solves the cell problem at λ₀ and pairs it with the mode.
pub fn assemble_mode_field<'a>(
    mode: &'a LocalizedMode,
    direct: &'a DirectBeta,
    defect: &'a DefectSpec,
) -> Result<ModeField<'a>> {
    let v = direct.solve_v(mode.lambda0)?;
    Ok(ModeField {
        mode,
        v,
        direct,
        defect,
    })
}

impl ModeField<'_> {
    pub fn u0(&self, x: &[f64]) -> f64 {
        self.mode.u0(x)
    }

    /// V at a cell point, extended periodically; zero in the matrix.
    pub fn v_cell(&self, y: &[f64]) -> f64 {
        let local: Vec<f64> = y.iter().map(|t| t - t.floor()).collect();
        self.direct.evaluate_v(&self.v, &local)
    }

    /// v(x, y) = u₀(x)V(y) outside the defect, zero inside it.
    pub fn v(&self, x: &[f64], y: &[f64]) -> f64 {
        if self.defect.contains_closed(x) {
            0.0
        } else {
            self.u0(x) * self.v_cell(y)
        }
    }
}

/// Exterior decay rate from a least-squares fit of ln(r^{(n−1)/2}|u₀(r)|) on
/// [r_from, r_to], which removes the algebraic prefactor of K_m.
pub fn fit_decay_rate(profile: &RadialProfile, r_from: f64, r_to: f64, samples: usize) -> f64 {
    let pts: Vec<(f64, f64)> = (0..samples)
        .map(|i| {
            let r = r_from + (r_to - r_from) * i as f64 / (samples - 1) as f64;
            (
                r,
                (r.powf((profile.n as f64 - 1.0) / 2.0) * profile.value(r).abs()).ln(),
            )
        })
        .collect();
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -num / den
}

/// One row of the mode table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRecord {
    pub lambda0: f64,
    pub m: Option<f64>,
    pub multiplicity: usize,
    pub alpha: Option<f64>,
    pub kappa: f64,
    pub residuals: ModeResiduals,
}

impl From<&LocalizedMode> for ModeRecord {
    fn from(m: &LocalizedMode) -> Self {
        ModeRecord {
            lambda0: m.lambda0,
            m: m.m,
            multiplicity: m.multiplicity,
            alpha: m.alpha,
            kappa: m.kappa,
            residuals: m.residuals,
        }
    }
}

/// CSV of the radial profile (r, u0) on `samples` points of [0, r_max].
pub fn write_profile_csv(mut w: impl Write, mode: &LocalizedMode, r_max: f64, samples: usize) -> Result<()> {
    writeln!(w, "r,u0")?;
    for i in 0..samples {
        let r = r_max * i as f64 / (samples - 1).max(1) as f64;
        let x = match &mode.profile {
            ModeProfile::Radial(p) if p.n == 3 => vec![0.0, 0.0, r],
            _ => vec![r, 0.0],
        };
        writeln!(w, "{:e},{:e}", r, mode.u0(&x))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beta::{find_gaps, BetaOptions, ExplicitBallBeta, SeriesBeta};
    use crate::geometry::ball_volume;
    use crate::inclusion::ball_spectrum;

    fn beta3() -> BetaEvaluator {
        BetaEvaluator::ExplicitBall(ExplicitBallBeta::new(0.3, 1.0, BetaOptions::default()).unwrap())
    }

    fn beta2() -> BetaEvaluator {
        let spec = ball_spectrum(0.3, 1.0, 2, 20).unwrap();
        BetaEvaluator::Series(SeriesBeta::new(
            &spec,
            Some(ball_volume(2, 0.3)),
            BetaOptions::default(),
        ))
    }

    #[test]
    fn determinant_reduces_to_trigonometric_condition() {
        let beta = beta3();
        let gap = find_gaps(&beta, 500.0).unwrap().gaps[0];
        for (a2, r) in [(1.0, 0.5), (2.0, 0.8), (0.5, 0.3)] {
            let params = RadialParams {
                n: 3,
                a2,
                a_hom: 0.75,
                radius: r,
                beta: &beta,
            };
            for i in 1..10 {
                let l = gap.lower + (gap.upper - gap.lower) * i as f64 / 10.0;
                let (a, k, kappa, _) = dispersion_matrix(l, 0.5, &params).unwrap();
                let det = radial_dispersion(l, 0.5, &params).unwrap();
                let s0 = a[0][0].abs().max(a[0][1].abs());
                let s1 = a[1][0].abs().max(a[1][1].abs());
                let f = (2.0 / (PI * k)).sqrt() * (k * r).sin() / r;
                let g = (PI / (2.0 * kappa)).sqrt() / r;
                let factor = r * f * g * a2 * k / (s0 * s1);
                let reduced = radsymm(l, &params).unwrap();
                assert!((reduced * factor - det).abs() < 1e-10 * det.abs().max(1.0), "{l}");
            }
        }
    }

    #[test]
    fn scaling_in_sqrt_lambda_times_radius() {
        let beta = beta3();
        let lhs = |l: f64, r: f64| {
            let params = RadialParams {
                n: 3,
                a2: 0.75,
                a_hom: 0.75,
                radius: r,
                beta: &beta,
            };
            // frozen |β| term removed: the remaining terms depend on λ^{1/2}R only
            radsymm(l, &params).unwrap() - (0.75 * beta.eval(l).unwrap().beta.abs() / (l * 0.75)).sqrt()
        };
        let c: f64 = 1.01;
        assert!((lhs(115.0, 0.4) - lhs(115.0 * c * c, 0.4 / c)).abs() < 1e-12);
    }

    #[test]
    fn radius_sweep_changes_sign() {
        let beta = beta3();
        let gap = find_gaps(&beta, 500.0).unwrap().gaps[0];
        let l = gap.mid();
        let k = l.sqrt();
        let period = PI / k;
        let vals: Vec<f64> = (1..200)
            .map(|i| {
                let r = 0.5 + period * i as f64 / 200.0;
                let params = RadialParams {
                    n: 3,
                    a2: 1.0,
                    a_hom: 0.75,
                    radius: r,
                    beta: &beta,
                };
                radsymm(l, &params).unwrap()
            })
            .collect();
        assert!(vals
            .windows(2)
            .any(|w| w[0] > 0.0 && w[1] < 0.0 && (w[0] - w[1]).abs() < 10.0));
    }

    #[test]
    fn radial_roots_three_d_match_trigonometric_roots() {
        let beta = beta3();
        let gap = find_gaps(&beta, 500.0).unwrap().gaps[0];
        let params = RadialParams {
            n: 3,
            a2: 1.0,
            a_hom: 0.75,
            radius: 1.35,
            beta: &beta,
        };
        let modes = find_radial_modes(&params, &gap, &[0.5], RadialSearch::default()).unwrap();
        assert!(!modes.is_empty());
        for m in &modes {
            assert!(
                m.residuals.continuity < 1e-10 && m.residuals.flux < 1e-10,
                "{:?}",
                m.residuals
            );
            // bracket the trigonometric condition around the root
            let f = |l: f64| radsymm(l, &params).unwrap();
            let (a, b) = (m.lambda0 - 1e-9, m.lambda0 + 1e-9);
            assert!(f(a) * f(b) < 0.0);
            assert!(m.beta < 0.0 && gap.contains(m.lambda0));
        }
    }

    #[test]
    fn grid_refinement_keeps_root_count() {
        let beta = beta2();
        let gap = find_gaps(&beta, 100.0).unwrap().gaps[0];
        let params = RadialParams {
            n: 2,
            a2: 1.0,
            a_hom: 0.5587,
            radius: 0.55,
            beta: &beta,
        };
        let coarse = find_radial_modes(&params, &gap, &[0.0, 1.0, 2.0], RadialSearch::default()).unwrap();
        let fine = find_radial_modes(
            &params,
            &gap,
            &[0.0, 1.0, 2.0],
            RadialSearch {
                grid_points: 4000,
                tol: 1e-11,
            },
        )
        .unwrap();
        assert_eq!(coarse.len(), fine.len());
        let m0: Vec<_> = coarse.iter().filter(|m| m.m == Some(0.0)).collect();
        assert_eq!(m0.len(), 1);
        assert!((m0[0].lambda0 - 70.39).abs() < 0.05, "{}", m0[0].lambda0);
        assert_eq!(m0[0].multiplicity, 1);
    }

    #[test]
    fn decay_fit_matches_kappa() {
        let beta = beta2();
        let gap = find_gaps(&beta, 100.0).unwrap().gaps[0];
        let params = RadialParams {
            n: 2,
            a2: 1.0,
            a_hom: 0.5587,
            radius: 0.55,
            beta: &beta,
        };
        let modes = find_radial_modes(&params, &gap, &[0.0], RadialSearch::default()).unwrap();
        let ModeProfile::Radial(p) = &modes[0].profile else {
            panic!()
        };
        let k = p.kappa;
        let fitted = fit_decay_rate(p, 0.55 + 3.0 / k, 0.55 + 10.0 / k, 50);
        assert!((fitted - k).abs() / k < 0.01, "{fitted} vs {k}");
    }

    #[test]
    fn pencil_reproduces_radial_mode() {
        let beta = beta2();
        let gap = find_gaps(&beta, 100.0).unwrap().gaps[0];
        let a_hom = 0.5587;
        let params = RadialParams {
            n: 2,
            a2: 1.0,
            a_hom,
            radius: 0.55,
            beta: &beta,
        };
        let radial = find_radial_modes(&params, &gap, &[0.0], RadialSearch::default()).unwrap();
        let l0 = radial[0].lambda0;
        let r_max = truncation_radius(0.55, a_hom, &beta, l0, 6.0).unwrap();
        let defect = DefectSpec::ball(0.55, 1.0).unwrap();
        let mesh = defect_disk_mesh(&defect, r_max, 0.55 / 20.0, 8).unwrap();
        let tensor = vec![vec![a_hom, 0.0], vec![0.0, a_hom]];
        let modes = general_defect_modes(&mesh, &tensor, 1.0, &beta, &gap, &PencilOptions::default()).unwrap();
        let m0 = modes.iter().find(|m| m.m == Some(0.0)).unwrap();
        assert!((m0.lambda0 - l0).abs() / l0 < 1e-2, "{} vs {l0}", m0.lambda0);
        assert_eq!(m0.multiplicity, 1);
        let p = DefectPencil::new(&mesh, &tensor, 1.0).unwrap();
        assert!(p.matrix(l0, beta.eval(l0).unwrap().beta).unwrap().is_symmetric());
    }

    #[test]
    fn first_order_pencil_mode_is_a_degenerate_pair() {
        let beta = beta2();
        let gap = find_gaps(&beta, 100.0).unwrap().gaps[0];
        let a_hom = 0.5587;
        let params = RadialParams {
            n: 2,
            a2: 1.0,
            a_hom,
            radius: 0.35,
            beta: &beta,
        };
        let radial = find_radial_modes(&params, &gap, &[1.0], RadialSearch::default()).unwrap();
        assert_eq!(radial.len(), 1);
        assert_eq!(radial[0].multiplicity, 2);
        let l0 = radial[0].lambda0;
        let defect = DefectSpec::ball(0.35, 1.0).unwrap();
        let r_max = truncation_radius(0.35, a_hom, &beta, l0, 6.0).unwrap();
        let mesh = defect_disk_mesh(&defect, r_max, 0.35 / 20.0, 8).unwrap();
        let tensor = vec![vec![a_hom, 0.0], vec![0.0, a_hom]];
        let modes = general_defect_modes(&mesh, &tensor, 1.0, &beta, &gap, &PencilOptions::default()).unwrap();
        let m1 = modes.iter().find(|m| m.m == Some(1.0)).unwrap();
        assert_eq!(m1.multiplicity, 2);
        assert!((m1.lambda0 - l0).abs() / l0 < 1e-2, "{} vs {l0}", m1.lambda0);
        // two pencil eigenvalues change sign across the root
        let p = DefectPencil::new(&mesh, &tensor, 1.0).unwrap();
        let count = |l: f64| p.negative_count(l, beta.eval(l).unwrap().beta).unwrap();
        assert_eq!(count(m1.lambda0 + 0.05) - count(m1.lambda0 - 0.05), 2);
    }
}
