//! Zhikov's β(λ) by spectral series, by a direct cell solve and in closed form
//! for a ball in 3D, with pole bookkeeping and band-gap detection.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{
    self, assemble, meshers, BoundaryMarker, DofMap, FormKind, SimplicialMesh, SymbolicFactor, SymmetricForm,
};
use crate::inclusion::InclusionSpectrum;

/// Tolerances shared by the evaluators and the gap search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaOptions {
    /// Evaluation is refused within `pole_guard · λ_j` of a pole λ_j.
    pub pole_guard: f64,
    /// Absolute bisection tolerance for gap endpoints.
    pub gap_tol: f64,
    /// Largest accepted series tail bound, relative to max(1, λ).
    pub tail_tol: f64,
}

impl Default for BetaOptions {
    fn default() -> Self {
        BetaOptions {
            pole_guard: 1e-6,
            gap_tol: 1e-10,
            tail_tol: 1e-4,
        }
    }
}

/// Value of β with the truncation bound of the method (zero when exact).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaValue {
    pub lambda: f64,
    pub beta: f64,
    pub tail_bound: f64,
}

fn check_poles(lambda: f64, poles: &[f64], guard: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("beta needs lambda >= 0, got {lambda}")));
    }
    match poles.iter().find(|&&p| (lambda - p).abs() <= guard * p) {
        Some(&pole) => Err(Error::PoleProximity { lambda, pole }),
        None => Ok(()),
    }
}

/// Truncated spectral series β(λ) = λ + λ² Σ ⟨φ_j⟩²/(λ_j − λ).
#[derive(Clone, Debug)]
pub struct SeriesBeta {
    /// Distinct nonzero-mean eigenvalues and the weight Σ⟨φ⟩² of each eigenspace.
    poles: Vec<(f64, f64)>,
    /// Upper bound on the omitted weight Σ_{j > k_max} ⟨φ_j⟩².
    tail_mass: f64,
    /// Lower bound on the omitted eigenvalues.
    cutoff: f64,
    opts: BetaOptions,
}

impl SeriesBeta {
    /// `inclusion_volume` is |Q₀|; with it the omitted weight is bounded by
    /// |Q₀| − Σ⟨φ_j⟩² (Bessel's inequality). Without it the spectrum is taken as complete.
    pub fn new(spectrum: &InclusionSpectrum, inclusion_volume: Option<f64>, opts: BetaOptions) -> Self {
        let poles = spectrum.poles();
        let captured: f64 = poles.iter().map(|p| p.1).sum();
        let tail_mass = inclusion_volume.map_or(0.0, |v| (v - captured).max(0.0));
        let cutoff = spectrum.entries.last().map_or(f64::INFINITY, |e| e.eigenvalue);
        SeriesBeta {
            poles,
            tail_mass,
            cutoff,
            opts,
        }
    }

    /// A spectrum given directly as (λ_j, ⟨φ_j⟩²), treated as complete.
    pub fn from_weights(poles: Vec<(f64, f64)>, opts: BetaOptions) -> Self {
        let mut poles = poles;
        poles.sort_by(|a, b| a.0.total_cmp(&b.0));
        SeriesBeta {
            poles,
            tail_mass: 0.0,
            cutoff: f64::INFINITY,
            opts,
        }
    }

    pub fn poles(&self) -> Vec<f64> {
        self.poles.iter().map(|p| p.0).collect()
    }

    pub fn eval(&self, lambda: f64) -> Result<BetaValue> {
        check_poles(lambda, &self.poles(), self.opts.pole_guard)?;
        let sum: f64 = self.poles.iter().map(|&(l, w)| w / (l - lambda)).sum();
        let beta = lambda + lambda * lambda * sum;
        let tail_bound = if self.tail_mass == 0.0 {
            0.0
        } else if lambda < self.cutoff {
            lambda * lambda * self.tail_mass / (self.cutoff - lambda)
        } else {
            f64::INFINITY
        };
        let tolerance = self.opts.tail_tol * lambda.max(1.0);
        if tail_bound > tolerance {
            return Err(Error::TailBound {
                lambda,
                bound: tail_bound,
                tolerance,
            });
        }
        Ok(BetaValue {
            lambda,
            beta,
            tail_bound,
        })
    }
}

/// Cell-problem solution V with its cell mean ⟨V⟩.
#[derive(Clone, Debug)]
pub struct VField {
    /// Nodal values on the evaluator's mesh (for the radial solver: V(r) at the radial nodes).
    pub values: Vec<f64>,
    pub mean: f64,
}

/// Direct evaluation β = λ(1 + ⟨V⟩) with −a₀ΔV = λV + λ in Q₀, V = 0 on ∂Q₀.
pub struct DirectBeta {
    kind: DirectKind,
    stiffness: SymmetricForm,
    mass: SymmetricForm,
    /// Consistent-mass load ∫φ_i of the free dofs.
    load: Vec<f64>,
    symbolic: Arc<SymbolicFactor>,
    map: Arc<DofMap>,
    poles: Vec<f64>,
    opts: BetaOptions,
}

enum DirectKind {
    Mesh {
        mesh: Arc<SimplicialMesh>,
        locator: fem::PointLocator,
    },
    /// Radial 3D ball: w = rV solves −a₀w'' = λw + λr on (0, ρ), w(0) = w(ρ) = 0.
    Radial { nodes: Vec<f64>, center: Vec<f64> },
}

impl DirectBeta {
    /// Finite elements on a mesh of Q₀ whose outer boundary is ∂Q₀.
    /// `poles` are the nonzero-mean eigenvalues used for the pole guard.
    pub fn on_mesh(mesh: &SimplicialMesh, a0: f64, poles: Vec<f64>, opts: BetaOptions) -> Result<Self> {
        let coef = vec![a0; mesh.n_elements()];
        let ones = vec![1.0; mesh.n_elements()];
        let map = Arc::new(DofMap::dirichlet(&mesh.marked_vertices(BoundaryMarker::Outer)));
        let k = assemble(mesh, &coef, FormKind::Stiffness)?;
        let m = assemble(mesh, &ones, FormKind::Mass)?;
        let mut forms = SymmetricForm::restrict_many(&[&k, &m], &map)?;
        let mass = forms.pop().unwrap();
        let stiffness = forms.pop().unwrap();
        let load = map.restrict_vector(&fem::unit_load(mesh, &ones));
        let symbolic = SymbolicFactor::analyze(stiffness.pattern())?;
        Ok(DirectBeta {
            kind: DirectKind::Mesh {
                locator: fem::PointLocator::new(mesh),
                mesh: Arc::new(mesh.clone()),
            },
            stiffness,
            mass,
            load,
            symbolic,
            map,
            poles,
            opts,
        })
    }

    /// Radially symmetric solve for a 3D ball of radius ρ with elements of size ≤ h.
    /// The operator uses the average of consistent and lumped mass, whose
    /// leading eigenvalue errors cancel on uniform meshes.
    pub fn radial_ball(rho: f64, a0: f64, h: f64, opts: BetaOptions) -> Result<Self> {
        let geom = crate::geometry::CellGeometry::centered_ball(3, rho, a0, 1.0)?;
        let n = ((rho / h) - 1e-9).ceil().max(2.0) as usize;
        let mesh = meshers::interval(0.0, rho, n);
        let coef = vec![a0; n];
        let ones = vec![1.0; n];
        let mut fixed = vec![false; n + 1];
        fixed[0] = true;
        fixed[n] = true;
        let map = Arc::new(DofMap::dirichlet(&fixed));
        let k = assemble(&mesh, &coef, FormKind::Stiffness)?;
        let mc = assemble(&mesh, &ones, FormKind::Mass)?;
        let ml = assemble(&mesh, &ones, FormKind::LumpedMass)?;
        let nodes: Vec<f64> = mesh.coords().to_vec();
        // ∫ r φ_i dr, exact for the linear function r
        let load = map.restrict_vector(&mc.apply(&nodes));
        let mut forms = SymmetricForm::restrict_many(&[&k, &mc, &ml], &map)?;
        let ml = forms.pop().unwrap();
        let mc = forms.pop().unwrap();
        let stiffness = forms.pop().unwrap();
        let mass = mc.lin_comb(0.5, &ml, 0.5)?;
        let symbolic = SymbolicFactor::analyze(stiffness.pattern())?;
        let poles = (1..)
            .map(|j| a0 * (j as f64 * PI / rho).powi(2))
            .take_while(|&l| l < 1e3 * a0 * (PI / rho).powi(2))
            .collect();
        Ok(DirectBeta {
            kind: DirectKind::Radial {
                nodes,
                center: geom.bounding_ball().0,
            },
            stiffness,
            mass,
            load,
            symbolic,
            map,
            poles,
            opts,
        })
    }

    pub fn poles(&self) -> &[f64] {
        &self.poles
    }

    /// Solves the cell problem for V at λ.
    pub fn solve_v(&self, lambda: f64) -> Result<VField> {
        check_poles(lambda, &self.poles, self.opts.pole_guard)?;
        let n_full = self.map.n_vertices();
        if lambda == 0.0 {
            return Ok(VField {
                values: vec![0.0; n_full],
                mean: 0.0,
            });
        }
        let a = self.stiffness.lin_comb(1.0, &self.mass, -lambda)?;
        let factor = self.symbolic.factor(&a, lambda)?;
        let rhs: Vec<f64> = self.load.iter().map(|f| lambda * f).collect();
        let v = factor.solve(&rhs);
        let full = self.map.expand(&v);
        match &self.kind {
            DirectKind::Mesh { .. } => {
                let mean = v.iter().zip(&self.load).map(|(a, b)| a * b).sum();
                Ok(VField { values: full, mean })
            }
            DirectKind::Radial { nodes, .. } => {
                // ⟨V⟩ = 4π ∫ r w dr
                let mean = 4.0 * PI * v.iter().zip(&self.load).map(|(a, b)| a * b).sum::<f64>();
                let mut values: Vec<f64> = full
                    .iter()
                    .zip(nodes)
                    .map(|(w, r)| if *r > 0.0 { w / r } else { 0.0 })
                    .collect();
                values[0] = full[1] / nodes[1];
                Ok(VField { values, mean })
            }
        }
    }

    /// Value of V at a cell point y (cell coordinates), zero outside Q₀.
    pub fn evaluate_v(&self, field: &VField, y: &[f64]) -> f64 {
        match &self.kind {
            DirectKind::Mesh { mesh, locator } => locator.interpolate(mesh, &field.values, y).unwrap_or(0.0),
            DirectKind::Radial { nodes, center } => {
                let r = y.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let rho = *nodes.last().unwrap();
                if r >= rho {
                    return 0.0;
                }
                let h = rho / (nodes.len() - 1) as f64;
                let i = ((r / h) as usize).min(nodes.len() - 2);
                let t = (r - nodes[i]) / h;
                (1.0 - t) * field.values[i] + t * field.values[i + 1]
            }
        }
    }

    pub fn eval(&self, lambda: f64) -> Result<BetaValue> {
        let v = self.solve_v(lambda)?;
        Ok(BetaValue {
            lambda,
            beta: lambda * (1.0 + v.mean),
            tail_bound: 0.0,
        })
    }
}

/// Closed form for a ball of radius ρ in 3D:
/// β = (1 − 4πρ³/3)λ + 4πρa₀(1 − ρk cot(kρ)), k = (λ/a₀)^{1/2}.
#[derive(Clone, Debug)]
pub struct ExplicitBallBeta {
    pub rho: f64,
    pub a0: f64,
    opts: BetaOptions,
    poles: Vec<f64>,
}

impl ExplicitBallBeta {
    pub fn new(rho: f64, a0: f64, opts: BetaOptions) -> Result<Self> {
        crate::geometry::CellGeometry::centered_ball(3, rho, a0, 1.0)?;
        let poles = (1..=1000).map(|j| a0 * (j as f64 * PI / rho).powi(2)).collect();
        Ok(ExplicitBallBeta { rho, a0, opts, poles })
    }

    pub fn poles(&self) -> &[f64] {
        &self.poles
    }

    pub fn eval(&self, lambda: f64) -> Result<BetaValue> {
        check_poles(lambda, &self.poles, self.opts.pole_guard)?;
        let x = (lambda / self.a0).sqrt() * self.rho;
        // 1 − x cot x, with its Taylor series where the difference cancels
        let g = if x < 1e-2 {
            let x2 = x * x;
            x2 / 3.0 + x2 * x2 / 45.0 + 2.0 * x2 * x2 * x2 / 945.0
        } else {
            1.0 - x / x.tan()
        };
        let beta = (1.0 - 4.0 / 3.0 * PI * self.rho.powi(3)) * lambda + 4.0 * PI * self.rho * self.a0 * g;
        Ok(BetaValue {
            lambda,
            beta,
            tail_bound: 0.0,
        })
    }
}

/// Any of the three evaluation methods.
pub enum BetaEvaluator {
    Series(SeriesBeta),
    Direct(DirectBeta),
    ExplicitBall(ExplicitBallBeta),
}

impl BetaEvaluator {
    pub fn method(&self) -> &'static str {
        match self {
            BetaEvaluator::Series(_) => "series",
            BetaEvaluator::Direct(_) => "direct",
            BetaEvaluator::ExplicitBall(_) => "explicit_ball",
        }
    }

    /// Nonzero-mean poles, ascending.
    pub fn poles(&self) -> Vec<f64> {
        match self {
            BetaEvaluator::Series(s) => s.poles(),
            BetaEvaluator::Direct(d) => d.poles().to_vec(),
            BetaEvaluator::ExplicitBall(e) => e.poles().to_vec(),
        }
    }

    pub fn options(&self) -> BetaOptions {
        match self {
            BetaEvaluator::Series(s) => s.opts,
            BetaEvaluator::Direct(d) => d.opts,
            BetaEvaluator::ExplicitBall(e) => e.opts,
        }
    }

    pub fn eval(&self, lambda: f64) -> Result<BetaValue> {
        match self {
            BetaEvaluator::Series(s) => s.eval(lambda),
            BetaEvaluator::Direct(d) => d.eval(lambda),
            BetaEvaluator::ExplicitBall(e) => e.eval(lambda),
        }
    }

    /// Evaluates a λ sweep in parallel, preserving order.
    pub fn sweep(&self, lambdas: &[f64]) -> Vec<Result<BetaValue>> {
        lambdas.par_iter().map(|&l| self.eval(l)).collect()
    }
}

/// Writes a β sweep as CSV with columns lambda, beta, method, tail_bound;
/// pole-guarded samples are skipped.
pub fn write_beta_csv(mut w: impl Write, method: &str, values: &[BetaValue]) -> Result<()> {
    writeln!(w, "lambda,beta,method,tail_bound")?;
    for v in values {
        writeln!(w, "{:e},{:e},{},{:e}", v.lambda, v.beta, method, v.tail_bound)?;
    }
    Ok(())
}

/// How a gap endpoint arises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Pole,
    Zero,
    /// The end of the scanned range cuts the gap.
    ScanLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub lower: f64,
    pub upper: f64,
    pub lower_kind: EndpointKind,
    pub upper_kind: EndpointKind,
    /// β at the midpoint, negative by construction.
    pub beta_mid: f64,
}

impl Gap {
    pub fn contains(&self, lambda: f64) -> bool {
        lambda > self.lower && lambda < self.upper
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Ascending, disjoint open intervals where β < 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapTable {
    pub gaps: Vec<Gap>,
    pub lambda_max: f64,
}

impl GapTable {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "index,lower,upper,lower_kind,upper_kind,beta_mid")?;
        for (i, g) in self.gaps.iter().enumerate() {
            writeln!(
                w,
                "{},{:e},{:e},{},{},{:e}",
                i + 1,
                g.lower,
                g.upper,
                kind_name(g.lower_kind),
                kind_name(g.upper_kind),
                g.beta_mid
            )?;
        }
        Ok(())
    }

    /// The gap containing λ, if any.
    pub fn find(&self, lambda: f64) -> Option<&Gap> {
        self.gaps.iter().find(|g| g.contains(lambda))
    }
}

fn kind_name(k: EndpointKind) -> &'static str {
    match k {
        EndpointKind::Pole => "pole",
        EndpointKind::Zero => "zero",
        EndpointKind::ScanLimit => "scan_limit",
    }
}

/// Number of graded samples per interval between consecutive poles.
const SCAN_POINTS: usize = 128;

/// Locates the gaps {β < 0} in (0, λ_max). Each interval between consecutive
/// poles is sampled on a grid clustered at both ends, and every sign change
/// of β is refined by bisection to `gap_tol`.
pub fn find_gaps(evaluator: &BetaEvaluator, lambda_max: f64) -> Result<GapTable> {
    let opts = evaluator.options();
    let poles: Vec<f64> = evaluator.poles().into_iter().filter(|&p| p < lambda_max).collect();
    let mut bounds = vec![0.0];
    bounds.extend(&poles);
    bounds.push(lambda_max);
    let mut gaps = Vec::new();
    for (j, w) in bounds.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let left_pole = j > 0;
        let right_pole = j < poles.len();
        let lo = if left_pole {
            a * (1.0 + 2.0 * opts.pole_guard)
        } else {
            a
        };
        let hi = if right_pole {
            b * (1.0 - 2.0 * opts.pole_guard)
        } else {
            b
        };
        if !(hi > lo) {
            continue;
        }
        let samples: Vec<f64> = (0..=SCAN_POINTS)
            .map(|i| {
                let s = i as f64 / SCAN_POINTS as f64;
                lo + (hi - lo) * 0.5 * (1.0 - (PI * s).cos())
            })
            .collect();
        let values: Vec<f64> = samples
            .par_iter()
            .map(|&l| evaluator.eval(l).map(|v| v.beta))
            .collect::<Result<Vec<f64>>>()?;
        let mut open: Option<(f64, EndpointKind)> = if values[0] < 0.0 {
            Some(if left_pole {
                (a, EndpointKind::Pole)
            } else {
                (lo, EndpointKind::Zero)
            })
        } else {
            None
        };
        for i in 0..SCAN_POINTS {
            let (f0, f1) = (values[i], values[i + 1]);
            if (f0 < 0.0) == (f1 < 0.0) {
                continue;
            }
            let root = bisect_sign(evaluator, samples[i], samples[i + 1], f0 < 0.0, opts.gap_tol)?;
            if f0 < 0.0 {
                let (start, kind) = open.take().expect("open gap before an upward crossing");
                gaps.push((start, root, kind, EndpointKind::Zero));
            } else {
                open = Some((root, EndpointKind::Zero));
            }
        }
        if let Some((start, kind)) = open {
            let end_kind = if right_pole {
                EndpointKind::Pole
            } else {
                EndpointKind::ScanLimit
            };
            gaps.push((start, b, kind, end_kind));
        }
    }
    let gaps = gaps
        .into_iter()
        .map(|(lower, upper, lower_kind, upper_kind)| {
            let mid = 0.5 * (lower + upper);
            let beta_mid = evaluator.eval(mid)?.beta;
            Ok(Gap {
                lower,
                upper,
                lower_kind,
                upper_kind,
                beta_mid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GapTable { gaps, lambda_max })
}

/// Bisects a sign change of β on [a, b]; `negative_at_a` gives the sign at a.
fn bisect_sign(evaluator: &BetaEvaluator, mut a: f64, mut b: f64, negative_at_a: bool, tol: f64) -> Result<f64> {
    while b - a > tol {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let neg = evaluator.eval(m)?.beta < 0.0;
        if neg == negative_at_a {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ball_volume, CellGeometry};
    use crate::inclusion::{ball_spectrum, inclusion_mesh};
    use approx::assert_relative_eq;

    fn synthetic() -> BetaEvaluator {
        BetaEvaluator::Series(SeriesBeta::from_weights(vec![(10.0, 0.5)], BetaOptions::default()))
    }

    #[test]
    fn series_examples() {
        let s = synthetic();
        assert_eq!(s.eval(0.0).unwrap().beta, 0.0);
        assert_relative_eq!(s.eval(5.0).unwrap().beta, 7.5, max_relative = 1e-15);
        let empty = SeriesBeta::from_weights(vec![], BetaOptions::default());
        assert_eq!(empty.eval(3.25).unwrap().beta, 3.25);
        assert!(matches!(s.eval(10.0 + 1e-6), Err(Error::PoleProximity { pole, .. }) if pole == 10.0));
    }

    #[test]
    fn synthetic_gap_is_ten_to_twenty() {
        let table = find_gaps(&synthetic(), 100.0).unwrap();
        assert_eq!(table.gaps.len(), 1);
        let g = table.gaps[0];
        assert_eq!(g.lower, 10.0);
        assert!((g.upper - 20.0).abs() < 1e-9);
        assert_eq!((g.lower_kind, g.upper_kind), (EndpointKind::Pole, EndpointKind::Zero));
        assert!(g.beta_mid < 0.0);
        let empty = BetaEvaluator::Series(SeriesBeta::from_weights(vec![], BetaOptions::default()));
        assert!(find_gaps(&empty, 100.0).unwrap().gaps.is_empty());
    }

    #[test]
    fn explicit_ball_limits_and_pole_signs() {
        let e = ExplicitBallBeta::new(0.3, 1.0, BetaOptions::default()).unwrap();
        assert!(e.eval(1e-12).unwrap().beta.abs() < 1e-11);
        let tiny = ExplicitBallBeta::new(1e-4, 1.0, BetaOptions::default()).unwrap();
        assert_relative_eq!(tiny.eval(50.0).unwrap().beta, 50.0, max_relative = 1e-6);
        let pole = (PI / 0.3f64).powi(2);
        assert!(e.eval(pole * (1.0 - 1e-4)).unwrap().beta > 1e4);
        assert!(e.eval(pole * (1.0 + 1e-4)).unwrap().beta < -1e4);
    }

    #[test]
    fn three_methods_agree_in_three_d() {
        let rho = 0.3;
        let opts = BetaOptions::default();
        let spec = ball_spectrum(rho, 1.0, 3, 20).unwrap();
        let series = SeriesBeta::new(&spec, Some(ball_volume(3, rho)), opts);
        let direct = DirectBeta::radial_ball(rho, 1.0, rho / 40.0, opts).unwrap();
        let explicit = ExplicitBallBeta::new(rho, 1.0, opts).unwrap();
        for l in [5.0, 50.0, 100.0, 150.0, 300.0, 600.0, 900.0] {
            let (s, d, x) = (
                series.eval(l).unwrap(),
                direct.eval(l).unwrap(),
                explicit.eval(l).unwrap(),
            );
            assert!(
                (s.beta - x.beta).abs() <= s.tail_bound + 1e-9 * x.beta.abs().max(1.0),
                "series {l}"
            );
            assert!(
                (d.beta - x.beta).abs() / x.beta.abs() < 5e-3,
                "direct {l}: {} vs {}",
                d.beta,
                x.beta
            );
        }
    }

    #[test]
    fn direct_two_d_matches_series_and_is_positive_below_first_pole() {
        let rho = 0.3;
        let geom = CellGeometry::centered_ball(2, rho, 1.0, 1.0).unwrap();
        let mesh = inclusion_mesh(&geom, rho / 40.0).unwrap();
        let spec = ball_spectrum(rho, 1.0, 2, 20).unwrap();
        let poles = spec.poles().iter().map(|p| p.0).collect();
        let direct = DirectBeta::on_mesh(&mesh, 1.0, poles, BetaOptions::default()).unwrap();
        let series = SeriesBeta::new(&spec, Some(ball_volume(2, rho)), BetaOptions::default());
        assert_eq!(direct.solve_v(0.0).unwrap().mean, 0.0);
        for l in [20.0, 70.0, 150.0] {
            let (d, s) = (direct.eval(l).unwrap(), series.eval(l).unwrap());
            assert!(
                (d.beta - s.beta).abs() / s.beta.abs() < 1e-2,
                "{l}: {} vs {}",
                d.beta,
                s.beta
            );
        }
        let v = direct.solve_v(40.0).unwrap();
        let scale = v.values.iter().cloned().fold(0.0, f64::max);
        assert!(v.values.iter().all(|&x| x >= -1e-12 * scale));
    }

    #[test]
    fn increasing_below_first_pole_and_one_sign_change_between_poles() {
        let spec = ball_spectrum(0.3, 1.0, 3, 20).unwrap();
        let s = SeriesBeta::new(&spec, None, BetaOptions::default());
        let poles = s.poles();
        let mut prev = 0.0;
        for i in 1..200 {
            let v = s.eval(poles[0] * i as f64 / 200.0).unwrap().beta;
            assert!(v > prev);
            prev = v;
        }
        for w in poles.windows(2).take(5) {
            let vals: Vec<f64> = (1..400)
                .map(|i| s.eval(w[0] + (w[1] - w[0]) * i as f64 / 400.0).unwrap().beta)
                .collect();
            let changes = vals.windows(2).filter(|p| (p[0] < 0.0) != (p[1] < 0.0)).count();
            assert_eq!(changes, 1);
            assert!(vals[0] < 0.0 && *vals.last().unwrap() > 0.0);
        }
    }

    #[test]
    fn tail_bound_refusal() {
        let spec = ball_spectrum(0.3, 1.0, 3, 2).unwrap();
        let s = SeriesBeta::new(&spec, Some(ball_volume(3, 0.3)), BetaOptions::default());
        assert!(matches!(s.eval(400.0), Err(Error::TailBound { .. })));
    }
}
