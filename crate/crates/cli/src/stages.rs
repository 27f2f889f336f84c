//! The computation stages behind the subcommands. A [`Session`] caches each
//! stage's output so later stages reuse it within one run.

use hicontrast::beta::{
    find_gaps, write_beta_csv, BetaEvaluator, BetaValue, DirectBeta, ExplicitBallBeta, GapTable, SeriesBeta,
};
use hicontrast::defect::{
    angular_orders, defect_disk_mesh, find_radial_modes, general_defect_modes, truncation_radius, write_profile_csv,
    LocalizedMode, ModeRecord, RadialParams,
};
use hicontrast::epsilon::{
    convergence_study, discrete_limit, no_defect_probe, subordination_check, ConvergenceReport, EpsilonSetup,
    Subordination,
};
use hicontrast::fem::{EigOptions, SimplicialMesh};
use hicontrast::geometry::{DefectShape, InclusionShape};
use hicontrast::homogenize::{homogenized_tensor, richardson_study, CellMesh, HomogenizedTensor, RichardsonStudy};
use hicontrast::inclusion::{ball_spectrum, fem_spectrum, inclusion_mesh, InclusionSpectrum};
use hicontrast::{Error, Result};
use serde::Serialize;

use crate::config::{BetaMethod, ModeSolver, RunConfig, SpectrumSource};

/// One subcommand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    InclusionSpectrum,
    Beta,
    Gaps,
    Homogenize,
    DefectModes,
    ValidateEps,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::InclusionSpectrum,
        Stage::Beta,
        Stage::Gaps,
        Stage::Homogenize,
        Stage::DefectModes,
        Stage::ValidateEps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::InclusionSpectrum => "inclusion-spectrum",
            Stage::Beta => "beta",
            Stage::Gaps => "gaps",
            Stage::Homogenize => "homogenize",
            Stage::DefectModes => "defect-modes",
            Stage::ValidateEps => "validate-eps",
        }
    }
}

/// Output of one stage: a JSON-serializable result and named CSV tables.
pub struct StageOutput {
    pub stage: Stage,
    pub result: serde_json::Value,
    pub tables: Vec<(String, String)>,
    /// One-line human summary.
    pub summary: String,
}

fn to_json(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("reports serialize to JSON")
}

fn csv(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(String::from_utf8(buf).expect("CSV writers emit UTF-8"))
}

#[derive(Serialize)]
struct BetaSweep<'a> {
    method: &'a str,
    poles: Vec<f64>,
    samples: Vec<BetaSample>,
    /// λ samples refused by the pole guard or the series tail bound.
    skipped: usize,
}

#[derive(Serialize)]
struct BetaSample {
    lambda: f64,
    beta: f64,
    tail_bound: f64,
}

#[derive(Serialize)]
struct HomogenizeResult<'a> {
    tensor: &'a HomogenizedTensor,
    scalar: f64,
    anisotropy: f64,
    /// Upper (Voigt) bound |Q₁|·a₁.
    voigt_bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    richardson: Option<&'a RichardsonStudy>,
}

/// A mode together with the gap it was found in.
#[derive(Clone, Debug, Serialize)]
pub struct GapMode {
    /// 1-based gap index.
    pub gap: usize,
    pub mode: LocalizedMode,
}

#[derive(Serialize)]
struct ModeRow {
    gap: usize,
    #[serde(flatten)]
    record: ModeRecord,
    source: hicontrast::defect::ModeSource,
}

#[derive(Serialize)]
struct ModesResult {
    a_hom: f64,
    solver: ModeSolver,
    orders: Vec<f64>,
    gaps_searched: Vec<usize>,
    modes: Vec<ModeRow>,
}

#[derive(Serialize)]
struct ProbeRow {
    eps: f64,
    count: usize,
}

#[derive(Serialize)]
struct ValidationResult {
    #[serde(flatten)]
    convergence: ConvergenceReport,
    /// Limit eigenvalue with β of the continuum inclusion problem.
    continuum_lambda0: f64,
    setup: EpsilonSetup,
    errors_decrease: bool,
    distances_nonincreasing: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    no_defect_probe: Option<Vec<ProbeRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    subordination: Option<Subordination>,
}

/// Cached stage outputs for one configuration.
pub struct Session<'c> {
    config: &'c RunConfig,
    eig: EigOptions,
    inclusion_mesh: Option<SimplicialMesh>,
    spectrum: Option<InclusionSpectrum>,
    beta: Option<BetaEvaluator>,
    gaps: Option<GapTable>,
    tensor: Option<HomogenizedTensor>,
    modes: Option<Vec<GapMode>>,
}

impl<'c> Session<'c> {
    pub fn new(config: &'c RunConfig) -> Self {
        Session {
            config,
            eig: config.eigen.options(),
            inclusion_mesh: None,
            spectrum: None,
            beta: None,
            gaps: None,
            tensor: None,
            modes: None,
        }
    }

    pub fn run(&mut self, stage: Stage) -> Result<StageOutput> {
        match stage {
            Stage::InclusionSpectrum => self.inclusion_spectrum_stage(),
            Stage::Beta => self.beta_stage(),
            Stage::Gaps => self.gaps_stage(),
            Stage::Homogenize => self.homogenize_stage(),
            Stage::DefectModes => self.modes_stage(),
            Stage::ValidateEps => self.validation_stage(),
        }
    }

    fn mesh_h(&self) -> f64 {
        let (_, r) = self.config.geometry.bounding_ball();
        self.config.beta.mesh_h.unwrap_or(r / 40.0)
    }

    fn inclusion_mesh(&mut self) -> Result<&SimplicialMesh> {
        if self.inclusion_mesh.is_none() {
            self.inclusion_mesh = Some(inclusion_mesh(&self.config.geometry, self.mesh_h())?);
        }
        Ok(self.inclusion_mesh.as_ref().expect("just built"))
    }

    /// Inclusion spectrum per the beta section.
    pub fn spectrum(&mut self) -> Result<&InclusionSpectrum> {
        if self.spectrum.is_none() {
            let b = &self.config.beta;
            let g = &self.config.geometry;
            let spectrum = if let Some(poles) = &b.synthetic_poles {
                let pairs = poles.iter().map(|p| (p[0], p[1].sqrt())).collect();
                InclusionSpectrum::from_pairs(pairs, g.a0, poles.len(), b.mean_tol)?
            } else {
                match (b.spectrum, &g.inclusion) {
                    (SpectrumSource::Analytic, InclusionShape::Ball { radius, .. }) => {
                        ball_spectrum(*radius, g.a0, g.dimension, b.k_max)?
                    }
                    _ => {
                        let (k_max, tol, eig) = (b.k_max, b.mean_tol, self.eig.clone());
                        let a0 = g.a0;
                        fem_spectrum(self.inclusion_mesh()?, a0, k_max, tol, &eig)?.spectrum
                    }
                }
            };
            self.spectrum = Some(spectrum);
        }
        Ok(self.spectrum.as_ref().expect("just built"))
    }

    /// β evaluator per the beta section.
    pub fn beta(&mut self) -> Result<&BetaEvaluator> {
        if self.beta.is_none() {
            let b = self.config.beta.clone();
            let g = self.config.geometry.clone();
            let opts = b.options();
            let evaluator = if let Some(poles) = &b.synthetic_poles {
                BetaEvaluator::Series(SeriesBeta::from_weights(
                    poles.iter().map(|p| (p[0], p[1])).collect(),
                    opts,
                ))
            } else {
                match b.method {
                    BetaMethod::Series => {
                        let volume = g.inclusion_volume();
                        BetaEvaluator::Series(SeriesBeta::new(self.spectrum()?, Some(volume), opts))
                    }
                    BetaMethod::ExplicitBall => {
                        let rho = g.ball_radius().expect("validated ball");
                        BetaEvaluator::ExplicitBall(ExplicitBallBeta::new(rho, g.a0, opts)?)
                    }
                    BetaMethod::Direct if g.dimension == 3 => {
                        let rho = g.ball_radius().expect("validated ball");
                        BetaEvaluator::Direct(DirectBeta::radial_ball(rho, g.a0, self.mesh_h(), opts)?)
                    }
                    BetaMethod::Direct => {
                        let poles: Vec<f64> = self.spectrum()?.poles().iter().map(|p| p.0).collect();
                        let mesh = self.inclusion_mesh()?;
                        BetaEvaluator::Direct(DirectBeta::on_mesh(mesh, g.a0, poles, opts)?)
                    }
                }
            };
            self.beta = Some(evaluator);
        }
        Ok(self.beta.as_ref().expect("just built"))
    }

    pub fn gaps(&mut self) -> Result<&GapTable> {
        if self.gaps.is_none() {
            let lambda_max = self.config.gaps.lambda_max;
            let table = find_gaps(self.beta()?, lambda_max)?;
            self.gaps = Some(table);
        }
        Ok(self.gaps.as_ref().expect("just built"))
    }

    pub fn tensor(&mut self) -> Result<&HomogenizedTensor> {
        if self.tensor.is_none() {
            let cell = CellMesh::build(&self.config.geometry, self.config.homogenize.h)?;
            self.tensor = Some(homogenized_tensor(&cell, self.config.geometry.a1)?);
        }
        Ok(self.tensor.as_ref().expect("just built"))
    }

    /// Scalar homogenized coefficient, from the modes section or the cell problem.
    pub fn a_hom(&mut self) -> Result<f64> {
        match self.config.modes.a_hom {
            Some(a) => Ok(a),
            None => Ok(self.tensor()?.scalar()),
        }
    }

    fn a_hom_tensor(&mut self) -> Result<Vec<Vec<f64>>> {
        let n = self.config.geometry.dimension;
        match self.config.modes.a_hom {
            Some(a) => Ok((0..n)
                .map(|i| (0..n).map(|j| if i == j { a } else { 0.0 }).collect())
                .collect()),
            None => Ok(self.tensor()?.a.clone()),
        }
    }

    fn orders(&self) -> Vec<f64> {
        let m = &self.config.modes;
        m.m.clone()
            .unwrap_or_else(|| angular_orders(self.config.geometry.dimension, m.orders))
    }

    /// Localized modes in the selected gaps.
    pub fn modes(&mut self) -> Result<&[GapMode]> {
        if self.modes.is_none() {
            let defect = self.config.require_defect()?.clone();
            let section = self.config.modes.clone();
            let n = self.config.geometry.dimension;
            let a_hom = self.a_hom()?;
            let tensor = self.a_hom_tensor()?;
            let orders = self.orders();
            let eig = self.eig.clone();
            let indices = self.gap_indices()?;
            let gaps = self.gaps()?.clone();
            let beta = self.beta.as_ref().expect("built with the gaps");
            let mut found = Vec::new();
            for &i in &indices {
                let gap = gaps.gaps[i - 1];
                let modes = match section.solver {
                    ModeSolver::Radial => {
                        let radius = match defect.shape {
                            DefectShape::Ball { radius } => radius,
                            _ => {
                                return Err(Error::Config {
                                    path: "modes.solver".into(),
                                    message: "the radial solver needs a ball defect; use solver = \"fem\"".into(),
                                })
                            }
                        };
                        let params = RadialParams {
                            n,
                            a2: defect.a2,
                            a_hom,
                            radius,
                            beta,
                        };
                        find_radial_modes(&params, &gap, &orders, section.radial_search())?
                    }
                    ModeSolver::Fem => {
                        let outer = defect.outer_radius();
                        if outer == 0.0 {
                            return Err(Error::Config {
                                path: "defect.shape".into(),
                                message: "the finite-element solver needs a nonempty defect".into(),
                            });
                        }
                        let r_max = truncation_radius(outer, a_hom, beta, gap.mid(), section.decay_lengths)?;
                        let mesh = defect_disk_mesh(&defect, r_max, outer * section.fem_h_ratio, 8)?;
                        general_defect_modes(
                            &mesh,
                            &tensor,
                            defect.a2,
                            beta,
                            &gap,
                            &section.pencil_options(eig.clone()),
                        )?
                    }
                };
                found.extend(modes.into_iter().map(|mode| GapMode { gap: i, mode }));
            }
            self.modes = Some(found);
        }
        Ok(self.modes.as_deref().expect("just built"))
    }

    fn gap_indices(&mut self) -> Result<Vec<usize>> {
        let count = self.gaps()?.gaps.len();
        match &self.config.modes.gaps {
            Some(list) => {
                if let Some(&bad) = list.iter().find(|&&i| i > count) {
                    return Err(Error::Config {
                        path: "modes.gaps".into(),
                        message: format!("gap {bad} requested but only {count} gaps lie below gaps.lambda_max"),
                    });
                }
                Ok(list.clone())
            }
            None => Ok((1..=count).collect()),
        }
    }

    fn inclusion_spectrum_stage(&mut self) -> Result<StageOutput> {
        let spectrum = self.spectrum()?.clone();
        let nonzero = spectrum.nonzero_mean().count();
        Ok(StageOutput {
            stage: Stage::InclusionSpectrum,
            summary: format!("{} eigenvalues, {nonzero} with nonzero mean", spectrum.entries.len()),
            tables: vec![("spectrum.csv".into(), csv(|w| spectrum.write_csv(w))?)],
            result: to_json(&spectrum),
        })
    }

    fn beta_stage(&mut self) -> Result<StageOutput> {
        let n = self.config.beta.samples;
        let lambda_max = self.config.gaps.lambda_max;
        let lambdas: Vec<f64> = (1..=n).map(|i| lambda_max * i as f64 / (n + 1) as f64).collect();
        let beta = self.beta()?;
        let mut values: Vec<BetaValue> = Vec::with_capacity(n);
        let mut skipped = 0;
        for r in beta.sweep(&lambdas) {
            match r {
                Ok(v) => values.push(v),
                Err(Error::PoleProximity { .. } | Error::TailBound { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let method = beta.method();
        let sweep = BetaSweep {
            method,
            poles: beta.poles().into_iter().filter(|&p| p < lambda_max).collect(),
            samples: values
                .iter()
                .map(|v| BetaSample {
                    lambda: v.lambda,
                    beta: v.beta,
                    tail_bound: v.tail_bound,
                })
                .collect(),
            skipped,
        };
        Ok(StageOutput {
            stage: Stage::Beta,
            summary: format!(
                "{} samples of beta ({method}), {skipped} skipped near poles",
                values.len()
            ),
            tables: vec![("beta.csv".into(), csv(|w| write_beta_csv(w, method, &values))?)],
            result: to_json(&sweep),
        })
    }

    fn gaps_stage(&mut self) -> Result<StageOutput> {
        let table = self.gaps()?.clone();
        let listing: Vec<String> = table
            .gaps
            .iter()
            .map(|g| format!("({}, {})", g.lower, g.upper))
            .collect();
        Ok(StageOutput {
            stage: Stage::Gaps,
            summary: format!(
                "{} gaps below {}: {}",
                table.gaps.len(),
                table.lambda_max,
                listing.join(" ")
            ),
            tables: vec![("gaps.csv".into(), csv(|w| table.write_csv(w))?)],
            result: to_json(&table),
        })
    }

    fn homogenize_stage(&mut self) -> Result<StageOutput> {
        let g = self.config.geometry.clone();
        let levels = self.config.homogenize.levels;
        let h = self.config.homogenize.h;
        let tensor = self.tensor()?.clone();
        let disk = g.dimension == 2
            && matches!(&g.inclusion, InclusionShape::Ball { center, .. } if center.iter().all(|&c| c == 0.5));
        let richardson = if levels > 1 && disk {
            Some(richardson_study(&g, h, levels)?)
        } else {
            None
        };
        let mut table = String::from("i,j,value\n");
        for (i, row) in tensor.a.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                table.push_str(&format!("{},{},{:e}\n", i + 1, j + 1, v));
            }
        }
        let mut tables = vec![("tensor.csv".to_string(), table)];
        if let Some(r) = &richardson {
            let mut t = String::from("h,value,extrapolated\n");
            for (k, (h, v)) in r.h.iter().zip(&r.values).enumerate() {
                let ex = if k > 0 {
                    format!("{:e}", r.extrapolated[k - 1])
                } else {
                    String::new()
                };
                t.push_str(&format!("{h:e},{v:e},{ex}\n"));
            }
            tables.push(("richardson.csv".into(), t));
        }
        let result = HomogenizeResult {
            tensor: &tensor,
            scalar: tensor.scalar(),
            anisotropy: tensor.anisotropy(),
            voigt_bound: g.matrix_volume() * g.a1,
            richardson: richardson.as_ref(),
        };
        Ok(StageOutput {
            stage: Stage::Homogenize,
            summary: format!(
                "a_hom = {:.8} (anisotropy {:.2e})",
                tensor.scalar(),
                tensor.anisotropy()
            ),
            tables,
            result: to_json(&result),
        })
    }

    fn modes_stage(&mut self) -> Result<StageOutput> {
        let a_hom = self.a_hom()?;
        let orders = self.orders();
        let gaps_searched = self.gap_indices()?;
        let samples = self.config.modes.profile_samples;
        let decay = self.config.modes.decay_lengths;
        let modes = self.modes()?.to_vec();
        let mut table = String::from("gap,lambda0,m,multiplicity,alpha,kappa,continuity,flux,source\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut tables = Vec::new();
        for (k, gm) in modes.iter().enumerate() {
            let m = &gm.mode;
            let source = match m.source {
                hicontrast::defect::ModeSource::Radial => "radial",
                hicontrast::defect::ModeSource::Fem => "fem",
            };
            table.push_str(&format!(
                "{},{:e},{},{},{},{:e},{:e},{:e},{}\n",
                gm.gap,
                m.lambda0,
                opt(m.m),
                m.multiplicity,
                opt(m.alpha),
                m.kappa,
                m.residuals.continuity,
                m.residuals.flux,
                source
            ));
            if m.source == hicontrast::defect::ModeSource::Radial {
                let radius = self.config.require_defect()?.outer_radius();
                let r_max = radius + decay / m.kappa;
                let body = csv(|w| write_profile_csv(w, m, r_max, samples))?;
                tables.push((format!("profile_{:03}.csv", k + 1), body));
            }
        }
        tables.insert(0, ("modes.csv".into(), table));
        let result = ModesResult {
            a_hom,
            solver: self.config.modes.solver,
            orders,
            gaps_searched,
            modes: modes
                .iter()
                .map(|gm| ModeRow {
                    gap: gm.gap,
                    record: ModeRecord::from(&gm.mode),
                    source: gm.mode.source,
                })
                .collect(),
        };
        Ok(StageOutput {
            stage: Stage::DefectModes,
            summary: format!("{} localized modes in {} gaps", modes.len(), result.gaps_searched.len()),
            tables,
            result: to_json(&result),
        })
    }

    fn validation_stage(&mut self) -> Result<StageOutput> {
        let v = self.config.require_validation()?.clone();
        let defect = self.config.require_defect()?.clone();
        let radius = defect.radius().ok_or_else(|| Error::Config {
            path: "defect.shape".into(),
            message: "fine-scale validation needs a ball defect".into(),
        })?;
        let geometry = self.config.geometry.clone();
        let a_hom = self.a_hom()?;
        let decay = self.config.modes.decay_lengths;
        let eig = self.eig.clone();
        let search = self.config.modes.radial_search();

        // continuum mode of order m nearest the target, or the lowest one
        let gaps = self.gaps()?.clone();
        let beta = self.beta.as_ref().expect("built with the gaps");
        let params = RadialParams {
            n: 2,
            a2: defect.a2,
            a_hom,
            radius,
            beta,
        };
        let mut candidates = Vec::new();
        for gap in &gaps.gaps {
            candidates.extend(find_radial_modes(&params, gap, &[v.m], search)?);
        }
        let continuum = match v.target {
            Some(t) => candidates
                .into_iter()
                .min_by(|a, b| (a.lambda0 - t).abs().total_cmp(&(b.lambda0 - t).abs())),
            None => candidates.into_iter().min_by(|a, b| a.lambda0.total_cmp(&b.lambda0)),
        }
        .ok_or_else(|| Error::Config {
            path: "validation.m".into(),
            message: format!("no localized mode of order {} below gaps.lambda_max", v.m),
        })?;

        let r_max = v.r_max.unwrap_or(radius + decay / continuum.kappa);
        let macro_h = v.macro_h.unwrap_or(radius / 60.0);
        let setup = v.setup(&geometry, &defect, r_max, macro_h);
        let opts = v.study_options(eig);
        let target = v.target.unwrap_or(continuum.lambda0);
        let limit = discrete_limit(&setup, a_hom, v.m, target)?;
        let field = limit.field(&defect)?;
        let report = convergence_study(&field, &setup, &v.eps, &opts)?;

        let probe = if v.no_defect_probe {
            let counts = no_defect_probe(&setup, &v.eps, limit.mode.lambda0, &opts)?;
            Some(counts.into_iter().map(|(eps, count)| ProbeRow { eps, count }).collect())
        } else {
            None
        };
        let subordination = match v.subordination_eps {
            Some(eps) => {
                let fine_a = match self.config.modes.a_hom {
                    Some(a) => a,
                    None => {
                        let cell = CellMesh::build(&geometry, 0.5 * self.config.homogenize.h)?;
                        homogenized_tensor(&cell, geometry.a1)?.scalar()
                    }
                };
                Some(subordination_check(
                    &setup,
                    [a_hom, fine_a],
                    v.m,
                    limit.mode.lambda0,
                    eps,
                    &opts,
                )?)
            }
            None => None,
        };

        let table = csv(|w| report.write_csv(w))?;
        let summary = format!(
            "lambda0 = {:.6}, eigenvalue slope {}, eigenfunction slope {}",
            report.lambda0,
            report.slopes.eig.map_or("n/a".into(), |s| format!("{s:.3}")),
            report.slopes.func.map_or("n/a".into(), |s| format!("{s:.3}")),
        );
        let result = ValidationResult {
            errors_decrease: report.errors_decrease(),
            distances_nonincreasing: report.distances_nonincreasing(),
            convergence: report,
            continuum_lambda0: continuum.lambda0,
            setup,
            no_defect_probe: probe,
            subordination,
        };
        Ok(StageOutput {
            stage: Stage::ValidateEps,
            summary,
            tables: vec![("convergence.csv".into(), table)],
            result: to_json(&result),
        })
    }
}
