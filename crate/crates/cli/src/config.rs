//! Run configuration: a TOML document with one section per stage.

use std::path::{Path, PathBuf};

use hicontrast::beta::BetaOptions;
use hicontrast::defect::{PencilOptions, RadialSearch};
use hicontrast::epsilon::{EpsilonSetup, StudyOptions};
use hicontrast::fem::EigOptions;
use hicontrast::geometry::{BoundaryInclusionPolicy, CellGeometry, DefectSpec};
use hicontrast::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: CellGeometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect: Option<DefectSpec>,
    #[serde(default)]
    pub beta: BetaSection,
    #[serde(default)]
    pub gaps: GapsSection,
    #[serde(default)]
    pub homogenize: HomogenizeSection,
    #[serde(default)]
    pub modes: ModesSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationSection>,
    #[serde(default)]
    pub eigen: EigenSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMethod {
    Series,
    Direct,
    ExplicitBall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    /// Closed-form ball spectrum.
    Analytic,
    /// Finite elements on an inclusion mesh (2D).
    Fem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSection {
    pub method: BetaMethod,
    pub spectrum: SpectrumSource,
    pub k_max: usize,
    pub mean_tol: f64,
    pub pole_guard: f64,
    pub gap_tol: f64,
    pub tail_tol: f64,
    /// Element size of inclusion meshes; defaults to ρ/40.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh_h: Option<f64>,
    /// Samples of the β sweep over (0, gaps.lambda_max).
    pub samples: usize,
    /// Spectrum given directly as (λ_j, Σ⟨φ_j⟩²) pairs; replaces the geometry for β.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_poles: Option<Vec<[f64; 2]>>,
}

impl Default for BetaSection {
    fn default() -> Self {
        let opts = BetaOptions::default();
        BetaSection {
            method: BetaMethod::Series,
            spectrum: SpectrumSource::Analytic,
            k_max: hicontrast::inclusion::K_MAX,
            mean_tol: hicontrast::inclusion::MEAN_TOL,
            pole_guard: opts.pole_guard,
            gap_tol: opts.gap_tol,
            tail_tol: opts.tail_tol,
            mesh_h: None,
            samples: 200,
            synthetic_poles: None,
        }
    }
}

impl BetaSection {
    pub fn options(&self) -> BetaOptions {
        BetaOptions {
            pole_guard: self.pole_guard,
            gap_tol: self.gap_tol,
            tail_tol: self.tail_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapsSection {
    pub lambda_max: f64,
}

impl Default for GapsSection {
    fn default() -> Self {
        GapsSection { lambda_max: 500.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogenizeSection {
    pub h: f64,
    /// Number of nested meshes in the Richardson study (2D disks only; 1 disables it).
    pub levels: usize,
}

impl Default for HomogenizeSection {
    fn default() -> Self {
        HomogenizeSection {
            h: 1.0 / 32.0,
            levels: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSolver {
    Radial,
    Fem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModesSection {
    pub solver: ModeSolver,
    /// Angular orders; when absent the first `orders` admissible orders are used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<Vec<f64>>,
    pub orders: usize,
    /// 1-based indices of the gaps to search; all gaps when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaps: Option<Vec<usize>>,
    /// Homogenized coefficient; computed from the homogenize section when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_hom: Option<f64>,
    pub grid_points: usize,
    pub tol: f64,
    /// Element size of the finite-element solver, relative to the defect radius.
    pub fem_h_ratio: f64,
    /// Exterior truncation R_max = R + decay_lengths/κ.
    pub decay_lengths: f64,
    pub scan_points: usize,
    pub pencil_tol: f64,
    pub k_window: usize,
    /// Samples of each radial profile CSV.
    pub profile_samples: usize,
}

impl Default for ModesSection {
    fn default() -> Self {
        let radial = RadialSearch::default();
        let pencil = PencilOptions::default();
        ModesSection {
            solver: ModeSolver::Radial,
            m: None,
            orders: 4,
            gaps: None,
            a_hom: None,
            grid_points: radial.grid_points,
            tol: radial.tol,
            fem_h_ratio: 1.0 / 30.0,
            decay_lengths: 6.0,
            scan_points: pencil.scan_points,
            pencil_tol: pencil.tol,
            k_window: pencil.k_window,
            profile_samples: 201,
        }
    }
}

impl ModesSection {
    pub fn radial_search(&self) -> RadialSearch {
        RadialSearch {
            grid_points: self.grid_points,
            tol: self.tol,
        }
    }

    pub fn pencil_options(&self, eig: EigOptions) -> PencilOptions {
        PencilOptions {
            scan_points: self.scan_points,
            tol: self.pencil_tol,
            k_window: self.k_window,
            eig,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSection {
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "default_policy")]
    pub policy: BoundaryInclusionPolicy,
    /// Outer radius of the truncated domain; R + decay_lengths/κ when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_max: Option<f64>,
    #[serde(default = "default_cpi")]
    pub cells_per_inclusion: usize,
    /// Element size in the defect and matrix; R/60 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_h: Option<f64>,
    /// Half-width of the eigenvalue search window.
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Angular order of the tracked mode.
    #[serde(default)]
    pub m: f64,
    /// Approximate eigenvalue of the tracked mode; the lowest mode of order m when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default)]
    pub no_defect_probe: bool,
    /// ε at which one uniform refinement is compared; skipped when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subordination_eps: Option<f64>,
}

fn default_eps() -> Vec<f64> {
    vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0]
}

fn default_policy() -> BoundaryInclusionPolicy {
    BoundaryInclusionPolicy::PowerLaw {
        a0_hat: 1.0,
        theta: 1.0,
    }
}

fn default_cpi() -> usize {
    8
}

fn default_window() -> f64 {
    StudyOptions::default().window
}

fn default_k_max() -> usize {
    StudyOptions::default().k_max
}

impl ValidationSection {
    pub fn setup(&self, geometry: &CellGeometry, defect: &DefectSpec, r_max: f64, macro_h: f64) -> EpsilonSetup {
        EpsilonSetup {
            geometry: geometry.clone(),
            defect: defect.clone(),
            policy: self.policy,
            r_max,
            cells_per_inclusion: self.cells_per_inclusion,
            macro_h,
        }
    }

    pub fn study_options(&self, eig: EigOptions) -> StudyOptions {
        StudyOptions {
            window: self.window,
            k_max: self.k_max,
            eig,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenSection {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
}

impl Default for EigenSection {
    fn default() -> Self {
        let e = EigOptions::default();
        EigenSection {
            tol: e.tol,
            max_iter: e.max_iter,
            seed: e.seed,
            block: e.block,
        }
    }
}

impl EigenSection {
    pub fn options(&self) -> EigOptions {
        EigOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            block: self.block,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("runs"),
            formats: vec![Format::Json, Format::Csv],
        }
    }
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_error(path, format!("must be a positive finite number, got {v}")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_error(
            path,
            format!("must be a non-negative finite number, got {v}"),
        ))
    }
}

impl RunConfig {
    /// Parses a TOML document and applies `section.field=value` overrides
    /// before deserializing, so overrides are type-checked like the file.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_error("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if let Some(d) = &self.defect {
            d.validate()?;
        }
        let b = &self.beta;
        if b.k_max == 0 {
            return Err(config_error("beta.k_max", "must be at least 1"));
        }
        positive("beta.pole_guard", b.pole_guard)?;
        positive("beta.gap_tol", b.gap_tol)?;
        positive("beta.tail_tol", b.tail_tol)?;
        positive("beta.mean_tol", b.mean_tol)?;
        if let Some(h) = b.mesh_h {
            positive("beta.mesh_h", h)?;
        }
        if b.samples < 2 {
            return Err(config_error("beta.samples", "must be at least 2"));
        }
        if let Some(poles) = &b.synthetic_poles {
            if poles.is_empty() {
                return Err(config_error("beta.synthetic_poles", "must list at least one pole"));
            }
            for p in poles {
                positive("beta.synthetic_poles", p[0])?;
                positive("beta.synthetic_poles", p[1])?;
            }
            if b.method != BetaMethod::Series {
                return Err(config_error("beta.method", "synthetic poles require the series method"));
            }
        }
        let ball = self.geometry.ball_radius().is_some();
        let centered_ball = ball
            && matches!(&self.geometry.inclusion, hicontrast::geometry::InclusionShape::Ball { center, .. } if center.iter().all(|&c| c == 0.5));
        if b.synthetic_poles.is_none() {
            match (b.method, self.geometry.dimension) {
                (BetaMethod::ExplicitBall, 2) => {
                    return Err(config_error("beta.method", "explicit_ball is the 3D closed form"));
                }
                (BetaMethod::ExplicitBall | BetaMethod::Direct, 3) if !centered_ball => {
                    return Err(config_error(
                        "beta.method",
                        "3D evaluation needs a centred ball inclusion",
                    ));
                }
                _ => {}
            }
            if b.method == BetaMethod::Series {
                match (b.spectrum, self.geometry.dimension) {
                    (SpectrumSource::Analytic, _) if !ball => {
                        return Err(config_error(
                            "beta.spectrum",
                            "the analytic spectrum needs a ball inclusion",
                        ));
                    }
                    (SpectrumSource::Fem, 3) => {
                        return Err(config_error("beta.spectrum", "finite-element spectra are 2D only"));
                    }
                    _ => {}
                }
            }
        }
        positive("gaps.lambda_max", self.gaps.lambda_max)?;
        positive("homogenize.h", self.homogenize.h)?;
        if self.homogenize.levels == 0 {
            return Err(config_error("homogenize.levels", "must be at least 1"));
        }
        let m = &self.modes;
        if let Some(list) = &m.m {
            for &order in list {
                hicontrast::defect::validate_order(self.geometry.dimension, order)
                    .map_err(|e| config_error("modes.m", e.to_string()))?;
            }
        }
        if m.orders == 0 {
            return Err(config_error("modes.orders", "must be at least 1"));
        }
        if m.gaps.as_ref().is_some_and(|g| g.contains(&0)) {
            return Err(config_error("modes.gaps", "gap indices are 1-based"));
        }
        if let Some(a) = m.a_hom {
            positive("modes.a_hom", a)?;
        }
        if m.grid_points < 2 {
            return Err(config_error("modes.grid_points", "must be at least 2"));
        }
        non_negative("modes.tol", m.tol)?;
        positive("modes.fem_h_ratio", m.fem_h_ratio)?;
        positive("modes.decay_lengths", m.decay_lengths)?;
        positive("modes.pencil_tol", m.pencil_tol)?;
        if m.solver == ModeSolver::Fem && self.geometry.dimension != 2 {
            return Err(config_error("modes.solver", "the finite-element solver is 2D only"));
        }
        if let Some(v) = &self.validation {
            if self.geometry.dimension != 2 {
                return Err(config_error("validation", "fine-scale validation is 2D only"));
            }
            if v.eps.is_empty() {
                return Err(config_error("validation.eps", "must list at least one value"));
            }
            for &e in &v.eps {
                let k = 1.0 / e;
                if !(e > 0.0 && e < 1.0) || (k - k.round()).abs() > 1e-9 {
                    return Err(config_error("validation.eps", format!("{e} is not of the form 1/k")));
                }
            }
            if v.eps.windows(2).any(|w| w[1] >= w[0]) {
                return Err(config_error("validation.eps", "must be strictly decreasing"));
            }
            v.policy.validate()?;
            if let Some(r) = v.r_max {
                positive("validation.r_max", r)?;
            }
            if let Some(h) = v.macro_h {
                positive("validation.macro_h", h)?;
            }
            if v.cells_per_inclusion < 4 {
                return Err(config_error("validation.cells_per_inclusion", "must be at least 4"));
            }
            positive("validation.window", v.window)?;
            if v.k_max == 0 {
                return Err(config_error("validation.k_max", "must be at least 1"));
            }
            hicontrast::defect::validate_order(2, v.m).map_err(|e| config_error("validation.m", e.to_string()))?;
            if let Some(t) = v.target {
                positive("validation.target", t)?;
            }
            if let Some(e) = v.subordination_eps {
                positive("validation.subordination_eps", e)?;
            }
        }
        positive("eigen.tol", self.eigen.tol)?;
        if self.output.formats.is_empty() {
            return Err(config_error("output.formats", "must list at least one format"));
        }
        Ok(())
    }

    /// The defect section, required by the mode stages.
    pub fn require_defect(&self) -> Result<&DefectSpec> {
        self.defect
            .as_ref()
            .ok_or_else(|| config_error("defect", "this command needs a [defect] section"))
    }

    pub fn require_validation(&self) -> Result<&ValidationSection> {
        self.validation
            .as_ref()
            .ok_or_else(|| config_error("validation", "this command needs a [validation] section"))
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is read as a TOML value,
/// and as a plain string when that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error("--set", format!("expected section.field=value, got {assignment:?}")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_error("--set", format!("malformed key path {path:?}")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let (last, parents) = keys.split_last().expect("nonempty path");
    let mut node = table;
    for (i, k) in parents.iter().enumerate() {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_error(&keys[..=i].join("."), "is not a section"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
