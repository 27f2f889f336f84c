use hicontrast::beta::find_gaps;
use hicontrast::defect::ModeProfile;
use hicontrast::epsilon::{
    build_approximation, build_epsilon_problem, discrete_limit, solve_near, EpsilonSetup, LimitSolution,
};
use hicontrast::fem::{BoundaryMarker, EigOptions};
use hicontrast::geometry::{BoundaryInclusionPolicy, CellGeometry, DefectSpec};

const A_HOM: f64 = 0.558642;

fn setup() -> EpsilonSetup {
    EpsilonSetup {
        geometry: CellGeometry::centered_ball(2, 0.3, 1.0, 1.0).unwrap(),
        defect: DefectSpec::ball(0.55, 1.0).unwrap(),
        policy: BoundaryInclusionPolicy::PowerLaw {
            a0_hat: 1.0,
            theta: 1.0,
        },
        r_max: 0.55 + 6.0 / 12.47,
        cells_per_inclusion: 8,
        macro_h: 0.55 / 30.0,
    }
}

fn limit(s: &EpsilonSetup) -> LimitSolution {
    discrete_limit(s, A_HOM, 0.0, 70.4).unwrap()
}

fn kappa(l: &LimitSolution) -> f64 {
    match &l.mode.profile {
        ModeProfile::Radial(p) => p.kappa,
        _ => unreachable!(),
    }
}

#[test]
fn cell_field_vanishes_on_the_inclusion_boundary() {
    let s = setup();
    let l = limit(&s);
    let field = l.field(&s.defect).unwrap();
    let template = s.template().unwrap();
    let boundary = template.marked_vertices(BoundaryMarker::Outer);
    let mut worst = 0.0f64;
    for (v, &on) in boundary.iter().enumerate() {
        if on {
            worst = worst.max(field.v.values[v].abs());
        }
    }
    assert!(boundary.iter().any(|&b| b));
    assert!(worst < 1e-12, "{worst}");
    // inside the defect the oscillating part is switched off
    assert_eq!(field.v(&[0.1, 0.2], &[0.5, 0.5]), 0.0);
}

#[test]
fn window_eigenvectors_are_localized() {
    let s = setup();
    let l = limit(&s);
    let p = build_epsilon_problem(&s, 1.0 / 8.0).unwrap();
    assert!(p.stiffness.is_symmetric() && p.mass.is_symmetric());
    let near = solve_near(&p, l.mode.lambda0, 4.0, 4, &EigOptions::default()).unwrap();
    assert!(!near.pairs.is_empty());
    let cutoff = 0.55 + 4.0 / kappa(&l);
    for pair in &near.pairs {
        assert!(pair.value > 0.0 && (pair.value - l.mode.lambda0).abs() < 4.0);
        let full = p.map.expand(&pair.vector);
        let outside: Vec<f64> = full
            .iter()
            .enumerate()
            .map(|(v, &u)| {
                let x = p.mesh.vertex(v);
                if x[0].hypot(x[1]) > cutoff {
                    u
                } else {
                    0.0
                }
            })
            .collect();
        let outside = p.map.gather(&outside);
        let fraction = p.mass.bilinear(&outside, &outside) / p.mass.bilinear(&pair.vector, &pair.vector);
        assert!(
            fraction < 0.05,
            "{} carries {fraction} of its mass beyond {cutoff}",
            pair.value
        );
    }
}

#[test]
fn approximation_rayleigh_quotient_lies_in_the_gap_window() {
    let s = setup();
    let l = limit(&s);
    let gap = *find_gaps(&l.beta, 140.0).unwrap().find(l.mode.lambda0).unwrap();
    let window = (l.mode.lambda0 - gap.lower).min(gap.upper - l.mode.lambda0);
    let field = l.field(&s.defect).unwrap();
    let p = build_epsilon_problem(&s, 1.0 / 16.0).unwrap();
    let approx = build_approximation(&field, &p).unwrap();
    let q = p.stiffness.bilinear(&approx.normalized, &approx.normalized);
    assert!(
        (q - l.mode.lambda0).abs() < window,
        "Rayleigh quotient {q} vs {} ± {window}",
        l.mode.lambda0
    );
    // the approximation is u₀ itself on defect nodes
    let mut checked = 0;
    for v in 0..p.mesh.n_vertices() {
        let x = p.mesh.vertex(v);
        if x[0].hypot(x[1]) < 0.5 {
            assert_eq!(approx.values[v], field.u0(x));
            checked += 1;
        }
    }
    assert!(checked > 0);
}
