use std::f64::consts::PI;

use approx::assert_relative_eq;
use proptest::prelude::*;

use hallci::iterate::{
    background_magnetic, background_velocity, helicity_slice, inductive_report, psi, run_step, Background,
    ParamSchedule, ScheduleMode, StepConfig,
};
use hallci::norms::{lp_slice, Quadrature};
use hallci::stress::PdeParams;
use hallci::{Error, Grid, Rank, Slice};

/// `int_{T^2} |sin x1 + cos x2|`, integrating the inner variable in closed form:
/// for `|a| <= 1`, `int_0^{2 pi} |a + cos y| dy = 4 a arccos(-a) + 4 sqrt(1 - a^2) - 2 pi a`.
fn mixed_l1_oracle() -> f64 {
    let inner = |a: f64| {
        let a = a.clamp(-1.0, 1.0);
        4.0 * a * (-a).acos() + 4.0 * (1.0 - a * a).sqrt() - 2.0 * PI * a
    };
    // Composite Simpson in x1; the integrand has kinks only at x1 = pi/2 and 3 pi/2,
    // which are nodes.
    let m = 1 << 20;
    let h = 2.0 * PI / m as f64;
    let mut s = inner(0.0) + inner((2.0 * PI).sin());
    for i in 1..m {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * inner((i as f64 * h).sin());
    }
    s * h / 3.0
}

const MIXED_L1: f64 = 32.0;

#[test]
fn mixed_integral_oracle_is_frozen() {
    assert_relative_eq!(mixed_l1_oracle(), MIXED_L1, max_relative = 1e-10);
}

#[test]
fn background_l1_norms_match_closed_forms() {
    let u = background_velocity(256, 1.0, 0.55);
    let b = background_magnetic(256, 1.0, 0.55);
    assert_relative_eq!(lp_slice(&u, 1.0, Quadrature::Refined(8)), 8.0 * PI, max_relative = 1e-6);
    assert_relative_eq!(lp_slice(&b, 1.0, Quadrature::Refined(8)), 16.0 * PI + MIXED_L1, max_relative = 1e-6);
    assert!(background_velocity(64, 2.0, 0.0).is_zero());
    assert!(background_magnetic(64, 2.0, 0.0).is_zero());
}

#[test]
fn helicity_of_the_background() {
    let h = helicity_slice(&background_magnetic(256, 2.0, 0.55)).unwrap();
    assert_relative_eq!(h, 32.0 * PI * PI, max_relative = 1e-8);
    assert_eq!(helicity_slice(&background_magnetic(256, 1.0, 0.0)).unwrap(), 0.0);
    assert_eq!(helicity_slice(&Slice::zeros(32, Rank::Vector)).unwrap(), 0.0);
}

#[test]
fn helicity_rejects_compressible_fields() {
    let n = 32;
    let h = 2.0 * PI / n as f64;
    let a: Vec<f64> = (0..n * n).map(|q| ((q % n) as f64 * h).sin()).collect();
    let v = Slice::from_vecs(n, Rank::Vector, vec![a, vec![0.0; n * n], vec![0.0; n * n]]);
    assert!(matches!(helicity_slice(&v), Err(Error::NotDivergenceFree(_))));
}

#[test]
fn schedule_examples() {
    let s = ParamSchedule::formula(2, 2, 0.01, 0.1, 1).unwrap();
    assert_eq!(s.lambda_q.as_ref().unwrap().exact.as_deref(), Some("4"));
    assert_eq!(s.lambda_next.as_ref().unwrap().exact.as_deref(), Some("16"));
    // delta_3 = lambda_3^{-2 beta} with lambda_3 = 2^8.
    let oracle = 2f64.powf(-8.0 * 0.02);
    assert_relative_eq!(s.delta_after.unwrap(), oracle, max_relative = 1e-14);
    assert_relative_eq!(s.delta_after.unwrap(), 0.8950250709, max_relative = 1e-9);

    // With alpha1 <= 1/4 and alpha2 <= 3/4 the epsilon cap is 1/8, so b is the first violation.
    let pde = PdeParams::new(1.0, 1.0, 0.25, 0.75).unwrap();
    let err = ParamSchedule::paper(2, 2, 0.01, 0.125, 1, &pde).unwrap_err();
    assert_eq!(err.to_string(), "b > 1000/ε violated");

    let d = ParamSchedule::desk(16.0, 2, 0.05, 512, hallci::geometry::ScalePolicy::PerFamily).unwrap();
    assert_eq!(d.mode, ScheduleMode::Desk);
    assert_eq!((d.mu, d.sigma, d.l), (16.0, 2, 0.05));
    assert_eq!(d.required_resolution, Some(3328));
    assert!(!d.checks[0].holds);
    assert!(ParamSchedule::desk(16.0, 1, 0.05, 512, hallci::geometry::ScalePolicy::PerFamily).is_err());
}

fn step_l1(mu: f64) -> ([f64; 2], bool) {
    let level = Background::new(1, Grid::new(256, 33).unwrap(), PdeParams::default()).unwrap();
    let mut cfg = StepConfig::new(mu, 2, 0.1, PdeParams::default());
    cfg.delta = Some(0.35);
    let report = run_step(&level, &cfg, &mut |_, _| Ok(())).unwrap();
    let ind = inductive_report(&report, None, 1.0);
    assert!(ind.empirical_m.is_finite() && ind.empirical_m > 0.0);
    (report.new_stress_sup_l1(), report.checks().iter().all(|c| c.pass))
}

#[test]
fn finer_blocks_shrink_the_magnetic_stress_at_256() {
    let (coarse, ok16) = step_l1(8.0);
    let (fine, ok32) = step_l1(16.0);
    assert!(ok16 && ok32);
    assert!(fine[1] < coarse[1]);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn background_is_a_solenoidal_curl_eigenfield(m in 1u32..5, t in 0.0f64..1.0) {
        let b = background_magnetic(16, m as f64, t);
        let u = background_velocity(16, m as f64, t);
        let p = psi(t);
        prop_assert!((0.0..=1.0).contains(&p));
        for f in [&u, &b] {
            let div = hallci::spectral::divergence(f).max_abs();
            prop_assert!(div < 1e-12);
            for c in 0..3 {
                prop_assert!(f.mean(c).abs() < 1e-12);
            }
        }
        let h = helicity_slice(&b).unwrap();
        let e = lp_slice(&b, 2.0, Quadrature::Rectangle).powi(2);
        prop_assert!((h - e).abs() <= 1e-12 * e.max(1.0));
    }
}
