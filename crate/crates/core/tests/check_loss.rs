mod common;

use common::{grid_oracle, random_design, vertex_oracle};
use dcq_core::kernels::KernelSpec;
use dcq_core::local_quantile::{
    certify, check_objective, local_linear_quantile, solve_weighted_check_loss, ObservationBatch, WeightedPoint,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_exhaustive_and_grid_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..50 {
        let d = random_design(&mut rng, 20);
        let tau = [0.5, 0.1, 0.9, 0.3, 0.75][case % 5];
        let sol = solve_weighted_check_loss(&d, tau, 1).unwrap();
        assert!(sol.certified, "case {case}");
        let (obj, ..) = vertex_oracle(&d, tau);
        assert!(sol.objective <= obj + 1e-8 * (1.0 + obj.abs()), "case {case}");
        let (ga, gb) = grid_oracle(&d, tau, (2.0, 3.0));
        assert!(
            (sol.coef[0] - ga).abs() < 2e-3 && (sol.coef[1] - gb).abs() < 2e-3,
            "case {case}"
        );
    }
}

/// Population local linear median at `x0` for the homoscedastic design:
/// solves the first-order conditions `∫ K_h(u) (1, u) φ(x) [Φ((a + b u − m(x)) / σ) − ½] dx = 0`
/// with `u = x − x0` by Newton iteration on Simpson quadrature.
fn population_local_median(x0: f64, h: f64) -> f64 {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).unwrap();
    let m = |x: f64| (2.0 * x).sin() + 2.0 * (-16.0 * x * x).exp();
    let k = KernelSpec::epanechnikov();
    let foc = |a: f64, b: f64| {
        let steps = 4000;
        let du = 2.0 * h / steps as f64;
        let (mut f0, mut f1) = (0.0, 0.0);
        for s in 0..=steps {
            let u = -h + s as f64 * du;
            let c = if s == 0 || s == steps {
                1.0
            } else if s % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let x = x0 + u;
            let g = k.eval_scaled(u, h) * n.pdf(x) * (n.cdf((a + b * u - m(x)) / 0.5) - 0.5);
            f0 += c * g;
            f1 += c * g * u;
        }
        (f0 * du / 3.0, f1 * du / 3.0)
    };
    let (mut a, mut b) = (m(x0), 0.0);
    for _ in 0..50 {
        let (g0, g1) = foc(a, b);
        let e = 1e-6;
        let (ga0, ga1) = foc(a + e, b);
        let (gb0, gb1) = foc(a, b + e);
        let j = [(ga0 - g0) / e, (gb0 - g0) / e, (ga1 - g1) / e, (gb1 - g1) / e];
        let det = j[0] * j[3] - j[1] * j[2];
        let da = (j[3] * g0 - j[1] * g1) / det;
        let db = (j[0] * g1 - j[2] * g0) / det;
        a -= da;
        b -= db;
        if da.abs() < 1e-13 {
            break;
        }
    }
    a
}

#[test]
fn local_median_on_the_homoscedastic_design() {
    let k = KernelSpec::epanechnikov();
    let target = population_local_median(0.0, 0.3);
    // The sharp peak (m''(0) = −64) pulls the smoothed target well below m(0) = 2.
    assert!(target < 1.6 && target > 1.3, "{target}");
    let mut fits = Vec::new();
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let xs: Vec<f64> = (0..500).map(|_| rng.sample(normal)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x: &f64| {
                let e: f64 = rng.sample(normal);
                (2.0 * x).sin() + 2.0 * (-16.0 * x * x).exp() + 0.5 * e
            })
            .collect();
        let b = ObservationBatch::new(xs, ys, 0).unwrap();
        fits.push(local_linear_quantile(&b, 0.0, 0.5, 0.3, &k).unwrap().a_hat);
    }
    let mean = fits.iter().sum::<f64>() / fits.len() as f64;
    let sd = (fits.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (fits.len() - 1) as f64).sqrt();
    let se = sd / (fits.len() as f64).sqrt();
    assert!((mean - target).abs() < 3.0 * se, "mean {mean} target {target} se {se}");
}

#[test]
fn constant_data_gives_the_constant() {
    let xs: Vec<f64> = (0..40).map(|k| k as f64 / 40.0).collect();
    let b = ObservationBatch::new(xs, vec![-1.25; 40], 0).unwrap();
    for tau in [0.1, 0.5, 0.8] {
        let f = local_linear_quantile(&b, 0.5, tau, 0.2, &KernelSpec::epanechnikov()).unwrap();
        assert!((f.a_hat + 1.25).abs() < 1e-12 && f.b_hat.abs() < 1e-9);
    }
}

#[test]
fn degree_two_with_no_curvature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d: Vec<WeightedPoint> = (0..30)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            WeightedPoint {
                x,
                y: 1.0 - 0.5 * x,
                w: 1.0,
            }
        })
        .collect();
    let s = solve_weighted_check_loss(&d, 0.4, 2).unwrap();
    assert!(s.coef[2].abs() < 1e-6);
}

fn design_strategy() -> impl Strategy<Value = (Vec<WeightedPoint>, f64)> {
    (
        prop::collection::vec((-1.0f64..1.0, -5.0f64..5.0, 0.0f64..3.0), 5..60),
        0.02f64..0.98,
    )
        .prop_map(|(v, tau)| (v.into_iter().map(|(x, y, w)| WeightedPoint { x, y, w }).collect(), tau))
}

fn least_squares(d: &[WeightedPoint]) -> Option<[f64; 2]> {
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in d {
        s0 += p.w;
        s1 += p.w * p.x;
        s2 += p.w * p.x * p.x;
        t0 += p.w * p.y;
        t1 += p.w * p.x * p.y;
    }
    let det = s0 * s2 - s1 * s1;
    (det.abs() > 1e-9).then(|| [(s2 * t0 - s1 * t1) / det, (s0 * t1 - s1 * t0) / det])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn certified_and_no_worse_than_least_squares((d, tau) in design_strategy()) {
        if let Ok(sol) = solve_weighted_check_loss(&d, tau, 1) {
            prop_assert!(sol.certified);
            prop_assert!(certify(&d, tau, &sol.coef));
            if let Some(ls) = least_squares(&d) {
                let ls_obj = check_objective(&d, tau, &ls);
                prop_assert!(sol.objective <= ls_obj + 1e-9 * (1.0 + ls_obj));
            }
        }
    }

    #[test]
    fn shift_and_scale_equivariance((d, tau) in design_strategy(), c in -10.0f64..10.0, s in 0.1f64..10.0) {
        let Ok(base) = solve_weighted_check_loss(&d, tau, 1) else { return Ok(()) };
        let shifted: Vec<_> = d.iter().map(|p| WeightedPoint { y: p.y + c, ..*p }).collect();
        let scaled: Vec<_> = d.iter().map(|p| WeightedPoint { y: p.y * s, ..*p }).collect();
        let sh = solve_weighted_check_loss(&shifted, tau, 1).unwrap();
        let sc = solve_weighted_check_loss(&scaled, tau, 1).unwrap();
        // Minimizers need not be unique, so compare objectives as well as
        // coefficients up to the flat directions.
        let obj_sh = check_objective(&d, tau, &[sh.coef[0] - c, sh.coef[1]]);
        let obj_sc = check_objective(&d, tau, &[sc.coef[0] / s, sc.coef[1] / s]);
        let tol = 1e-8 * (1.0 + base.objective);
        prop_assert!((obj_sh - base.objective).abs() <= tol);
        prop_assert!((obj_sc - base.objective).abs() <= tol);
    }
}
