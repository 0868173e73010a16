#![allow(dead_code)]

use dcq_core::local_quantile::{check_objective, WeightedPoint};
use dcq_core::pilot::ErrorModel;
use rand::Rng;
use statrs::distribution::{Continuous, Gamma, LogNormal, Normal, StudentsT};

/// Exact minimum of a degree-1 problem: some optimal line passes through two
/// design points, so enumerate all pairs.
pub fn vertex_oracle(d: &[WeightedPoint], tau: f64) -> (f64, f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for a in 0..d.len() {
        for b in a + 1..d.len() {
            if d[a].x == d[b].x {
                continue;
            }
            let slope = (d[b].y - d[a].y) / (d[b].x - d[a].x);
            let icpt = d[a].y - slope * d[a].x;
            let obj = check_objective(d, tau, &[icpt, slope]);
            if obj < best.0 {
                best = (obj, icpt, slope);
            }
        }
    }
    best
}

/// Nested grid search with steps 1e-2, 1e-3 and 1e-4 over ±200 steps. Each level re-centers
/// its window on the best point until the best point is the center, so a
/// narrow oblique valley can be followed past the window edge.
pub fn grid_oracle(d: &[WeightedPoint], tau: f64, start: (f64, f64)) -> (f64, f64) {
    let mut center = start;
    for (step, half) in [(1e-2, 200), (1e-3, 200), (1e-4, 200)] {
        for _ in 0..1000 {
            let mut best = (check_objective(d, tau, &[center.0, center.1]), center.0, center.1);
            for p in -half..=half {
                for q in -half..=half {
                    let a = center.0 + p as f64 * step;
                    let b = center.1 + q as f64 * step;
                    let obj = check_objective(d, tau, &[a, b]);
                    if obj < best.0 {
                        best = (obj, a, b);
                    }
                }
            }
            if (best.1, best.2) == center {
                break;
            }
            center = (best.1, best.2);
        }
    }
    center
}

pub fn random_design<R: Rng>(rng: &mut R, n: usize) -> Vec<WeightedPoint> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            let e: f64 = rng.random_range(-1.0..1.0);
            WeightedPoint {
                x,
                y: 2.0 + 3.0 * x + e * e.abs(),
                w: rng.random_range(0.1..2.0),
            }
        })
        .collect()
}

/// Tabulated error model drawn from a mix of symmetric, heavy-tailed and
/// skewed families with random parameters.
pub fn random_error_model<R: Rng>(rng: &mut R) -> (String, ErrorModel) {
    let pts = 4001;
    match rng.random_range(0..6) {
        0 => {
            let s = rng.random_range(0.3..3.0);
            let d = Normal::new(0.0, s).unwrap();
            (
                format!("N(0,{s:.2})"),
                ErrorModel::from_pdf(|e| d.pdf(e), -8.0 * s, 8.0 * s, pts).unwrap(),
            )
        }
        1 => {
            let b = rng.random_range(0.3..2.0);
            (
                format!("Laplace({b:.2})"),
                ErrorModel::from_pdf(|e| (-e.abs() / b).exp() / (2.0 * b), -25.0 * b, 25.0 * b, pts).unwrap(),
            )
        }
        2 => {
            let df = rng.random_range(1.5..10.0);
            let d = StudentsT::new(0.0, 1.0, df).unwrap();
            (
                format!("t({df:.2})"),
                ErrorModel::from_pdf(|e| d.pdf(e), -40.0, 40.0, pts).unwrap(),
            )
        }
        3 => {
            let k = rng.random_range(0.8..6.0);
            let d = Gamma::new(k, 1.0).unwrap();
            (
                format!("Gamma({k:.2})-{k:.2}"),
                ErrorModel::from_pdf(
                    |e| if e + k > 0.0 { d.pdf(e + k) } else { 0.0 },
                    -k,
                    30.0 + 4.0 * k,
                    pts,
                )
                .unwrap(),
            )
        }
        4 => {
            let s = rng.random_range(0.2..1.0);
            let d = LogNormal::new(0.0, s).unwrap();
            let mu = (0.5 * s * s).exp();
            (
                format!("LN(0,{s:.2})"),
                ErrorModel::from_pdf(|e| if e + mu > 0.0 { d.pdf(e + mu) } else { 0.0 }, -mu, 40.0, pts).unwrap(),
            )
        }
        _ => {
            let w = rng.random_range(0.1..0.9);
            let shift = rng.random_range(0.5..3.0);
            let a = Normal::new(-shift * (1.0 - w), 0.5).unwrap();
            let b = Normal::new(shift * w, 1.0).unwrap();
            (
                format!("mix({w:.2},{shift:.2})"),
                ErrorModel::from_pdf(|e| w * a.pdf(e) + (1.0 - w) * b.pdf(e), -10.0, 10.0, pts).unwrap(),
            )
        }
    }
}
