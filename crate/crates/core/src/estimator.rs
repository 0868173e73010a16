//! End-to-end composite fit and the two competitors: the simple average of
//! per-batch local medians (ALAD) and the full-data local linear least
//! squares fit with a cross-validated bandwidth.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composite_plan::{
    bandwidth_parameters, build_quantile_grid, build_r_block, compute_are, optimal_alpha_and_h, optimal_weights,
    shortcut_bandwidth, solve_tau_bar_2star_and_weights, solve_tau_bar_star, unit_alpha_bandwidths, AlphaMode,
    CompositePlan, VarianceModel,
};
use crate::error::{Cell, Error, Result};
use crate::kernels::KernelSpec;
use crate::local_quantile::{local_cubic_cqr_beta, local_linear_ls, local_linear_quantile, ObservationBatch};
use crate::numeric::{interp, linspace, logspace, mean};
use crate::pilot::{estimate_error_model, fit_pilot, ErrorModel, ErrorModelOptions, PilotCurves};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauBarMode {
    /// Unweighted quantile sum vanishes; weights from the two-constraint solve.
    #[default]
    Star,
    /// Variance-weighted quantile sum vanishes; weights `S⁻¹1 / 1ᵀS⁻¹1`.
    DoubleStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    /// `V^{1/5} h_oll` from the oracle bandwidth.
    #[default]
    Shortcut,
    /// Curvature plug-in integrated against the weight function.
    PilotConstant,
    /// Curvature plug-in per evaluation point.
    PilotPointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleBandwidth {
    /// K-fold cross-validation over candidates around the plug-in rule.
    #[default]
    Cv,
    /// Rule-of-thumb plug-in from blocked quartic fits.
    Plugin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub j: usize,
    pub d_tau: f64,
    pub kernel: KernelSpec,
    pub tau_bar_mode: TauBarMode,
    pub bandwidth_mode: BandwidthMode,
    pub oracle_bandwidth: OracleBandwidth,
    /// Skips oracle bandwidth selection when set.
    pub h_oll: Option<f64>,
    pub cv_folds: usize,
    pub cv_candidates: usize,
    pub cv_seed: u64,
    pub restandardize_residuals: bool,
    /// Points of the coarse grid on which curvature is estimated.
    pub beta_subgrid: usize,
    /// Halve `d_tau` up to this many times when no feasible center exists.
    pub d_tau_retries: u32,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            j: 5,
            d_tau: 0.5,
            kernel: KernelSpec::epanechnikov(),
            tau_bar_mode: TauBarMode::Star,
            bandwidth_mode: BandwidthMode::Shortcut,
            oracle_bandwidth: OracleBandwidth::Cv,
            h_oll: None,
            cv_folds: 5,
            cv_candidates: 20,
            cv_seed: 0,
            restandardize_residuals: false,
            beta_subgrid: 20,
            d_tau_retries: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    /// Local fits that had to widen their bandwidth.
    pub widened_cells: usize,
    /// Local fits whose certificate did not pass.
    pub uncertified_cells: usize,
    /// Residuals standardized with extrapolated pilot curves.
    pub clamped_residuals: usize,
    pub flat_curvature_points: usize,
    pub ridged_blocks: usize,
    /// Times `d_tau` was halved to find a feasible center.
    pub d_tau_halvings: u32,
    pub h_oll: Option<f64>,
    pub are: f64,
}

/// Evaluated local fits and their weighted aggregate on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeFit {
    pub plan: CompositePlan,
    pub grid_x: Vec<f64>,
    /// `local_values[k][g]` for flattened cell `k = i + m·j`.
    pub local_values: Vec<Vec<f64>>,
    pub global_values: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl CompositeFit {
    pub fn local_value(&self, i: usize, j: usize, g: usize) -> f64 {
        self.local_values[self.plan.grid.index(i, j)][g]
    }

    /// Linear interpolation of the global curve, clamped at the grid ends.
    pub fn predict(&self, x: f64) -> f64 {
        interp(&self.grid_x, &self.global_values, x)
    }
}

/// `Σ_k ω_k v_k(x)` with the cells reduced in ascending flattened order.
pub fn aggregate(weights: &[f64], local_values: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != local_values.len() {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: local_values.len(),
        });
    }
    let g = local_values.first().map_or(0, Vec::len);
    if local_values.iter().any(|v| v.len() != g) {
        return Err(Error::InvalidInput("local value rows have unequal lengths".into()));
    }
    Ok((0..g)
        .map(|x| {
            let mut acc = 0.0;
            for (w, v) in weights.iter().zip(local_values) {
                acc += w * v[x];
            }
            acc
        })
        .collect())
}

pub fn merge_batches(batches: &[ObservationBatch]) -> Result<ObservationBatch> {
    let xs = batches.iter().flat_map(|b| b.xs().iter().copied()).collect();
    let ys = batches.iter().flat_map(|b| b.ys().iter().copied()).collect();
    ObservationBatch::new(xs, ys, 0)
}

fn validate_grid(grid_x: &[f64]) -> Result<()> {
    if grid_x.is_empty() || grid_x.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(
            "evaluation grid must be nonempty and finite".into(),
        ));
    }
    if grid_x.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("evaluation grid must be sorted".into()));
    }
    Ok(())
}

/// Pilot curves and the residual error model.
pub fn fit_pilot_stage(batches: &[ObservationBatch], cfg: &FitConfig) -> Result<(PilotCurves, ErrorModel)> {
    let pilot = fit_pilot(batches, &cfg.kernel)?;
    let em = estimate_error_model(
        batches,
        &pilot,
        &cfg.kernel,
        ErrorModelOptions {
            h_density: None,
            restandardize: cfg.restandardize_residuals,
        },
    )?;
    Ok((pilot, em))
}

/// Full procedure: pilot, center, weights, bandwidths, local fits, aggregate.
pub fn fit_composite(batches: &[ObservationBatch], cfg: &FitConfig, grid_x: &[f64]) -> Result<CompositeFit> {
    validate_batches(batches, cfg)?;
    validate_grid(grid_x)?;
    let (pilot, em) = fit_pilot_stage(batches, cfg)?;
    let h_oll = match (cfg.bandwidth_mode, cfg.h_oll) {
        (BandwidthMode::Shortcut, None) => Some(select_oracle_bandwidth(
            &merge_batches(batches)?,
            grid_x,
            &cfg.kernel,
            cfg.oracle_bandwidth,
            cfg.cv_folds,
            cfg.cv_candidates,
            cfg.cv_seed,
        )?),
        (_, h) => h,
    };
    fit_composite_with(batches, cfg, grid_x, &pilot, &em, h_oll)
}

fn validate_batches(batches: &[ObservationBatch], cfg: &FitConfig) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::InvalidInput("no batches".into()));
    }
    if cfg.j == 0 || batches.len() * cfg.j < 2 {
        return Err(Error::InvalidInput(format!(
            "need m·J ≥ 2, got m = {}, J = {}",
            batches.len(),
            cfg.j
        )));
    }
    Ok(())
}

/// [`fit_composite`] with precomputed pilot stage and oracle bandwidth.
pub fn fit_composite_with(
    batches: &[ObservationBatch],
    cfg: &FitConfig,
    grid_x: &[f64],
    pilot: &PilotCurves,
    em: &ErrorModel,
    h_oll: Option<f64>,
) -> Result<CompositeFit> {
    validate_batches(batches, cfg)?;
    validate_grid(grid_x)?;
    let (plan, mut diag) = plan_composite(batches, cfg, grid_x, pilot, em, h_oll)?;
    diag.clamped_residuals = em.clamped_residuals();
    let mut fit = evaluate_plan(batches, &plan, grid_x)?;
    fit.diagnostics = FitDiagnostics {
        widened_cells: fit.diagnostics.widened_cells,
        uncertified_cells: fit.diagnostics.uncertified_cells,
        ..diag
    };
    Ok(fit)
}

/// Steps two and three of the procedure: quantile levels, weights and bandwidths.
pub fn plan_composite(
    batches: &[ObservationBatch],
    cfg: &FitConfig,
    grid_x: &[f64],
    pilot: &PilotCurves,
    em: &ErrorModel,
    h_oll: Option<f64>,
) -> Result<(CompositePlan, FitDiagnostics)> {
    let m = batches.len();
    let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
    let n: usize = sizes.iter().sum();
    let nu = bandwidth_parameters(n, m)?;
    let mut diag = FitDiagnostics::default();

    let mut d_tau = cfg.d_tau;
    let (grid, weights, vm1) = loop {
        let attempt = (|| {
            let (tb, preset) = match cfg.tau_bar_mode {
                TauBarMode::Star => (solve_tau_bar_star(em, m, cfg.j, d_tau)?, None),
                TauBarMode::DoubleStar => {
                    let (tb, w) = solve_tau_bar_2star_and_weights(em, m, cfg.j, d_tau, nu, &sizes)?;
                    (tb, Some(w))
                }
            };
            let grid = build_quantile_grid(m, cfg.j, d_tau, tb)?;
            let q: Vec<f64> = grid.levels().iter().map(|&t| em.quantile(t)).collect();
            let vm1 = VarianceModel::new(&grid, &unit_alpha_bandwidths(&grid, &sizes, nu), em, &sizes)?;
            let w = match preset {
                Some(w) => w,
                None => optimal_weights(&vm1, &q)?,
            };
            Ok((grid, w, vm1))
        })();
        match attempt {
            Err(Error::NoRoot(_)) if diag.d_tau_halvings < cfg.d_tau_retries => {
                d_tau *= 0.5;
                diag.d_tau_halvings += 1;
            }
            other => break other?,
        }
    };
    diag.ridged_blocks = vm1.ridged_blocks();
    let q: Vec<f64> = grid.levels().iter().map(|&t| em.quantile(t)).collect();
    let vm_unit = VarianceModel::new(&grid, &vec![1.0; grid.cells()], em, &sizes)?;
    diag.are = compute_are(&weights, &vm_unit);

    let (bandwidths, scale) = match cfg.bandwidth_mode {
        BandwidthMode::Shortcut => {
            let h_oll =
                h_oll.ok_or_else(|| Error::InvalidInput("short-cut bandwidths need an oracle bandwidth".into()))?;
            diag.h_oll = Some(h_oll);
            let h = shortcut_bandwidth(h_oll, &weights, &vm_unit)?;
            (vec![h; grid.cells()], None)
        }
        BandwidthMode::PilotConstant | BandwidthMode::PilotPointwise => {
            let beta = curvature_on_grid(batches, &grid, cfg, grid_x, pilot)?;
            let a_x: Vec<f64> = grid_x.iter().map(|&x| pilot.a_of_x(x, &cfg.kernel)).collect();
            let mode = if cfg.bandwidth_mode == BandwidthMode::PilotPointwise {
                AlphaMode::Pointwise
            } else {
                AlphaMode::Constant
            };
            let choice = optimal_alpha_and_h(&a_x, &beta, &weights, &grid, &vm_unit, &sizes, nu, mode, grid_x)?;
            diag.flat_curvature_points = choice.flat_points;
            (choice.h, choice.pointwise_scale)
        }
    };
    let mut plan = CompositePlan::new(grid, weights, bandwidths, cfg.kernel, q)?;
    if let Some(f) = scale {
        plan = plan.with_pointwise_scale(grid_x.to_vec(), f);
    }
    Ok((plan, diag))
}

/// `β̂(x, τ_k)` for every cell, fitted on a coarse subgrid from the cell's
/// own batch and interpolated onto `grid_x`.
fn curvature_on_grid(
    batches: &[ObservationBatch],
    grid: &crate::composite_plan::QuantileGrid,
    cfg: &FitConfig,
    grid_x: &[f64],
    pilot: &PilotCurves,
) -> Result<Vec<Vec<f64>>> {
    let sub = linspace(grid_x[0], grid_x[grid_x.len() - 1], cfg.beta_subgrid.max(2));
    let h_p = 2.0 * pilot.h_pilot;
    (0..grid.cells())
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k % grid.m(), k / grid.m());
            let tau = grid.levels()[k];
            let vals = sub
                .iter()
                .map(|&x| {
                    local_cubic_cqr_beta(&batches[i], x, tau, h_p, &cfg.kernel)
                        .map_err(|e| e.at(Cell { batch: i, level: j, x }))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(grid_x.iter().map(|&x| interp(&sub, &vals, x)).collect())
        })
        .collect()
}

/// Steps four and five: every local fit from its own batch, then the weighted sum.
pub fn evaluate_plan(batches: &[ObservationBatch], plan: &CompositePlan, grid_x: &[f64]) -> Result<CompositeFit> {
    let g = &plan.grid;
    if batches.len() != g.m() {
        return Err(Error::InvalidInput(format!(
            "plan is for {} batches, got {}",
            g.m(),
            batches.len()
        )));
    }
    validate_grid(grid_x)?;
    let cells: Vec<(usize, usize)> = (0..g.cells())
        .flat_map(|k| (0..grid_x.len()).map(move |x| (k, x)))
        .collect();
    let fits = cells
        .par_iter()
        .map(|&(k, gx)| {
            let (i, j) = (k % g.m(), k / g.m());
            let x = grid_x[gx];
            local_linear_quantile(&batches[i], x, g.levels()[k], plan.bandwidth_at(k, x), &plan.kernel)
                .map_err(|e| e.at(Cell { batch: i, level: j, x }))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_grid = grid_x.len();
    let local_values: Vec<Vec<f64>> = fits
        .chunks(n_grid)
        .map(|row| row.iter().map(|f| f.a_hat).collect())
        .collect();
    let global_values = aggregate(&plan.weights, &local_values)?;
    Ok(CompositeFit {
        plan: plan.clone(),
        grid_x: grid_x.to_vec(),
        local_values,
        global_values,
        diagnostics: FitDiagnostics {
            widened_cells: fits.iter().filter(|f| f.widenings > 0).count(),
            uncertified_cells: fits.iter().filter(|f| !f.converged).count(),
            ..FitDiagnostics::default()
        },
    })
}

/// Average of per-batch local medians.
pub fn fit_alad(batches: &[ObservationBatch], grid_x: &[f64], h: f64, kernel: &KernelSpec) -> Result<Vec<f64>> {
    if batches.is_empty() {
        return Err(Error::InvalidInput("no batches".into()));
    }
    validate_grid(grid_x)?;
    let m = batches.len() as f64;
    grid_x
        .par_iter()
        .map(|&x| {
            let mut acc = 0.0;
            for (i, b) in batches.iter().enumerate() {
                acc += local_linear_quantile(b, x, 0.5, h, kernel)
                    .map_err(|e| e.at(Cell { batch: i, level: 0, x }))?
                    .a_hat;
            }
            Ok(acc / m)
        })
        .collect()
}

/// Short-cut bandwidth for ALAD: uniform weights on the single level ½.
pub fn alad_shortcut_bandwidth(em: &ErrorModel, h_oll: f64, batch_sizes: &[usize]) -> Result<f64> {
    let m = batch_sizes.len() as f64;
    let n: usize = batch_sizes.iter().sum();
    let r = build_r_block(&[0.5], &[1.0], em)[(0, 0)];
    let v: f64 = batch_sizes.iter().map(|&ni| n as f64 / ni as f64 / (m * m) * r).sum();
    if !(h_oll > 0.0 && v > 0.0) {
        return Err(Error::InvalidInput(format!(
            "invalid short-cut inputs h = {h_oll}, V = {v}"
        )));
    }
    Ok(v.powf(0.2) * h_oll)
}

/// Rule-of-thumb bandwidth for local linear least squares on `[lo, hi]`.
///
/// Curvature and noise come from quartic fits on `N` blocks of equal count,
/// with `N ≤ max(min(n / 20, 5), 1)` chosen by Mallows' `C_p`.
pub fn plugin_bandwidth(data: &ObservationBatch, lo: f64, hi: f64, kernel: &KernelSpec) -> Result<f64> {
    let n = data.len();
    if n < 6 {
        return Err(Error::InsufficientLocalData { have: n, need: 6 });
    }
    let sd = crate::numeric::std_dev(data.xs());
    if !(sd > 0.0) {
        return Err(Error::Degenerate("covariate has no spread".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.xs()[a].total_cmp(&data.xs()[b]));
    let xs: Vec<f64> = order.iter().map(|&k| data.xs()[k]).collect();
    let ys: Vec<f64> = order.iter().map(|&k| data.ys()[k]).collect();
    let n_max = (n / 20).clamp(1, 5);
    let fits: Vec<(f64, f64)> = (1..=n_max)
        .map(|blocks| blocked_quartic(&xs, &ys, blocks, lo, hi))
        .collect::<Result<_>>()?;
    let (rss_max, _) = fits[n_max - 1];
    let dof_max = n as f64 - 5.0 * n_max as f64;
    let cp = |b: usize| {
        let (rss, _) = fits[b - 1];
        if dof_max > 0.0 && rss_max > 0.0 {
            rss / (rss_max / dof_max) - (n as f64 - 10.0 * b as f64)
        } else {
            b as f64
        }
    };
    let blocks = (1..=n_max)
        .filter(|&b| n as f64 > 5.0 * b as f64)
        .min_by(|&a, &b| cp(a).total_cmp(&cp(b)))
        .unwrap_or(1);
    let (rss, curv) = fits[blocks - 1];
    let sigma2 = rss / (n as f64 - 5.0 * blocks as f64);
    let mu2 = kernel.mu2();
    let h = (sigma2 * kernel.roughness() * (hi - lo) / (mu2 * mu2 * curv * n as f64)).powf(0.2);
    // Noiseless or linear data make the rule degenerate; keep it within a
    // factor of 20 of the normal-reference bandwidth.
    let reference = crate::pilot::rule_of_thumb(sd, n);
    Ok(if h.is_finite() && h > 0.0 {
        h.clamp(reference / 20.0, 20.0 * reference)
    } else {
        reference
    })
}

/// Residual sum of squares and mean squared second derivative on `[lo, hi]`
/// of per-block quartic fits. `xs` must be sorted.
fn blocked_quartic(xs: &[f64], ys: &[f64], blocks: usize, lo: f64, hi: f64) -> Result<(f64, f64)> {
    let n = xs.len();
    let mut rss = 0.0;
    let mut curv = 0.0;
    for b in 0..blocks {
        let (a, e) = (b * n / blocks, (b + 1) * n / blocks);
        let (bx, by) = (&xs[a..e], &ys[a..e]);
        let (mu, sd) = (mean(bx), crate::numeric::std_dev(bx));
        if !(sd > 0.0) || bx.len() < 5 {
            return Err(Error::Degenerate("quartic pilot block has no spread".into()));
        }
        let design = nalgebra::DMatrix::from_fn(bx.len(), 5, |r, c| ((bx[r] - mu) / sd).powi(c as i32));
        let y = nalgebra::DVector::from_column_slice(by);
        let coef = design
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::Degenerate(format!("quartic pilot fit failed: {e}")))?;
        rss += (&y - &design * &coef).norm_squared();
        for &x in bx.iter().filter(|&&x| x >= lo && x <= hi) {
            let z = (x - mu) / sd;
            let m2 = (2.0 * coef[2] + 6.0 * coef[3] * z + 12.0 * coef[4] * z * z) / (sd * sd);
            curv += m2 * m2;
        }
    }
    Ok((rss, curv / n as f64))
}

/// Oracle bandwidth by `folds`-fold cross-validation over `candidates`
/// log-spaced values in `[h_p / 3, 3 h_p]` around the plug-in `h_p`, or the
/// plug-in itself. The CV loss uses held-out points inside the grid range.
pub fn select_oracle_bandwidth(
    data: &ObservationBatch,
    grid_x: &[f64],
    kernel: &KernelSpec,
    mode: OracleBandwidth,
    folds: usize,
    candidates: usize,
    seed: u64,
) -> Result<f64> {
    validate_grid(grid_x)?;
    let (lo, hi) = (grid_x[0], grid_x[grid_x.len() - 1]);
    let h_p = plugin_bandwidth(data, lo, hi, kernel)?;
    if mode == OracleBandwidth::Plugin {
        return Ok(h_p);
    }
    cv_bandwidth(
        data,
        lo,
        hi,
        kernel,
        &logspace(h_p / 3.0, 3.0 * h_p, candidates.max(1)),
        folds,
        seed,
    )
    .map(|(h, _)| h)
}

/// Cross-validated choice among `candidates`, with the per-candidate scores.
pub fn cv_bandwidth(
    data: &ObservationBatch,
    lo: f64,
    hi: f64,
    kernel: &KernelSpec,
    candidates: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let n = data.len();
    if folds < 2 || n < folds {
        return Err(Error::InvalidInput(format!(
            "cannot form {folds} folds from {n} points"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0usize; n];
    for (rank, &idx) in order.iter().enumerate() {
        fold_of[idx] = rank % folds;
    }
    let (xs, ys) = (data.xs(), data.ys());
    let splits = (0..folds)
        .map(|f| {
            let pick = |held: bool| -> (Vec<f64>, Vec<f64>) {
                (0..n)
                    .filter(|&k| (fold_of[k] == f) == held)
                    .filter(|&k| !held || (xs[k] >= lo && xs[k] <= hi))
                    .map(|k| (xs[k], ys[k]))
                    .unzip()
            };
            let (tx, ty) = pick(false);
            Ok((ObservationBatch::new(tx, ty, f)?, pick(true)))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|&h| {
            let mut sse = 0.0;
            let mut count = 0usize;
            for (train, (hx, hy)) in &splits {
                for (&x, &y) in hx.iter().zip(hy) {
                    match local_linear_ls(train, x, h, kernel) {
                        Ok(p) => {
                            sse += (y - p) * (y - p);
                            count += 1;
                        }
                        Err(_) => return f64::INFINITY,
                    }
                }
            }
            if count == 0 {
                f64::INFINITY
            } else {
                sse / count as f64
            }
        })
        .collect();
    let best = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .ok_or_else(|| Error::Degenerate("no bandwidth candidate produced a CV score".into()))?;
    Ok((candidates[best], scores))
}

/// Full-data local linear least squares on `grid_x`, with its bandwidth.
pub fn fit_oracle_ll(
    data: &ObservationBatch,
    grid_x: &[f64],
    kernel: &KernelSpec,
    mode: OracleBandwidth,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let h = select_oracle_bandwidth(data, grid_x, kernel, mode, 5, 20, seed)?;
    Ok((oracle_ll_at(data, grid_x, h, kernel)?, h))
}

/// Full-data local linear least squares with a given bandwidth.
pub fn oracle_ll_at(data: &ObservationBatch, grid_x: &[f64], h: f64, kernel: &KernelSpec) -> Result<Vec<f64>> {
    validate_grid(grid_x)?;
    grid_x
        .par_iter()
        .map(|&x| local_linear_ls(data, x, h, kernel))
        .collect()
}
