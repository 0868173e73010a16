//! Pilot estimation: divide-and-conquer Nadaraya–Watson mean and variance
//! curves, and the residual error model they induce.
//!
//! Every kernel sum is computed per batch and then reduced in batch order, so
//! the result only depends on the data through per-batch partial sums.

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::local_quantile::{ObservationBatch, MAX_WIDENINGS, WIDEN_FACTOR};
use crate::numeric::{cumulative_trapezoid, interp, interp_clamped, linspace, std_dev, trapezoid, NeumaierSum};

pub const DENSITY_FLOOR: f64 = 1e-3;
pub const DENSITY_GRID_POINTS: usize = 2048;
pub const PILOT_GRID_POINTS: usize = 512;
const SIGMA_FLOOR_FRACTION: f64 = 1e-4;

/// Pilot mean and scale curves tabulated on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotCurves {
    pub grid_x: Vec<f64>,
    pub m_nw: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    /// Kernel density of the covariate, `ΣT_i / n`.
    pub f_x: Vec<f64>,
    pub h_pilot: f64,
}

impl PilotCurves {
    pub fn mean_at(&self, x: f64) -> f64 {
        interp(&self.grid_x, &self.m_nw, x)
    }

    pub fn sigma_at(&self, x: f64) -> f64 {
        interp(&self.grid_x, &self.sigma_hat, x)
    }

    pub fn density_x_at(&self, x: f64) -> f64 {
        interp(&self.grid_x, &self.f_x, x)
    }

    /// `a(x) = σ̂²(x) ∫K² / f̂_X(x)`.
    pub fn a_of_x(&self, x: f64, kernel: &KernelSpec) -> f64 {
        let s = self.sigma_at(x);
        let fx = self.density_x_at(x).max(f64::MIN_POSITIVE);
        s * s * kernel.roughness() / fx
    }
}

/// Tabulated residual density with its CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorModel {
    density_grid: Vec<f64>,
    f_eps: Vec<f64>,
    cdf: Vec<f64>,
    density_floor: f64,
    /// Residuals whose pilot curves had to be extrapolated.
    clamped: usize,
}

impl ErrorModel {
    /// Builds a model from density values on a sorted grid. The density is
    /// clipped at zero and normalized to unit trapezoid mass.
    pub fn from_density(grid: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if grid.len() != density.len() {
            return Err(Error::LengthMismatch {
                left: grid.len(),
                right: density.len(),
            });
        }
        if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput(
                "density grid must be strictly increasing with at least two points".into(),
            ));
        }
        let mut f: Vec<f64> = density
            .iter()
            .map(|&v| if v.is_finite() { v.max(0.0) } else { 0.0 })
            .collect();
        let mass = trapezoid(&grid, &f);
        if !(mass > 0.0) {
            return Err(Error::Degenerate("density has zero mass".into()));
        }
        f.iter_mut().for_each(|v| *v /= mass);
        let mut cdf = cumulative_trapezoid(&grid, &f);
        let last = *cdf.last().expect("nonempty");
        cdf.iter_mut().for_each(|c| *c = (*c / last).clamp(0.0, 1.0));
        Ok(Self {
            density_grid: grid,
            f_eps: f,
            cdf,
            density_floor: DENSITY_FLOOR,
            clamped: 0,
        })
    }

    /// Tabulates a density function on `points` equispaced abscissae.
    pub fn from_pdf<F: Fn(f64) -> f64>(pdf: F, lo: f64, hi: f64, points: usize) -> Result<Self> {
        let grid = linspace(lo, hi, points);
        let dens = grid.iter().map(|&x| pdf(x)).collect();
        Self::from_density(grid, dens)
    }

    pub fn with_density_floor(mut self, floor: f64) -> Self {
        self.density_floor = floor;
        self
    }

    pub fn density_grid(&self) -> &[f64] {
        &self.density_grid
    }

    pub fn density(&self) -> &[f64] {
        &self.f_eps
    }

    pub fn cdf_values(&self) -> &[f64] {
        &self.cdf
    }

    pub fn density_floor(&self) -> f64 {
        self.density_floor
    }

    pub fn clamped_residuals(&self) -> usize {
        self.clamped
    }

    pub fn cdf(&self, e: f64) -> f64 {
        interp(&self.density_grid, &self.cdf, e)
    }

    pub fn pdf(&self, e: f64) -> f64 {
        let (v, outside) = interp_clamped(&self.density_grid, &self.f_eps, e);
        if outside {
            0.0
        } else {
            v
        }
    }

    /// `inf { e : F̂(e) ≥ τ }` with linear interpolation inside the cell.
    pub fn quantile(&self, tau: f64) -> f64 {
        let g = &self.density_grid;
        let c = &self.cdf;
        let k = c.partition_point(|&v| v < tau);
        if k == 0 {
            return g[0];
        }
        if k >= c.len() {
            return g[g.len() - 1];
        }
        let (c0, c1) = (c[k - 1], c[k]);
        let t = if c1 > c0 { (tau - c0) / (c1 - c0) } else { 1.0 };
        g[k - 1] + t * (g[k] - g[k - 1])
    }

    /// `f̂(F̂⁻¹(τ))`, floored.
    pub fn density_at_quantile(&self, tau: f64) -> f64 {
        self.pdf(self.quantile(tau)).max(self.density_floor)
    }

    /// Grid cell width of the tabulation (the resolution of [`Self::quantile`]).
    pub fn cell_width(&self) -> f64 {
        let g = &self.density_grid;
        (g[g.len() - 1] - g[0]) / (g.len() - 1) as f64
    }

    /// Mean of the tabulated distribution.
    pub fn mean(&self) -> f64 {
        let xf: Vec<f64> = self.density_grid.iter().zip(&self.f_eps).map(|(x, f)| x * f).collect();
        trapezoid(&self.density_grid, &xf)
    }
}

pub fn quantile_inverse(em: &ErrorModel, tau: f64) -> f64 {
    em.quantile(tau)
}

pub fn density_at_quantile(em: &ErrorModel, tau: f64) -> f64 {
    em.density_at_quantile(tau)
}

/// Rule-of-thumb bandwidth `1.06 · sd · n^{-1/5}`.
pub fn rule_of_thumb(sd: f64, n: usize) -> f64 {
    1.06 * sd * (n as f64).powf(-0.2)
}

/// Pilot bandwidth from the pooled covariate spread and the mean batch size.
pub fn pilot_bandwidth(batches: &[ObservationBatch]) -> f64 {
    let xs: Vec<f64> = batches.iter().flat_map(|b| b.xs().iter().copied()).collect();
    let n_i = xs.len() / batches.len().max(1);
    rule_of_thumb(std_dev(&xs), n_i.max(1))
}

/// Per-batch `(S, T)` sums at each grid point for response `g(x, y)`.
fn partial_sums(
    batch: &ObservationBatch,
    grid: &[f64],
    hs: &[f64],
    kernel: &KernelSpec,
    g: &dyn Fn(f64, f64) -> f64,
) -> Vec<(NeumaierSum, NeumaierSum)> {
    grid.iter()
        .zip(hs)
        .map(|(&x0, &h)| {
            let (xs, ys) = batch.window(x0, h * kernel.support_radius());
            let mut s = NeumaierSum::new();
            let mut t = NeumaierSum::new();
            for (&x, &y) in xs.iter().zip(ys) {
                let w = kernel.eval_scaled(x - x0, h);
                s.add(w * g(x, y));
                t.add(w);
            }
            (s, t)
        })
        .collect()
}

/// DC kernel ratio `Σ_i S_i / Σ_i T_i` per grid point, widening the
/// bandwidth at points with no kernel mass. Returns the ratio and `ΣT_i`.
fn dc_ratio(
    batches: &[ObservationBatch],
    grid: &[f64],
    h: f64,
    kernel: &KernelSpec,
    g: &dyn Fn(f64, f64) -> f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "pilot bandwidth must be positive, got {h}"
        )));
    }
    let mut hs = vec![h; grid.len()];
    let mut ratio = vec![f64::NAN; grid.len()];
    let mut mass = vec![0.0; grid.len()];
    let mut pending: Vec<usize> = (0..grid.len()).collect();
    for round in 0..=MAX_WIDENINGS {
        let sub_grid: Vec<f64> = pending.iter().map(|&k| grid[k]).collect();
        let sub_h: Vec<f64> = pending.iter().map(|&k| hs[k]).collect();
        let mut s_tot = vec![NeumaierSum::new(); pending.len()];
        let mut t_tot = vec![NeumaierSum::new(); pending.len()];
        for b in batches {
            for (k, (s, t)) in partial_sums(b, &sub_grid, &sub_h, kernel, g).into_iter().enumerate() {
                s_tot[k].add(s.value());
                t_tot[k].add(t.value());
            }
        }
        let mut still = Vec::new();
        for (slot, &k) in pending.iter().enumerate() {
            let t = t_tot[slot].value();
            if t > 0.0 {
                ratio[k] = s_tot[slot].value() / t;
                mass[k] = t;
            } else {
                still.push(k);
            }
        }
        if still.is_empty() {
            return Ok((ratio, mass));
        }
        if round == MAX_WIDENINGS {
            return Err(Error::EmptyNeighborhood { x: grid[still[0]] });
        }
        for &k in &still {
            hs[k] *= WIDEN_FACTOR;
        }
        pending = still;
    }
    unreachable!("widening loop returns")
}

pub fn fit_nw_mean(
    batches: &[ObservationBatch],
    grid_x: &[f64],
    h_pilot: f64,
    kernel: &KernelSpec,
) -> Result<Vec<f64>> {
    dc_ratio(batches, grid_x, h_pilot, kernel, &|_, y| y).map(|(r, _)| r)
}

/// Returns `σ̂` (not `σ̂²`), floored at `1e-4 · sd(y)`.
pub fn fit_nw_variance(
    batches: &[ObservationBatch],
    m_nw_curve: &[f64],
    grid_x: &[f64],
    h_pilot: f64,
    kernel: &KernelSpec,
) -> Result<Vec<f64>> {
    if m_nw_curve.len() != grid_x.len() {
        return Err(Error::LengthMismatch {
            left: m_nw_curve.len(),
            right: grid_x.len(),
        });
    }
    let resid = |x: f64, y: f64| {
        let r = y - interp(grid_x, m_nw_curve, x);
        r * r
    };
    let (var, _) = dc_ratio(batches, grid_x, h_pilot, kernel, &resid)?;
    let floor = sigma_floor(batches);
    Ok(var.into_iter().map(|v| v.max(0.0).sqrt().max(floor)).collect())
}

fn sigma_floor(batches: &[ObservationBatch]) -> f64 {
    let ys: Vec<f64> = batches.iter().flat_map(|b| b.ys().iter().copied()).collect();
    (SIGMA_FLOOR_FRACTION * std_dev(&ys)).max(f64::MIN_POSITIVE)
}

/// Runs the NW stages on a grid spanning the pooled covariate range.
pub fn fit_pilot(batches: &[ObservationBatch], kernel: &KernelSpec) -> Result<PilotCurves> {
    fit_pilot_with(batches, kernel, pilot_bandwidth(batches))
}

pub fn fit_pilot_with(batches: &[ObservationBatch], kernel: &KernelSpec, h_pilot: f64) -> Result<PilotCurves> {
    if batches.is_empty() {
        return Err(Error::InvalidInput("no batches".into()));
    }
    let (lo, hi) = batches
        .iter()
        .flat_map(|b| b.xs().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let grid_x = if hi > lo {
        linspace(lo, hi, PILOT_GRID_POINTS)
    } else {
        vec![lo]
    };
    let (m_nw, mass) = dc_ratio(batches, &grid_x, h_pilot, kernel, &|_, y| y)?;
    let sigma_hat = fit_nw_variance(batches, &m_nw, &grid_x, h_pilot, kernel)?;
    let n: usize = batches.iter().map(|b| b.len()).sum();
    let f_x = mass.into_iter().map(|t| t / n as f64).collect();
    Ok(PilotCurves {
        grid_x,
        m_nw,
        sigma_hat,
        f_x,
        h_pilot,
    })
}

/// Standardized pilot residuals of one batch, with the number of
/// observations that fell outside the pilot grid.
pub fn standardized_residuals(batch: &ObservationBatch, pilot: &PilotCurves) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let res = batch
        .xs()
        .iter()
        .zip(batch.ys())
        .map(|(&x, &y)| {
            let (m, out) = interp_clamped(&pilot.grid_x, &pilot.m_nw, x);
            let s = interp(&pilot.grid_x, &pilot.sigma_hat, x);
            clamped += out as usize;
            (y - m) / s
        })
        .collect();
    (res, clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorModelOptions {
    /// Overrides the per-batch rule-of-thumb KDE bandwidth.
    pub h_density: Option<f64>,
    /// Rescale pooled residuals to mean 0 and variance 1 before the KDE.
    pub restandardize: bool,
}

/// Averages per-batch kernel density estimates of the standardized residuals.
pub fn estimate_error_model(
    batches: &[ObservationBatch],
    pilot: &PilotCurves,
    kernel: &KernelSpec,
    opts: ErrorModelOptions,
) -> Result<ErrorModel> {
    if batches.is_empty() {
        return Err(Error::InvalidInput("no batches".into()));
    }
    let mut clamped = 0;
    let mut residuals: Vec<Vec<f64>> = batches
        .iter()
        .map(|b| {
            let (r, c) = standardized_residuals(b, pilot);
            clamped += c;
            r
        })
        .collect();
    if opts.restandardize {
        let pooled: Vec<f64> = residuals.iter().flatten().copied().collect();
        let mu = crate::numeric::mean(&pooled);
        let sd = std_dev(&pooled);
        if sd > 0.0 {
            residuals.iter_mut().flatten().for_each(|e| *e = (*e - mu) / sd);
        }
    }
    let hs: Vec<f64> = residuals
        .iter()
        .map(|r| match opts.h_density {
            Some(h) => h,
            None => rule_of_thumb(std_dev(r), r.len()),
        })
        .collect();
    if let Some(bad) = hs.iter().position(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::Degenerate(format!(
            "residuals of batch {bad} have no spread for a density estimate"
        )));
    }
    let h_max = hs.iter().fold(0.0f64, |a, &b| a.max(b));
    let (lo, hi) = residuals
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    let reach = kernel.support_radius().min(3.0);
    let grid = linspace(lo - 3.0 * h_max * reach, hi + 3.0 * h_max * reach, DENSITY_GRID_POINTS);
    let m = batches.len() as f64;
    let mut dens = vec![0.0; grid.len()];
    for (r, &h) in residuals.iter_mut().zip(&hs) {
        r.sort_by(f64::total_cmp);
        let n_i = r.len() as f64;
        let half = h * kernel.support_radius();
        for (g, d) in grid.iter().zip(dens.iter_mut()) {
            let a = r.partition_point(|&e| e <= g - half);
            let b = r.partition_point(|&e| e < g + half);
            let mut s = NeumaierSum::new();
            for &e in &r[a..b] {
                s.add(kernel.eval_scaled(e - g, h));
            }
            *d += s.value() / n_i / m;
        }
    }
    let mut em = ErrorModel::from_density(grid, dens)?;
    em.clamped = clamped;
    Ok(em)
}
