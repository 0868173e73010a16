//! Planning of the quantile-matched composite: quantile grids, variance
//! blocks, bias-cancelling weights and bandwidths.
//!
//! Cells are addressed by batch `i` and level `j` (both zero-based) and
//! flattened as `k = i + m·j`, which is also the ascending order of the
//! levels.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::numeric::{compensated_sum, NeumaierSum};
use crate::pilot::ErrorModel;
use crate::DELTA_TAU;

pub const ROOT_FTOL: f64 = 1e-8;
pub const ROOT_MAX_ITER: usize = 200;
const RIDGE_CONDITION: f64 = 1e-12;
const SINGULAR_REL: f64 = 1e-12;
/// Keeps the root bracket strictly inside the feasible interval.
const BRACKET_EPS: f64 = 1e-10;

/// Equally spaced quantile levels shared out across batches.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid {
    m: usize,
    j: usize,
    d_tau: f64,
    tau_bar: f64,
    levels: Vec<f64>,
}

/// Level of flattened cell `k` (zero-based) for the given grid parameters.
fn level(m: usize, j: usize, d_tau: f64, tau_bar: f64, k: usize) -> f64 {
    let mj = (m * j) as f64;
    tau_bar + ((k + 1) as f64 / mj - 0.5 * (1.0 + 1.0 / mj)) * d_tau
}

/// The open interval of feasible centers for a spread `d_tau`.
pub fn feasible_tau_bar_range(d_tau: f64) -> (f64, f64) {
    (DELTA_TAU + 0.5 * d_tau, 1.0 - DELTA_TAU - 0.5 * d_tau)
}

pub fn build_quantile_grid(m: usize, j: usize, d_tau: f64, tau_bar: f64) -> Result<QuantileGrid> {
    if m == 0 || j == 0 || m * j < 2 {
        return Err(Error::InvalidInput(format!(
            "need m·J ≥ 2 quantile levels, got m = {m}, J = {j}"
        )));
    }
    if !(d_tau > 0.0 && d_tau < 1.0) {
        return Err(Error::InvalidInput(format!("d_tau must lie in (0, 1), got {d_tau}")));
    }
    let (lo, hi) = feasible_tau_bar_range(d_tau);
    if !(tau_bar >= lo - 1e-12 && tau_bar <= hi + 1e-12) {
        return Err(Error::InfeasibleGrid(format!(
            "tau_bar = {tau_bar} with d_tau = {d_tau} leaves ({DELTA_TAU}, {})",
            1.0 - DELTA_TAU
        )));
    }
    let levels = (0..m * j).map(|k| level(m, j, d_tau, tau_bar, k)).collect();
    Ok(QuantileGrid {
        m,
        j,
        d_tau,
        tau_bar,
        levels,
    })
}

impl QuantileGrid {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn d_tau(&self) -> f64 {
        self.d_tau
    }

    pub fn tau_bar(&self) -> f64 {
        self.tau_bar
    }

    pub fn cells(&self) -> usize {
        self.m * self.j
    }

    /// All levels in flattened order.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.m * j
    }

    pub fn level(&self, i: usize, j: usize) -> f64 {
        self.levels[self.index(i, j)]
    }

    /// The `J` levels assigned to batch `i`.
    pub fn block_levels(&self, i: usize) -> Vec<f64> {
        (0..self.j).map(|j| self.level(i, j)).collect()
    }

    /// Gathers the flattened entries of `v` belonging to batch `i`.
    pub fn block<T: Copy>(&self, v: &[T], i: usize) -> Vec<T> {
        (0..self.j).map(|j| v[self.index(i, j)]).collect()
    }
}

/// Finds a sign change of a monotone scalar function by bisection. Either
/// orientation is accepted.
fn bisect_root<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, what: &str) -> Result<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo.abs() < ROOT_FTOL {
        return Ok(lo);
    }
    if fhi.abs() < ROOT_FTOL {
        return Ok(hi);
    }
    let sign = if flo < 0.0 && fhi > 0.0 {
        1.0
    } else if flo > 0.0 && fhi < 0.0 {
        -1.0
    } else {
        return Err(Error::NoRoot(format!(
            "{what} keeps one sign on [{lo:.6}, {hi:.6}] ({flo:.3e}, {fhi:.3e})"
        )));
    };
    crate::numeric::bisect_increasing(|t| sign * f(t), lo, hi, ROOT_FTOL, 0.0, ROOT_MAX_ITER)
        .ok_or_else(|| Error::NoRoot(what.to_string()))
}

fn root_bracket(d_tau: f64) -> Result<(f64, f64)> {
    let (lo, hi) = feasible_tau_bar_range(d_tau);
    if !(hi > lo) {
        return Err(Error::InfeasibleGrid(format!(
            "d_tau = {d_tau} leaves no feasible center"
        )));
    }
    Ok((lo + BRACKET_EPS, hi - BRACKET_EPS))
}

/// Center at which the unweighted sum of error quantiles vanishes.
pub fn solve_tau_bar_star(em: &ErrorModel, m: usize, j: usize, d_tau: f64) -> Result<f64> {
    build_quantile_grid(m, j, d_tau, 0.5)?;
    let (lo, hi) = root_bracket(d_tau)?;
    let objective = |tb: f64| compensated_sum((0..m * j).map(|k| em.quantile(level(m, j, d_tau, tb, k))));
    bisect_root(objective, lo, hi, "sum of error quantiles")
}

/// `R` block: `(τ∧τ′ − ττ′) / (√(hh′) f(F⁻¹τ) f(F⁻¹τ′))`.
pub fn build_r_block(taus: &[f64], hs: &[f64], em: &ErrorModel) -> DMatrix<f64> {
    let dens: Vec<f64> = taus.iter().map(|&t| em.density_at_quantile(t)).collect();
    r_block_from_densities(taus, hs, &dens)
}

/// `R` block from precomputed densities at the quantiles.
pub fn r_block_from_densities(taus: &[f64], hs: &[f64], dens: &[f64]) -> DMatrix<f64> {
    let n = taus.len();
    DMatrix::from_fn(n, n, |a, b| {
        let (ta, tb) = (taus[a], taus[b]);
        (ta.min(tb) - ta * tb) / ((hs[a] * hs[b]).sqrt() * dens[a] * dens[b])
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    n: f64,
    r: DMatrix<f64>,
    /// `S_i⁻¹ = n_i R_i⁻¹`, after any ridge.
    s_inv: DMatrix<f64>,
    ridged: bool,
}

/// Block-diagonal `S = diag(R_i / n_i)` with each block inverted once.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceModel {
    m: usize,
    j: usize,
    blocks: Vec<Block>,
}

fn invert_block(r: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let j = r.nrows();
    let eig = r.clone().symmetric_eigen();
    let (min, max) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v.abs())));
    let mut work = r.clone();
    let mut ridged = false;
    if !(max > 0.0) {
        return Err(Error::SingularPlan("zero R block".into()));
    }
    if min <= max * RIDGE_CONDITION {
        let ridge = 1e-10 * r.trace() / j as f64;
        for d in 0..j {
            work[(d, d)] += ridge;
        }
        ridged = true;
    }
    let inv = match work.clone().cholesky() {
        Some(c) => c.inverse(),
        None => work
            .try_inverse()
            .ok_or_else(|| Error::SingularPlan("R block not invertible".into()))?,
    };
    Ok((inv, ridged))
}

impl VarianceModel {
    /// Builds blocks for bandwidths `hs` (flattened like the grid levels).
    pub fn new(grid: &QuantileGrid, hs: &[f64], em: &ErrorModel, batch_sizes: &[usize]) -> Result<Self> {
        let dens: Vec<f64> = grid.levels().iter().map(|&t| em.density_at_quantile(t)).collect();
        Self::from_densities(grid, hs, &dens, batch_sizes)
    }

    pub fn from_densities(grid: &QuantileGrid, hs: &[f64], dens: &[f64], batch_sizes: &[usize]) -> Result<Self> {
        let cells = grid.cells();
        if hs.len() != cells || dens.len() != cells {
            return Err(Error::LengthMismatch {
                left: hs.len().min(dens.len()),
                right: cells,
            });
        }
        if batch_sizes.len() != grid.m() {
            return Err(Error::LengthMismatch {
                left: batch_sizes.len(),
                right: grid.m(),
            });
        }
        if let Some(h) = hs.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
        }
        let blocks = (0..grid.m())
            .map(|i| r_block_from_densities(&grid.block_levels(i), &grid.block(hs, i), &grid.block(dens, i)))
            .collect();
        Self::from_r_blocks(grid, blocks, batch_sizes)
    }

    /// Wraps explicit `R` blocks, one `J×J` matrix per batch.
    pub fn from_r_blocks(grid: &QuantileGrid, r_blocks: Vec<DMatrix<f64>>, batch_sizes: &[usize]) -> Result<Self> {
        if r_blocks.len() != grid.m() || batch_sizes.len() != grid.m() {
            return Err(Error::LengthMismatch {
                left: r_blocks.len().min(batch_sizes.len()),
                right: grid.m(),
            });
        }
        let blocks = r_blocks
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                if r.nrows() != grid.j() || r.ncols() != grid.j() {
                    return Err(Error::LengthMismatch {
                        left: r.nrows(),
                        right: grid.j(),
                    });
                }
                let (r_inv, ridged) = invert_block(&r)?;
                let n = batch_sizes[i] as f64;
                Ok(Block {
                    n,
                    s_inv: r_inv * n,
                    r,
                    ridged,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            m: grid.m(),
            j: grid.j(),
            blocks,
        })
    }

    pub fn r_block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i].r
    }

    pub fn batch_size(&self, i: usize) -> f64 {
        self.blocks[i].n
    }

    pub fn ridged_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.ridged).count()
    }

    fn gather(&self, v: &[f64], i: usize) -> DVector<f64> {
        DVector::from_fn(self.j, |j, _| v[i + self.m * j])
    }

    /// `S⁻¹ v`, block by block.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (i, b) in self.blocks.iter().enumerate() {
            let x = &b.s_inv * self.gather(v, i);
            for j in 0..self.j {
                out[i + self.m * j] = x[j];
            }
        }
        out
    }

    /// `ωᵀ S ω`.
    pub fn quadratic_form(&self, w: &[f64]) -> f64 {
        compensated_sum(self.blocks.iter().enumerate().map(|(i, b)| {
            let wi = self.gather(w, i);
            wi.dot(&(&b.r * &wi)) / b.n
        }))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = NeumaierSum::new();
    for (x, y) in a.iter().zip(b) {
        s.add(x * y);
    }
    s.value()
}

/// Variance-minimizing weights subject to `Σω = 1` and `Σω q = 0`.
pub fn optimal_weights(vm: &VarianceModel, quantile_values: &[f64]) -> Result<Vec<f64>> {
    let ones = vec![1.0; quantile_values.len()];
    let d1 = vm.solve(&ones);
    let d2 = vm.solve(quantile_values);
    let c1 = dot(&d2, quantile_values);
    let c2 = dot(&d2, &ones);
    let c3 = dot(&d1, &ones);
    let det = c1 * c3 - c2 * c2;
    if !(det > SINGULAR_REL * (c1 * c3).abs()) {
        return Err(Error::SingularPlan(format!(
            "bias constraint is degenerate (c1·c3 − c2² = {det:.3e})"
        )));
    }
    let mut w: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| (c1 * a - c2 * b) / det).collect();
    // One step of iterative refinement on the two constraints; the
    // correction lies in span(d1, d2) so optimality is preserved.
    let r1 = compensated_sum(w.iter().copied()) - 1.0;
    let r2 = dot(&w, quantile_values);
    let alpha = (c1 * r1 - c2 * r2) / det;
    let beta = (c3 * r2 - c2 * r1) / det;
    for (wk, (a, b)) in w.iter_mut().zip(d1.iter().zip(&d2)) {
        *wk -= alpha * a + beta * b;
    }
    Ok(w)
}

/// Unit-bandwidth-exponent bandwidths `h_ij = n_i^{-ν}`.
pub fn unit_alpha_bandwidths(grid: &QuantileGrid, batch_sizes: &[usize], nu: f64) -> Vec<f64> {
    (0..grid.cells())
        .map(|k| (batch_sizes[k % grid.m()] as f64).powf(-nu))
        .collect()
}

/// `τ̄**` and the weights `S⁻¹1 / 1ᵀS⁻¹1` at that center.
pub fn solve_tau_bar_2star_and_weights(
    em: &ErrorModel,
    m: usize,
    j: usize,
    d_tau: f64,
    nu: f64,
    batch_sizes: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let probe = build_quantile_grid(m, j, d_tau, 0.5)?;
    let hs = unit_alpha_bandwidths(&probe, batch_sizes, nu);
    let (lo, hi) = root_bracket(d_tau)?;
    let setup = |tb: f64| -> Result<(QuantileGrid, VarianceModel, Vec<f64>)> {
        let grid = build_quantile_grid(m, j, d_tau, tb)?;
        let vm = VarianceModel::new(&grid, &hs, em, batch_sizes)?;
        let q = grid.levels().iter().map(|&t| em.quantile(t)).collect();
        Ok((grid, vm, q))
    };
    let mut failure = None;
    let objective = |tb: f64| match setup(tb) {
        Ok((_, vm, q)) => compensated_sum(vm.solve(&q)),
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    let tb = bisect_root(objective, lo, hi, "weighted sum of error quantiles");
    if let Some(e) = failure {
        return Err(e);
    }
    let tb = tb?;
    let (_, vm, _) = setup(tb)?;
    let d3 = vm.solve(&vec![1.0; m * j]);
    let total = compensated_sum(d3.iter().copied());
    Ok((tb, d3.into_iter().map(|v| v / total).collect()))
}

/// `a(x) ωᵀ S ω`.
pub fn asymptotic_variance(a_x: f64, vm: &VarianceModel, weights: &[f64]) -> f64 {
    a_x * vm.quadratic_form(weights)
}

/// `ν* = ln n / (5 (ln n − ln m))`.
pub fn bandwidth_parameters(n: usize, m: usize) -> Result<f64> {
    if !(m >= 1 && n > m) {
        return Err(Error::InvalidInput(format!("need n > m ≥ 1, got n = {n}, m = {m}")));
    }
    let ln_n = (n as f64).ln();
    Ok(ln_n / (5.0 * (ln_n - (m as f64).ln())))
}

/// `V(ω, τ) = Σ (n / n_i) ω_iᵀ R₁ ω_i`; `vm_unit` must be built with unit bandwidths.
pub fn v_factor(weights: &[f64], vm_unit: &VarianceModel) -> f64 {
    let n: f64 = vm_unit.blocks.iter().map(|b| b.n).sum();
    n * vm_unit.quadratic_form(weights)
}

pub fn shortcut_bandwidth(h_oll: f64, weights: &[f64], vm_unit: &VarianceModel) -> Result<f64> {
    let v = v_factor(weights, vm_unit);
    if !(h_oll > 0.0 && v > 0.0) {
        return Err(Error::InvalidInput(format!(
            "short-cut rule needs h_oll > 0 and V > 0, got {h_oll} and {v}"
        )));
    }
    Ok(v.powf(0.2) * h_oll)
}

/// `V^{-4/5}`.
pub fn compute_are(weights: &[f64], vm_unit: &VarianceModel) -> f64 {
    v_factor(weights, vm_unit).powf(-0.8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    Pointwise,
    Constant,
}

/// Bandwidths from the curvature plug-in.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthChoice {
    /// Constant-mode `h_ij = α n_i^{-ν}`, flattened.
    pub h: Vec<f64>,
    /// Pointwise mode only: `α(x) / α` per evaluation point.
    pub pointwise_scale: Option<Vec<f64>>,
    /// Points where the aggregated curvature vanished.
    pub flat_points: usize,
}

/// Trapezoid weights of `W`, uniform on the central 90% of `grid_x`.
pub fn central_weight(grid_x: &[f64]) -> Vec<f64> {
    let n = grid_x.len();
    if n < 2 {
        return vec![1.0; n];
    }
    let (lo, hi) = (grid_x[0], grid_x[n - 1]);
    let trim = 0.05 * (hi - lo);
    let inside = |x: f64| x >= lo + trim && x <= hi - trim;
    let mut w = vec![0.0; n];
    for k in 1..n {
        if inside(grid_x[k - 1]) && inside(grid_x[k]) {
            let half = 0.5 * (grid_x[k] - grid_x[k - 1]);
            w[k - 1] += half;
            w[k] += half;
        }
    }
    w
}

/// Plug-in `α*` and the resulting bandwidths.
///
/// `a_x` holds `a(x)` and `beta[k]` holds `β̂(x, τ_k)` on `grid_x`.
#[allow(clippy::too_many_arguments)]
pub fn optimal_alpha_and_h(
    a_x: &[f64],
    beta: &[Vec<f64>],
    weights: &[f64],
    grid: &QuantileGrid,
    vm_unit: &VarianceModel,
    batch_sizes: &[usize],
    nu: f64,
    mode: AlphaMode,
    grid_x: &[f64],
) -> Result<BandwidthChoice> {
    let cells = grid.cells();
    if beta.len() != cells || weights.len() != cells {
        return Err(Error::LengthMismatch {
            left: beta.len().min(weights.len()),
            right: cells,
        });
    }
    let g = grid_x.len();
    if a_x.len() != g || beta.iter().any(|b| b.len() != g) {
        return Err(Error::LengthMismatch {
            left: a_x.len(),
            right: g,
        });
    }
    let n_pow = |k: usize, e: f64| (batch_sizes[k % grid.m()] as f64).powf(e);
    // Σ_i n_i^{ν−1} ω_iᵀ R₁ ω_i, independent of x.
    let var_sum = compensated_sum((0..grid.m()).map(|i| {
        let wi = DVector::from_vec(grid.block(weights, i));
        (batch_sizes[i] as f64).powf(nu - 1.0) * wi.dot(&(vm_unit.r_block(i) * &wi))
    }));
    let a1: Vec<f64> = (0..g)
        .map(|x| {
            let b = compensated_sum((0..cells).map(|k| weights[k] * n_pow(k, -2.0 * nu) * beta[k][x]));
            b * b
        })
        .collect();
    let a2: Vec<f64> = a_x.iter().map(|a| a * var_sum).collect();
    let w = central_weight(grid_x);
    let num = dot(&a2, &w);
    let den = dot(&a1, &w);
    let scale = a1.iter().fold(0.0f64, |m, v| m.max(*v));
    if !(den > 1e-14 * scale * w.iter().sum::<f64>()) || !(den > 0.0) {
        return Err(Error::FlatCurvature { x: f64::NAN });
    }
    let alpha = (num / (4.0 * den)).powf(0.2);
    let h = (0..cells).map(|k| alpha * n_pow(k, -nu)).collect();
    let mut flat_points = 0;
    let pointwise_scale = match mode {
        AlphaMode::Constant => None,
        AlphaMode::Pointwise => Some(
            (0..g)
                .map(|x| {
                    if a1[x] > 1e-10 * scale && a2[x] > 0.0 {
                        (a2[x] / (4.0 * a1[x])).powf(0.2) / alpha
                    } else {
                        flat_points += 1;
                        1.0
                    }
                })
                .collect(),
        ),
    };
    Ok(BandwidthChoice {
        h,
        pointwise_scale,
        flat_points,
    })
}

/// The matched `(ω, τ, h)` triple for every local fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositePlan {
    pub grid: QuantileGrid,
    pub weights: Vec<f64>,
    pub bandwidths: Vec<f64>,
    pub kernel: KernelSpec,
    pub quantile_values: Vec<f64>,
    /// Optional per-evaluation-point bandwidth multipliers `(x, factor)`.
    pub pointwise_scale: Option<(Vec<f64>, Vec<f64>)>,
}

impl CompositePlan {
    pub fn new(
        grid: QuantileGrid,
        weights: Vec<f64>,
        bandwidths: Vec<f64>,
        kernel: KernelSpec,
        quantile_values: Vec<f64>,
    ) -> Result<Self> {
        let cells = grid.cells();
        for (name, len) in [
            ("weights", weights.len()),
            ("bandwidths", bandwidths.len()),
            ("quantile values", quantile_values.len()),
        ] {
            if len != cells {
                return Err(Error::InvalidInput(format!("plan has {len} {name} for {cells} cells")));
            }
        }
        if let Some(h) = bandwidths.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
        }
        Ok(Self {
            grid,
            weights,
            bandwidths,
            kernel,
            quantile_values,
            pointwise_scale: None,
        })
    }

    pub fn with_pointwise_scale(mut self, grid_x: Vec<f64>, factor: Vec<f64>) -> Self {
        self.pointwise_scale = Some((grid_x, factor));
        self
    }

    /// `(Σω − 1, Σω q)`.
    pub fn constraint_residuals(&self) -> (f64, f64) {
        (
            compensated_sum(self.weights.iter().copied()) - 1.0,
            dot(&self.weights, &self.quantile_values),
        )
    }

    /// Bandwidth of cell `k` at evaluation point `x`.
    pub fn bandwidth_at(&self, k: usize, x: f64) -> f64 {
        match &self.pointwise_scale {
            Some((gx, f)) => self.bandwidths[k] * crate::numeric::interp(gx, f, x),
            None => self.bandwidths[k],
        }
    }

    /// Text form: `key = value` header lines, then one whitespace-separated
    /// record `i j tau omega h q` per cell. Numbers use shortest round-trip
    /// decimals so a parsed plan is bit-identical.
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let mut s = String::new();
        let _ = writeln!(s, "# composite plan v1");
        let _ = writeln!(s, "kernel = {}", self.kernel.family());
        let _ = writeln!(s, "kernel_radius = {:?}", self.kernel.support_radius());
        let _ = writeln!(s, "m = {}", g.m());
        let _ = writeln!(s, "J = {}", g.j());
        let _ = writeln!(s, "d_tau = {:?}", g.d_tau());
        let _ = writeln!(s, "tau_bar = {:?}", g.tau_bar());
        if let Some((gx, f)) = &self.pointwise_scale {
            let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
            let _ = writeln!(s, "scale_x = {}", join(gx));
            let _ = writeln!(s, "scale_factor = {}", join(f));
        }
        let _ = writeln!(s, "i j tau omega h q");
        for j in 0..g.j() {
            for i in 0..g.m() {
                let k = g.index(i, j);
                let _ = writeln!(
                    s,
                    "{} {} {:?} {:?} {:?} {:?}",
                    i + 1,
                    j + 1,
                    g.levels()[k],
                    self.weights[k],
                    self.bandwidths[k],
                    self.quantile_values[k]
                );
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut header = std::collections::HashMap::new();
        let mut records = Vec::new();
        let mut in_body = false;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = ln + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !in_body {
                if line == "i j tau omega h q" {
                    in_body = true;
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("expected 'key = value', got '{line}'"),
                })?;
                header.insert(k.trim().to_string(), (lineno, v.trim().to_string()));
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 6 fields, got {}", fields.len()),
                });
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad number '{s}': {e}"),
                })
            };
            let idx = |s: &str| {
                s.parse::<usize>().ok().filter(|&v| v >= 1).ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("bad index '{s}'"),
                })
            };
            records.push((
                lineno,
                idx(fields[0])? - 1,
                idx(fields[1])? - 1,
                [num(fields[2])?, num(fields[3])?, num(fields[4])?, num(fields[5])?],
            ));
        }
        let get = |key: &str| {
            header.get(key).cloned().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing header '{key}'"),
            })
        };
        fn parse<T: std::str::FromStr>(key: &str, (line, v): (usize, String)) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad value for '{key}': '{v}'"),
            })
        }
        let family: crate::kernels::KernelFamily = get("kernel")?.1.parse()?;
        let radius: f64 = parse("kernel_radius", get("kernel_radius")?)?;
        let kernel = KernelSpec::new(family, radius)?;
        let m: usize = parse("m", get("m")?)?;
        let j: usize = parse("J", get("J")?)?;
        let d_tau: f64 = parse("d_tau", get("d_tau")?)?;
        let tau_bar: f64 = parse("tau_bar", get("tau_bar")?)?;
        let grid = build_quantile_grid(m, j, d_tau, tau_bar)?;
        let cells = grid.cells();
        if records.len() != cells {
            return Err(Error::Parse {
                line: 0,
                msg: format!("expected {cells} cell records, found {}", records.len()),
            });
        }
        let mut weights = vec![f64::NAN; cells];
        let mut hs = vec![f64::NAN; cells];
        let mut qs = vec![f64::NAN; cells];
        for (line, i, jj, [tau, w, h, q]) in records {
            if i >= m || jj >= j {
                return Err(Error::Parse {
                    line,
                    msg: format!("cell ({}, {}) outside the grid", i + 1, jj + 1),
                });
            }
            let k = grid.index(i, jj);
            if tau != grid.levels()[k] {
                return Err(Error::Parse {
                    line,
                    msg: format!("level {tau} does not match the regenerated grid"),
                });
            }
            weights[k] = w;
            hs[k] = h;
            qs[k] = q;
        }
        let mut plan = Self::new(grid, weights, hs, kernel, qs)?;
        if let (Ok(gx), Ok(f)) = (get("scale_x"), get("scale_factor")) {
            let vec = |(line, v): (usize, String)| -> Result<Vec<f64>> {
                v.split_whitespace()
                    .map(|s| {
                        s.parse::<f64>().map_err(|_| Error::Parse {
                            line,
                            msg: format!("bad number '{s}'"),
                        })
                    })
                    .collect()
            };
            let (gx, f) = (vec(gx)?, vec(f)?);
            if gx.len() != f.len() || gx.is_empty() {
                return Err(Error::Parse {
                    line: 0,
                    msg: "scale_x and scale_factor lengths differ".into(),
                });
            }
            plan.pointwise_scale = Some((gx, f));
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Continuous, Normal};

    fn normal() -> ErrorModel {
        let n = Normal::new(0.0, 1.0).unwrap();
        ErrorModel::from_pdf(|x| n.pdf(x), -8.0, 8.0, 8001).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn grid_examples() {
        let g = build_quantile_grid(1, 5, 0.5, 0.5).unwrap();
        assert!(close(g.levels(), &[0.3, 0.4, 0.5, 0.6, 0.7], 1e-15));
        let g = build_quantile_grid(2, 1, 0.5, 0.5).unwrap();
        assert!(close(g.levels(), &[0.375, 0.625], 1e-15));
        assert!(matches!(
            build_quantile_grid(1, 5, 0.5, 0.8),
            Err(Error::InfeasibleGrid(_))
        ));
        assert!(build_quantile_grid(1, 1, 0.5, 0.5).is_err());
    }

    #[test]
    fn grid_blocks_follow_flattened_index() {
        let g = build_quantile_grid(3, 2, 0.6, 0.5).unwrap();
        assert!(g.levels().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.block_levels(1), vec![g.levels()[1], g.levels()[4]]);
    }

    #[test]
    fn r_block_examples() {
        let r = build_r_block(&[0.5], &[1.0], &normal());
        assert!((r[(0, 0)] - std::f64::consts::FRAC_PI_2).abs() < 1e-3);
        let r = r_block_from_densities(&[0.25, 0.75], &[1.0, 1.0], &[1.0, 1.0]);
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[0.1875, 0.0625, 0.0625, 0.1875]));
        let r2 = r_block_from_densities(&[0.25, 0.75], &[3.0, 3.0], &[1.0, 1.0]);
        assert!((r2 * 3.0 - r).amax() < 1e-15);
    }

    #[test]
    fn symmetric_pair_weights() {
        let g = build_quantile_grid(1, 2, 0.5, 0.5).unwrap();
        let vm = VarianceModel::from_r_blocks(&g, vec![DMatrix::identity(2, 2)], &[1]).unwrap();
        let w = optimal_weights(&vm, &[-1.0, 1.0]).unwrap();
        assert!(close(&w, &[0.5, 0.5], 1e-14));
        assert!(matches!(optimal_weights(&vm, &[0.3, 0.3]), Err(Error::SingularPlan(_))));
    }

    #[test]
    fn nu_star_values() {
        assert!((bandwidth_parameters(10000, 1).unwrap() - 0.2).abs() < 1e-15);
        assert!((bandwidth_parameters(10000, 10).unwrap() - 0.26667).abs() < 1e-4);
        assert!((bandwidth_parameters(10000, 50).unwrap() - 0.34773).abs() < 1e-4);
        assert!(bandwidth_parameters(10, 10).is_err());
    }

    #[test]
    fn shortcut_and_are_for_normal_median() {
        let em = normal();
        let g = build_quantile_grid(2, 1, 0.02, 0.5).unwrap();
        // Two batches at essentially the median: V ≈ π/2 with uniform weights.
        let vm = VarianceModel::new(&g, &[1.0, 1.0], &em, &[500, 500]).unwrap();
        let v = v_factor(&[0.5, 0.5], &vm);
        let r = build_r_block(&[0.5], &[1.0], &em)[(0, 0)];
        assert!((v - r).abs() < 1e-3);
        let h = shortcut_bandwidth(0.2, &[0.5, 0.5], &vm).unwrap();
        assert!((h / 0.2 - v.powf(0.2)).abs() < 1e-14);
        assert!((compute_are(&[0.5, 0.5], &vm) - v.powf(-0.8)).abs() < 1e-14);
        assert!((std::f64::consts::FRAC_PI_2.powf(0.2) - 1.0945).abs() < 1e-4);
        assert!((std::f64::consts::FRAC_PI_2.powf(-0.8) - 0.6968).abs() < 1e-4);
    }

    #[test]
    fn plan_text_round_trip() {
        let g = build_quantile_grid(2, 2, 0.5, 0.55).unwrap();
        let plan = CompositePlan::new(
            g,
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.11, 0.12, 0.13, 0.1 + 0.2],
            KernelSpec::epanechnikov(),
            vec![-0.7, -0.1, 0.2, 1.0 / 3.0],
        )
        .unwrap()
        .with_pointwise_scale(vec![0.0, 1.0], vec![1.0, 0.9]);
        let back = CompositePlan::from_text(&plan.to_text()).unwrap();
        assert_eq!(back, plan);
        assert!(matches!(
            CompositePlan::from_text("kernel = epanechnikov\nm = x\n"),
            Err(Error::Parse { .. })
        ));
    }
}
