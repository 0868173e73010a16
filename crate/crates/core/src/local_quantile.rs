//! Weighted check-loss minimization and the local polynomial fits built on it.
//!
//! The solver works in three phases. A smoothed check loss (Huber-type
//! smoothing of the kink, smoothing width shrunk geometrically over six
//! stages) is minimized by damped Newton from the weighted least-squares
//! start. The result seeds an exact vertex descent on the piecewise-linear
//! objective: from a basis of `p` interpolated points, move along the most
//! descending edge with an exact line search until no edge descends. The
//! returned point is then certified by one-sided coordinate derivatives; if
//! certification fails, exact coordinate line searches refine it.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::numeric::interquartile_range;
use crate::DELTA_TAU;

/// Minimum number of positively weighted points before a local fit widens its bandwidth.
pub const MIN_EFFECTIVE_N: usize = 10;
pub const WIDEN_FACTOR: f64 = 1.5;
pub const MAX_WIDENINGS: u32 = 4;

const SMOOTHING_STAGES: usize = 6;
const SMOOTHING_FACTOR: f64 = 0.25;
const NEWTON_MAX_ITER: usize = 50;
const CERT_TOL: f64 = 1e-6;

/// One logical machine's sample. Observations are also kept sorted by `x`
/// so that kernel windows are found by binary search.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    xs: Vec<f64>,
    ys: Vec<f64>,
    batch_id: usize,
    sorted_x: Vec<f64>,
    sorted_y: Vec<f64>,
}

impl ObservationBatch {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, batch_id: usize) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::LengthMismatch {
                left: xs.len(),
                right: ys.len(),
            });
        }
        if xs.is_empty() {
            return Err(Error::InvalidInput(format!("batch {batch_id} is empty")));
        }
        if let Some(k) = xs.iter().zip(&ys).position(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "batch {batch_id}: non-finite observation at index {k}"
            )));
        }
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let sorted_x = order.iter().map(|&k| xs[k]).collect();
        let sorted_y = order.iter().map(|&k| ys[k]).collect();
        Ok(Self {
            xs,
            ys,
            batch_id,
            sorted_x,
            sorted_y,
        })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn batch_id(&self) -> usize {
        self.batch_id
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Observations with `|x - x0| < half_width`, sorted by `x`.
    pub fn window(&self, x0: f64, half_width: f64) -> (&[f64], &[f64]) {
        let lo = self.sorted_x.partition_point(|&x| x <= x0 - half_width);
        let hi = self.sorted_x.partition_point(|&x| x < x0 + half_width);
        let hi = hi.max(lo);
        (&self.sorted_x[lo..hi], &self.sorted_y[lo..hi])
    }

    /// Same observations with a transformed response.
    pub fn map_y<F: Fn(f64) -> f64>(&self, f: F) -> Self {
        let ys = self.ys.iter().map(|&y| f(y)).collect();
        Self::new(self.xs.clone(), ys, self.batch_id).expect("finite map of a valid batch")
    }

    pub fn with_id(mut self, batch_id: usize) -> Self {
        self.batch_id = batch_id;
        self
    }
}

/// A weighted observation of a local design, with `x` already centered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPoint {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLossSolution {
    /// Polynomial coefficients, constant term first.
    pub coef: Vec<f64>,
    pub objective: f64,
    pub certified: bool,
}

/// Result of a local linear quantile fit at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFit {
    /// The local quantile curve value at `x0`.
    pub a_hat: f64,
    pub b_hat: f64,
    pub effective_n: usize,
    pub converged: bool,
    /// Bandwidth actually used after widening.
    pub bandwidth: f64,
    pub widenings: u32,
}

#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

#[inline]
fn poly(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// `Σ w ρ_τ(y − poly(x))`.
pub fn check_objective(design: &[WeightedPoint], tau: f64, coef: &[f64]) -> f64 {
    design
        .iter()
        .map(|p| p.w * check_loss(p.y - poly(coef, p.x), tau))
        .sum()
}

/// One-sided derivative of the check objective at `coef` along `dir`.
///
/// Residuals within a relative `1e-10` of zero are treated as kinks.
pub fn directional_derivative(design: &[WeightedPoint], tau: f64, coef: &[f64], dir: &[f64]) -> f64 {
    let scale = 1.0 + design.iter().fold(0.0f64, |m, p| m.max(p.y.abs()));
    let ztol = 1e-10 * scale;
    design
        .iter()
        .map(|p| {
            let r = p.y - poly(coef, p.x);
            let c = poly(dir, p.x);
            p.w * if r.abs() <= ztol {
                check_loss(-c, tau)
            } else if r > 0.0 {
                -c * tau
            } else {
                c * (1.0 - tau)
            }
        })
        .sum()
}

/// Subgradient certificate: every one-sided coordinate derivative is at
/// least `−1e-6 · Σw`.
pub fn certify(design: &[WeightedPoint], tau: f64, coef: &[f64]) -> bool {
    let total_w: f64 = design.iter().map(|p| p.w).sum();
    let mut dir = vec![0.0; coef.len()];
    for k in 0..coef.len() {
        for s in [1.0, -1.0] {
            dir.iter_mut().for_each(|d| *d = 0.0);
            dir[k] = s;
            if directional_derivative(design, tau, coef, &dir) < -CERT_TOL * total_w {
                return false;
            }
        }
    }
    true
}

/// Minimizes `Σ w ρ_τ(y − poly(x))` over polynomials of the given degree.
pub fn solve_weighted_check_loss(design: &[WeightedPoint], tau: f64, degree: usize) -> Result<CheckLossSolution> {
    if !(tau > DELTA_TAU && tau < 1.0 - DELTA_TAU) {
        return Err(Error::InvalidInput(format!(
            "quantile level {tau} outside ({DELTA_TAU}, {})",
            1.0 - DELTA_TAU
        )));
    }
    let pts: Vec<WeightedPoint> = design
        .iter()
        .copied()
        .filter(|p| p.w > 0.0 && p.w.is_finite())
        .collect();
    let need = degree + 2;
    if pts.len() < need {
        return Err(Error::InsufficientLocalData { have: pts.len(), need });
    }
    let mut xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < degree + 1 {
        return Err(Error::Degenerate(format!(
            "{} distinct design points cannot identify a degree-{degree} fit",
            xs.len()
        )));
    }
    match degree {
        1 => Ok(solve_fixed::<2>(&pts, tau)),
        2 => Ok(solve_fixed::<3>(&pts, tau)),
        d => Err(Error::InvalidInput(format!("unsupported degree {d}"))),
    }
}

struct Problem<const P: usize> {
    phi: Vec<SVector<f64, P>>,
    y: Vec<f64>,
    w: Vec<f64>,
    tau: f64,
    /// Residuals this small count as zero.
    ztol: f64,
}

impl<const P: usize> Problem<P> {
    fn objective(&self, theta: &SVector<f64, P>) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.y.len() {
            acc += self.w[k] * check_loss(self.y[k] - self.phi[k].dot(theta), self.tau);
        }
        acc
    }

    fn smoothed(&self, theta: &SVector<f64, P>, kappa: f64) -> f64 {
        let t = self.tau - 0.5;
        let mut acc = 0.0;
        for k in 0..self.y.len() {
            let r = self.y[k] - self.phi[k].dot(theta);
            let h = if r.abs() <= kappa {
                r * r / (2.0 * kappa) + 0.5 * kappa
            } else {
                r.abs()
            };
            acc += self.w[k] * (t * r + 0.5 * h);
        }
        acc
    }

    fn least_squares(&self) -> Option<SVector<f64, P>> {
        let mut a = SMatrix::<f64, P, P>::zeros();
        let mut b = SVector::<f64, P>::zeros();
        for k in 0..self.y.len() {
            a += self.phi[k] * self.phi[k].transpose() * self.w[k];
            b += self.phi[k] * (self.w[k] * self.y[k]);
        }
        a.cholesky().map(|c| c.solve(&b))
    }

    fn newton_stages(&self, mut theta: SVector<f64, P>, kappa0: f64) -> SVector<f64, P> {
        let t = self.tau - 0.5;
        let mut full = SMatrix::<f64, P, P>::zeros();
        for k in 0..self.y.len() {
            full += self.phi[k] * self.phi[k].transpose() * self.w[k];
        }
        let base_ridge = 1e-8 * full.trace() / P as f64;
        let mut kappa = kappa0;
        for _ in 0..SMOOTHING_STAGES {
            let ridge = base_ridge / (2.0 * kappa);
            for _ in 0..NEWTON_MAX_ITER {
                let mut grad = SVector::<f64, P>::zeros();
                let mut hess = SMatrix::<f64, P, P>::identity() * ridge;
                for k in 0..self.y.len() {
                    let r = self.y[k] - self.phi[k].dot(&theta);
                    let psi = t + 0.5 * (r / kappa).clamp(-1.0, 1.0);
                    grad -= self.phi[k] * (self.w[k] * psi);
                    if r.abs() < kappa {
                        hess += self.phi[k] * self.phi[k].transpose() * (self.w[k] / (2.0 * kappa));
                    }
                }
                let step = match hess.cholesky() {
                    Some(c) => -c.solve(&grad),
                    None => -grad / hess.trace().max(f64::MIN_POSITIVE),
                };
                let f0 = self.smoothed(&theta, kappa);
                let slope = grad.dot(&step);
                if slope >= 0.0 {
                    break;
                }
                let mut s = 1.0;
                let mut accepted = false;
                for _ in 0..60 {
                    let cand = theta + step * s;
                    if self.smoothed(&cand, kappa) <= f0 + 1e-4 * s * slope {
                        theta = cand;
                        accepted = true;
                        break;
                    }
                    s *= 0.5;
                }
                if !accepted || (step * s).amax() <= 1e-12 * (1.0 + theta.amax()) {
                    break;
                }
            }
            kappa *= SMOOTHING_FACTOR;
        }
        theta
    }

    /// Exact minimizer of `t ↦ Σ w ρ_τ(r − t c)`.
    ///
    /// Returns the step and the index whose kink it lands on.
    fn line_minimize(&self, r: &[f64], c: &[f64], skip: Option<usize>) -> Option<(f64, usize)> {
        let mut slope = 0.0;
        let mut kinks: Vec<(f64, f64, usize)> = Vec::with_capacity(r.len());
        for k in 0..r.len() {
            if Some(k) == skip || c[k] == 0.0 {
                continue;
            }
            let wc = self.w[k] * c[k].abs();
            slope -= if c[k] > 0.0 {
                self.tau * wc
            } else {
                (1.0 - self.tau) * wc
            };
            kinks.push((r[k] / c[k], wc, k));
        }
        if kinks.is_empty() {
            return None;
        }
        kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(t, wc, k) in &kinks {
            slope += wc;
            if slope >= 0.0 {
                return Some((t, k));
            }
        }
        kinks.last().map(|&(t, _, k)| (t, k))
    }

    fn initial_basis(&self, theta: &SVector<f64, P>) -> Option<[usize; P]> {
        let mut order: Vec<usize> = (0..self.y.len()).collect();
        let res: Vec<f64> = (0..self.y.len())
            .map(|k| (self.y[k] - self.phi[k].dot(theta)).abs())
            .collect();
        order.sort_by(|&a, &b| res[a].total_cmp(&res[b]));
        let mut basis = [0usize; P];
        let mut ortho: Vec<SVector<f64, P>> = Vec::with_capacity(P);
        let mut filled = 0;
        for &k in &order {
            let mut v = self.phi[k];
            for q in &ortho {
                v -= q * q.dot(&v);
            }
            if v.norm() > 1e-9 * self.phi[k].norm().max(1e-300) {
                ortho.push(v.normalize());
                basis[filled] = k;
                filled += 1;
                if filled == P {
                    return Some(basis);
                }
            }
        }
        None
    }

    fn basis_matrix(&self, basis: &[usize; P]) -> SMatrix<f64, P, P> {
        let mut m = SMatrix::<f64, P, P>::zeros();
        for (row, &k) in basis.iter().enumerate() {
            m.set_row(row, &self.phi[k].transpose());
        }
        m
    }

    /// Edge-following descent over vertices of the piecewise-linear objective.
    fn vertex_descent(&self, theta: SVector<f64, P>) -> Option<SVector<f64, P>> {
        let n = self.y.len();
        let mut basis = self.initial_basis(&theta)?;
        let mut inv = self.basis_matrix(&basis).try_inverse()?;
        let yb = SVector::<f64, P>::from_fn(|r, _| self.y[basis[r]]);
        let mut theta = inv * yb;
        let mut r = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut obj = self.objective(&theta);
        for _ in 0..(20 * n + 100) {
            for k in 0..n {
                r[k] = self.y[k] - self.phi[k].dot(&theta);
            }
            // Most descending edge.
            let mut best: Option<(f64, usize, f64)> = None;
            for (q, &bq) in basis.iter().enumerate() {
                let col = inv.column(q).into_owned();
                let mut deriv_pos = 0.0;
                let mut deriv_neg = 0.0;
                for k in 0..n {
                    if basis.contains(&k) {
                        continue;
                    }
                    let ck = self.phi[k].dot(&col);
                    let (dp, dn) = if r[k].abs() <= self.ztol {
                        (check_loss(-ck, self.tau), check_loss(ck, self.tau))
                    } else if r[k] > 0.0 {
                        (-ck * self.tau, ck * self.tau)
                    } else {
                        (ck * (1.0 - self.tau), -ck * (1.0 - self.tau))
                    };
                    deriv_pos += self.w[k] * dp;
                    deriv_neg += self.w[k] * dn;
                }
                // The leaving basis point's own residual moves by ∓1.
                deriv_pos += self.w[bq] * (1.0 - self.tau);
                deriv_neg += self.w[bq] * self.tau;
                for (d, s) in [(deriv_pos, 1.0), (deriv_neg, -1.0)] {
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, q, s));
                    }
                }
            }
            let (d, q, s) = best?;
            let wsum: f64 = self.w.iter().sum();
            if d >= -1e-13 * wsum {
                return Some(theta);
            }
            let dir = inv.column(q).into_owned() * s;
            for k in 0..n {
                c[k] = self.phi[k].dot(&dir);
            }
            let (t, enter) = self.line_minimize(&r, &c, None)?;
            if !(t > 0.0) || basis.contains(&enter) {
                // Degenerate pivot; let the certificate decide.
                return Some(theta);
            }
            let cand = theta + dir * t;
            let cand_obj = self.objective(&cand);
            if cand_obj > obj {
                return Some(theta);
            }
            let mut next = basis;
            next[q] = enter;
            let Some(next_inv) = self.basis_matrix(&next).try_inverse() else {
                return Some(theta);
            };
            basis = next;
            inv = next_inv;
            let yb = SVector::<f64, P>::from_fn(|row, _| self.y[basis[row]]);
            theta = inv * yb;
            obj = self.objective(&theta).min(cand_obj);
        }
        Some(theta)
    }

    fn coordinate_refine(
        &self,
        mut theta: SVector<f64, P>,
        certified: impl Fn(&SVector<f64, P>) -> bool,
    ) -> SVector<f64, P> {
        let n = self.y.len();
        let mut r = vec![0.0; n];
        let mut c = vec![0.0; n];
        for _ in 0..500 {
            for q in 0..P {
                for k in 0..n {
                    r[k] = self.y[k] - self.phi[k].dot(&theta);
                    c[k] = self.phi[k][q];
                }
                if let Some((t, _)) = self.line_minimize(&r, &c, None) {
                    let mut cand = theta;
                    cand[q] += t;
                    if self.objective(&cand) <= self.objective(&theta) {
                        theta = cand;
                    }
                }
            }
            if certified(&theta) {
                break;
            }
        }
        theta
    }
}

fn solve_fixed<const P: usize>(pts: &[WeightedPoint], tau: f64) -> CheckLossSolution {
    // Work on x scaled to [-1, 1] for conditioning.
    let scale = pts.iter().fold(0.0f64, |m, p| m.max(p.x.abs())).max(f64::MIN_POSITIVE);
    let phi = pts
        .iter()
        .map(|p| {
            let u = p.x / scale;
            SVector::<f64, P>::from_fn(|k, _| u.powi(k as i32))
        })
        .collect();
    let y: Vec<f64> = pts.iter().map(|p| p.y).collect();
    let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let prob = Problem::<P> {
        phi,
        w: pts.iter().map(|p| p.w).collect(),
        tau,
        ztol: 1e-12 * (1.0 + ymax),
        y,
    };
    let unscale = |theta: &SVector<f64, P>| -> Vec<f64> { (0..P).map(|k| theta[k] / scale.powi(k as i32)).collect() };

    let start = prob.least_squares().unwrap_or_else(|| {
        let mut t = SVector::<f64, P>::zeros();
        t[0] = prob.y.iter().sum::<f64>() / prob.y.len() as f64;
        t
    });
    let spread = interquartile_range(&prob.y);
    let kappa0 = if spread > 0.0 {
        spread / 10.0
    } else {
        let (lo, hi) = prob
            .y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        ((hi - lo) / 10.0).max(1e-8 * (1.0 + ymax))
    };
    let smoothed = prob.newton_stages(start, kappa0);
    let mut theta = match prob.vertex_descent(smoothed) {
        Some(v) if prob.objective(&v) <= prob.objective(&smoothed) => v,
        _ => smoothed,
    };
    let is_cert = |t: &SVector<f64, P>| certify(pts, tau, &unscale(t));
    let mut certified = is_cert(&theta);
    if !certified {
        theta = prob.coordinate_refine(theta, is_cert);
        certified = is_cert(&theta);
    }
    let coef = unscale(&theta);
    CheckLossSolution {
        objective: check_objective(pts, tau, &coef),
        coef,
        certified,
    }
}

/// Kernel-weighted local design around `x0`, with centered abscissae.
pub fn local_design(batch: &ObservationBatch, x0: f64, h: f64, kernel: &KernelSpec) -> Vec<WeightedPoint> {
    let (xs, ys) = batch.window(x0, h * kernel.support_radius());
    xs.iter()
        .zip(ys)
        .filter_map(|(&x, &y)| {
            let w = kernel.eval_scaled(x - x0, h);
            (w > 0.0).then_some(WeightedPoint { x: x - x0, y, w })
        })
        .collect()
}

fn validate_bandwidth(h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")))
    }
}

/// Runs `fit` on the local design, widening the bandwidth by 1.5 up to four
/// times while fewer than [`MIN_EFFECTIVE_N`] points carry weight or the fit
/// reports insufficient or degenerate data.
fn with_widening<T>(
    batch: &ObservationBatch,
    x0: f64,
    h: f64,
    kernel: &KernelSpec,
    mut fit: impl FnMut(&[WeightedPoint]) -> Result<T>,
) -> Result<(T, usize, f64, u32)> {
    validate_bandwidth(h)?;
    let mut bw = h;
    let mut last_err = None;
    for widenings in 0..=MAX_WIDENINGS {
        let design = local_design(batch, x0, bw, kernel);
        if design.len() >= MIN_EFFECTIVE_N {
            match fit(&design) {
                Ok(v) => return Ok((v, design.len(), bw, widenings)),
                Err(e @ (Error::InsufficientLocalData { .. } | Error::Degenerate(_))) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        } else {
            last_err = Some(Error::InsufficientLocalData {
                have: design.len(),
                need: MIN_EFFECTIVE_N,
            });
        }
        bw *= WIDEN_FACTOR;
    }
    Err(last_err.expect("loop ran at least once"))
}

/// Local linear `τ`-quantile fit at `x0` on one batch.
pub fn local_linear_quantile(
    batch: &ObservationBatch,
    x0: f64,
    tau: f64,
    h: f64,
    kernel: &KernelSpec,
) -> Result<LocalFit> {
    let (sol, effective_n, bandwidth, widenings) =
        with_widening(batch, x0, h, kernel, |d| solve_weighted_check_loss(d, tau, 1))?;
    Ok(LocalFit {
        a_hat: sol.coef[0],
        b_hat: sol.coef[1],
        effective_n,
        converged: sol.certified,
        bandwidth,
        widenings,
    })
}

/// Curvature estimate `μ₂ · b̂⁽²⁾` from a local quadratic quantile fit.
pub fn local_cubic_cqr_beta(batch: &ObservationBatch, x0: f64, tau: f64, h_p: f64, kernel: &KernelSpec) -> Result<f64> {
    let (sol, ..) = with_widening(batch, x0, h_p, kernel, |d| solve_weighted_check_loss(d, tau, 2))?;
    Ok(kernel.mu2() * sol.coef[2])
}

/// Weighted least-squares intercept of the centered local linear design.
fn weighted_ls_intercept(design: &[WeightedPoint]) -> Result<f64> {
    let sw: f64 = design.iter().map(|p| p.w).sum();
    let xbar = design.iter().map(|p| p.w * p.x).sum::<f64>() / sw;
    let ybar = design.iter().map(|p| p.w * p.y).sum::<f64>() / sw;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in design {
        let dx = p.x - xbar;
        sxx += p.w * dx * dx;
        sxy += p.w * dx * (p.y - ybar);
    }
    let spread = design.iter().fold(0.0f64, |m, p| m.max(p.x.abs()));
    if !(sxx > 1e-12 * sw * spread * spread) {
        return Err(Error::Degenerate("local design has a single distinct x".into()));
    }
    let slope = sxy / sxx;
    Ok(ybar - slope * xbar)
}

/// Local linear least-squares estimate at `x0`.
pub fn local_linear_ls(batch: &ObservationBatch, x0: f64, h: f64, kernel: &KernelSpec) -> Result<f64> {
    with_widening(batch, x0, h, kernel, weighted_ls_intercept).map(|(v, ..)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[(f64, f64, f64)]) -> Vec<WeightedPoint> {
        v.iter().map(|&(x, y, w)| WeightedPoint { x, y, w }).collect()
    }

    #[test]
    fn exact_interpolation() {
        let d = pts(&[(-1.0, -1.0, 1.0), (0.0, 0.0, 1.0), (1.0, 1.0, 1.0)]);
        let s = solve_weighted_check_loss(&d, 0.5, 1).unwrap();
        assert!(s.coef[0].abs() < 1e-12 && (s.coef[1] - 1.0).abs() < 1e-12);
        assert!(s.objective.abs() < 1e-12);
        assert!(s.certified);
    }

    #[test]
    fn error_paths() {
        let two = pts(&[(0.0, 1.0, 1.0), (1.0, 2.0, 1.0)]);
        assert!(matches!(
            solve_weighted_check_loss(&two, 0.5, 1),
            Err(Error::InsufficientLocalData { have: 2, need: 3 })
        ));
        let same_x = pts(&[(0.5, 1.0, 1.0), (0.5, 2.0, 1.0), (0.5, 3.0, 1.0), (0.5, 4.0, 1.0)]);
        assert!(matches!(
            solve_weighted_check_loss(&same_x, 0.5, 1),
            Err(Error::Degenerate(_))
        ));
        let zero_w = pts(&[(0.0, 1.0, 0.0), (1.0, 2.0, 0.0), (2.0, 1.0, 1.0)]);
        assert!(solve_weighted_check_loss(&zero_w, 0.5, 1).is_err());
        let ok = pts(&[(0.0, 1.0, 1.0), (1.0, 2.0, 1.0), (2.0, 1.0, 1.0)]);
        assert!(solve_weighted_check_loss(&ok, 0.005, 1).is_err());
    }

    #[test]
    fn quantile_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<WeightedPoint> = (0..20)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                WeightedPoint {
                    x,
                    y: 2.0 + 3.0 * x + rng.random_range(-1.0..1.0),
                    w: 1.0,
                }
            })
            .collect();
        let hi = solve_weighted_check_loss(&d, 0.9, 1).unwrap();
        let lo = solve_weighted_check_loss(&d, 0.1, 1).unwrap();
        assert!(hi.coef[0] >= lo.coef[0]);
    }

    #[test]
    fn quadratic_fit_recovers_curvature() {
        let xs: Vec<f64> = (0..41).map(|k| -1.0 + 0.05 * k as f64).collect();
        let b = ObservationBatch::new(xs.clone(), xs.iter().map(|x| x * x).collect(), 0).unwrap();
        let k = KernelSpec::epanechnikov();
        let beta = local_cubic_cqr_beta(&b, 0.1, 0.5, 0.6, &k).unwrap();
        assert!((beta - k.mu2()).abs() < 1e-9, "{beta}");
        let flat = ObservationBatch::new(xs.clone(), vec![3.0; xs.len()], 0).unwrap();
        assert!(local_cubic_cqr_beta(&flat, 0.0, 0.3, 0.6, &k).unwrap().abs() < 1e-9);
    }

    #[test]
    fn widening_reaches_sparse_points() {
        let xs: Vec<f64> = (0..30).map(|k| k as f64 * 0.1).collect();
        let ys = xs.clone();
        let b = ObservationBatch::new(xs, ys, 0).unwrap();
        let k = KernelSpec::epanechnikov();
        let fit = local_linear_quantile(&b, 0.0, 0.5, 0.3, &k).unwrap();
        assert!(fit.widenings > 0 && fit.effective_n >= MIN_EFFECTIVE_N);
        assert!(fit.a_hat.abs() < 1e-9);
        // Nothing within reach even at 1.5^4 times the bandwidth.
        assert!(matches!(
            local_linear_quantile(&b, 50.0, 0.5, 0.3, &k),
            Err(Error::InsufficientLocalData { .. })
        ));
    }

    #[test]
    fn batch_validation() {
        assert!(ObservationBatch::new(vec![], vec![], 0).is_err());
        assert!(ObservationBatch::new(vec![1.0], vec![], 0).is_err());
        assert!(ObservationBatch::new(vec![f64::NAN], vec![1.0], 0).is_err());
        let b = ObservationBatch::new(vec![3.0, 1.0, 2.0], vec![30.0, 10.0, 20.0], 7).unwrap();
        assert_eq!(b.window(2.0, 1.5), (&[1.0, 2.0, 3.0][..], &[10.0, 20.0, 30.0][..]));
        assert_eq!(b.window(2.0, 1.0).0, &[2.0]);
    }
}
