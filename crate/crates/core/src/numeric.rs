//! Small numerical helpers shared across modules.

/// Compensated (Neumaier) summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = NeumaierSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(&f, a, b, fa, fm, fb, whole, tol, 48)
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

/// `n` points equally spaced in log scale between `lo` and `hi`.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}

/// Piecewise-linear interpolation on a sorted abscissa, clamped at both ends.
///
/// Returns the value and whether the query fell outside the grid.
pub fn interp_clamped(grid: &[f64], values: &[f64], x: f64) -> (f64, bool) {
    debug_assert_eq!(grid.len(), values.len());
    let n = grid.len();
    if n == 1 {
        return (values[0], x != grid[0]);
    }
    if x <= grid[0] {
        return (values[0], x < grid[0]);
    }
    if x >= grid[n - 1] {
        return (values[n - 1], x > grid[n - 1]);
    }
    let k = grid.partition_point(|&g| g <= x);
    let (x0, x1) = (grid[k - 1], grid[k]);
    let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
    (values[k - 1] + t * (values[k] - values[k - 1]), false)
}

pub fn interp(grid: &[f64], values: &[f64], x: f64) -> f64 {
    interp_clamped(grid, values, x).0
}

pub fn mean(xs: &[f64]) -> f64 {
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

/// Sample standard deviation (denominator `n - 1`).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    let ss = compensated_sum(xs.iter().map(|&x| (x - mu) * (x - mu)));
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Linear-interpolation sample quantile of already sorted data.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

pub fn interquartile_range(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    sorted_quantile(&v, 0.75) - sorted_quantile(&v, 0.25)
}

/// Bisection for a nondecreasing function on `[lo, hi]`.
///
/// Stops when `|f| < ftol`, when the bracket is narrower than `xtol`, or after
/// `max_iter` halvings. Returns `None` when `f(lo)` and `f(hi)` have the same
/// strict sign.
pub fn bisect_increasing<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    ftol: f64,
    xtol: f64,
    max_iter: usize,
) -> Option<f64> {
    let flo = f(lo);
    if flo.abs() < ftol {
        return Some(lo);
    }
    let fhi = f(hi);
    if fhi.abs() < ftol {
        return Some(hi);
    }
    if flo > 0.0 || fhi < 0.0 {
        return None;
    }
    let mut best = if flo.abs() < fhi.abs() { lo } else { hi };
    let mut best_val = flo.abs().min(fhi.abs());
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() < best_val {
            best_val = fm.abs();
            best = mid;
        }
        if fm.abs() < ftol || hi - lo < xtol {
            return Some(mid);
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(best)
}

/// Trapezoid rule on a (not necessarily uniform) grid.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    let mut acc = NeumaierSum::new();
    for k in 1..xs.len() {
        acc.add(0.5 * (xs[k] - xs[k - 1]) * (ys[k] + ys[k - 1]));
    }
    acc.value()
}

/// Running trapezoid integral, starting at zero.
pub fn cumulative_trapezoid(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = NeumaierSum::new();
    out.push(0.0);
    for k in 1..xs.len() {
        acc.add(0.5 * (xs[k] - xs[k - 1]) * (ys[k] + ys[k - 1]));
        out.push(acc.value());
    }
    out
}
