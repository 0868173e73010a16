//! Simulation designs, error distributions, accuracy metrics and the
//! replication harness, plus the outlier protocol used for robustness runs.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, FisherF, Gamma, LogNormal, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    alad_shortcut_bandwidth, fit_alad, fit_composite_with, fit_pilot_stage, merge_batches, oracle_ll_at,
    select_oracle_bandwidth, BandwidthMode, FitConfig,
};
use crate::local_quantile::ObservationBatch;
use crate::numeric::{linspace, mean, std_dev, NeumaierSum};
use crate::pilot::{ErrorModel, PilotCurves};

/// RNG stream purposes.
pub mod stage {
    pub const DATA: u64 = 0;
    pub const CV: u64 = 1;
    pub const OUTLIERS: u64 = 2;
    pub const TEST: u64 = 3;
}

/// Independent stream keyed by `(seed, replication, batch, stage)`.
pub fn stream_rng(seed: u64, replication: u64, batch: u64, stage: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (slot, v) in [seed, replication, batch, stage].into_iter().enumerate() {
        key[slot * 8..slot * 8 + 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Seed for cross-validation fold assignment in replication `rep`.
pub fn cv_seed(seed: u64, rep: u64) -> u64 {
    stream_rng(seed, rep, 0, stage::CV).random()
}

/// Error distribution family before centering and mixing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ErrorBase {
    Normal,
    /// Standard Laplace, scale 1.
    Laplace,
    T {
        df: f64,
    },
    /// Uniform on `[-1, 1]`.
    Uniform,
    F {
        d1: f64,
        d2: f64,
    },
    Gamma {
        shape: f64,
        scale: f64,
    },
    Lognormal {
        mu: f64,
        sigma: f64,
    },
    /// `ε ≡ 0`.
    Degenerate,
}

impl ErrorBase {
    /// Mean subtracted to center the base draw.
    pub fn analytic_mean(&self) -> f64 {
        match *self {
            ErrorBase::F { d2, .. } => d2 / (d2 - 2.0),
            ErrorBase::Gamma { shape, scale } => shape * scale,
            ErrorBase::Lognormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            _ => 0.0,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        matches!(
            self,
            ErrorBase::Normal | ErrorBase::Laplace | ErrorBase::T { .. } | ErrorBase::Uniform | ErrorBase::Degenerate
        )
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ErrorBase::T { df } => df > 0.0,
            ErrorBase::F { d1, d2 } => d1 > 0.0 && d2 > 2.0,
            ErrorBase::Gamma { shape, scale } => shape > 0.0 && scale > 0.0,
            ErrorBase::Lognormal { sigma, mu } => sigma > 0.0 && mu.is_finite(),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid error distribution {self}")))
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let raw = match *self {
            ErrorBase::Normal => rng.sample(StandardNormal),
            ErrorBase::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            ErrorBase::T { df } => StudentT::new(df).expect("validated").sample(rng),
            ErrorBase::Uniform => rng.random_range(-1.0..1.0),
            ErrorBase::F { d1, d2 } => FisherF::new(d1, d2).expect("validated").sample(rng),
            ErrorBase::Gamma { shape, scale } => Gamma::new(shape, scale).expect("validated").sample(rng),
            ErrorBase::Lognormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
            ErrorBase::Degenerate => 0.0,
        };
        raw - self.analytic_mean()
    }
}

impl fmt::Display for ErrorBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorBase::Normal => write!(f, "N(0,1)"),
            ErrorBase::Laplace => write!(f, "Laplace"),
            ErrorBase::T { df } => write!(f, "t({df})"),
            ErrorBase::Uniform => write!(f, "U(-1,1)"),
            ErrorBase::F { d1, d2 } => write!(f, "F({d1},{d2})"),
            ErrorBase::Gamma { shape, scale } => write!(f, "Gamma({shape},{scale})"),
            ErrorBase::Lognormal { mu, sigma } => write!(f, "LN({mu},{sigma})"),
            ErrorBase::Degenerate => write!(f, "degenerate"),
        }
    }
}

/// Centered base distribution mixed with its `√10`-scaled copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorDistributionSpec {
    pub base: ErrorBase,
    #[serde(default)]
    pub lambda: f64,
}

impl ErrorDistributionSpec {
    pub fn new(base: ErrorBase, lambda: f64) -> Result<Self> {
        let s = Self { base, lambda };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidInput(format!(
                "mixture proportion must lie in [0, 1), got {}",
                self.lambda
            )));
        }
        self.base.validate()
    }
}

impl fmt::Display for ErrorDistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.base)
    }
}

pub fn sample_error<R: Rng + ?Sized>(spec: &ErrorDistributionSpec, count: usize, rng: &mut R) -> Vec<f64> {
    let scale = 10f64.sqrt();
    (0..count)
        .map(|_| {
            let e = spec.base.draw(rng);
            if spec.lambda > 0.0 && rng.random::<f64>() < spec.lambda {
                scale * e
            } else {
                e
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    /// `m(x) = sin 2x + 2 exp(−16x²)`, `σ = 0.5`, `X ~ N(0, 1)`, evaluated on `[−1.5, 1.5]`.
    #[default]
    Homoscedastic,
    /// `m(x) = x sin 2πx`, `σ(x) = 2 + cos 2πx`, `X ~ U(0, 1)`, evaluated on `[0, 1]`.
    Heteroscedastic,
}

impl Model {
    pub fn mean(&self, x: f64) -> f64 {
        match self {
            Model::Homoscedastic => (2.0 * x).sin() + 2.0 * (-16.0 * x * x).exp(),
            Model::Heteroscedastic => x * (2.0 * std::f64::consts::PI * x).sin(),
        }
    }

    pub fn sigma(&self, x: f64) -> f64 {
        match self {
            Model::Homoscedastic => 0.5,
            Model::Heteroscedastic => 2.0 + (2.0 * std::f64::consts::PI * x).cos(),
        }
    }

    pub fn interval(&self) -> (f64, f64) {
        match self {
            Model::Homoscedastic => (-1.5, 1.5),
            Model::Heteroscedastic => (0.0, 1.0),
        }
    }

    pub fn eval_grid(&self, n_grid: usize) -> Vec<f64> {
        let (lo, hi) = self.interval();
        linspace(lo, hi, n_grid)
    }

    pub fn truth(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&x| self.mean(x)).collect()
    }

    fn draw_x<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Model::Homoscedastic => rng.sample(StandardNormal),
            Model::Heteroscedastic => rng.random::<f64>(),
        }
    }

    /// `n` draws of `(x, y)` as one unsplit batch.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        n: usize,
        spec: &ErrorDistributionSpec,
        rng: &mut R,
    ) -> Result<ObservationBatch> {
        let xs: Vec<f64> = (0..n).map(|_| self.draw_x(rng)).collect();
        let eps = sample_error(spec, n, rng);
        let ys = xs
            .iter()
            .zip(&eps)
            .map(|(&x, &e)| self.mean(x) + self.sigma(x) * e)
            .collect();
        ObservationBatch::new(xs, ys, 0)
    }
}

pub fn generate_homoscedastic<R: Rng + ?Sized>(
    n: usize,
    spec: &ErrorDistributionSpec,
    rng: &mut R,
) -> Result<ObservationBatch> {
    Model::Homoscedastic.generate(n, spec, rng)
}

pub fn generate_heteroscedastic<R: Rng + ?Sized>(
    n: usize,
    spec: &ErrorDistributionSpec,
    rng: &mut R,
) -> Result<ObservationBatch> {
    Model::Heteroscedastic.generate(n, spec, rng)
}

/// Contiguous split into `m` batches of exactly `n / m` points.
pub fn split_equal(data: &ObservationBatch, m: usize) -> Result<Vec<ObservationBatch>> {
    if m == 0 || !data.len().is_multiple_of(m) {
        return Err(Error::InvalidInput(format!(
            "n = {} is not divisible into m = {m} equal batches",
            data.len()
        )));
    }
    split_balanced(data, m)
}

/// Contiguous split into `m` batches whose sizes differ by at most one.
pub fn split_balanced(data: &ObservationBatch, m: usize) -> Result<Vec<ObservationBatch>> {
    let n = data.len();
    if m == 0 || m > n {
        return Err(Error::InvalidInput(format!("cannot split {n} points into {m} batches")));
    }
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let size = n / m + usize::from(i < n % m);
        let end = start + size;
        out.push(ObservationBatch::new(
            data.xs()[start..end].to_vec(),
            data.ys()[start..end].to_vec(),
            i,
        )?);
        start = end;
    }
    Ok(out)
}

pub fn compute_ase(fitted: &[f64], truth: &[f64]) -> Result<f64> {
    if fitted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: fitted.len(),
            right: truth.len(),
        });
    }
    if fitted.is_empty() {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    let mut s = NeumaierSum::new();
    for (f, t) in fitted.iter().zip(truth) {
        s.add((f - t) * (f - t));
    }
    Ok(s.value() / fitted.len() as f64)
}

/// `ASE(ĝ₂) / ASE(ĝ₁)`: above one when the first estimator is better.
pub fn compute_rase(g1_ase: f64, g2_ase: f64) -> Result<f64> {
    if !(g1_ase > 0.0) {
        return Err(Error::DivideByZero(format!("reference ASE is {g1_ase}")));
    }
    Ok(g2_ase / g1_ase)
}

/// Root mean square and mean absolute prediction errors.
pub fn rmse_mae(predicted: &[f64], observed: &[f64]) -> Result<(f64, f64)> {
    if predicted.len() != observed.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: observed.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let (mut sq, mut ab) = (NeumaierSum::new(), NeumaierSum::new());
    for (p, y) in predicted.iter().zip(observed) {
        sq.add((p - y) * (p - y));
        ab.add((p - y).abs());
    }
    let n = predicted.len() as f64;
    Ok(((sq.value() / n).sqrt(), ab.value() / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierAction {
    /// Replace a tagged `y` by `c·y`.
    Scale(f64),
    /// Drop tagged points.
    Remove,
}

/// Tags `|y − m̂(x)| > γ σ̂(x)` and scales or removes the tagged points.
/// Returns the modified data and the tagged percentage.
pub fn tag_and_scale_outliers(
    train: &ObservationBatch,
    pilot: &PilotCurves,
    gamma: f64,
    action: OutlierAction,
) -> Result<(ObservationBatch, f64)> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    let (mut xs, mut ys) = (Vec::with_capacity(train.len()), Vec::with_capacity(train.len()));
    let mut tagged = 0usize;
    for (&x, &y) in train.xs().iter().zip(train.ys()) {
        let outlier = (y - pilot.mean_at(x)).abs() > gamma * pilot.sigma_at(x);
        tagged += usize::from(outlier);
        match (outlier, action) {
            (true, OutlierAction::Remove) => {}
            (true, OutlierAction::Scale(c)) => {
                xs.push(x);
                ys.push(c * y);
            }
            (false, _) => {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    let r_ol = 100.0 * tagged as f64 / train.len() as f64;
    Ok((ObservationBatch::new(xs, ys, train.batch_id())?, r_ol))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPolicy {
    /// Require `n` divisible by `m`.
    #[default]
    Equal,
    /// Allow sizes differing by one.
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSet {
    pub composite: bool,
    pub alad: bool,
    pub oracle: bool,
}

impl Default for EstimatorSet {
    fn default() -> Self {
        Self {
            composite: true,
            alad: true,
            oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: Model,
    pub n: usize,
    pub m_values: Vec<usize>,
    pub error: ErrorDistributionSpec,
    pub replications: usize,
    pub seed: u64,
    pub estimators: EstimatorSet,
    pub fit: FitConfig,
    pub n_grid: usize,
    pub split: SplitPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: Model::Homoscedastic,
            n: 10_000,
            m_values: vec![5],
            error: ErrorDistributionSpec {
                base: ErrorBase::Normal,
                lambda: 0.0,
            },
            replications: 100,
            seed: 1,
            estimators: EstimatorSet::default(),
            fit: FitConfig::default(),
            n_grid: 200,
            split: SplitPolicy::Equal,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.error.validate()?;
        if self.replications == 0 {
            return Err(Error::InvalidInput("replications must be at least 1".into()));
        }
        if self.n_grid < 2 {
            return Err(Error::InvalidInput("n_grid must be at least 2".into()));
        }
        if self.m_values.is_empty() {
            return Err(Error::InvalidInput("m_values is empty".into()));
        }
        if !(self.estimators.composite || self.estimators.alad || self.estimators.oracle) {
            return Err(Error::InvalidInput("no estimator selected".into()));
        }
        for &m in &self.m_values {
            if m == 0 || m >= self.n {
                return Err(Error::InvalidInput(format!("need 1 ≤ m < n, got m = {m}")));
            }
            if self.split == SplitPolicy::Equal && !self.n.is_multiple_of(m) {
                return Err(Error::InvalidInput(format!(
                    "n = {} must be divisible by m = {m} for an equal split",
                    self.n
                )));
            }
            if self.estimators.composite && m * self.fit.j < 2 {
                return Err(Error::InvalidInput(format!(
                    "composite needs m·J ≥ 2, got m = {m}, J = {}",
                    self.fit.j
                )));
            }
        }
        Ok(())
    }
}

/// Per-replication outcome for one `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub m: usize,
    pub replication: usize,
    pub ase_composite: Option<f64>,
    pub ase_alad: Option<f64>,
    pub ase_oracle: Option<f64>,
    pub h_oll: Option<f64>,
    pub tau_bar: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Composite,
    Alad,
    Oracle,
}

impl Estimator {
    pub fn label(&self) -> &'static str {
        match self {
            Estimator::Composite => "composite",
            Estimator::Alad => "alad",
            Estimator::Oracle => "oracle",
        }
    }
}

/// Mean and standard deviation of a RASE over successful replications.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub distribution: String,
    pub lambda: f64,
    pub m: usize,
    /// `RASE(first, second) = ASE(second) / ASE(first)`.
    pub pair: (Estimator, Estimator),
    pub mean: f64,
    pub std: f64,
    pub replications: usize,
}

/// Pointwise Monte Carlo mean of one estimator's fitted curve.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCurve {
    pub m: usize,
    pub estimator: Estimator,
    pub values: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub records: Vec<ReplicationRecord>,
    pub mean_curves: Vec<MeanCurve>,
    pub grid_x: Vec<f64>,
    pub truth: Vec<f64>,
}

impl ExperimentReport {
    pub fn row(&self, m: usize, pair: (Estimator, Estimator)) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.m == m && r.pair == pair)
    }

    pub fn mean_curve(&self, m: usize, est: Estimator) -> Option<&MeanCurve> {
        self.mean_curves.iter().find(|c| c.m == m && c.estimator == est)
    }

    /// Mean ASE of one estimator over successful replications.
    pub fn mean_ase(&self, m: usize, est: Estimator) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.m == m)
            .filter_map(|r| match est {
                Estimator::Composite => r.ase_composite,
                Estimator::Alad => r.ase_alad,
                Estimator::Oracle => r.ase_oracle,
            })
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    }

    /// Grid average of `|mean curve − truth|`.
    pub fn mean_abs_bias(&self, m: usize, est: Estimator) -> Option<f64> {
        let c = self.mean_curve(m, est)?;
        let b: Vec<f64> = c.values.iter().zip(&self.truth).map(|(v, t)| (v - t).abs()).collect();
        Some(mean(&b))
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

struct Curves {
    composite: Option<Vec<f64>>,
    alad: Option<Vec<f64>>,
    oracle: Option<Vec<f64>>,
    h_oll: Option<f64>,
    tau_bar: Option<f64>,
}

/// Fits the selected estimators on one dataset split into batches.
fn fit_estimators(
    batches: &[ObservationBatch],
    cfg: &FitConfig,
    which: EstimatorSet,
    grid_x: &[f64],
    cv_seed: u64,
    shared_pilot: Option<&(PilotCurves, ErrorModel)>,
) -> Result<Curves> {
    let merged = merge_batches(batches)?;
    let needs_h = which.oracle || which.alad || (which.composite && cfg.bandwidth_mode == BandwidthMode::Shortcut);
    let h_oll = match (needs_h, cfg.h_oll) {
        (_, Some(h)) => Some(h),
        (true, None) => Some(select_oracle_bandwidth(
            &merged,
            grid_x,
            &cfg.kernel,
            cfg.oracle_bandwidth,
            cfg.cv_folds,
            cfg.cv_candidates,
            cv_seed,
        )?),
        (false, None) => None,
    };
    let pilot_stage = match shared_pilot {
        Some(p) => Some(p.clone()),
        None if which.composite || which.alad => Some(fit_pilot_stage(batches, cfg)?),
        None => None,
    };
    let mut out = Curves {
        composite: None,
        alad: None,
        oracle: None,
        h_oll,
        tau_bar: None,
    };
    if let Some((pilot, em)) = &pilot_stage {
        if which.composite {
            let fit = fit_composite_with(batches, cfg, grid_x, pilot, em, h_oll)?;
            out.tau_bar = Some(fit.plan.grid.tau_bar());
            out.composite = Some(fit.global_values);
        }
        if which.alad {
            let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
            let h = alad_shortcut_bandwidth(em, h_oll.expect("computed above"), &sizes)?;
            out.alad = Some(fit_alad(batches, grid_x, h, &cfg.kernel)?);
        }
    }
    if which.oracle {
        out.oracle = Some(oracle_ll_at(
            &merged,
            grid_x,
            h_oll.expect("computed above"),
            &cfg.kernel,
        )?);
    }
    Ok(out)
}

fn replicate(
    cfg: &ExperimentConfig,
    m: usize,
    rep: usize,
    grid_x: &[f64],
    truth: &[f64],
) -> (ReplicationRecord, Option<Curves>) {
    let mut rec = ReplicationRecord {
        m,
        replication: rep,
        ase_composite: None,
        ase_alad: None,
        ase_oracle: None,
        h_oll: None,
        tau_bar: None,
        error: None,
    };
    let run = || -> Result<Curves> {
        let mut rng = stream_rng(cfg.seed, rep as u64, 0, stage::DATA);
        let data = cfg.model.generate(cfg.n, &cfg.error, &mut rng)?;
        let batches = match cfg.split {
            SplitPolicy::Equal => split_equal(&data, m)?,
            SplitPolicy::Balanced => split_balanced(&data, m)?,
        };
        let cv_seed = cv_seed(cfg.seed, rep as u64);
        fit_estimators(&batches, &cfg.fit, cfg.estimators, grid_x, cv_seed, None)
    };
    match run() {
        Ok(c) => {
            let ase = |v: &Option<Vec<f64>>| v.as_ref().and_then(|v| compute_ase(v, truth).ok());
            rec.ase_composite = ase(&c.composite);
            rec.ase_alad = ase(&c.alad);
            rec.ase_oracle = ase(&c.oracle);
            rec.h_oll = c.h_oll;
            rec.tau_bar = c.tau_bar;
            (rec, Some(c))
        }
        Err(e) => {
            rec.error = Some(e.to_string());
            (rec, None)
        }
    }
}

/// Runs every replication for every `m`. A failing replication is recorded
/// and excluded from the summaries.
pub fn run_replications(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_replications_with_progress(cfg, |_| {})
}

pub fn run_replications_with_progress<F: Fn(&ReplicationRecord) + Sync>(
    cfg: &ExperimentConfig,
    progress: F,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let grid_x = cfg.model.eval_grid(cfg.n_grid);
    let truth = cfg.model.truth(&grid_x);
    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut mean_curves = Vec::new();
    for &m in &cfg.m_values {
        let results: Vec<(ReplicationRecord, Option<Curves>)> = (0..cfg.replications)
            .into_par_iter()
            .map(|rep| {
                let r = replicate(cfg, m, rep, &grid_x, &truth);
                progress(&r.0);
                r
            })
            .collect();
        for (est, pick) in [
            (
                Estimator::Composite,
                (|c: &Curves| c.composite.clone()) as fn(&Curves) -> Option<Vec<f64>>,
            ),
            (Estimator::Alad, |c: &Curves| c.alad.clone()),
            (Estimator::Oracle, |c: &Curves| c.oracle.clone()),
        ] {
            let mut sum = vec![NeumaierSum::new(); grid_x.len()];
            let mut count = 0;
            for v in results.iter().filter_map(|(_, c)| c.as_ref().and_then(pick)) {
                for (s, x) in sum.iter_mut().zip(&v) {
                    s.add(*x);
                }
                count += 1;
            }
            if count > 0 {
                mean_curves.push(MeanCurve {
                    m,
                    estimator: est,
                    values: sum.iter().map(|s| s.value() / count as f64).collect(),
                    count,
                });
            }
        }
        let recs: Vec<ReplicationRecord> = results.into_iter().map(|(r, _)| r).collect();
        use Estimator::*;
        for pair in [(Composite, Oracle), (Composite, Alad), (Alad, Oracle)] {
            let ase = |r: &ReplicationRecord, e: Estimator| match e {
                Composite => r.ase_composite,
                Alad => r.ase_alad,
                Oracle => r.ase_oracle,
            };
            let ratios: Vec<f64> = recs
                .iter()
                .filter_map(|r| compute_rase(ase(r, pair.0)?, ase(r, pair.1)?).ok())
                .collect();
            if !ratios.is_empty() {
                rows.push(ReportRow {
                    distribution: cfg.error.to_string(),
                    lambda: cfg.error.lambda,
                    m,
                    pair,
                    mean: mean(&ratios),
                    std: std_dev(&ratios),
                    replications: ratios.len(),
                });
            }
        }
        records.extend(recs);
    }
    Ok(ExperimentReport {
        rows,
        records,
        mean_curves,
        grid_x,
        truth,
    })
}

/// Planted-outlier robustness protocol on the homoscedastic design.
///
/// A fraction of training responses is shifted up by `shift_sigmas · σ`;
/// points tagged by the pilot at `gamma` are then scaled by `c` and every
/// estimator is scored by RMSE and MAE on a clean test set.
///
/// The tuning stage (pilot curves, error model and oracle bandwidth) is fitted
/// once on the untreated training set and reused for every `c`, so only the
/// estimators themselves see the treated responses. Set `retune` to redo the
/// tuning on each treated set instead.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierProtocol {
    pub n_train: usize,
    pub n_test: usize,
    pub m: usize,
    pub error: ErrorDistributionSpec,
    pub outlier_fraction: f64,
    pub shift_sigmas: f64,
    pub gamma: f64,
    pub seed: u64,
    pub fit: FitConfig,
    pub n_grid: usize,
    pub retune: bool,
}

impl Default for OutlierProtocol {
    fn default() -> Self {
        Self {
            n_train: 5000,
            n_test: 2000,
            m: 5,
            error: ErrorDistributionSpec {
                base: ErrorBase::Normal,
                lambda: 0.0,
            },
            outlier_fraction: 0.01,
            shift_sigmas: 10.0,
            gamma: 3.0,
            seed: 1,
            fit: FitConfig::default(),
            n_grid: 200,
            retune: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierOutcome {
    pub action: OutlierAction,
    pub r_ol: f64,
    /// `(rmse, mae)` per estimator.
    pub composite: (f64, f64),
    pub alad: (f64, f64),
    pub oracle: (f64, f64),
    /// Fitted curves on the evaluation grid, in the order composite, ALAD, oracle.
    pub curves: [Vec<f64>; 3],
}

/// Tags and treats outliers batch by batch; returns the treated batches and
/// the overall tagged percentage.
pub fn treat_batches(
    batches: &[ObservationBatch],
    pilot: &PilotCurves,
    gamma: f64,
    action: OutlierAction,
) -> Result<(Vec<ObservationBatch>, f64)> {
    let n: usize = batches.iter().map(|b| b.len()).sum();
    let mut tagged = 0.0;
    let mut out = Vec::with_capacity(batches.len());
    for b in batches {
        let (t, r) = tag_and_scale_outliers(b, pilot, gamma, action)?;
        tagged += r * b.len() as f64 / 100.0;
        out.push(t);
    }
    Ok((out, 100.0 * tagged.round() / n as f64))
}

/// Fits all three estimators on treated copies of `untreated` and scores
/// them on `test`. `gamma = None` skips tagging. Predictions at test points
/// interpolate the fitted curves on `grid_x`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_outliers(
    untreated: &[ObservationBatch],
    test: &ObservationBatch,
    gamma: Option<f64>,
    actions: &[OutlierAction],
    fit: &FitConfig,
    grid_x: &[f64],
    cv_seed: u64,
    retune: bool,
) -> Result<Vec<OutlierOutcome>> {
    let stage = fit_pilot_stage(untreated, fit)?;
    let tuned = if retune || fit.h_oll.is_some() {
        fit.clone()
    } else {
        let merged = merge_batches(untreated)?;
        let h = select_oracle_bandwidth(
            &merged,
            grid_x,
            &fit.kernel,
            fit.oracle_bandwidth,
            fit.cv_folds,
            fit.cv_candidates,
            cv_seed,
        )?;
        FitConfig {
            h_oll: Some(h),
            ..fit.clone()
        }
    };
    actions
        .iter()
        .map(|&action| {
            let (batches, r_ol) = match gamma {
                Some(g) => treat_batches(untreated, &stage.0, g, action)?,
                None => (untreated.to_vec(), 0.0),
            };
            let shared = (!retune).then_some(&stage);
            let curves = fit_estimators(&batches, &tuned, EstimatorSet::default(), grid_x, cv_seed, shared)?;
            let [c, a, o] =
                [curves.composite, curves.alad, curves.oracle].map(|v| v.expect("all estimators requested"));
            let score = |v: &[f64]| -> Result<(f64, f64)> {
                let pred: Vec<f64> = test
                    .xs()
                    .iter()
                    .map(|&x| crate::numeric::interp(grid_x, v, x))
                    .collect();
                rmse_mae(&pred, test.ys())
            };
            Ok(OutlierOutcome {
                action,
                r_ol,
                composite: score(&c)?,
                alad: score(&a)?,
                oracle: score(&o)?,
                curves: [c, a, o],
            })
        })
        .collect()
}

/// Runs the protocol for each scale factor on the same planted data.
pub fn run_outlier_protocol(p: &OutlierProtocol, scales: &[f64]) -> Result<Vec<OutlierOutcome>> {
    p.error.validate()?;
    let model = Model::Homoscedastic;
    let mut rng = stream_rng(p.seed, 0, 0, stage::DATA);
    let clean = model.generate(p.n_train, &p.error, &mut rng)?;
    let mut orng = stream_rng(p.seed, 0, 0, stage::OUTLIERS);
    let ys: Vec<f64> = clean
        .xs()
        .iter()
        .zip(clean.ys())
        .map(|(&x, &y)| {
            if orng.random::<f64>() < p.outlier_fraction {
                y + p.shift_sigmas * model.sigma(x)
            } else {
                y
            }
        })
        .collect();
    let planted = ObservationBatch::new(clean.xs().to_vec(), ys, 0)?;
    let test = model.generate(p.n_test, &p.error, &mut stream_rng(p.seed, 0, 0, stage::TEST))?;
    let grid_x = model.eval_grid(p.n_grid);
    let untreated = split_balanced(&planted, p.m)?;
    let cv_seed = cv_seed(p.seed, 0);
    let actions: Vec<OutlierAction> = scales.iter().map(|&c| OutlierAction::Scale(c)).collect();
    evaluate_with_outliers(
        &untreated,
        &test,
        Some(p.gamma),
        &actions,
        &p.fit,
        &grid_x,
        cv_seed,
        p.retune,
    )
}
