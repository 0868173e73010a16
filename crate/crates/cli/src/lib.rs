//! Command-line driver: `simulate`, `fit`, `predict` and `evaluate`.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 estimation failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dcq_core::composite_plan::CompositePlan;
use dcq_core::estimator::{aggregate, fit_composite, CompositeFit, FitConfig};
use dcq_core::experiments::{
    cv_seed as stream_cv_seed, evaluate_with_outliers, run_replications, Estimator, ExperimentReport, OutlierAction,
    OutlierOutcome,
};
use dcq_core::io::{self, Dataset};
use dcq_core::numeric::{interp, linspace};
use dcq_core::ObservationBatch;

pub use config::{Mode, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io { .. } => 2,
            CliError::Estimation(_) => 3,
        }
    }
}

impl From<dcq_core::Error> for CliError {
    fn from(e: dcq_core::Error) -> Self {
        if e.is_validation() || matches!(e.root(), dcq_core::Error::Io(_)) {
            CliError::Validation(e.to_string())
        } else {
            CliError::Estimation(e.to_string())
        }
    }
}

/// Overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub svg: bool,
}

pub fn load_config(path: &Path, ov: &Overrides, mode: Mode) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(t) = ov.threads {
        cfg.threads = t;
    }
    if let Some(o) = &ov.out {
        cfg.out = o.clone();
    } else if cfg.out.is_relative() {
        cfg.out = path.parent().unwrap_or(Path::new(".")).join(&cfg.out);
    }
    cfg.validate(mode)?;
    Ok(cfg)
}

/// Runs one subcommand with a validated config inside a pool of the
/// requested size.
pub fn run(mode: Mode, cfg: &RunConfig, svg: bool) -> Result<Vec<PathBuf>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    pool.install(|| {
        create_dir(&cfg.out)?;
        let mut written = match mode {
            Mode::Simulate => cmd_simulate(cfg, svg)?,
            Mode::Fit => cmd_fit(cfg, svg)?,
            Mode::Predict => cmd_predict(cfg)?,
            Mode::Evaluate => cmd_evaluate(cfg, svg)?,
        };
        let resolved = cfg.out.join("resolved_config.toml");
        write(&resolved, &cfg.to_toml())?;
        written.push(resolved);
        Ok(written)
    })
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|source| CliError::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> Result<fs::File, CliError> {
    fs::File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn with_path(path: &Path, e: dcq_core::Error) -> CliError {
    match CliError::from(e) {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Replications for every configured `m`; writes the RASE table, the
/// per-replication log and optionally the mean curves.
pub fn cmd_simulate(cfg: &RunConfig, svg: bool) -> Result<Vec<PathBuf>, CliError> {
    let sim = cfg.simulate.as_ref().expect("validated");
    let fit = cfg.fit.to_fit_config(0)?;
    let exp = sim.to_experiment(fit, cfg.fit.n_grid, cfg.seed);
    let report = run_replications(&exp)?;
    let table = cfg.out.join("rase_table.csv");
    io::write_report(create(&table)?, &report.rows).map_err(|e| with_path(&table, e))?;
    let text = cfg.out.join("rase_table.txt");
    write(&text, &io::render_table(&report))?;
    let log = cfg.out.join("replications.csv");
    io::write_replication_log(create(&log)?, &report.records).map_err(|e| with_path(&log, e))?;
    let mut out = vec![table, text, log];
    if svg {
        let path = cfg.out.join("mean_curves.svg");
        write(&path, &mean_curves_svg(&report))?;
        out.push(path);
    }
    Ok(out)
}

fn mean_curves_svg(report: &ExperimentReport) -> String {
    let mut names = vec!["truth".to_string()];
    let mut values = vec![report.truth.clone()];
    for c in &report.mean_curves {
        names.push(format!("{} (m = {})", c.estimator.label(), c.m));
        values.push(c.values.clone());
    }
    let curves: Vec<(&str, &[f64], &[f64])> = names
        .iter()
        .zip(&values)
        .map(|(n, v)| (n.as_str(), report.grid_x.as_slice(), v.as_slice()))
        .collect();
    io::render_svg(&[], &curves)
}

fn read_data(cfg: &RunConfig) -> Result<(Dataset, Vec<ObservationBatch>), CliError> {
    let d = cfg.data.as_ref().expect("validated");
    let file = open(&d.path)?;
    let ds = io::read_dataset(file, d.csv_options()?).map_err(|e| with_path(&d.path, e))?;
    let batches = ds.into_batches(d.m, d.assignment).map_err(|e| with_path(&d.path, e))?;
    Ok((ds, batches))
}

fn eval_grid(cfg: &RunConfig, ds: &Dataset) -> Vec<f64> {
    let [lo, hi] = cfg.fit.grid.unwrap_or_else(|| {
        let lo = ds.xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ds.xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        [lo, hi]
    });
    linspace(lo, hi, cfg.fit.n_grid)
}

fn cv_seed(cfg: &RunConfig) -> u64 {
    stream_cv_seed(cfg.seed, 0)
}

/// Fits the composite and writes the plan, the curve, the local values and
/// diagnostics.
pub fn cmd_fit(cfg: &RunConfig, svg: bool) -> Result<Vec<PathBuf>, CliError> {
    let (ds, batches) = read_data(cfg)?;
    let grid = eval_grid(cfg, &ds);
    if !(grid[0] < grid[grid.len() - 1]) {
        return Err(CliError::Validation("covariate has no spread; set fit.grid".into()));
    }
    let fit_cfg = cfg.fit.to_fit_config(cv_seed(cfg))?;
    let fit = fit_composite(&batches, &fit_cfg, &grid)?;
    let mut out = write_fit(&cfg.out, &fit, &fit_cfg)?;
    if svg {
        let path = cfg.out.join("fit.svg");
        let pts: Vec<(f64, f64)> = ds.xs.iter().copied().zip(ds.ys.iter().copied()).collect();
        write(
            &path,
            &io::render_svg(&pts, &[("composite", &fit.grid_x, &fit.global_values)]),
        )?;
        out.push(path);
    }
    Ok(out)
}

fn write_fit(dir: &Path, fit: &CompositeFit, cfg: &FitConfig) -> Result<Vec<PathBuf>, CliError> {
    let plan = dir.join("plan.txt");
    write(&plan, &fit.plan.to_text())?;
    let curve = dir.join("curve.csv");
    io::write_curve(create(&curve)?, "m_hat", &fit.grid_x, &fit.global_values).map_err(|e| with_path(&curve, e))?;
    let local = dir.join("local_values.csv");
    io::write_local_values(create(&local)?, &fit.grid_x, &fit.local_values).map_err(|e| with_path(&local, e))?;
    let diag = dir.join("diagnostics.json");
    write(&diag, &diagnostics_json(fit, cfg))?;
    Ok(vec![plan, curve, local, diag])
}

fn json_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        "null".into()
    }
}

fn diagnostics_json(fit: &CompositeFit, cfg: &FitConfig) -> String {
    let d = &fit.diagnostics;
    let g = &fit.plan.grid;
    let (r1, r2) = fit.plan.constraint_residuals();
    let mut s = String::from("{\n");
    let fields: Vec<(&str, String)> = vec![
        ("m", g.m().to_string()),
        ("J", g.j().to_string()),
        ("d_tau", json_num(g.d_tau())),
        ("tau_bar", json_num(g.tau_bar())),
        ("tau_bar_mode", format!("\"{:?}\"", cfg.tau_bar_mode)),
        ("bandwidth_mode", format!("\"{:?}\"", cfg.bandwidth_mode)),
        ("h_oll", d.h_oll.map(json_num).unwrap_or_else(|| "null".into())),
        ("are", json_num(d.are)),
        ("weight_sum_residual", json_num(r1)),
        ("bias_constraint_residual", json_num(r2)),
        ("widened_cells", d.widened_cells.to_string()),
        ("uncertified_cells", d.uncertified_cells.to_string()),
        ("clamped_residuals", d.clamped_residuals.to_string()),
        ("flat_curvature_points", d.flat_curvature_points.to_string()),
        ("ridged_blocks", d.ridged_blocks.to_string()),
        ("d_tau_halvings", d.d_tau_halvings.to_string()),
    ];
    for (i, (k, v)) in fields.iter().enumerate() {
        let comma = if i + 1 < fields.len() { "," } else { "" };
        let _ = writeln!(s, "  \"{k}\": {v}{comma}");
    }
    s.push_str("}\n");
    s
}

/// Re-aggregates saved local values with a saved plan. Without query points
/// the result is the fitted curve itself, bit for bit.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let p = cfg.predict.as_ref().expect("validated");
    let text = fs::read_to_string(&p.plan).map_err(|source| CliError::Io {
        path: p.plan.clone(),
        source,
    })?;
    let plan = CompositePlan::from_text(&text).map_err(|e| with_path(&p.plan, e))?;
    let (grid, local) = io::read_local_values(open(&p.local_values)?).map_err(|e| with_path(&p.local_values, e))?;
    if local.len() != plan.grid.cells() {
        return Err(CliError::Validation(format!(
            "{} has {} cells but the plan has {}",
            p.local_values.display(),
            local.len(),
            plan.grid.cells()
        )));
    }
    let curve = aggregate(&plan.weights, &local)?;
    match &p.points {
        None => {
            let path = cfg.out.join("curve.csv");
            io::write_curve(create(&path)?, "m_hat", &grid, &curve).map_err(|e| with_path(&path, e))?;
            Ok(vec![path])
        }
        Some(points) => {
            let (xs, _) = read_points(points)?;
            let pred: Vec<f64> = xs.iter().map(|&x| interp(&grid, &curve, x)).collect();
            let path = cfg.out.join("predictions.csv");
            io::write_curve(create(&path)?, "m_hat", &xs, &pred).map_err(|e| with_path(&path, e))?;
            Ok(vec![path])
        }
    }
}

/// Reads an `x` column (a `y` column is optional here).
fn read_points(path: &Path) -> Result<(Vec<f64>, Option<Vec<f64>>), CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header = text.lines().next().unwrap_or_default();
    if header.split(',').any(|c| c.trim() == "y") {
        let ds = io::read_dataset(text.as_bytes(), Default::default()).map_err(|e| with_path(path, e))?;
        return Ok((ds.xs, Some(ds.ys)));
    }
    let (xs, _) = io::read_curve(format!("{},_\n{}", header.trim(), points_body(&text)).as_bytes())
        .map_err(|e| with_path(path, e))?;
    Ok((xs, None))
}

fn points_body(text: &str) -> String {
    text.lines().skip(1).map(|l| format!("{},0\n", l.trim())).collect()
}

/// Tags and treats training outliers, fits all three estimators and scores
/// them on the test set.
pub fn cmd_evaluate(cfg: &RunConfig, svg: bool) -> Result<Vec<PathBuf>, CliError> {
    let (ds, batches) = read_data(cfg)?;
    let e = cfg.evaluate.as_ref().expect("validated");
    let d = cfg.data.as_ref().expect("validated");
    let test = io::read_dataset(open(&e.test)?, d.csv_options()?).map_err(|err| with_path(&e.test, err))?;
    let test = test.to_batch().map_err(|err| with_path(&e.test, err))?;
    let grid = eval_grid(cfg, &ds);
    let fit_cfg = cfg.fit.to_fit_config(cv_seed(cfg))?;
    let actions: Vec<OutlierAction> = e.c.iter().map(|t| t.action()).collect();
    let outcomes = evaluate_with_outliers(
        &batches,
        &test,
        e.gamma,
        &actions,
        &fit_cfg,
        &grid,
        fit_cfg.cv_seed,
        e.retune,
    )?;
    let path = cfg.out.join("metrics.csv");
    write(&path, &metrics_csv(&outcomes, e.gamma))?;
    let txt = cfg.out.join("metrics.txt");
    write(&txt, &metrics_table(&outcomes, e.gamma))?;
    let mut out = vec![path, txt];
    if svg {
        let p = cfg.out.join("evaluate.svg");
        let pts: Vec<(f64, f64)> = test.xs().iter().copied().zip(test.ys().iter().copied()).collect();
        let last = outcomes.last().expect("nonempty");
        let curves: Vec<(&str, &[f64], &[f64])> = [Estimator::Composite, Estimator::Alad, Estimator::Oracle]
            .iter()
            .zip(&last.curves)
            .map(|(est, v)| (est.label(), grid.as_slice(), v.as_slice()))
            .collect();
        write(&p, &io::render_svg(&pts, &curves))?;
        out.push(p);
    }
    Ok(out)
}

fn action_label(a: OutlierAction) -> String {
    match a {
        OutlierAction::Scale(c) => format!("{c:?}"),
        OutlierAction::Remove => "remove".into(),
    }
}

pub const METRICS_HEADER: &str = "c,gamma,r_ol,estimator,rmse,mae";

fn metrics_csv(outcomes: &[OutlierOutcome], gamma: Option<f64>) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    let g = gamma.map(|g| format!("{g:?}")).unwrap_or_else(|| "inf".into());
    for o in outcomes {
        for (est, (rmse, mae)) in [
            (Estimator::Composite, o.composite),
            (Estimator::Alad, o.alad),
            (Estimator::Oracle, o.oracle),
        ] {
            let _ = writeln!(
                s,
                "{},{g},{:.2},{},{rmse:?},{mae:?}",
                action_label(o.action),
                o.r_ol,
                est.label()
            );
        }
    }
    s
}

fn metrics_table(outcomes: &[OutlierOutcome], gamma: Option<f64>) -> String {
    let mut s = String::new();
    let g = gamma.map(|g| format!("{g}")).unwrap_or_else(|| "inf".into());
    let _ = writeln!(
        s,
        "{:>8} {:>6} {:>7} | {:>10} {:>10} {:>10} | {:>10} {:>10} {:>10}",
        "c", "gamma", "r_ol%", "RMSE m*", "RMSE alad", "RMSE oll", "MAE m*", "MAE alad", "MAE oll"
    );
    for o in outcomes {
        let _ = writeln!(
            s,
            "{:>8} {:>6} {:>7.2} | {:>10.4} {:>10.4} {:>10.4} | {:>10.4} {:>10.4} {:>10.4}",
            action_label(o.action),
            g,
            o.r_ol,
            o.composite.0,
            o.alad.0,
            o.oracle.0,
            o.composite.1,
            o.alad.1,
            o.oracle.1
        );
    }
    s
}
