//! CSV datasets, curve and local-value tables, experiment reports and a small
//! SVG plot. Numbers are written in shortest round-trip form so every file
//! reads back to the same bits.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{Estimator, ExperimentReport, ReplicationRecord, ReportRow};
use crate::local_quantile::ObservationBatch;

/// How rows without a `batch_id` column are assigned to batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchAssignment {
    /// Consecutive blocks of `n / m` rows; `n` must be divisible by `m`.
    #[default]
    Contiguous,
    /// Row `r` goes to batch `r mod m`.
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            has_header: true,
        }
    }
}

/// Parsed `(x, y[, batch_id])` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub batch_ids: Option<Vec<i64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Groups rows by `batch_id` (ascending id order) when present, otherwise
    /// assigns `m` batches.
    pub fn into_batches(&self, m: usize, assign: BatchAssignment) -> Result<Vec<ObservationBatch>> {
        if let Some(ids) = &self.batch_ids {
            let mut distinct: Vec<i64> = ids.clone();
            distinct.sort_unstable();
            distinct.dedup();
            return distinct
                .iter()
                .enumerate()
                .map(|(b, &id)| {
                    let (xs, ys): (Vec<f64>, Vec<f64>) = ids
                        .iter()
                        .zip(self.xs.iter().zip(&self.ys))
                        .filter(|(i, _)| **i == id)
                        .map(|(_, (x, y))| (*x, *y))
                        .unzip();
                    ObservationBatch::new(xs, ys, b)
                })
                .collect();
        }
        let n = self.len();
        if m == 0 || m > n {
            return Err(Error::InvalidInput(format!(
                "cannot split {n} rows into m = {m} batches"
            )));
        }
        match assign {
            BatchAssignment::Contiguous => {
                if !n.is_multiple_of(m) {
                    return Err(Error::InvalidInput(format!(
                        "n = {n} must be divisible by m = {m} for a contiguous split"
                    )));
                }
                let size = n / m;
                (0..m)
                    .map(|b| {
                        let r = b * size..(b + 1) * size;
                        ObservationBatch::new(self.xs[r.clone()].to_vec(), self.ys[r].to_vec(), b)
                    })
                    .collect()
            }
            BatchAssignment::RoundRobin => (0..m)
                .map(|b| {
                    let xs = self.xs.iter().skip(b).step_by(m).copied().collect();
                    let ys = self.ys.iter().skip(b).step_by(m).copied().collect();
                    ObservationBatch::new(xs, ys, b)
                })
                .collect(),
        }
    }

    pub fn to_batch(&self) -> Result<ObservationBatch> {
        ObservationBatch::new(self.xs.clone(), self.ys.clone(), 0)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            msg: format!("{kind:?}"),
        },
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, col: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(col).ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing field `{name}`"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse `{name}` from {raw:?}"),
    })
}

/// Reads a dataset. With a header the columns are located by name (`x`, `y`,
/// optional `batch_id`); without one they are taken positionally.
pub fn read_dataset<R: Read>(reader: R, opts: CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(opts.has_header)
        .flexible(true)
        .from_reader(reader);
    let (cx, cy, cb) = if opts.has_header {
        let h = rdr.headers().map_err(csv_err)?.clone();
        let find = |name: &str| h.iter().position(|c| c.trim() == name);
        let cx = find("x").ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing column `x`".into(),
        })?;
        let cy = find("y").ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing column `y`".into(),
        })?;
        (cx, cy, find("batch_id"))
    } else {
        (0, 1, None)
    };
    let mut ds = Dataset {
        xs: Vec::new(),
        ys: Vec::new(),
        batch_ids: None,
    };
    let mut ids = Vec::new();
    let mut positional_ids: Option<bool> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let x: f64 = parse_field(&rec, cx, "x", line)?;
        let y: f64 = parse_field(&rec, cy, "y", line)?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Parse {
                line,
                msg: "non-finite x or y".into(),
            });
        }
        let col_b = cb.or_else(|| (!opts.has_header).then_some(2));
        let has_b = col_b.is_some_and(|c| rec.get(c).is_some_and(|s| !s.trim().is_empty()));
        if cb.is_none() && !opts.has_header {
            match positional_ids {
                None => positional_ids = Some(has_b),
                Some(p) if p != has_b => {
                    return Err(Error::Parse {
                        line,
                        msg: "inconsistent number of columns".into(),
                    })
                }
                _ => {}
            }
        }
        if has_b {
            ids.push(parse_field(&rec, col_b.unwrap(), "batch_id", line)?);
        } else if cb.is_some() {
            return Err(Error::Parse {
                line,
                msg: "missing field `batch_id`".into(),
            });
        }
        ds.xs.push(x);
        ds.ys.push(y);
    }
    if ds.is_empty() {
        return Err(Error::InvalidInput("dataset has no rows".into()));
    }
    if !ids.is_empty() {
        ds.batch_ids = Some(ids);
    }
    Ok(ds)
}

pub fn read_dataset_path(path: &Path, opts: CsvOptions) -> Result<Dataset> {
    read_dataset(File::open(path)?, opts)
}

pub fn write_dataset<W: Write>(w: W, batches: &[ObservationBatch], with_ids: bool) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{}", if with_ids { "x,y,batch_id" } else { "x,y" })?;
    for b in batches {
        for (x, y) in b.xs().iter().zip(b.ys()) {
            if with_ids {
                writeln!(w, "{x:?},{y:?},{}", b.batch_id())?;
            } else {
                writeln!(w, "{x:?},{y:?}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric table: header row, then rows of reals of the header's width.
fn read_table<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row = (0..header.len())
            .map(|c| parse_field::<f64>(&rec, c, &header[c], line))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// `x,value` per grid point.
pub fn write_curve<W: Write>(w: W, name: &str, grid_x: &[f64], values: &[f64]) -> Result<()> {
    if grid_x.len() != values.len() {
        return Err(Error::LengthMismatch {
            left: grid_x.len(),
            right: values.len(),
        });
    }
    let mut w = BufWriter::new(w);
    writeln!(w, "x,{name}")?;
    for (x, v) in grid_x.iter().zip(values) {
        writeln!(w, "{x:?},{v:?}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve<R: Read>(r: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let (header, rows) = read_table(r)?;
    if header.len() != 2 || header[0] != "x" {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header `x,<name>`".into(),
        });
    }
    Ok(rows.into_iter().map(|r| (r[0], r[1])).unzip())
}

/// One row per grid point: `x` then one column `c<k>` per flattened cell.
pub fn write_local_values<W: Write>(w: W, grid_x: &[f64], local_values: &[Vec<f64>]) -> Result<()> {
    for v in local_values {
        if v.len() != grid_x.len() {
            return Err(Error::LengthMismatch {
                left: v.len(),
                right: grid_x.len(),
            });
        }
    }
    let mut w = BufWriter::new(w);
    let mut header = String::from("x");
    for k in 0..local_values.len() {
        write!(header, ",c{k}").unwrap();
    }
    writeln!(w, "{header}")?;
    for (g, x) in grid_x.iter().enumerate() {
        let mut line = format!("{x:?}");
        for v in local_values {
            write!(line, ",{:?}", v[g]).unwrap();
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the grid and `local_values[k][g]`.
pub fn read_local_values<R: Read>(r: R) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (header, rows) = read_table(r)?;
    if header.first().map(String::as_str) != Some("x") {
        return Err(Error::Parse {
            line: 1,
            msg: "first column must be `x`".into(),
        });
    }
    let k = header.len() - 1;
    let grid = rows.iter().map(|r| r[0]).collect();
    let values = (0..k).map(|c| rows.iter().map(|r| r[c + 1]).collect()).collect();
    Ok((grid, values))
}

pub const REPORT_HEADER: &str = "distribution,lambda,m,first,second,mean_rase,std_rase,replications";

fn estimator_from_label(s: &str, line: usize) -> Result<Estimator> {
    match s {
        "composite" => Ok(Estimator::Composite),
        "alad" => Ok(Estimator::Alad),
        "oracle" => Ok(Estimator::Oracle),
        _ => Err(Error::Parse {
            line,
            msg: format!("unknown estimator {s:?}"),
        }),
    }
}

/// One row per `(distribution, λ, m, estimator pair)`.
pub fn write_report<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(REPORT_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        wtr.write_record([
            r.distribution.clone(),
            format!("{:?}", r.lambda),
            r.m.to_string(),
            r.pair.0.label().to_string(),
            r.pair.1.label().to_string(),
            format!("{:?}", r.mean),
            format!("{:?}", r.std),
            r.replications.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_report<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != REPORT_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{REPORT_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        out.push(ReportRow {
            distribution: rec.get(0).unwrap_or_default().to_string(),
            lambda: parse_field(&rec, 1, "lambda", line)?,
            m: parse_field(&rec, 2, "m", line)?,
            pair: (
                estimator_from_label(rec.get(3).unwrap_or_default(), line)?,
                estimator_from_label(rec.get(4).unwrap_or_default(), line)?,
            ),
            mean: parse_field(&rec, 5, "mean_rase", line)?,
            std: parse_field(&rec, 6, "std_rase", line)?,
            replications: parse_field(&rec, 7, "replications", line)?,
        });
    }
    Ok(out)
}

/// Per-replication log; missing values are empty fields.
pub fn write_replication_log<W: Write>(w: W, records: &[ReplicationRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "m",
        "replication",
        "ase_composite",
        "ase_alad",
        "ase_oracle",
        "h_oll",
        "tau_bar",
        "error",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    for r in records {
        wtr.write_record([
            r.m.to_string(),
            r.replication.to_string(),
            opt(r.ase_composite),
            opt(r.ase_alad),
            opt(r.ase_oracle),
            opt(r.h_oll),
            opt(r.tau_bar),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_replication_log<R: Read>(r: R) -> Result<Vec<ReplicationRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let opt = |c: usize, name: &str| -> Result<Option<f64>> {
            match rec.get(c) {
                Some(s) if !s.is_empty() => parse_field(&rec, c, name, line).map(Some),
                _ => Ok(None),
            }
        };
        out.push(ReplicationRecord {
            m: parse_field(&rec, 0, "m", line)?,
            replication: parse_field(&rec, 1, "replication", line)?,
            ase_composite: opt(2, "ase_composite")?,
            ase_alad: opt(3, "ase_alad")?,
            ase_oracle: opt(4, "ase_oracle")?,
            h_oll: opt(5, "h_oll")?,
            tau_bar: opt(6, "tau_bar")?,
            error: rec.get(7).filter(|s| !s.is_empty()).map(str::to_string),
        });
    }
    Ok(out)
}

/// Plain-text table of mean (std) RASE, one line per row.
pub fn render_table(report: &ExperimentReport) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<16} {:>6} {:>4} {:<22} {:>10} {:>10} {:>5}",
        "distribution", "lambda", "m", "RASE(first, second)", "mean", "std", "reps"
    )
    .unwrap();
    for r in &report.rows {
        let pair = format!("({}, {})", r.pair.0.label(), r.pair.1.label());
        writeln!(
            s,
            "{:<16} {:>6.2} {:>4} {:<22} {:>10.4} {:>10.4} {:>5}",
            r.distribution, r.lambda, r.m, pair, r.mean, r.std, r.replications
        )
        .unwrap();
    }
    let failures = report.failures();
    if failures > 0 {
        writeln!(s, "{failures} replication(s) failed; see the log").unwrap();
    }
    s
}

/// Scatter of the data with one polyline per curve.
pub fn render_svg(points: &[(f64, f64)], curves: &[(&str, &[f64], &[f64])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
    let all_x = points
        .iter()
        .map(|p| p.0)
        .chain(curves.iter().flat_map(|c| c.1.iter().copied()));
    let all_y = points
        .iter()
        .map(|p| p.1)
        .chain(curves.iter().flat_map(|c| c.2.iter().copied()));
    let range = |it: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = it
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if lo < hi {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 1.0, lo + 1.0)
        } else {
            (0.0, 1.0)
        }
    };
    let (x0, x1) = range(&mut all_x.into_iter());
    let (y0, y1) = range(&mut all_y.into_iter());
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    )
    .unwrap();
    for &(x, y) in points {
        if x.is_finite() && y.is_finite() {
            writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="#888" fill-opacity="0.5"/>"##,
                px(x),
                py(y)
            )
            .unwrap();
        }
    }
    for (c, (name, xs, ys)) in curves.iter().enumerate() {
        let color = COLORS[c % COLORS.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            PAD + 8.0,
            PAD + 16.0 * (c as f64 + 1.0),
            escape(name)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-size="11">x: [{x0:.3}, {x1:.3}]  y: [{y0:.3}, {y1:.3}]</text>"#,
        H - 12.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}
