//! Dataset recipes, run configuration and result files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bands::BandResult;
use crate::error::{Error, Result};
use crate::estimator::{PhiMode, ScoreFit};
use crate::family::{Covariate, Family};
use crate::grouped::{Partition, ProbabilityTransform, QuantileCurve, QuantilePoint};
use crate::sample::{Record, SurvivalSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateTransform {
    /// Numeric column as is.
    Raw,
    /// Centered and scaled to unit sample standard deviation.
    Standardize,
    /// `k - 1` indicator columns against a reference level.
    Dummy {
        reference: String,
        /// Non-reference levels in column order; sorted when omitted.
        #[serde(default)]
        levels: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub column: String,
    #[serde(default = "raw")]
    pub transform: CovariateTransform,
    /// Display name; defaults to the column name.
    #[serde(default)]
    pub name: Option<String>,
}

fn raw() -> CovariateTransform {
    CovariateTransform::Raw
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSpec {
    /// One group per level of a categorical column, in sorted order.
    Categorical { column: String },
    /// Groups `[-inf, c_1), [c_1, c_2), ..., [c_k, inf)` of a numeric column.
    Thresholds {
        column: String,
        cuts: Vec<f64>,
        #[serde(default)]
        labels: Option<Vec<String>>,
    },
}

/// Recipe turning a CSV file into a sample and a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Relative paths resolve against the recipe's directory.
    pub path: PathBuf,
    pub time: String,
    pub status: String,
    pub covariates: Vec<CovariateSpec>,
    /// Expressions `column op value` with `op` one of `== != < <= > >=`.
    #[serde(default)]
    pub filters: Vec<String>,
    #[serde(default)]
    pub partition: Option<PartitionSpec>,
    #[serde(default)]
    pub covariate_bound: Option<f64>,
}

impl DatasetSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        if spec.path.is_relative() {
            if let Some(dir) = path.parent() {
                spec.path = dir.join(&spec.path);
            }
        }
        Ok(spec)
    }

    /// Minimal recipe: every other column is a raw covariate.
    pub fn plain(path: PathBuf, time: &str, status: &str, covariates: &[&str]) -> Self {
        DatasetSpec {
            path,
            time: time.into(),
            status: status.into(),
            covariates: covariates
                .iter()
                .map(|c| CovariateSpec { column: c.to_string(), transform: CovariateTransform::Raw, name: None })
                .collect(),
            filters: Vec::new(),
            partition: None,
            covariate_bound: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
struct Filter {
    column: String,
    op: Op,
    value: String,
}

impl Filter {
    fn parse(expr: &str) -> Result<Self> {
        let tokens: Vec<&str> = expr.split_whitespace().collect();
        let [column, op, value] = tokens[..] else {
            return Err(Error::InvalidInput(format!("filter '{expr}' is not of the form 'column op value'")));
        };
        let op = match op {
            "==" | "=" => Op::Eq,
            "!=" => Op::Ne,
            "<" => Op::Lt,
            "<=" => Op::Le,
            ">" => Op::Gt,
            ">=" => Op::Ge,
            other => return Err(Error::InvalidInput(format!("unknown filter operator '{other}'"))),
        };
        Ok(Filter { column: column.into(), op, value: value.trim_matches('"').into() })
    }

    fn keeps(&self, cell: &str) -> bool {
        let ord = match (cell.trim().parse::<f64>(), self.value.parse::<f64>()) {
            (Ok(a), Ok(b)) => a.partial_cmp(&b),
            _ => Some(cell.trim().cmp(self.value.as_str())),
        };
        let Some(ord) = ord else { return false };
        match self.op {
            Op::Eq => ord.is_eq(),
            Op::Ne => ord.is_ne(),
            Op::Lt => ord.is_lt(),
            Op::Le => ord.is_le(),
            Op::Gt => ord.is_gt(),
            Op::Ge => ord.is_ge(),
        }
    }
}

/// Ingested sample with the bookkeeping needed to report it.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub sample: SurvivalSample,
    pub partition: Partition,
    pub covariate_names: Vec<String>,
    /// `(name, mean, sd)` of standardized columns.
    pub standardization: Vec<(String, f64, f64)>,
    pub rows_read: usize,
}

struct Table {
    headers: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("missing column '{name}'")))
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            context: path.display().to_string(),
            line: e.position().map_or(i + 2, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        rows.push((i + 2, rec.iter().map(String::from).collect()));
    }
    Ok(Table { headers, rows })
}

fn parse_number(path: &Path, line: usize, column: &str, cell: &str) -> Result<f64> {
    cell.parse::<f64>().map_err(|_| Error::Parse {
        context: path.display().to_string(),
        line,
        message: format!("column '{column}': cannot parse '{cell}' as a number"),
    })
}

pub fn ingest(spec: &DatasetSpec) -> Result<Ingested> {
    let table = read_table(&spec.path)?;
    let rows_read = table.rows.len();
    let filters = spec.filters.iter().map(|f| Filter::parse(f)).collect::<Result<Vec<_>>>()?;
    let filter_cols = filters.iter().map(|f| table.column(&f.column)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<&(usize, Vec<String>)> =
        table.rows.iter().filter(|(_, r)| filters.iter().zip(&filter_cols).all(|(f, &c)| f.keeps(&r[c]))).collect();
    if rows.is_empty() {
        return Err(Error::InvalidInput("no rows left after filtering".into()));
    }
    let path = spec.path.as_path();
    let t_col = table.column(&spec.time)?;
    let s_col = table.column(&spec.status)?;
    let mut times = Vec::with_capacity(rows.len());
    let mut events = Vec::with_capacity(rows.len());
    for (line, r) in &rows {
        let t = parse_number(path, *line, &spec.time, &r[t_col])?;
        if !(t >= 0.0) {
            return Err(Error::Parse {
                context: path.display().to_string(),
                line: *line,
                message: format!("negative time {t}"),
            });
        }
        let s = parse_number(path, *line, &spec.status, &r[s_col])?;
        let event = match s {
            0.0 => false,
            1.0 => true,
            v => {
                return Err(Error::Parse {
                    context: path.display().to_string(),
                    line: *line,
                    message: format!("status must be 0 or 1, got {v}"),
                })
            }
        };
        times.push(t);
        events.push(event);
    }

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut standardization = Vec::new();
    for cov in &spec.covariates {
        let c = table.column(&cov.column)?;
        let name = cov.name.clone().unwrap_or_else(|| cov.column.clone());
        match &cov.transform {
            CovariateTransform::Raw | CovariateTransform::Standardize => {
                let mut values = rows
                    .iter()
                    .map(|(line, r)| parse_number(path, *line, &cov.column, &r[c]))
                    .collect::<Result<Vec<_>>>()?;
                if cov.transform == CovariateTransform::Standardize {
                    let n = values.len() as f64;
                    let mean = values.iter().sum::<f64>() / n;
                    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                    if !(sd > 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "column '{}' is constant; cannot standardize",
                            cov.column
                        )));
                    }
                    values.iter_mut().for_each(|v| *v = (*v - mean) / sd);
                    standardization.push((name.clone(), mean, sd));
                }
                columns.push(values);
                names.push(name);
            }
            CovariateTransform::Dummy { reference, levels } => {
                let cells: Vec<&str> = rows.iter().map(|(_, r)| r[c].as_str()).collect();
                if !cells.iter().any(|v| v == reference) {
                    return Err(Error::InvalidInput(format!(
                        "reference level '{reference}' does not occur in column '{}'",
                        cov.column
                    )));
                }
                let levels = match levels {
                    Some(l) => l.clone(),
                    None => {
                        let mut l: Vec<String> =
                            cells.iter().filter(|v| *v != reference).map(|v| v.to_string()).collect();
                        l.sort();
                        l.dedup();
                        l
                    }
                };
                for ((line, _), v) in rows.iter().zip(&cells) {
                    if v != reference && !levels.iter().any(|l| l == v) {
                        return Err(Error::Parse {
                            context: path.display().to_string(),
                            line: *line,
                            message: format!("column '{}': undeclared level '{v}'", cov.column),
                        });
                    }
                }
                for level in &levels {
                    columns.push(cells.iter().map(|v| if v == level { 1.0 } else { 0.0 }).collect());
                    names.push(level.clone());
                }
            }
        }
    }
    let covariates: Vec<Vec<f64>> = (0..rows.len()).map(|i| columns.iter().map(|col| col[i]).collect()).collect();
    let records = times
        .iter()
        .zip(&events)
        .zip(covariates)
        .map(|((&time, &event), z)| Ok(Record { time, event, z: Covariate::new(z)? }))
        .collect::<Result<Vec<_>>>()?;
    let sample = SurvivalSample::new(records)?;
    if let Some(bound) = spec.covariate_bound {
        sample.check_covariate_bound(bound)?;
    }

    let partition = match &spec.partition {
        None => Partition::whole(sample.len()),
        Some(PartitionSpec::Categorical { column }) => {
            let c = table.column(column)?;
            let mut levels: Vec<String> = rows.iter().map(|(_, r)| r[c].clone()).collect();
            levels.sort();
            levels.dedup();
            let assignment = rows
                .iter()
                .map(|(_, r)| levels.iter().position(|l| *l == r[c]).expect("level collected above"))
                .collect();
            Partition::new(levels, assignment)?
        }
        Some(PartitionSpec::Thresholds { column, cuts, labels }) => {
            if cuts.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidInput("partition cuts must be strictly increasing".into()));
            }
            let labels = match labels {
                Some(l) if l.len() == cuts.len() + 1 => l.clone(),
                Some(l) => {
                    return Err(Error::InvalidInput(format!(
                        "{} cuts need {} labels, got {}",
                        cuts.len(),
                        cuts.len() + 1,
                        l.len()
                    )))
                }
                None => threshold_labels(column, cuts),
            };
            let c = table.column(column)?;
            let assignment = rows
                .iter()
                .map(|(line, r)| {
                    let v = parse_number(path, *line, column, &r[c])?;
                    Ok(cuts.partition_point(|&cut| cut <= v))
                })
                .collect::<Result<Vec<_>>>()?;
            Partition::new(labels, assignment)?
        }
    };
    Ok(Ingested { sample, partition, covariate_names: names, standardization, rows_read })
}

fn threshold_labels(column: &str, cuts: &[f64]) -> Vec<String> {
    (0..=cuts.len())
        .map(|k| match (k.checked_sub(1).map(|j| cuts[j]), cuts.get(k)) {
            (None, Some(hi)) => format!("{column} < {hi}"),
            (Some(lo), Some(hi)) => format!("{lo} <= {column} < {hi}"),
            (Some(lo), None) => format!("{column} >= {lo}"),
            (None, None) => "all".into(),
        })
        .collect()
}

/// Settings shared by the commands. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub family: Family,
    pub phi_mode: PhiMode,
    pub alpha: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub p_points: usize,
    pub replicates: usize,
    pub transform: ProbabilityTransform,
    pub tau: Option<f64>,
    pub tolerance: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            family: Family::ProportionalOdds,
            phi_mode: PhiMode::Efficient,
            alpha: 0.05,
            p_min: 0.25,
            p_max: 0.75,
            p_points: 101,
            replicates: 1000,
            transform: ProbabilityTransform::LogMinusLog,
            tau: None,
            tolerance: 1e-8,
            max_iter: 50,
            seed: 20240601,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// One row of the coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub covariate: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

pub fn coefficient_rows(fit: &ScoreFit, names: &[String]) -> Vec<CoefficientRow> {
    let p = fit.p_values();
    fit.theta_hat
        .iter()
        .enumerate()
        .map(|(j, &est)| {
            let se = fit.se.as_ref().map(|s| s[j]);
            CoefficientRow {
                covariate: names.get(j).cloned().unwrap_or_else(|| format!("z{}", j + 1)),
                estimate: est,
                se,
                z: se.map(|s| est / s),
                p_value: p.as_ref().map(|p| p[j]),
            }
        })
        .collect()
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Long-format quantile row: one per (group, p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub group: String,
    pub p: f64,
    pub estimate: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub upper_clipped: bool,
    pub out_of_range: bool,
}

pub fn quantile_rows(curves: &[QuantileCurve]) -> Vec<QuantileRow> {
    curves
        .iter()
        .flat_map(|c| {
            c.points.iter().map(move |pt| QuantileRow {
                group: c.label.clone(),
                p: pt.p,
                estimate: pt.estimate,
                lower: pt.lower,
                upper: pt.upper,
                upper_clipped: pt.upper_clipped,
                out_of_range: pt.out_of_range(),
            })
        })
        .collect()
}

/// Regroups rows into curves, keeping first-appearance group order.
pub fn curves_from_rows(rows: &[QuantileRow]) -> Vec<QuantileCurve> {
    let mut curves: Vec<QuantileCurve> = Vec::new();
    for r in rows {
        let pt = QuantilePoint {
            p: r.p,
            estimate: r.estimate,
            lower: r.lower,
            upper: r.upper,
            upper_clipped: r.upper_clipped,
        };
        match curves.iter_mut().find(|c| c.label == r.group) {
            Some(c) => c.points.push(pt),
            None => curves.push(QuantileCurve { label: r.group.clone(), points: vec![pt] }),
        }
    }
    curves
}

/// Band metadata stored next to the long-format band table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMeta {
    pub alpha: f64,
    pub m: usize,
    pub seed: u64,
    pub u_star: f64,
    pub transform: ProbabilityTransform,
    pub replicate_sups: Vec<f64>,
    pub sup_summary: BTreeMap<String, f64>,
}

pub const BAND_TABLE: &str = "bands.csv";
pub const BAND_META: &str = "bands.json";

fn sup_summary(sups: &[f64]) -> BTreeMap<String, f64> {
    let mut s = sups.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| s[((s.len() - 1) as f64 * p).round() as usize];
    let mut out = BTreeMap::new();
    if s.is_empty() {
        return out;
    }
    out.insert("min".into(), s[0]);
    out.insert("median".into(), q(0.5));
    out.insert("max".into(), s[s.len() - 1]);
    out.insert("mean".into(), s.iter().sum::<f64>() / s.len() as f64);
    out
}

pub fn write_band_result(dir: &Path, result: &BandResult) -> Result<()> {
    write_csv_rows(&dir.join(BAND_TABLE), &quantile_rows(&result.bands))?;
    let meta = BandMeta {
        alpha: result.alpha,
        m: result.m,
        seed: result.seed,
        u_star: result.u_star,
        transform: result.transform,
        replicate_sups: result.replicate_sups.clone(),
        sup_summary: sup_summary(&result.replicate_sups),
    };
    write_json(&dir.join(BAND_META), &meta)
}

pub fn read_band_result(dir: &Path) -> Result<BandResult> {
    let rows: Vec<QuantileRow> = read_csv_rows(&dir.join(BAND_TABLE))?;
    let meta: BandMeta = serde_json::from_str(&fs::read_to_string(dir.join(BAND_META))?)?;
    Ok(BandResult {
        alpha: meta.alpha,
        m: meta.m,
        seed: meta.seed,
        u_star: meta.u_star,
        replicate_sups: meta.replicate_sups,
        transform: meta.transform,
        bands: curves_from_rows(&rows),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Machine-readable record of a run, sufficient to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest<I> {
    pub tool: String,
    pub version: String,
    pub invocation: I,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";
