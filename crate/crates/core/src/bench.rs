//! Parameter sweeps over methods, sketch sizes and densities, plus report
//! and training-curve export.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_shared_subspace, load_matrix_dir, MatrixDataset, MatrixFormat, Role, SyntheticFamilySpec};
use crate::error::{Error, Result};
use crate::scw::avg_test_error;
use crate::sketch::RngStream;
use crate::train::{default_lambda, train, EvalRecord, EvalSets, IterRecord, Method, TraceSink, TrainConfig, TrainOptions, TrainTrace};

pub const REPORT_HEADER: &str = "method,m,density,rep,seed,final_test_err,final_ood_err,train_seconds,iters_to_sparsity";
pub const CURVE_HEADER: &str = "iter,seconds,loss,nnz_d,test_err,ood_err,sparsity_met";

const OOD_EVAL_PURPOSE: u64 = 0x00d;

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic { family: SyntheticFamilySpec, seed: u64 },
    Dir { path: PathBuf, format: MatrixFormat },
}

impl DataSource {
    pub fn load(&self, role: Role, normalize: bool) -> Result<MatrixDataset> {
        let ds = match self {
            DataSource::Synthetic { family, seed } => generate_shared_subspace(family, &RngStream::new(*seed, 0))?,
            DataSource::Dir { path, format } => load_matrix_dir(path, *format)?,
        };
        let ds = ds.with_role(role);
        Ok(if normalize { ds.normalize_frobenius() } else { ds })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub m_values: Vec<usize>,
    /// Init density for `ivy`/`countsketch`, target sparsity for LS methods.
    pub densities: Vec<usize>,
    pub repetitions: usize,
    pub base: TrainConfig,
    /// Pick λ from the density (3e-4 at 1, else 1e-4) instead of `base.lambda`.
    pub lambda_from_density: bool,
    pub train: DataSource,
    pub test: DataSource,
    pub ood: Option<DataSource>,
    /// Divide every matrix by its Frobenius norm after loading.
    pub normalize: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.m_values.is_empty() || self.densities.is_empty() {
            return Err(Error::InvalidArgument("sweep needs methods, m values and densities".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
        }
        Ok(())
    }

    /// Cells in report order: method, then m, then density, then repetition.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &m in &self.m_values {
                for &density in &self.densities {
                    for rep in 0..self.repetitions {
                        out.push(Cell {
                            method,
                            m,
                            density,
                            rep,
                            seed: cell_seed(self.base.seed, m, density, rep),
                        });
                    }
                }
            }
        }
        out
    }

    /// Training config for one cell.
    pub fn config_for(&self, cell: &Cell) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.m = cell.m;
        cfg.density = cell.density.min(cell.m);
        cfg.target_sparsity = cell.density as f64;
        if self.lambda_from_density {
            cfg.lambda = default_lambda(cfg.target_sparsity);
        }
        cfg.seed = cell.seed;
        cfg
    }
}

/// One (method, m, density, repetition) grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub method: Method,
    pub m: usize,
    pub density: usize,
    pub rep: usize,
    pub seed: u64,
}

/// Methods in the same (m, density, rep) share a seed, so `ivy` starts from
/// exactly the `countsketch` baseline it is compared against.
pub fn cell_seed(base: u64, m: usize, density: usize, rep: usize) -> u64 {
    RngStream::new(base, 0)
        .derive(m as u64)
        .derive(density as u64)
        .derive(rep as u64)
        .next_seed()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub m: usize,
    pub density: usize,
    pub rep: usize,
    pub seed: u64,
    pub final_test_err: Option<f64>,
    pub final_ood_err: Option<f64>,
    pub train_seconds: f64,
    pub iters_to_sparsity: Option<usize>,
    /// Set when the cell failed; the error columns are then blank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: Method,
    pub m: usize,
    pub density: usize,
    pub reps: usize,
    pub mean_test_err: f64,
    pub std_test_err: f64,
    pub mean_ood_err: Option<f64>,
    pub mean_train_seconds: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepReport {
    pub fn failures(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }

    /// Mean and sample standard deviation over repetitions, one entry per
    /// (method, m, density) in first-seen order. Failed cells are left out.
    pub fn summarize(&self) -> Vec<Summary> {
        let mut keys: Vec<(Method, usize, usize)> = Vec::new();
        for r in &self.rows {
            let key = (r.method, r.m, r.density);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .filter_map(|(method, m, density)| {
                let rows: Vec<&ReportRow> = self
                    .rows
                    .iter()
                    .filter(|r| (r.method, r.m, r.density) == (method, m, density) && r.error.is_none())
                    .collect();
                let test: Vec<f64> = rows.iter().filter_map(|r| r.final_test_err).collect();
                if test.is_empty() {
                    return None;
                }
                let (mean_test_err, std_test_err) = mean_std(&test);
                let ood: Vec<f64> = rows.iter().filter_map(|r| r.final_ood_err).collect();
                let secs: Vec<f64> = rows.iter().map(|r| r.train_seconds).collect();
                Some(Summary {
                    method,
                    m,
                    density,
                    reps: test.len(),
                    mean_test_err,
                    std_test_err,
                    mean_ood_err: (!ood.is_empty()).then(|| mean_std(&ood).0),
                    mean_train_seconds: mean_std(&secs).0,
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.method,
                r.m,
                r.density,
                r.rep,
                r.seed,
                opt_float(r.final_test_err),
                opt_float(r.final_ood_err),
                float(r.train_seconds),
                r.iters_to_sparsity.map_or(String::new(), |i| i.to_string()),
            );
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<SweepReport> {
        let bad = |line: usize, msg: &str| Error::Format(format!("report line {line}: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(bad(1, "unexpected header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let lineno = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(lineno, "expected 9 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(lineno, "bad integer"));
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad(lineno, "bad float"));
            let opt_real = |s: &str| if s.is_empty() { Ok(None) } else { real(s).map(Some) };
            rows.push(ReportRow {
                method: f[0].parse()?,
                m: num(f[1])?,
                density: num(f[2])?,
                rep: num(f[3])?,
                seed: f[4].parse().map_err(|_| bad(lineno, "bad seed"))?,
                final_test_err: opt_real(f[5])?,
                final_ood_err: opt_real(f[6])?,
                train_seconds: real(f[7])?,
                iters_to_sparsity: if f[8].is_empty() { None } else { Some(num(f[8])?) },
                error: None,
            });
        }
        Ok(SweepReport { rows })
    }
}

/// 17 significant digits, enough to round-trip any f64.
fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_float(x: Option<f64>) -> String {
    x.map_or(String::new(), float)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn emit_csv(report: &SweepReport, path: &Path) -> Result<()> {
    write_file(path, report.to_csv().as_bytes())
}

pub fn emit_json(report: &SweepReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, json.as_bytes())
}

pub fn parse_json(text: &str) -> Result<SweepReport> {
    serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
}

fn run_cell(spec: &SweepSpec, cell: &Cell, train_set: &MatrixDataset, test: &MatrixDataset, ood: Option<&MatrixDataset>) -> Result<ReportRow> {
    let cfg = spec.config_for(cell);
    let result = train(
        cell.method,
        train_set,
        &cfg,
        TrainOptions {
            eval: EvalSets { test: Some(test), ood: None },
            ..TrainOptions::default()
        },
    )?;
    let final_ood_err = match ood {
        Some(ood) => {
            let stream = RngStream::new(cell.seed, 0).derive(OOD_EVAL_PURPOSE);
            Some(avg_test_error(ood, result.best_spec(), cfg.k, cfg.eval_samples, &stream)?)
        }
        None => None,
    };
    Ok(ReportRow {
        method: cell.method,
        m: cell.m,
        density: cell.density,
        rep: cell.rep,
        seed: cell.seed,
        final_test_err: result.trace.final_test_err(),
        final_ood_err,
        train_seconds: result.trace.train_seconds(),
        iters_to_sparsity: result.trace.sparsity_met_at.filter(|_| result.trace.sparsity_met),
        error: None,
    })
}

/// Loads every dataset, then runs all cells on the rayon pool. Rows come
/// back in [`SweepSpec::cells`] order; a failing cell yields a row with
/// `error` set instead of aborting the sweep.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepReport> {
    spec.validate()?;
    let train_set = spec.train.load(Role::Train, spec.normalize)?;
    let test = spec.test.load(Role::Test, spec.normalize)?;
    let ood = spec.ood.as_ref().map(|s| s.load(Role::Ood, spec.normalize)).transpose()?;
    let rows = spec
        .cells()
        .par_iter()
        .map(|cell| {
            run_cell(spec, cell, &train_set, &test, ood.as_ref()).unwrap_or_else(|e| ReportRow {
                method: cell.method,
                m: cell.m,
                density: cell.density,
                rep: cell.rep,
                seed: cell.seed,
                final_test_err: None,
                final_ood_err: None,
                train_seconds: 0.0,
                iters_to_sparsity: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    Ok(SweepReport { rows })
}

fn curve_row(rec: &IterRecord, eval: Option<&EvalRecord>) -> String {
    let nnz = rec.nnz_d.map_or(String::new(), |n| n.to_string());
    let test = opt_float(eval.and_then(|e| e.test_err));
    let ood = opt_float(eval.and_then(|e| e.ood_err));
    format!(
        "{},{},{},{nnz},{test},{ood},{}",
        rec.iteration + 1,
        float(rec.seconds),
        float(rec.loss),
        u8::from(rec.sparsity_met)
    )
}

/// Training curve as CSV text. `iter` counts completed iterations; the
/// evaluation columns are blank where no evaluation ran. `sparsity_met`
/// is 1 from the first iteration that started within the budget.
pub fn curve_csv(trace: &TrainTrace) -> Result<String> {
    if trace.records.is_empty() {
        return Err(Error::InvalidArgument("cannot export an empty trace".into()));
    }
    if trace.records.windows(2).any(|w| w[1].seconds < w[0].seconds) {
        return Err(Error::Format("trace seconds are not monotone".into()));
    }
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for rec in &trace.records {
        let eval = trace.evals.iter().find(|e| e.iteration == rec.iteration + 1);
        out.push_str(&curve_row(rec, eval));
        out.push('\n');
    }
    Ok(out)
}

pub fn curve_export(trace: &TrainTrace, path: &Path) -> Result<()> {
    write_file(path, curve_csv(trace)?.as_bytes())
}

/// Streams curve rows to a file while training runs.
pub struct CsvTraceSink {
    out: BufWriter<File>,
    path: PathBuf,
}

impl CsvTraceSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{CURVE_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(CsvTraceSink {
            out,
            path: path.to_path_buf(),
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl TraceSink for CsvTraceSink {
    fn record(&mut self, rec: &IterRecord, eval: Option<&EvalRecord>) -> Result<()> {
        writeln!(self.out, "{}", curve_row(rec, eval)).map_err(|e| Error::io(&self.path, e))
    }
}
