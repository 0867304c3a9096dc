//! Error metrics, method comparison, iteration curves and Chamfer diagnostics.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::icp::{icp_indexed, IcpConfig, TargetIndex};
use crate::kdtree::KdTree;
use crate::kinematics::{extract_params, param_difference, ParamSchema};
use crate::pipeline::{predict_iterative, DataRecord, Dataset, Prediction, Split};
use crate::regressor::NetworkWeights;
use crate::render::PointCloud;
use crate::scene::prototype;
use crate::Affine3;

/// Spacing of the prototype surface samples ICP aligns against (m).
pub const ICP_SURFACE_SPACING: f64 = 0.005;
/// Source points used per ICP run; larger clouds are subsampled by stride.
pub const ICP_MAX_SOURCE_POINTS: usize = 1500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Kmn,
    Baseline,
    Icp,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Kmn => "KMN",
            Method::Baseline => "Baseline",
            Method::Icp => "ICP",
        })
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mae {
    pub per_param: Vec<f64>,
    pub sum: f64,
}

/// Component-wise mean absolute error; rotation differences are wrapped.
pub fn mae(predictions: &[Vec<f64>], labels: &[Vec<f64>], schema: &ParamSchema) -> Result<Mae> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut per_param = vec![0.0; schema.len()];
    for (p, l) in predictions.iter().zip(labels) {
        for (slot, e) in per_param.iter_mut().zip(abs_errors(p, l, schema)?) {
            *slot += e;
        }
    }
    for v in &mut per_param {
        *v /= predictions.len() as f64;
    }
    let sum = per_param.iter().sum();
    Ok(Mae { per_param, sum })
}

fn abs_errors(p: &[f64], l: &[f64], schema: &ParamSchema) -> Result<Vec<f64>> {
    if p.len() != schema.len() || l.len() != schema.len() {
        return Err(Error::DimensionMismatch {
            expected: schema.len(),
            actual: if p.len() != schema.len() { p.len() } else { l.len() },
        });
    }
    Ok(schema
        .entries()
        .iter()
        .zip(p.iter().zip(l))
        .map(|(e, (a, b))| param_difference(e, *a, *b).abs())
        .collect())
}

/// Sum over parameters of the absolute error.
pub fn summed_error(p: &[f64], l: &[f64], schema: &ParamSchema) -> Result<f64> {
    Ok(abs_errors(p, l, schema)?.iter().sum())
}

/// Mean nearest-neighbor distance from each point of `from` to `to`.
pub fn directed_chamfer(from: &[Point3<f64>], to: &[Point3<f64>]) -> Result<f64> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let tree = KdTree::new(to.to_vec());
    let total: f64 = from
        .iter()
        .map(|p| tree.nearest(p).expect("nonempty").1.sqrt())
        .sum();
    Ok(total / from.len() as f64)
}

/// Symmetric Chamfer distance: the mean of both directed distances.
pub fn chamfer(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<f64> {
    Ok(0.5 * (directed_chamfer(a, b)? + directed_chamfer(b, a)?))
}

/// Runs `steps` predictions from the identity on every record of `split`.
/// The final clouds are dropped to bound memory.
pub fn predict_split(
    dataset: &Dataset,
    split: Split,
    w: &NetworkWeights,
    steps: usize,
) -> Result<Vec<Prediction>> {
    let obs = dataset.observer()?;
    let records: Vec<(usize, &DataRecord)> = dataset
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .collect();
    records
        .par_iter()
        .map(|&(i, r)| {
            let p = predict_iterative(&r.depth, &r.cloud(&dataset.camera), &Affine3::identity(), w, steps, &obs, i)?;
            Ok(Prediction {
                cloud: PointCloud::default(),
                ..p
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesPoint {
    pub iteration: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of the summed error after each
/// iteration count, from precomputed traces of at least `max_iter` steps.
pub fn error_series(
    traces: &[Prediction],
    records: &[&DataRecord],
    dataset: &Dataset,
    max_iter: usize,
) -> Result<Vec<SeriesPoint>> {
    if traces.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let obs = dataset.observer()?;
    (1..=max_iter)
        .map(|k| {
            let errs = traces
                .iter()
                .zip(records)
                .map(|(t, r)| summed_error(&t.params_after(k, &obs)?, &r.label(), &obs.task.schema))
                .collect::<Result<Vec<f64>>>()?;
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            Ok(SeriesPoint {
                iteration: k,
                mean,
                std: var.sqrt(),
            })
        })
        .collect()
}

/// Summed-error curve over `1..=max_iter` predictions on the test split.
pub fn error_vs_iterations(dataset: &Dataset, w: &NetworkWeights, max_iter: usize) -> Result<Vec<SeriesPoint>> {
    let traces = predict_split(dataset, Split::Test, w, max_iter)?;
    let records: Vec<&DataRecord> = dataset.split(Split::Test).collect();
    error_series(&traces, &records, dataset, max_iter)
}

/// Whether ICP is a meaningful comparison: rigid transform, no configuration.
pub fn icp_eligible(schema: &ParamSchema) -> bool {
    schema.is_rigid() && schema.n_config() == 0
}

/// Per-record ICP estimates of the labels of `split`, aligning each observed
/// cloud to the prototype surface.
pub fn icp_predictions(dataset: &Dataset, split: Split, config: &IcpConfig) -> Result<Vec<Vec<f64>>> {
    let schema = &dataset.task.schema;
    if !icp_eligible(schema) {
        return Err(Error::Config(format!(
            "ICP is rigid-only; `{}` has scale or configuration parameters",
            dataset.task.task
        )));
    }
    let surface = PointCloud::from_points(prototype(&dataset.task).sample_surface(ICP_SURFACE_SPACING));
    let target = TargetIndex::new(&surface)?;
    let records: Vec<&DataRecord> = dataset.split(split).collect();
    records
        .par_iter()
        .map(|r| {
            let source = subsample(&r.cloud(&dataset.camera), ICP_MAX_SOURCE_POINTS);
            let fit = icp_indexed(&source, &target, config)?;
            Ok(extract_params(&fit.transform.inverse()?, schema).0)
        })
        .collect()
}

fn subsample(cloud: &PointCloud, max_points: usize) -> PointCloud {
    let pts: Vec<Point3<f64>> = cloud.valid_points().copied().collect();
    let stride = pts.len().div_ceil(max_points).max(1);
    PointCloud::from_points(pts.into_iter().step_by(stride).collect())
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Predictions per record for the KMN estimate.
    pub n_pred: usize,
    /// Length of the error-vs-iterations curves.
    pub max_iter: usize,
    pub icp: Option<IcpConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_pred: 5,
            max_iter: 5,
            icp: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaeRow {
    pub method: Method,
    pub split: Split,
    pub mae: Mae,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub param_names: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub rows: Vec<MaeRow>,
    pub series: Vec<(Method, Vec<SeriesPoint>)>,
    /// Test-record indices into the dataset with their KMN summed error, best first.
    pub ranking: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn get(&self, method: Method, split: Split) -> Option<&Mae> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.split == split)
            .map(|r| &r.mae)
    }

    pub fn series_of(&self, method: Method) -> Option<&[SeriesPoint]> {
        self.series.iter().find(|(m, _)| *m == method).map(|(_, s)| s.as_slice())
    }

    /// One row per parameter per method per split, plus the summed row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,split,parameter,mae\n");
        for row in &self.rows {
            for (name, v) in self.param_names.iter().zip(&row.mae.per_param) {
                let _ = writeln!(out, "{},{},{},{:e}", row.method, split_name(row.split), name, v);
            }
            let _ = writeln!(out, "{},{},sum,{:e}", row.method, split_name(row.split), row.mae.sum);
        }
        out
    }

    pub fn series_csv(&self) -> String {
        let mut out = String::from("method,iteration,mean,std\n");
        for (m, s) in &self.series {
            for p in s {
                let _ = writeln!(out, "{m},{},{:e},{:e}", p.iteration, p.mean, p.std);
            }
        }
        out
    }

    /// Parameters as rows, one column per method and split.
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "# {}\n\n{} train / {} test records\n\n| parameter |",
            self.task, self.n_train, self.n_test
        );
        for row in &self.rows {
            let _ = write!(out, " {} ({}) |", row.method, split_name(row.split));
        }
        out.push_str("\n|---|");
        for _ in &self.rows {
            out.push_str("---:|");
        }
        out.push('\n');
        for (i, name) in self.param_names.iter().enumerate() {
            let _ = write!(out, "| {name} |");
            for row in &self.rows {
                let _ = write!(out, " {:.5} |", row.mae.per_param[i]);
            }
            out.push('\n');
        }
        out.push_str("| **sum** |");
        for row in &self.rows {
            let _ = write!(out, " **{:.5}** |", row.mae.sum);
        }
        out.push('\n');
        if !self.series.is_empty() {
            out.push_str("\n## Summed test error by number of predictions\n\n| predictions |");
            for (m, _) in &self.series {
                let _ = write!(out, " {m} |");
            }
            out.push_str("\n|---:|");
            for _ in &self.series {
                out.push_str("---:|");
            }
            out.push('\n');
            let len = self.series.iter().map(|(_, s)| s.len()).min().unwrap_or(0);
            for k in 0..len {
                let _ = write!(out, "| {} |", k + 1);
                for (_, s) in &self.series {
                    let _ = write!(out, " {:.5} ± {:.5} |", s[k].mean, s[k].std);
                }
                out.push('\n');
            }
        }
        out
    }
}

/// KMN (`n_pred` predictions) against the Baseline (one prediction) on both
/// splits, with iteration curves on the test split. The returned traces are
/// the KMN runs on the test split.
pub fn evaluate(
    dataset: &Dataset,
    kmn: &NetworkWeights,
    baseline: &NetworkWeights,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<Prediction>)> {
    if opts.n_pred == 0 {
        return Err(Error::Config("n_pred must be at least 1".into()));
    }
    let obs = dataset.observer()?;
    let schema = &obs.task.schema;
    let steps = opts.n_pred.max(opts.max_iter);
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut kmn_test = Vec::new();
    for split in [Split::Train, Split::Test] {
        let records: Vec<&DataRecord> = dataset.split(split).collect();
        if records.is_empty() {
            continue;
        }
        let labels: Vec<Vec<f64>> = records.iter().map(|r| r.label()).collect();
        for (method, w, k) in [(Method::Kmn, kmn, opts.n_pred), (Method::Baseline, baseline, 1)] {
            // The curves are only needed on the test split.
            let run_steps = if split == Split::Test { steps } else { k };
            let traces = predict_split(dataset, split, w, run_steps)?;
            let preds = traces
                .iter()
                .map(|t| t.params_after(k, &obs))
                .collect::<Result<Vec<_>>>()?;
            rows.push(MaeRow {
                method,
                split,
                mae: mae(&preds, &labels, schema)?,
            });
            if split == Split::Test {
                series.push((method, error_series(&traces, &records, dataset, opts.max_iter)?));
                if method == Method::Kmn {
                    kmn_test = traces;
                }
            }
        }
        if let Some(cfg) = &opts.icp {
            let preds = icp_predictions(dataset, split, cfg)?;
            rows.push(MaeRow {
                method: Method::Icp,
                split,
                mae: mae(&preds, &labels, schema)?,
            });
        }
    }
    let test_idx: Vec<usize> = dataset
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Test)
        .map(|(i, _)| i)
        .collect();
    let mut ranking = test_idx
        .iter()
        .zip(&kmn_test)
        .map(|(&i, t)| Ok((i, summed_error(&t.params_after(opts.n_pred, &obs)?, &dataset.records[i].label(), schema)?)))
        .collect::<Result<Vec<_>>>()?;
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let report = EvalReport {
        task: dataset.task.task.to_string(),
        param_names: schema.entries().iter().map(|e| e.name.clone()).collect(),
        n_train: dataset.count(Split::Train),
        n_test: test_idx.len(),
        rows,
        series,
        ranking,
    };
    Ok((report, kmn_test))
}

/// Writes the `count` best and worst test predictions as PGM pairs
/// (`best_1_input.pgm`, `best_1_final.pgm`, ...). Returns the written paths.
pub fn write_gallery(
    dir: &Path,
    dataset: &Dataset,
    report: &EvalReport,
    kmn_test: &[Prediction],
    count: usize,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let position: std::collections::HashMap<usize, usize> = dataset
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Test)
        .enumerate()
        .map(|(k, (i, _))| (i, k))
        .collect();
    let n = count.min(report.ranking.len());
    let best = report.ranking.iter().take(n);
    let worst = report.ranking.iter().rev().take(n);
    let mut written = Vec::new();
    for (tag, entries) in [("best", best.collect::<Vec<_>>()), ("worst", worst.collect())] {
        for (rank, &&(idx, err)) in entries.iter().enumerate() {
            let trace = &kmn_test[position[&idx]];
            for (kind, img) in [("input", &dataset.records[idx].depth), ("final", &trace.depth)] {
                let path = dir.join(format!("{tag}_{}_{kind}.pgm", rank + 1));
                img.write_pgm(BufWriter::new(fs::File::create(&path)?))?;
                written.push(path);
            }
            let path = dir.join(format!("{tag}_{}.txt", rank + 1));
            fs::write(&path, format!("record {idx}\nsummed_error {err:e}\n"))?;
            written.push(path);
        }
    }
    Ok(written)
}
