//! Forecast metrics in original units, cross-seed aggregation and report
//! files.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array, Array2, Array3, Axis, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{write_json, NormStats, WindowedDataset};
use crate::diffusion::forecast_batch;
use crate::error::{GaetsError, Result};
use crate::registry::Registry;
use crate::sem::{per_node_error, sem_reconstruct};
use crate::structure::{sample_adjacency, threshold_adjacency};
use crate::train::Checkpoint;

fn same_shape<D: Dimension>(pred: &Array<f64, D>, truth: &Array<f64, D>, what: &'static str) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(GaetsError::dim(what, format!("{:?}", truth.shape()), format!("{:?}", pred.shape())));
    }
    if pred.is_empty() {
        return Err(GaetsError::Config(format!("{what}: no entries to score")));
    }
    Ok(())
}

pub fn mae<D: Dimension>(pred: &Array<f64, D>, truth: &Array<f64, D>) -> Result<f64> {
    same_shape(pred, truth, "mae")?;
    let s: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

pub fn rmse<D: Dimension>(pred: &Array<f64, D>, truth: &Array<f64, D>) -> Result<f64> {
    same_shape(pred, truth, "rmse")?;
    let s: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// A metric value; `value` is `None` when the metric is undefined (MAPE with
/// every entry masked).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: Option<f64>,
    /// Entries excluded from the average.
    pub masked: usize,
}

impl MetricValue {
    fn defined(v: f64) -> Self {
        MetricValue { value: Some(v), masked: 0 }
    }
}

/// Mean absolute percentage error over entries with `|truth| > threshold`.
pub fn mape<D: Dimension>(pred: &Array<f64, D>, truth: &Array<f64, D>, threshold: f64) -> Result<MetricValue> {
    same_shape(pred, truth, "mape")?;
    let mut sum = 0.0;
    let mut kept = 0usize;
    for (p, t) in pred.iter().zip(truth.iter()) {
        if t.abs() > threshold {
            sum += (p - t).abs() / t.abs();
            kept += 1;
        }
    }
    Ok(MetricValue {
        value: (kept > 0).then(|| 100.0 * sum / kept as f64),
        masked: pred.len() - kept,
    })
}

/// Scoring context: per-variable MAPE thresholds in original units.
#[derive(Clone, Debug)]
pub struct MetricContext {
    pub mape_thresholds: Vec<f64>,
}

impl MetricContext {
    /// Thresholds of `fraction` × each variable's training standard deviation.
    pub fn from_stats(stats: &NormStats, fraction: f64) -> Self {
        MetricContext {
            mape_thresholds: stats.std.iter().map(|s| s * fraction).collect(),
        }
    }
}

/// Default MAPE mask: 1e-3 of the training standard deviation.
pub const MAPE_STD_FRACTION: f64 = 1e-3;

/// A forecast metric over `B × n × τ` arrays in original units.
pub trait Metric: Send + Sync {
    fn name(&self) -> &'static str;
    fn score(&self, pred: &Array3<f64>, truth: &Array3<f64>, ctx: &MetricContext) -> Result<MetricValue>;
}

struct Mae;
struct Rmse;
struct Mape;

impl Metric for Mae {
    fn name(&self) -> &'static str {
        "mae"
    }
    fn score(&self, pred: &Array3<f64>, truth: &Array3<f64>, _: &MetricContext) -> Result<MetricValue> {
        mae(pred, truth).map(MetricValue::defined)
    }
}

impl Metric for Rmse {
    fn name(&self) -> &'static str {
        "rmse"
    }
    fn score(&self, pred: &Array3<f64>, truth: &Array3<f64>, _: &MetricContext) -> Result<MetricValue> {
        rmse(pred, truth).map(MetricValue::defined)
    }
}

impl Metric for Mape {
    fn name(&self) -> &'static str {
        "mape"
    }
    fn score(&self, pred: &Array3<f64>, truth: &Array3<f64>, ctx: &MetricContext) -> Result<MetricValue> {
        same_shape(pred, truth, "mape")?;
        let n = pred.dim().1;
        if ctx.mape_thresholds.len() != n {
            return Err(GaetsError::dim("mape thresholds", n, ctx.mape_thresholds.len()));
        }
        let mut sum = 0.0;
        let mut kept = 0usize;
        for ((p_node, t_node), &th) in pred
            .axis_iter(Axis(1))
            .zip(truth.axis_iter(Axis(1)))
            .zip(&ctx.mape_thresholds)
        {
            for (p, t) in p_node.iter().zip(t_node.iter()) {
                if t.abs() > th {
                    sum += (p - t).abs() / t.abs();
                    kept += 1;
                }
            }
        }
        Ok(MetricValue {
            value: (kept > 0).then(|| 100.0 * sum / kept as f64),
            masked: pred.len() - kept,
        })
    }
}

pub fn metrics() -> Registry<dyn Metric> {
    let mut r: Registry<dyn Metric> = Registry::new("metric");
    r.register("mae", Arc::new(Mae))
        .register("rmse", Arc::new(Rmse))
        .register("mape", Arc::new(Mape));
    r
}

/// Metrics reported when none are requested.
pub const DEFAULT_METRICS: [&str; 3] = ["mae", "rmse", "mape"];

pub type MetricSet = BTreeMap<String, MetricValue>;

/// Scores predictions against truth with every named metric.
pub fn score_forecasts(
    names: &[&str],
    pred: &Array3<f64>,
    truth: &Array3<f64>,
    ctx: &MetricContext,
) -> Result<MetricSet> {
    let reg = metrics();
    names
        .iter()
        .map(|&name| Ok((name.to_string(), reg.get(name)?.score(pred, truth, ctx)?)))
        .collect()
}

/// Mean and standard deviation of each metric over sampled graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledGraphSummary {
    pub graphs: usize,
    pub mean: BTreeMap<String, Option<f64>>,
    pub std: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub horizon: usize,
    pub metrics: MetricSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampled_graphs: Option<SampledGraphSummary>,
    /// Per-variable SEM reconstruction error on the evaluated inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub horizon: usize,
    pub metric: String,
    pub mean: Option<f64>,
    /// Half-width of the 95% Student-t interval.
    pub half_width: Option<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub per_seed: Vec<SeedEntry>,
    pub aggregate: Vec<AggregateEntry>,
}

impl MetricsReport {
    pub fn horizons(&self) -> Vec<usize> {
        let mut h: Vec<usize> = self.per_seed.iter().map(|e| e.horizon).collect();
        h.sort_unstable();
        h.dedup();
        h
    }

    /// Metric `name` of the first entry at `horizon`.
    pub fn value(&self, horizon: usize, name: &str) -> Option<f64> {
        self.per_seed
            .iter()
            .find(|e| e.horizon == horizon)
            .and_then(|e| e.metrics.get(name))
            .and_then(|m| m.value)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    /// Flat table: one row per seed × horizon × metric, then the aggregates.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| GaetsError::io(path, std::io::Error::other(e.to_string()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["kind", "mode", "horizon", "seed", "metric", "value", "half_width", "masked"])
            .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.per_seed {
            for (name, m) in &e.metrics {
                w.write_record([
                    "seed",
                    &self.mode,
                    &e.horizon.to_string(),
                    &e.seed.to_string(),
                    name,
                    &opt(m.value),
                    "",
                    &m.masked.to_string(),
                ])
                .map_err(err)?;
            }
        }
        for a in &self.aggregate {
            w.write_record([
                "aggregate",
                &self.mode,
                &a.horizon.to_string(),
                "",
                &a.metric,
                &opt(a.mean),
                &opt(a.half_width),
                "",
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| GaetsError::io(path, e))
    }
}

/// `t_{0.975, df}`.
pub fn t_quantile_975(df: usize) -> Result<f64> {
    let t = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| GaetsError::Config(e.to_string()))?;
    Ok(t.inverse_cdf(0.975))
}

/// Mean and 95% half-width `t_{0.975,S−1}·s/√S` with the sample standard
/// deviation `s`.
pub fn mean_ci(values: &[f64]) -> Result<(f64, f64)> {
    let s = values.len();
    if s < 2 {
        return Err(GaetsError::Config(format!("a confidence interval needs at least 2 values, got {s}")));
    }
    let mean = values.iter().sum::<f64>() / s as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
    Ok((mean, t_quantile_975(s - 1)? * var.sqrt() / (s as f64).sqrt()))
}

/// Merges per-seed reports into one with cross-seed confidence intervals.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.len() < 2 {
        return Err(GaetsError::Config(format!(
            "aggregation needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let mode = &reports[0].mode;
    let horizons = reports[0].horizons();
    for r in reports {
        if !r.mode.eq_ignore_ascii_case(mode) {
            return Err(GaetsError::Config(format!("cannot aggregate modes {mode} and {}", r.mode)));
        }
        if r.horizons() != horizons {
            return Err(GaetsError::Config(format!(
                "heterogeneous horizons {:?} and {:?}",
                horizons,
                r.horizons()
            )));
        }
    }
    let mut per_seed: Vec<SeedEntry> = reports.iter().flat_map(|r| r.per_seed.iter().cloned()).collect();
    per_seed.sort_by_key(|e| (e.horizon, e.seed));
    let mut aggregate = Vec::new();
    for &h in &horizons {
        let entries: Vec<&SeedEntry> = per_seed.iter().filter(|e| e.horizon == h).collect();
        let names: Vec<String> = entries[0].metrics.keys().cloned().collect();
        for name in names {
            let values: Vec<f64> = entries
                .iter()
                .filter_map(|e| e.metrics.get(&name).and_then(|m| m.value))
                .collect();
            let (mean, half_width) = match mean_ci(&values) {
                Ok((m, hw)) => (Some(m), Some(hw)),
                Err(_) => (None, None),
            };
            aggregate.push(AggregateEntry {
                horizon: h,
                metric: name,
                mean,
                half_width,
                seeds: values.len(),
            });
        }
    }
    Ok(MetricsReport {
        mode: mode.clone(),
        per_seed,
        aggregate,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Also score under this many sampled graphs.
    pub mc_graphs: Option<usize>,
    pub report_reconstruction: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mc_graphs: None,
            report_reconstruction: false,
            batch_size: 64,
        }
    }
}

/// Predictions and truth of a split in original units, `B × n × τ`.
#[derive(Clone, Debug)]
pub struct Forecasts {
    pub pred: Array3<f64>,
    pub truth: Array3<f64>,
}

impl Forecasts {
    /// Plot-ready rows `window,variable,step,prediction,truth`.
    pub fn save_csv(&self, path: impl AsRef<Path>, var_names: &[String]) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| GaetsError::io(path, std::io::Error::other(e.to_string()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["window", "variable", "step", "prediction", "truth"]).map_err(err)?;
        for ((b, i, s), p) in self.pred.indexed_iter() {
            w.write_record([
                b.to_string(),
                var_names[i].clone(),
                (s + 1).to_string(),
                p.to_string(),
                self.truth[[b, i, s]].to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| GaetsError::io(path, e))
    }
}

fn check_compatible(ck: &Checkpoint, ds: &WindowedDataset) -> Result<()> {
    if ds.horizon != ck.model.horizon() {
        return Err(GaetsError::Config(format!(
            "checkpoint forecasts {} steps but the data has horizon {}",
            ck.model.horizon(),
            ds.horizon
        )));
    }
    if ds.input_len != ck.model.input_len() {
        return Err(GaetsError::Config(format!(
            "checkpoint expects input length {} but the data has {}",
            ck.model.input_len(),
            ds.input_len
        )));
    }
    if ds.n_vars() != ck.n_vars() {
        return Err(GaetsError::Config(format!(
            "checkpoint has {} variables but the data has {}",
            ck.n_vars(),
            ds.n_vars()
        )));
    }
    if ds.is_empty() {
        return Err(GaetsError::Config("evaluation split is empty".into()));
    }
    Ok(())
}

/// Forecasts every window of the normalised split `ds` under `adjacency` and
/// returns them with the truth, both denormalised.
pub fn forecast_split(ck: &Checkpoint, adjacency: &Array2<f64>, ds: &WindowedDataset, batch_size: usize) -> Result<Forecasts> {
    check_compatible(ck, ds)?;
    let mut preds = Vec::new();
    for start in (0..ds.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(ds.len());
        let x = ds.inputs.slice(ndarray::s![start..end, .., ..]).to_owned();
        preds.push(forecast_batch(&ck.model.forecaster, &ck.params, adjacency, &x)?);
    }
    let views: Vec<_> = preds.iter().map(|p| p.view()).collect();
    let mut pred = ndarray::concatenate(Axis(0), &views).expect("batch shapes agree");
    let mut truth = ds.targets.clone();
    ck.stats.invert_axis(&mut pred, 1);
    ck.stats.invert_axis(&mut truth, 1);
    Ok(Forecasts { pred, truth })
}

/// Scores one checkpoint on a normalised split. The graph is the
/// thresholded one (edge probability above one half).
pub fn evaluate(ck: &Checkpoint, ds: &WindowedDataset, opts: &EvalOptions) -> Result<(MetricsReport, Forecasts)> {
    let ctx = MetricContext::from_stats(&ck.stats, MAPE_STD_FRACTION);
    let logits = ck.logits();
    let fc = forecast_split(ck, &threshold_adjacency(&logits), ds, opts.batch_size)?;
    let metrics = score_forecasts(&DEFAULT_METRICS, &fc.pred, &fc.truth, &ctx)?;

    let sampled_graphs = match opts.mc_graphs {
        None | Some(0) => None,
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(ck.seed);
            rng.set_stream(2);
            let mut runs: Vec<MetricSet> = Vec::with_capacity(k);
            for _ in 0..k {
                let a = sample_adjacency(&logits, ck.model.config.temperature, &mut rng)?;
                let f = forecast_split(ck, &a.hard, ds, opts.batch_size)?;
                runs.push(score_forecasts(&DEFAULT_METRICS, &f.pred, &f.truth, &ctx)?);
            }
            let mut mean = BTreeMap::new();
            let mut std = BTreeMap::new();
            for name in DEFAULT_METRICS {
                let v: Vec<f64> = runs.iter().filter_map(|r| r[name].value).collect();
                let m = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
                let s = m.map(|m| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt());
                mean.insert(name.to_string(), m);
                std.insert(name.to_string(), s);
            }
            Some(SampledGraphSummary { graphs: k, mean, std })
        }
    };

    let reconstruction = if opts.report_reconstruction {
        Some(reconstruction_errors(ck, ds)?)
    } else {
        None
    };

    let report = MetricsReport {
        mode: ck.train.mode.to_ascii_uppercase(),
        per_seed: vec![SeedEntry {
            seed: ck.seed,
            horizon: ds.horizon,
            metrics,
            sampled_graphs,
            reconstruction,
        }],
        aggregate: Vec::new(),
    };
    Ok((report, fc))
}

/// Mean squared SEM reconstruction error of each variable over the input
/// windows of `ds` (normalised units) under the thresholded graph.
pub fn reconstruction_errors(ck: &Checkpoint, ds: &WindowedDataset) -> Result<BTreeMap<String, f64>> {
    check_compatible(ck, ds)?;
    let a = threshold_adjacency(&ck.logits());
    let x = crate::model::stack_nodes(&ds.inputs);
    let recon = sem_reconstruct(&ck.model.sem, &ck.params, &x, &a)?;
    let err = per_node_error(&recon, &x, ck.n_vars());
    Ok(ck.var_names.iter().cloned().zip(err).collect())
}
