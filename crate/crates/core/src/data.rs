//! Measurement logs, normalisation, sliding windows and splits.
//!
//! A [`RawSeries`] is an `n_vars × L` matrix. Windows are plain contiguous
//! slices: sample `i` takes input columns `i·s .. i·s+T` and target columns
//! `i·s+T .. i·s+T+τ`. When several logs are given, each is windowed on its
//! own so that no window crosses a file boundary.
//!
//! Normalisation is a per-variable z-score using the population standard
//! deviation (divide by the number of samples), fitted on the time steps
//! covered by training windows only.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GaetsError, Result};

/// The six channels of the battery cycling logs, in canonical order.
pub const BATTERY_COLUMNS: [&str; 6] = [
    "Voltage",
    "Current",
    "Charge_Capacity",
    "Discharge_Capacity",
    "Charge_Energy",
    "Discharge_Energy",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    /// `n_vars × L`.
    pub values: Array2<f64>,
    pub var_names: Vec<String>,
    /// Seconds between samples; metadata only.
    pub timestep: f64,
}

impl RawSeries {
    pub fn new(values: Array2<f64>, var_names: Vec<String>, timestep: f64) -> Result<Self> {
        let (n, len) = values.dim();
        if n < 2 {
            return Err(GaetsError::Config(format!("need at least 2 variables, got {n}")));
        }
        if len < 1 {
            return Err(GaetsError::Config("series has no time steps".into()));
        }
        if var_names.len() != n {
            return Err(GaetsError::dim("RawSeries names", n, var_names.len()));
        }
        let mut sorted = var_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != n {
            return Err(GaetsError::Config("variable names must be unique".into()));
        }
        if !(timestep > 0.0) {
            return Err(GaetsError::Config("timestep must be positive".into()));
        }
        if let Some((i, _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(GaetsError::NonFinite(format!(
                "series variable `{}` at step {}",
                var_names[i.0], i.1
            )));
        }
        Ok(RawSeries {
            values,
            var_names,
            timestep,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// Trailing moving average of width `k`; the output is `k − 1` steps
    /// shorter. `k ≤ 1` returns the series unchanged.
    pub fn smoothed(&self, k: usize) -> Result<RawSeries> {
        if k <= 1 {
            return Ok(self.clone());
        }
        if k > self.len() {
            return Err(GaetsError::Config(format!(
                "smoothing width {k} exceeds series length {}",
                self.len()
            )));
        }
        let out_len = self.len() - k + 1;
        let mut out = Array2::zeros((self.n_vars(), out_len));
        for (i, row) in self.values.rows().into_iter().enumerate() {
            let mut acc: f64 = row.slice(s![..k]).sum();
            out[[i, 0]] = acc / k as f64;
            for t in 1..out_len {
                acc += row[t + k - 1] - row[t - 1];
                out[[i, t]] = acc / k as f64;
            }
        }
        RawSeries::new(out, self.var_names.clone(), self.timestep)
    }
}

/// Reads a comma-separated log with a header row, keeping `schema` columns in
/// the given order.
pub fn load_csv<S: AsRef<str>>(path: impl AsRef<Path>, schema: &[S]) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| GaetsError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = match reader.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.clone(),
        Ok(_) => return Err(GaetsError::EmptyInput(path.to_path_buf())),
        Err(e) => {
            return Err(GaetsError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: e.to_string(),
            })
        }
    };
    let mut columns = Vec::with_capacity(schema.len());
    for name in schema {
        let name = name.as_ref();
        let idx = headers.iter().position(|h| h == name).ok_or_else(|| GaetsError::Schema {
            path: path.to_path_buf(),
            column: name.to_string(),
        })?;
        columns.push(idx);
    }

    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); schema.len()];
    for record in reader.records() {
        let record = record.map_err(|e| GaetsError::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        for (v, &col) in columns.iter().enumerate() {
            let cell = record.get(col).unwrap_or("");
            let value: f64 = cell.parse().map_err(|_| GaetsError::Parse {
                path: path.to_path_buf(),
                line,
                message: if cell.is_empty() {
                    format!("empty cell in column `{}`", schema[v].as_ref())
                } else {
                    format!("non-numeric cell `{cell}` in column `{}`", schema[v].as_ref())
                },
            })?;
            if !value.is_finite() {
                return Err(GaetsError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("non-finite value in column `{}`", schema[v].as_ref()),
                });
            }
            rows[v].push(value);
        }
    }
    let len = rows.first().map_or(0, Vec::len);
    if len == 0 {
        return Err(GaetsError::EmptyInput(path.to_path_buf()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((schema.len(), len), flat).expect("rectangular");
    RawSeries::new(
        values,
        schema.iter().map(|s| s.as_ref().to_string()).collect(),
        1.0,
    )
}

/// Loads several logs, ordered by file name.
pub fn load_many<S: AsRef<str>>(paths: &[PathBuf], schema: &[S]) -> Result<Vec<RawSeries>> {
    let mut sorted: Vec<&PathBuf> = paths.iter().collect();
    sorted.sort_by(|a, b| a.file_name().cmp(&b.file_name()).then(a.cmp(b)));
    sorted.into_iter().map(|p| load_csv(p, schema)).collect()
}

/// Writes `series` in the same CSV contract [`load_csv`] reads.
pub fn write_csv(path: impl AsRef<Path>, series: &RawSeries) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| GaetsError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let to_err = |e: csv::Error| GaetsError::Format(e.to_string());
    w.write_record(&series.var_names).map_err(to_err)?;
    for t in 0..series.len() {
        let row: Vec<String> = series.values.column(t).iter().map(|v| format!("{v:?}")).collect();
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| GaetsError::io(path, e))?;
    Ok(())
}

/// Per-variable mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits on the columns of `values` (`n_vars × L`).
    pub fn fit(values: &Array2<f64>, names: &[String]) -> Result<Self> {
        let len = values.ncols();
        if len == 0 {
            return Err(GaetsError::Config("cannot fit normalisation on zero samples".into()));
        }
        let mut mean = Vec::with_capacity(values.nrows());
        let mut std = Vec::with_capacity(values.nrows());
        for (i, row) in values.rows().into_iter().enumerate() {
            let m = row.sum() / len as f64;
            let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / len as f64;
            let sd = var.sqrt();
            if !(sd > 0.0) || sd <= 1e-12 * m.abs().max(1.0) {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(GaetsError::DegenerateVariable(name));
            }
            mean.push(m);
            std.push(sd);
        }
        Ok(NormStats { mean, std })
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    /// Normalises an array whose axis `var_axis` indexes variables.
    pub fn apply_axis<D: ndarray::RemoveAxis>(&self, a: &mut ndarray::Array<f64, D>, var_axis: usize) {
        for (i, mut lane) in a.axis_iter_mut(Axis(var_axis)).enumerate() {
            let (m, sd) = (self.mean[i], self.std[i]);
            lane.mapv_inplace(|x| (x - m) / sd);
        }
    }

    pub fn invert_axis<D: ndarray::RemoveAxis>(&self, a: &mut ndarray::Array<f64, D>, var_axis: usize) {
        for (i, mut lane) in a.axis_iter_mut(Axis(var_axis)).enumerate() {
            let (m, sd) = (self.mean[i], self.std[i]);
            lane.mapv_inplace(|x| x * sd + m);
        }
    }

    pub fn normalize(&self, series: &RawSeries) -> RawSeries {
        let mut values = series.values.clone();
        self.apply_axis(&mut values, 0);
        RawSeries {
            values,
            var_names: series.var_names.clone(),
            timestep: series.timestep,
        }
    }

    pub fn denormalize(&self, series: &RawSeries) -> RawSeries {
        let mut values = series.values.clone();
        self.invert_axis(&mut values, 0);
        RawSeries {
            values,
            var_names: series.var_names.clone(),
            timestep: series.timestep,
        }
    }
}

/// Z-scores every variable of `series` using its own statistics.
pub fn normalize(series: &RawSeries) -> Result<(RawSeries, NormStats)> {
    let stats = NormStats::fit(&series.values, &series.var_names)?;
    Ok((stats.normalize(series), stats))
}

/// Where a window starts: which log segment and which column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub segment: usize,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    /// `N × n_vars × T`.
    pub inputs: Array3<f64>,
    /// `N × n_vars × τ`.
    pub targets: Array3<f64>,
    pub input_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub origins: Vec<WindowOrigin>,
}

impl WindowedDataset {
    pub fn empty(n_vars: usize, input_len: usize, horizon: usize, stride: usize) -> Self {
        WindowedDataset {
            inputs: Array3::zeros((0, n_vars, input_len)),
            targets: Array3::zeros((0, n_vars, horizon)),
            input_len,
            horizon,
            stride,
            origins: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> WindowedDataset {
        WindowedDataset {
            inputs: self.inputs.select(Axis(0), indices),
            targets: self.targets.select(Axis(0), indices),
            input_len: self.input_len,
            horizon: self.horizon,
            stride: self.stride,
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
        }
    }

    pub fn range(&self, start: usize, end: usize) -> WindowedDataset {
        let idx: Vec<usize> = (start..end).collect();
        self.select(&idx)
    }

    /// Appends `other`, shifting its segment ids past ours.
    pub fn concat(&self, other: &WindowedDataset) -> Result<WindowedDataset> {
        if self.n_vars() != other.n_vars() || self.input_len != other.input_len || self.horizon != other.horizon {
            return Err(GaetsError::dim(
                "dataset concat",
                format!("n={} T={} tau={}", self.n_vars(), self.input_len, self.horizon),
                format!("n={} T={} tau={}", other.n_vars(), other.input_len, other.horizon),
            ));
        }
        let shift = self.origins.iter().map(|o| o.segment + 1).max().unwrap_or(0);
        let mut origins = self.origins.clone();
        origins.extend(other.origins.iter().map(|o| WindowOrigin {
            segment: o.segment + shift,
            start: o.start,
        }));
        Ok(WindowedDataset {
            inputs: ndarray::concatenate(Axis(0), &[self.inputs.view(), other.inputs.view()]).expect("shapes"),
            targets: ndarray::concatenate(Axis(0), &[self.targets.view(), other.targets.view()])
                .expect("shapes"),
            input_len: self.input_len,
            horizon: self.horizon,
            stride: self.stride,
            origins,
        })
    }

    pub fn normalized(&self, stats: &NormStats) -> WindowedDataset {
        let mut out = self.clone();
        stats.apply_axis(&mut out.inputs, 1);
        stats.apply_axis(&mut out.targets, 1);
        out
    }

    pub fn denormalized(&self, stats: &NormStats) -> WindowedDataset {
        let mut out = self.clone();
        stats.invert_axis(&mut out.inputs, 1);
        stats.invert_axis(&mut out.targets, 1);
        out
    }
}

/// Result of windowing: the dataset, plus whether some series was too short
/// to yield even one window.
#[derive(Clone, Debug)]
#[must_use]
pub struct Windowed {
    pub dataset: WindowedDataset,
    pub too_short: bool,
}

/// Number of windows for a series of length `len`.
pub fn window_count(len: usize, input_len: usize, horizon: usize, stride: usize) -> usize {
    if len < input_len + horizon {
        0
    } else {
        (len - input_len - horizon) / stride + 1
    }
}

/// Cuts `series` into `(input, target)` pairs.
pub fn make_windows(series: &RawSeries, input_len: usize, horizon: usize, stride: usize) -> Result<Windowed> {
    make_windows_multi(std::slice::from_ref(series), input_len, horizon, stride)
}

/// Windows each segment separately and concatenates the results in order.
pub fn make_windows_multi(
    segments: &[RawSeries],
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<Windowed> {
    if input_len == 0 || horizon == 0 || stride == 0 {
        return Err(GaetsError::Config(format!(
            "window sizes must be positive (T={input_len}, tau={horizon}, stride={stride})"
        )));
    }
    let n_vars = segments
        .first()
        .map(RawSeries::n_vars)
        .ok_or_else(|| GaetsError::Config("no series given".into()))?;
    if let Some(bad) = segments.iter().find(|s| s.n_vars() != n_vars) {
        return Err(GaetsError::dim("segment variables", n_vars, bad.n_vars()));
    }
    let total: usize = segments
        .iter()
        .map(|s| window_count(s.len(), input_len, horizon, stride))
        .sum();
    let mut inputs = Array3::zeros((total, n_vars, input_len));
    let mut targets = Array3::zeros((total, n_vars, horizon));
    let mut origins = Vec::with_capacity(total);
    let mut too_short = false;
    let mut k = 0;
    for (seg, series) in segments.iter().enumerate() {
        let count = window_count(series.len(), input_len, horizon, stride);
        if count == 0 {
            warn!(
                "segment {seg} has {} steps, fewer than T + tau = {}; no windows produced",
                series.len(),
                input_len + horizon
            );
            too_short = true;
        }
        for i in 0..count {
            let start = i * stride;
            inputs
                .slice_mut(s![k, .., ..])
                .assign(&series.values.slice(s![.., start..start + input_len]));
            targets
                .slice_mut(s![k, .., ..])
                .assign(&series.values.slice(s![.., start + input_len..start + input_len + horizon]));
            origins.push(WindowOrigin { segment: seg, start });
            k += 1;
        }
    }
    Ok(Windowed {
        dataset: WindowedDataset {
            inputs,
            targets,
            input_len,
            horizon,
            stride,
            origins,
        },
        too_short,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Chronological,
    ByCycle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            val_fraction: 0.1,
            test_fraction: 0.2,
            mode: SplitMode::Chronological,
        }
    }
}

impl SplitSpec {
    pub fn chronological(train: f64, val: f64, test: f64) -> Self {
        SplitSpec {
            train_fraction: train,
            val_fraction: val,
            test_fraction: test,
            mode: SplitMode::Chronological,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.val_fraction, self.test_fraction];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(GaetsError::Config(format!("split fractions must lie in [0, 1]: {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GaetsError::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Sizes `(train, val, test)` for `n` chronologically ordered samples.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64) * self.train_fraction).round() as usize;
        let train = train.min(n);
        let val = (((n as f64) * self.val_fraction).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Partitions `dataset` into train, validation and test sets.
pub fn split(dataset: &WindowedDataset, spec: &SplitSpec) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    spec.validate()?;
    let n = dataset.len();
    match spec.mode {
        SplitMode::Chronological => {
            let (tr, va, _) = spec.sizes(n);
            Ok((
                dataset.range(0, tr),
                dataset.range(tr, tr + va),
                dataset.range(tr + va, n),
            ))
        }
        SplitMode::ByCycle => {
            // Whole segments go to one split, decided by where their midpoint
            // falls in the cumulative sample count.
            let mut assign = Vec::with_capacity(n);
            let mut i = 0;
            while i < n {
                let seg = dataset.origins[i].segment;
                let mut j = i;
                while j < n && dataset.origins[j].segment == seg {
                    j += 1;
                }
                let mid = (i + j) as f64 / 2.0 / n as f64;
                let which = if mid < spec.train_fraction {
                    0
                } else if mid < spec.train_fraction + spec.val_fraction {
                    1
                } else {
                    2
                };
                assign.extend(std::iter::repeat_n(which, j - i));
                i = j;
            }
            let pick = |w: usize| -> Vec<usize> { (0..n).filter(|&k| assign[k] == w).collect() };
            Ok((dataset.select(&pick(0)), dataset.select(&pick(1)), dataset.select(&pick(2))))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub input_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

/// Normalised splits ready for training, plus the statistics and the
/// normalised training-period series fed to the structure encoder.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub stats: NormStats,
    /// `n_vars × L_train`, normalised.
    pub train_series: Array2<f64>,
    pub var_names: Vec<String>,
}

/// Windows and splits `segments`, fits normalisation on the training
/// coverage, and appends windows from `test_segments` to the test split.
pub fn prepare(
    segments: &[RawSeries],
    test_segments: &[RawSeries],
    window: WindowSpec,
    spec: &SplitSpec,
) -> Result<PreparedData> {
    let windowed = make_windows_multi(segments, window.input_len, window.horizon, window.stride)?;
    let (train, val, mut test) = split(&windowed.dataset, spec)?;
    if train.is_empty() {
        return Err(GaetsError::Config("training split is empty".into()));
    }
    if !test_segments.is_empty() {
        let extra = make_windows_multi(test_segments, window.input_len, window.horizon, window.stride)?;
        test = test.concat(&extra.dataset)?;
    }

    let span = window.input_len + window.horizon;
    let mut covered: Vec<Vec<bool>> = segments.iter().map(|s| vec![false; s.len()]).collect();
    for o in &train.origins {
        covered[o.segment][o.start..o.start + span].iter_mut().for_each(|c| *c = true);
    }
    let mut cols = Vec::new();
    for (seg, mask) in covered.iter().enumerate() {
        for (t, &c) in mask.iter().enumerate() {
            if c {
                cols.push(segments[seg].values.column(t).to_owned());
            }
        }
    }
    let n_vars = segments[0].n_vars();
    let mut train_series = Array2::zeros((n_vars, cols.len()));
    for (t, col) in cols.iter().enumerate() {
        train_series.column_mut(t).assign(col);
    }
    let names = segments[0].var_names.clone();
    let stats = NormStats::fit(&train_series, &names)?;
    stats.apply_axis(&mut train_series, 0);

    Ok(PreparedData {
        train: train.normalized(&stats),
        val: val.normalized(&stats),
        test: test.normalized(&stats),
        stats,
        train_series,
        var_names: names,
    })
}

const CACHE_FORMAT: &str = "gaets-windows";
const CACHE_VERSION: u32 = 1;

/// On-disk dump of a windowed dataset (JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetCache {
    pub format: String,
    pub version: u32,
    pub var_names: Vec<String>,
    pub stats: Option<NormStats>,
    pub dataset: WindowedDataset,
}

impl DatasetCache {
    pub fn new(dataset: WindowedDataset, var_names: Vec<String>, stats: Option<NormStats>) -> Self {
        DatasetCache {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            var_names,
            stats,
            dataset,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cache: DatasetCache = read_json(path)?;
        if cache.format != CACHE_FORMAT || cache.version != CACHE_VERSION {
            return Err(GaetsError::Format(format!(
                "unsupported dataset cache {} v{}",
                cache.format, cache.version
            )));
        }
        Ok(cache)
    }
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| GaetsError::io(path, e))?;
    serde_json::to_writer(BufWriter::new(file), value).map_err(|e| GaetsError::Format(e.to_string()))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| GaetsError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| GaetsError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use std::io::Write;

    fn series(values: Array2<f64>) -> RawSeries {
        let names = (0..values.nrows()).map(|i| format!("v{i}")).collect();
        RawSeries::new(values, names, 1.0).unwrap()
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_battery_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("Test_Time,Voltage,Current,Charge_Capacity,Discharge_Capacity,Charge_Energy,Discharge_Energy\n");
        for t in 0..5 {
            body.push_str(&format!("{t},3.{t},0.5,{t},0,{t}.5,0\n"));
        }
        let p = write(&dir, "cell.csv", &body);
        let s = load_csv(&p, &BATTERY_COLUMNS).unwrap();
        assert_eq!(s.n_vars(), 6);
        assert_eq!(s.len(), 5);
        assert_eq!(s.var_names[0], "Voltage");
        assert_eq!(s.values[[0, 2]], 3.2);
        assert_eq!(s.values[[4, 3]], 3.5);
    }

    #[test]
    fn loads_minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "m.csv", "a,b\n1.5,-2\n");
        let s = load_csv(&p, &["a", "b"]).unwrap();
        assert_eq!(s.values.dim(), (2, 1));
    }

    #[test]
    fn blank_cell_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("a,b\n");
        for t in 2..=20 {
            if t == 17 {
                body.push_str("1.0,\n");
            } else {
                body.push_str(&format!("{t},{t}\n"));
            }
        }
        let p = write(&dir, "blank.csv", &body);
        match load_csv(&p, &["a", "b"]) {
            Err(GaetsError::Parse { line, .. }) => assert_eq!(line, 17),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "m.csv", "a,b\n1,2\n");
        match load_csv(&p, &["a", "Voltage"]) {
            Err(GaetsError::Schema { column, .. }) => assert_eq!(column, "Voltage"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "");
        assert!(matches!(load_csv(&p, &["a"]), Err(GaetsError::EmptyInput(_))));
        let p = write(&dir, "h.csv", "a,b\n");
        assert!(matches!(load_csv(&p, &["a", "b"]), Err(GaetsError::EmptyInput(_))));
    }

    #[test]
    fn normalize_two_point_row() {
        let s = series(array![[2.0, 4.0], [1.0, 0.0]]);
        let (n, stats) = normalize(&s).unwrap();
        assert_eq!(n.values.row(0).to_vec(), vec![-1.0, 1.0]);
        assert_eq!(stats.mean[0], 3.0);
        assert_eq!(stats.std[0], 1.0);
    }

    #[test]
    fn constant_row_is_degenerate() {
        let s = series(array![[5.0, 5.0, 5.0], [1.0, 2.0, 3.0]]);
        match normalize(&s) {
            Err(GaetsError::DegenerateVariable(name)) => assert_eq!(name, "v0"),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn standardized_row_is_fixed_point() {
        let s = series(array![[-1.0, 1.0, -1.0, 1.0], [0.5, -0.5, 1.5, -1.5]]);
        let (n, _) = normalize(&s).unwrap();
        let (n2, stats2) = normalize(&n).unwrap();
        for (a, b) in n.values.iter().zip(n2.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(stats2.mean[0].abs() < 1e-12);
        assert!((stats2.std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_counts() {
        let s = series(Array2::zeros((2, 200)));
        let w = make_windows(&s, 80, 40, 1).unwrap();
        assert_eq!(w.dataset.len(), 81);
        assert!(!w.too_short);
        for tau in [40, 80, 120] {
            let s = series(Array2::zeros((6, 400)));
            let w = make_windows(&s, 80, tau, 1).unwrap();
            assert_eq!(w.dataset.len(), 400 - 80 - tau + 1);
            assert_eq!(w.dataset.targets.shape(), &[400 - 80 - tau + 1, 6, tau]);
        }
        let short = series(Array2::zeros((2, 119)));
        let w = make_windows(&short, 80, 40, 1).unwrap();
        assert_eq!(w.dataset.len(), 0);
        assert!(w.too_short);
    }

    #[test]
    fn windows_do_not_cross_segments() {
        let a = series(Array2::from_shape_fn((2, 10), |(_, t)| t as f64));
        let b = series(Array2::from_shape_fn((2, 10), |(_, t)| 100.0 + t as f64));
        let w = make_windows_multi(&[a, b], 4, 2, 1).unwrap().dataset;
        assert_eq!(w.len(), 10);
        for i in 0..w.len() {
            let first = w.inputs[[i, 0, 0]];
            let last = w.targets[[i, 0, 1]];
            assert_eq!(last - first, 5.0, "window {i} spans a boundary");
        }
    }

    #[test]
    fn split_sizes() {
        let s = series(Array2::zeros((2, 15)));
        let w = make_windows(&s, 4, 2, 1).unwrap().dataset;
        assert_eq!(w.len(), 10);
        let (a, b, c) = split(&w, &SplitSpec::chronological(0.8, 0.1, 0.1)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert!(a.origins.last().unwrap().start < b.origins[0].start);
        assert!(b.origins[0].start < c.origins[0].start);

        let empty = WindowedDataset::empty(2, 4, 2, 1);
        let (a, b, c) = split(&empty, &SplitSpec::chronological(0.8, 0.1, 0.1)).unwrap();
        assert!(a.is_empty() && b.is_empty() && c.is_empty());

        assert!(matches!(
            split(&w, &SplitSpec::chronological(0.8, 0.1, 0.2)),
            Err(GaetsError::Config(_))
        ));
    }

    #[test]
    fn split_reproduces_train_validation_counts() {
        // 1710 windows from T=80, tau=40 need L = 1710 + 119.
        let s = series(Array2::from_shape_fn((6, 1829), |(i, t)| (i * t) as f64));
        let w = make_windows(&s, 80, 40, 1).unwrap().dataset;
        assert_eq!(w.len(), 1710);
        let spec = SplitSpec::chronological(1497.0 / 1710.0, 213.0 / 1710.0, 0.0);
        let (a, b, c) = split(&w, &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1497, 213, 0));
    }

    #[test]
    fn by_cycle_keeps_segments_whole() {
        let segs: Vec<RawSeries> = (0..5)
            .map(|k| series(Array2::from_shape_fn((2, 12), |(_, t)| (k * 100 + t) as f64)))
            .collect();
        let w = make_windows_multi(&segs, 4, 2, 1).unwrap().dataset;
        let spec = SplitSpec {
            mode: SplitMode::ByCycle,
            ..SplitSpec::chronological(0.6, 0.2, 0.2)
        };
        let (a, b, c) = split(&w, &spec).unwrap();
        assert_eq!(a.len() + b.len() + c.len(), w.len());
        let segs_of = |d: &WindowedDataset| {
            let mut v: Vec<usize> = d.origins.iter().map(|o| o.segment).collect();
            v.dedup();
            v
        };
        assert_eq!(segs_of(&a), vec![0, 1, 2]);
        assert_eq!(segs_of(&b), vec![3]);
        assert_eq!(segs_of(&c), vec![4]);
    }

    #[test]
    fn prepare_fits_on_training_coverage() {
        let s = series(Array2::from_shape_fn((2, 40), |(i, t)| (i + 1) as f64 * t as f64));
        let spec = SplitSpec::chronological(0.5, 0.25, 0.25);
        let window = WindowSpec {
            input_len: 4,
            horizon: 2,
            stride: 1,
        };
        let p = prepare(&[s.clone()], &[], window, &spec).unwrap();
        // 35 windows -> 18 train windows covering steps 0..23.
        assert_eq!(p.train.len(), 18);
        assert_eq!(p.train_series.ncols(), 23);
        assert!((p.stats.mean[0] - 11.0).abs() < 1e-12);
        assert!(p.train_series.row(0).sum().abs() < 1e-9);
    }

    #[test]
    fn smoothing_is_trailing_mean() {
        let s = series(array![[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 3.0, 3.0]]);
        let sm = s.smoothed(2).unwrap();
        assert_eq!(sm.values, array![[1.5, 2.5, 3.5], [0.0, 1.5, 3.0]]);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = series(Array2::from_shape_fn((2, 20), |(i, t)| (i as f64) - 0.1 * t as f64));
        let w = make_windows(&s, 5, 3, 2).unwrap().dataset;
        let cache = DatasetCache::new(w.clone(), s.var_names.clone(), None);
        let p = dir.path().join("c.json");
        cache.save(&p).unwrap();
        let back = DatasetCache::load(&p).unwrap();
        assert_eq!(back.dataset, w);
    }

    proptest! {
        #[test]
        fn window_count_formula(len in 1usize..=500, t in 1usize..=500, tau in 1usize..=500, stride in 1usize..=500) {
            let expected = if len >= t + tau { (len - t - tau) / stride + 1 } else { 0 };
            prop_assert_eq!(window_count(len, t, tau, stride), expected);
        }

        #[test]
        fn windows_are_exact_slices(len in 2usize..120, t in 1usize..20, tau in 1usize..20, stride in 1usize..7) {
            let s = series(Array2::from_shape_fn((2, len), |(i, k)| ((i * 7919 + k * 31) % 97) as f64 / 7.0));
            let w = make_windows(&s, t, tau, stride).unwrap().dataset;
            prop_assert_eq!(w.len(), window_count(len, t, tau, stride));
            for i in 0..w.len() {
                let start = i * stride;
                for v in 0..2 {
                    for k in 0..t {
                        prop_assert_eq!(w.inputs[[i, v, k]].to_bits(), s.values[[v, start + k]].to_bits());
                    }
                    for k in 0..tau {
                        prop_assert_eq!(w.targets[[i, v, k]].to_bits(), s.values[[v, start + t + k]].to_bits());
                    }
                }
            }
        }

        #[test]
        fn normalize_round_trip(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((3, 50), |_| rng.random_range(-1e3..1e3));
            let s = series(x);
            let (n, stats) = normalize(&s).unwrap();
            for row in n.values.rows() {
                let m = row.sum() / row.len() as f64;
                let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / row.len() as f64;
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((v.sqrt() - 1.0).abs() < 1e-9);
            }
            let back = stats.denormalize(&n);
            for (a, b) in back.values.iter().zip(s.values.iter()) {
                prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
        }
    }
}
