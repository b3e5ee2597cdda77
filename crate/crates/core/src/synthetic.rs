//! Synthetic series from a known dependency graph, and scoring of a learned
//! graph against it.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::RawSeries;
use crate::error::{GaetsError, Result};

/// Steps simulated and discarded before the returned series starts.
pub const BURN_IN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Linear,
    Tanh,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Linear => x,
            Nonlinearity::Tanh => x.tanh(),
        }
    }
}

/// `x_t = φ(Cᵀ x_{t−1}) + ε_t` with `C[i][j] ≠ 0` only on edges `i → j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthGraph {
    pub adjacency: Array2<f64>,
    pub coefficients: Array2<f64>,
    pub noise_std: f64,
    pub nonlinearity: Nonlinearity,
}

pub fn spectral_radius(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    dm.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

impl GroundTruthGraph {
    /// Adjacency is read off the non-zero pattern of `coefficients`.
    pub fn new(coefficients: Array2<f64>, noise_std: f64, nonlinearity: Nonlinearity) -> Result<Self> {
        let n = coefficients.nrows();
        if coefficients.ncols() != n || n < 2 {
            return Err(GaetsError::dim("coefficient matrix", "square, n >= 2", format!("{:?}", coefficients.dim())));
        }
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(GaetsError::Config(format!("noise_std must be positive, got {noise_std}")));
        }
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(GaetsError::Config("coefficients must be finite".into()));
        }
        let rho = spectral_radius(&coefficients);
        if rho >= 1.0 {
            return Err(GaetsError::Config(format!(
                "spectral radius {rho:.4} of the coefficient matrix must be below 1"
            )));
        }
        Ok(GroundTruthGraph {
            adjacency: coefficients.mapv(|c| if c != 0.0 { 1.0 } else { 0.0 }),
            coefficients,
            noise_std,
            nonlinearity,
        })
    }

    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Off-diagonal edges `(source, target, coefficient)`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && self.adjacency[[i, j]] != 0.0 {
                    out.push((i, j, self.coefficients[[i, j]]));
                }
            }
        }
        out
    }

    /// Writes `source,target,coefficient` rows, self-loops included.
    pub fn write_edge_list(&self, path: impl AsRef<Path>, names: &[String]) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["source", "target", "coefficient"]).map_err(|e| csv_err(path, e))?;
        let n = self.n();
        for i in 0..n {
            for j in 0..n {
                let c = self.coefficients[[i, j]];
                if c != 0.0 {
                    w.write_record([names[i].as_str(), names[j].as_str(), &c.to_string()])
                        .map_err(|e| csv_err(path, e))?;
                }
            }
        }
        w.flush().map_err(|e| GaetsError::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> GaetsError {
    GaetsError::io(path, std::io::Error::other(e.to_string()))
}

/// The fixed benchmark: 6 nodes, 8 directed edges between distinct nodes,
/// self-persistence 0.5 on every node, tanh, noise 0.1. The edges form a DAG,
/// so the spectral radius equals the self-coefficient.
pub fn benchmark_graph() -> GroundTruthGraph {
    let edges = [
        (0, 1, 0.9),
        (0, 3, -0.8),
        (1, 2, 0.9),
        (1, 4, 0.8),
        (2, 3, -0.9),
        (2, 5, 0.8),
        (3, 4, 0.9),
        (4, 5, -0.9),
    ];
    let mut c = Array2::from_diag(&Array1::from_elem(6, 0.5));
    for (i, j, w) in edges {
        c[[i, j]] = w;
    }
    GroundTruthGraph::new(c, 0.1, Nonlinearity::Tanh).expect("benchmark graph is stable")
}

/// Length of the benchmark series.
pub const BENCHMARK_LEN: usize = 4000;

/// A random DAG over `n` nodes with `edges` edges between distinct nodes,
/// coefficient magnitudes in `[0.5, 0.9]` with random signs, and
/// `self_coef` on the diagonal.
pub fn random_graph(
    n: usize,
    edges: usize,
    self_coef: f64,
    noise_std: f64,
    nonlinearity: Nonlinearity,
    seed: u64,
) -> Result<GroundTruthGraph> {
    if n < 2 {
        return Err(GaetsError::Config("need at least 2 nodes".into()));
    }
    let max = n * (n - 1) / 2;
    if edges > max {
        return Err(GaetsError::Config(format!("at most {max} acyclic edges fit on {n} nodes, asked for {edges}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    let mut c = Array2::from_diag(&Array1::from_elem(n, self_coef));
    for &(a, b) in pairs.iter().take(edges) {
        let mag = rng.random_range(0.5..=0.9);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        c[[order[a], order[b]]] = sign * mag;
    }
    GroundTruthGraph::new(c, noise_std, nonlinearity)
}

/// Simulates `len` steps after a burn-in of [`BURN_IN`], starting from zero.
pub fn generate(graph: &GroundTruthGraph, len: usize, seed: u64) -> Result<RawSeries> {
    let rho = spectral_radius(&graph.coefficients);
    if rho >= 1.0 {
        return Err(GaetsError::Config(format!("spectral radius {rho:.4} must be below 1")));
    }
    if len == 0 {
        return Err(GaetsError::Config("series length must be positive".into()));
    }
    let n = graph.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, graph.noise_std).map_err(|e| GaetsError::Config(e.to_string()))?;
    let ct = graph.coefficients.t().to_owned();
    let mut x = Array1::<f64>::zeros(n);
    let mut values = Array2::zeros((n, len));
    for t in 0..BURN_IN + len {
        let drive = ct.dot(&x);
        x = drive.mapv(|v| graph.nonlinearity.apply(v));
        for v in x.iter_mut() {
            *v += noise.sample(&mut rng);
        }
        if t >= BURN_IN {
            values.column_mut(t - BURN_IN).assign(&x);
        }
    }
    let names = (0..n).map(|i| format!("x{i}")).collect();
    RawSeries::new(values, names, 1.0)
}

/// ROC AUC of off-diagonal edge scores against the true graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// `None` when the truth has no off-diagonal edge or no off-diagonal gap.
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

/// Mann–Whitney AUC with tied scores given their mean rank.
pub fn structure_recovery_score(scores: &Array2<f64>, truth: &Array2<f64>) -> Result<RecoveryScore> {
    let n = truth.nrows();
    if scores.dim() != (n, n) || truth.ncols() != n {
        return Err(GaetsError::dim("edge scores", format!("{n}x{n}"), format!("{:?}", scores.dim())));
    }
    let mut items: Vec<(f64, bool)> = Vec::with_capacity(n * n - n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                items.push((scores[[i, j]], truth[[i, j]] != 0.0));
            }
        }
    }
    if items.iter().any(|(s, _)| s.is_nan()) {
        return Err(GaetsError::NonFinite("edge scores".into()));
    }
    let positives = items.iter().filter(|(_, p)| *p).count();
    let negatives = items.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(RecoveryScore {
            auc: None,
            positives,
            negatives,
        });
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j + 1 < items.len() && items[j + 1].0 == items[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * items[i..=j].iter().filter(|(_, p)| *p).count() as f64;
        i = j + 1;
    }
    let (p, q) = (positives as f64, negatives as f64);
    Ok(RecoveryScore {
        auc: Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q)),
        positives,
        negatives,
    })
}
