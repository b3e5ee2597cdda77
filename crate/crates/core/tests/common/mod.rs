//! Independent reference implementations shared by the integration tests and
//! the acceptance runner. Nothing here calls the library's numerical kernels;
//! every product, power and gate is written out with plain loops.

#![allow(dead_code)]

use gaets::diffusion::{DcgruCell, DiffusionFilter};
use gaets::nn::Params;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Array2<f64> {
    let (r, c) = (m.len(), m[0].len());
    Array2::from_shape_fn((r, c), |(i, j)| m[i][j])
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn mat_pow(p: &Mat, k: usize) -> Mat {
    let mut out = identity(p.len());
    for _ in 0..k {
        out = matmul(&out, p);
    }
    out
}

/// `D_O⁻¹A`: row `i` divided by the out-degree of `i`.
pub fn forward_walk(a: &Mat) -> Mat {
    let n = a.len();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let deg: f64 = (0..n).map(|j| a[i][j]).sum();
        if deg > 0.0 {
            for j in 0..n {
                p[i][j] = a[i][j] / deg;
            }
        }
    }
    p
}

/// `D_I⁻¹Aᵀ`: entry `(i, j)` is `A[j][i]` over the in-degree of `i`.
pub fn backward_walk(a: &Mat) -> Mat {
    let n = a.len();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let deg: f64 = (0..n).map(|j| a[j][i]).sum();
        if deg > 0.0 {
            for j in 0..n {
                p[i][j] = a[j][i] / deg;
            }
        }
    }
    p
}

fn add_into(acc: &mut Mat, x: &Mat) {
    for (ra, rx) in acc.iter_mut().zip(x) {
        for (a, b) in ra.iter_mut().zip(rx) {
            *a += b;
        }
    }
}

/// `Σ_k P_fwd^k Y θ_fwd[k] + P_bwd^k Y θ_bwd[k] + b` by explicit powers.
pub fn brute_diffusion(filter: &DiffusionFilter, params: &Params, a: &Mat, y: &Mat) -> Mat {
    let pf = forward_walk(a);
    let pb = backward_walk(a);
    let n = y.len();
    let d_out = filter.d_out;
    let mut out = vec![vec![0.0; d_out]; n];
    for k in 0..=filter.k {
        let tf = to_mat(params.get(filter.theta_fwd[k]));
        let tb = to_mat(params.get(filter.theta_bwd[k]));
        add_into(&mut out, &matmul(&matmul(&mat_pow(&pf, k), y), &tf));
        add_into(&mut out, &matmul(&matmul(&mat_pow(&pb, k), y), &tb));
    }
    let b = params.get(filter.bias);
    for row in out.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b[[0, j]];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Affine map `[x ‖ h] W + b` with `W = θ_fwd0 + θ_bwd0`.
fn gate_affine(filter: &DiffusionFilter, params: &Params, x: &[f64], h: &[f64]) -> Vec<f64> {
    let wf = params.get(filter.theta_fwd[0]);
    let wb = params.get(filter.theta_bwd[0]);
    let b = params.get(filter.bias);
    let input: Vec<f64> = x.iter().chain(h).copied().collect();
    (0..filter.d_out)
        .map(|j| {
            let mut s = b[[0, j]];
            for (i, v) in input.iter().enumerate() {
                s += v * (wf[[i, j]] + wb[[i, j]]);
            }
            s
        })
        .collect()
}

/// A textbook GRU applied to each row independently.
pub fn plain_gru(cell: &DcgruCell, params: &Params, x: &Mat, h: &Mat) -> Mat {
    x.iter()
        .zip(h)
        .map(|(xr, hr)| {
            let r: Vec<f64> = gate_affine(&cell.reset, params, xr, hr).into_iter().map(sigmoid).collect();
            let u: Vec<f64> = gate_affine(&cell.update, params, xr, hr).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = r.iter().zip(hr).map(|(a, b)| a * b).collect();
            let c: Vec<f64> = gate_affine(&cell.candidate, params, xr, &rh).into_iter().map(f64::tanh).collect();
            (0..hr.len()).map(|j| u[j] * hr[j] + (1.0 - u[j]) * c[j]).collect()
        })
        .collect()
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

/// Random 0/1 adjacency with edge density `p`.
pub fn random_adjacency(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Mat {
    (0..n).map(|_| (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()).collect()
}

/// Perturbs every parameter so that no weight sits at its initial value.
pub fn jitter(params: &mut Params, rng: &mut ChaCha8Rng, scale: f64) {
    for v in params.values_mut() {
        v.mapv_inplace(|x| x + rng.random_range(-scale..scale));
    }
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Logistic function for frequency comparisons.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}
